#pragma once

#include <cstddef>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace vizprompt {

enum class Modality { accelerometer, ecg, ppg, eda, emg, eog, respiration, generic };

std::string_view to_string(Modality modality);
// Throws Error(BadMetadata) for an unknown name.
Modality modality_from_string(std::string_view name);

struct Channel {
  std::string name;
  std::vector<double> values;
};

// Multichannel sampled signal. Immutable once constructed; the constructor
// rejects unequal or empty channels, duplicate names and non-positive rates.
class TimeSeries {
 public:
  TimeSeries(std::vector<Channel> channels, double sampling_rate_hz,
             Modality modality = Modality::generic,
             std::optional<std::string> user_id = std::nullopt,
             std::optional<std::string> label = std::nullopt);

  const std::vector<Channel>& channels() const noexcept { return channels_; }
  std::size_t channel_count() const noexcept { return channels_.size(); }
  std::size_t length() const noexcept { return channels_.front().values.size(); }
  double sampling_rate_hz() const noexcept { return sampling_rate_hz_; }
  double duration_s() const noexcept { return static_cast<double>(length()) / sampling_rate_hz_; }
  Modality modality() const noexcept { return modality_; }
  const std::optional<std::string>& user_id() const noexcept { return user_id_; }
  const std::optional<std::string>& label() const noexcept { return label_; }

  std::span<const double> values(std::size_t channel) const { return channels_.at(channel).values; }
  std::vector<std::string> channel_names() const;

  // Copy of samples [start, start + count) with the same metadata.
  TimeSeries slice(std::size_t start, std::size_t count) const;
  TimeSeries with_label(std::optional<std::string> label) const;
  TimeSeries with_user(std::optional<std::string> user_id) const;
  TimeSeries with_modality(Modality modality) const;

 private:
  std::vector<Channel> channels_;
  double sampling_rate_hz_;
  Modality modality_;
  std::optional<std::string> user_id_;
  std::optional<std::string> label_;
};

// A fixed-duration slice of a longer recording.
struct Window {
  TimeSeries series;
  std::size_t start_index = 0;
  double duration_s = 0.0;
};

// Wraps a whole series as a single window.
Window whole_window(const TimeSeries& series);

// Describes how a CSV file maps onto a TimeSeries. When `channels` is empty
// every non-index column becomes a channel, in header order.
struct ColumnSchema {
  std::vector<std::string> channels;
  std::optional<std::string> index_column;
  double sampling_rate_hz = 0.0;
  Modality modality = Modality::generic;
  std::optional<std::string> user_id;
  std::optional<std::string> label;
};

// Sidecar metadata fields: sampling_rate_hz (required), modality, user_id,
// label, channels (array of column names), index_column.
ColumnSchema schema_from_sidecar(const nlohmann::json& sidecar);
ColumnSchema load_sidecar(const std::string& path);
nlohmann::json sidecar_for(const TimeSeries& series);

TimeSeries load_timeseries(std::istream& source, const ColumnSchema& schema);
TimeSeries load_timeseries_file(const std::string& csv_path, const ColumnSchema& schema);

// Header row of channel names followed by one row per sample, full precision.
std::string serialize_csv(const TimeSeries& series);

struct UserStats {
  std::string user_id;
  std::vector<std::string> channel_names;
  std::vector<double> mean;
  std::vector<double> stddev;  // population (divisor n)
};

UserStats compute_user_stats(std::span<const TimeSeries> series_set, const std::string& user_id);

// (x - mean) / std per channel; channels with std == 0 become all zeros.
TimeSeries z_normalize(const TimeSeries& series, const UserStats& stats);

// Trailing partial windows are dropped. Each window is exactly
// round(duration_s * rate) samples long.
std::vector<Window> segment_windows(const TimeSeries& series, double duration_s, double stride_s);

// Which windows contribute to per-user normalization statistics.
enum class NormalizationScope { all_user_data, exclude_test };

}  // namespace vizprompt
