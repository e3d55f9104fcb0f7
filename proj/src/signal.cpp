#include "vizprompt/signal.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "vizprompt/error.hpp"

namespace vizprompt {

namespace {

constexpr std::string_view kModalityNames[] = {"accelerometer", "ecg", "ppg", "eda", "emg",
                                               "eog", "respiration", "generic"};

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(trim(line.substr(start)));
      break;
    }
    cells.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
  return cells;
}

bool parse_double(const std::string& cell, double& out) {
  if (cell.empty()) return false;
  errno = 0;
  char* end = nullptr;
  out = std::strtod(cell.c_str(), &end);
  return errno == 0 && end == cell.c_str() + cell.size() && std::isfinite(out);
}

bool blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(),
                     [](char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

}  // namespace

std::string_view to_string(Modality modality) {
  return kModalityNames[static_cast<int>(modality)];
}

Modality modality_from_string(std::string_view name) {
  for (std::size_t i = 0; i < std::size(kModalityNames); ++i) {
    if (kModalityNames[i] == name) return static_cast<Modality>(i);
  }
  throw Error(ErrorKind::BadMetadata, "unknown modality '" + std::string(name) + "'");
}

TimeSeries::TimeSeries(std::vector<Channel> channels, double sampling_rate_hz, Modality modality,
                       std::optional<std::string> user_id, std::optional<std::string> label)
    : channels_(std::move(channels)),
      sampling_rate_hz_(sampling_rate_hz),
      modality_(modality),
      user_id_(std::move(user_id)),
      label_(std::move(label)) {
  if (!(sampling_rate_hz_ > 0.0) || !std::isfinite(sampling_rate_hz_)) {
    throw Error(ErrorKind::InvalidSeries, "sampling_rate_hz must be positive");
  }
  if (channels_.empty()) throw Error(ErrorKind::InvalidSeries, "no channels");
  const std::size_t n = channels_.front().values.size();
  if (n == 0) throw Error(ErrorKind::InvalidSeries, "channels must hold at least one sample");
  std::set<std::string> names;
  for (const auto& ch : channels_) {
    if (ch.values.size() != n) {
      throw Error(ErrorKind::InvalidSeries, "channel '" + ch.name + "' has " +
                                                std::to_string(ch.values.size()) +
                                                " samples, expected " + std::to_string(n));
    }
    if (!names.insert(ch.name).second) {
      throw Error(ErrorKind::InvalidSeries, "duplicate channel name '" + ch.name + "'");
    }
  }
}

std::vector<std::string> TimeSeries::channel_names() const {
  std::vector<std::string> names;
  names.reserve(channels_.size());
  for (const auto& ch : channels_) names.push_back(ch.name);
  return names;
}

TimeSeries TimeSeries::slice(std::size_t start, std::size_t count) const {
  if (count == 0 || start + count > length()) {
    throw Error(ErrorKind::InvalidSeries, "slice out of range");
  }
  std::vector<Channel> out;
  out.reserve(channels_.size());
  for (const auto& ch : channels_) {
    out.push_back({ch.name, std::vector<double>(ch.values.begin() + static_cast<std::ptrdiff_t>(start),
                                                ch.values.begin() + static_cast<std::ptrdiff_t>(start + count))});
  }
  return TimeSeries(std::move(out), sampling_rate_hz_, modality_, user_id_, label_);
}

TimeSeries TimeSeries::with_label(std::optional<std::string> label) const {
  TimeSeries copy = *this;
  copy.label_ = std::move(label);
  return copy;
}

TimeSeries TimeSeries::with_user(std::optional<std::string> user_id) const {
  TimeSeries copy = *this;
  copy.user_id_ = std::move(user_id);
  return copy;
}

TimeSeries TimeSeries::with_modality(Modality modality) const {
  TimeSeries copy = *this;
  copy.modality_ = modality;
  return copy;
}

Window whole_window(const TimeSeries& series) {
  return Window{series, 0, series.duration_s()};
}

ColumnSchema schema_from_sidecar(const nlohmann::json& sidecar) {
  if (!sidecar.is_object()) throw Error(ErrorKind::BadMetadata, "sidecar must be a JSON object");
  ColumnSchema schema;
  if (!sidecar.contains("sampling_rate_hz") || !sidecar["sampling_rate_hz"].is_number()) {
    throw Error(ErrorKind::BadMetadata, "sampling_rate_hz missing or not a number");
  }
  schema.sampling_rate_hz = sidecar["sampling_rate_hz"].get<double>();
  if (!(schema.sampling_rate_hz > 0.0)) {
    throw Error(ErrorKind::BadMetadata, "sampling_rate_hz must be positive");
  }
  try {
    if (sidecar.contains("modality")) {
      schema.modality = modality_from_string(sidecar["modality"].get<std::string>());
    }
    if (sidecar.contains("user_id") && !sidecar["user_id"].is_null()) {
      schema.user_id = sidecar["user_id"].get<std::string>();
    }
    if (sidecar.contains("label") && !sidecar["label"].is_null()) {
      schema.label = sidecar["label"].get<std::string>();
    }
    if (sidecar.contains("channels")) {
      schema.channels = sidecar["channels"].get<std::vector<std::string>>();
    }
    if (sidecar.contains("index_column") && !sidecar["index_column"].is_null()) {
      schema.index_column = sidecar["index_column"].get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadMetadata, e.what());
  }
  return schema;
}

ColumnSchema load_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::BadMetadata, "cannot open sidecar " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadMetadata, path + ": " + e.what());
  }
  return schema_from_sidecar(j);
}

nlohmann::json sidecar_for(const TimeSeries& series) {
  nlohmann::json j;
  j["sampling_rate_hz"] = series.sampling_rate_hz();
  j["modality"] = std::string(to_string(series.modality()));
  j["user_id"] = series.user_id() ? nlohmann::json(*series.user_id()) : nlohmann::json(nullptr);
  j["label"] = series.label() ? nlohmann::json(*series.label()) : nlohmann::json(nullptr);
  j["channels"] = series.channel_names();
  return j;
}

TimeSeries load_timeseries(std::istream& source, const ColumnSchema& schema) {
  std::string line;
  std::vector<std::string> header;
  while (std::getline(source, line)) {
    if (blank(line)) continue;
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
        static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF) {
      line.erase(0, 3);
    }
    header = split_csv_line(line);
    break;
  }
  if (header.empty()) throw Error(ErrorKind::EmptyInput, "no header row");

  std::vector<std::string> wanted = schema.channels;
  if (wanted.empty()) {
    for (const auto& col : header) {
      if (!schema.index_column || col != *schema.index_column) wanted.push_back(col);
    }
  }
  if (wanted.empty()) throw Error(ErrorKind::ChannelCountMismatch, "no channel columns in header");

  std::vector<std::size_t> column_of;
  for (const auto& name : wanted) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw Error(ErrorKind::ChannelCountMismatch, "column '" + name + "' not in header");
    }
    column_of.push_back(static_cast<std::size_t>(it - header.begin()));
  }
  if (schema.index_column &&
      std::find(header.begin(), header.end(), *schema.index_column) == header.end()) {
    throw Error(ErrorKind::ChannelCountMismatch,
                "index column '" + *schema.index_column + "' not in header");
  }

  std::vector<Channel> channels;
  for (const auto& name : wanted) channels.push_back({name, {}});

  std::size_t row = 0;
  while (std::getline(source, line)) {
    if (blank(line)) continue;
    ++row;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw Error(ErrorKind::ChannelCountMismatch, "row " + std::to_string(row) + " has " +
                                                       std::to_string(cells.size()) +
                                                       " cells, header has " +
                                                       std::to_string(header.size()));
    }
    for (std::size_t c = 0; c < column_of.size(); ++c) {
      double v = 0.0;
      const auto& cell = cells[column_of[c]];
      if (!parse_double(cell, v)) throw MalformedRowError(row, column_of[c] + 1, cell);
      channels[c].values.push_back(v);
    }
  }
  if (row == 0) throw Error(ErrorKind::EmptyInput, "no data rows");
  if (!(schema.sampling_rate_hz > 0.0)) {
    throw Error(ErrorKind::BadMetadata, "schema sampling_rate_hz must be positive");
  }
  return TimeSeries(std::move(channels), schema.sampling_rate_hz, schema.modality, schema.user_id,
                    schema.label);
}

TimeSeries load_timeseries_file(const std::string& csv_path, const ColumnSchema& schema) {
  std::ifstream in(csv_path);
  if (!in) throw Error(ErrorKind::EmptyInput, "cannot open " + csv_path);
  return load_timeseries(in, schema);
}

std::string serialize_csv(const TimeSeries& series) {
  std::string out;
  const auto& chans = series.channels();
  for (std::size_t c = 0; c < chans.size(); ++c) {
    if (c) out += ',';
    out += chans[c].name;
  }
  out += '\n';
  char buf[32];
  for (std::size_t i = 0; i < series.length(); ++i) {
    for (std::size_t c = 0; c < chans.size(); ++c) {
      if (c) out += ',';
      std::snprintf(buf, sizeof buf, "%.17g", chans[c].values[i]);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

UserStats compute_user_stats(std::span<const TimeSeries> series_set, const std::string& user_id) {
  std::vector<const TimeSeries*> mine;
  for (const auto& s : series_set) {
    if (s.user_id() && *s.user_id() == user_id) mine.push_back(&s);
  }
  if (mine.empty()) throw Error(ErrorKind::NoDataForUser, "no series for user '" + user_id + "'");

  const auto names = mine.front()->channel_names();
  for (const auto* s : mine) {
    if (s->channel_names() != names) {
      throw Error(ErrorKind::ChannelLayoutMismatch, "series of user '" + user_id +
                                                        "' disagree on channel layout");
    }
  }

  UserStats stats;
  stats.user_id = user_id;
  stats.channel_names = names;
  for (std::size_t c = 0; c < names.size(); ++c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto* s : mine) {
      for (double v : s->values(c)) sum += v;
      n += s->length();
    }
    const double mean = sum / static_cast<double>(n);
    double sq = 0.0;
    for (const auto* s : mine) {
      for (double v : s->values(c)) sq += (v - mean) * (v - mean);
    }
    stats.mean.push_back(mean);
    stats.stddev.push_back(std::sqrt(sq / static_cast<double>(n)));
  }
  return stats;
}

TimeSeries z_normalize(const TimeSeries& series, const UserStats& stats) {
  if (series.channel_names() != stats.channel_names) {
    throw Error(ErrorKind::ChannelLayoutMismatch, "stats channels do not match series channels");
  }
  std::vector<Channel> out;
  for (std::size_t c = 0; c < series.channel_count(); ++c) {
    const auto& src = series.channels()[c];
    Channel ch{src.name, std::vector<double>(src.values.size(), 0.0)};
    if (stats.stddev[c] > 0.0) {
      for (std::size_t i = 0; i < src.values.size(); ++i) {
        ch.values[i] = (src.values[i] - stats.mean[c]) / stats.stddev[c];
      }
    }
    out.push_back(std::move(ch));
  }
  return TimeSeries(std::move(out), series.sampling_rate_hz(), series.modality(), series.user_id(),
                    series.label());
}

std::vector<Window> segment_windows(const TimeSeries& series, double duration_s, double stride_s) {
  if (!(duration_s > 0.0) || !(stride_s > 0.0)) {
    throw Error(ErrorKind::BadParams, "duration_s and stride_s must be positive");
  }
  const double fs = series.sampling_rate_hz();
  const auto win = static_cast<std::size_t>(std::llround(duration_s * fs));
  const auto stride = static_cast<std::size_t>(std::max<long long>(1, std::llround(stride_s * fs)));
  if (win == 0) throw Error(ErrorKind::BadParams, "window shorter than one sample");
  if (win > series.length()) {
    throw Error(ErrorKind::WindowLongerThanSeries,
                std::to_string(win) + " samples requested, series has " +
                    std::to_string(series.length()));
  }
  std::vector<Window> windows;
  for (std::size_t start = 0; start + win <= series.length(); start += stride) {
    windows.push_back(Window{series.slice(start, win), start, duration_s});
  }
  return windows;
}

}  // namespace vizprompt
