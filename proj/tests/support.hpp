#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "vizprompt/error.hpp"
#include "vizprompt/prompt.hpp"
#include "vizprompt/render.hpp"
#include "vizprompt/synth.hpp"

namespace testsupport {

inline std::filesystem::path source_dir() { return VIZPROMPT_SOURCE_DIR; }

inline bool update_goldens() {
  const char* v = std::getenv("VIZPROMPT_UPDATE_GOLDENS");
  return v && std::string(v) == "1";
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::string& data) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << data;
}

// Compares `actual` with the checked-in golden, rewriting it instead when
// VIZPROMPT_UPDATE_GOLDENS=1. Returns true on a match (or after an update).
inline bool matches_golden(const std::string& name, const std::string& actual) {
  const auto path = source_dir() / "tests" / "golden" / name;
  if (update_goldens()) {
    write_file(path, actual);
    return true;
  }
  return std::filesystem::exists(path) && read_file(path) == actual;
}

inline std::string bytes_to_string(const std::vector<std::uint8_t>& b) { return {b.begin(), b.end()}; }

template <typename F>
vizprompt::ErrorKind kind_of(F&& fn) {
  try {
    fn();
  } catch (const vizprompt::Error& e) {
    return e.kind();
  }
  throw std::runtime_error("expected a vizprompt::Error");
}

inline vizprompt::Window make_window(std::vector<std::vector<double>> chans, double fs, vizprompt::Modality m) {
  static const char* names[] = {"x", "y", "z", "w", "c5", "c6", "c7", "c8", "c9", "c10"};
  std::vector<vizprompt::Channel> c;
  for (std::size_t i = 0; i < chans.size(); ++i) {
    c.push_back({chans.size() == 1 ? "signal" : names[i], std::move(chans[i])});
  }
  return vizprompt::whole_window(vizprompt::TimeSeries(std::move(c), fs, m));
}

inline vizprompt::Window imu_fixture(std::uint64_t seed = 3) {
  vizprompt::synth::Rng rng(seed);
  return make_window(vizprompt::synth::imu(100.0, 5.0, 2, 6, 3, rng), 100.0, vizprompt::Modality::accelerometer);
}

// Seeded synthetic window of the modality each tool analyses (3-axis
// accelerometer for the modality-agnostic tools).
inline vizprompt::Window tool_fixture(vizprompt::VizToolId id) {
  using namespace vizprompt;
  synth::Rng rng(11);
  const auto m = required_modality(id);
  if (!m) return imu_fixture();
  switch (*m) {
    case Modality::ecg: return make_window({synth::ecg({}, rng).values}, 100.0, Modality::ecg);
    case Modality::ppg: return make_window({synth::ppg(100.0, 10.0, 72.0, 0.01, rng).values}, 100.0, Modality::ppg);
    case Modality::eda:
      return make_window({synth::eda(20.0, 40.0, 2.0, 4.0, {10.0, 25.0}, 0.8, 0.8, 0.005, rng).values}, 20.0,
                         Modality::eda);
    case Modality::emg:
      return make_window({synth::emg(1000.0, 2.0, {{0.5, 1.0}, {1.3, 1.6}}, 0.02, 1.0, rng).values}, 1000.0,
                         Modality::emg);
    case Modality::eog:
      return make_window({synth::eog(100.0, 10.0, {1.5, 4.0, 6.2, 8.5}, 1.0, 0.02, rng).values}, 100.0,
                         Modality::eog);
    default: return imu_fixture();
  }
}

inline constexpr vizprompt::Rgb kBackground{255, 255, 255};

inline std::size_t count_color(const vizprompt::PlotImage& img, const vizprompt::PixelRect& r, vizprompt::Rgb c) {
  std::size_t n = 0;
  for (int y = r.y0; y <= r.y1; ++y)
    for (int x = r.x0; x <= r.x1; ++x) n += img.pixel(x, y) == c;
  return n;
}

inline double non_background_fraction(const vizprompt::PlotImage& img) {
  std::size_t n = 0;
  for (int y = 0; y < img.height_px; ++y)
    for (int x = 0; x < img.width_px; ++x) n += !(img.pixel(x, y) == kBackground);
  return static_cast<double>(n) / (static_cast<double>(img.width_px) * img.height_px);
}

inline vizprompt::TaskSpec har_task() {
  return {"Classify the household activity performed by the subject.",
          "Three-axis accelerometer worn on the wrist.",
          {"walking", "sitting", "standing"},
          ""};
}

inline vizprompt::TaskSpec ecg_task() {
  return {"Decide whether a single-lead ECG shows a conduction disturbance.",
          "10 seconds of lead I ECG sampled at 100 Hz.",
          {"normal", "conduction disturbance"},
          "End your reply with \"Answer: <label>\"."};
}

inline vizprompt::Window ecg_window(std::uint64_t seed = 11) {
  vizprompt::synth::Rng rng(seed);
  return make_window({vizprompt::synth::ecg({}, rng).values}, 100.0, vizprompt::Modality::ecg);
}

inline const std::string kEcgFilter = R"(["ecg_signal_peaks", "ecg_heart_rate", "ecg_individual_beats"])";

}  // namespace testsupport
