#include "vizprompt/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <numeric>
#include <numbers>
#include <set>
#include <thread>

#include "vizprompt/error.hpp"
#include "vizprompt/synth.hpp"

namespace vizprompt::eval {

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return mix(mix(a) ^ b); }
std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix(mix(a, b) ^ c); }

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::string padded(std::size_t v, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, v);
  return buf;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s.size() > 1 && s[0] == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

const Templates& pick(const Templates* t) { return t ? *t : Templates::builtin(); }

const Tokenizer& pick(const Tokenizer* t) {
  static const FallbackTokenizer fallback;
  return t ? *t : fallback;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

DatasetConfig make(std::string id, Modality m, double fs, double window_s, std::vector<std::string> channels,
                   std::vector<std::string> labels, int per_class, std::string task, std::string data) {
  DatasetConfig c;
  c.id = std::move(id);
  c.modality = m;
  c.sampling_rate_hz = fs;
  c.window_s = window_s;
  c.channels = static_cast<int>(channels.size());
  c.channel_names = std::move(channels);
  c.label_set = std::move(labels);
  c.test_per_class = per_class;
  c.task_description = std::move(task);
  c.data_description = std::move(data);
  return c;
}

DatasetConfig ptbxl(const std::string& suffix, const std::string& finding) {
  return make("ptbxl_" + suffix, Modality::ecg, 100.0, 10.0, {"lead II"}, {"normal", finding}, 30,
              "Decide whether the ECG shows " + finding + " or is normal.",
              "Lead II of a clinical 12-lead ECG, sampled at 100 Hz. Each sample is a 10-second recording.");
}

}  // namespace

// ---- registry -----------------------------------------------------------------

std::size_t DatasetConfig::window_samples() const {
  return static_cast<std::size_t>(std::llround(window_s * sampling_rate_hz));
}

TaskSpec DatasetConfig::task() const { return TaskSpec{task_description, data_description, label_set, ""}; }

void DatasetConfig::validate() const {
  if (id.empty()) throw Error(ErrorKind::BadConfig, "dataset id is empty");
  if (!(sampling_rate_hz > 0.0) || !(window_s > 0.0) || window_samples() < 1) {
    throw Error(ErrorKind::BadConfig, id + ": window_s x sampling_rate_hz must be at least 1 sample");
  }
  if (channels < 1 || static_cast<std::size_t>(channels) != channel_names.size()) {
    throw Error(ErrorKind::BadConfig, id + ": channel names must match the channel count");
  }
  if (test_per_class < 1) throw Error(ErrorKind::BadConfig, id + ": test_per_class must be at least 1");
  try {
    task().validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::BadConfig, id + ": " + e.what());
  }
}

nlohmann::json DatasetConfig::to_json() const {
  return {{"id", id},
          {"modality", to_string(modality)},
          {"sampling_rate_hz", sampling_rate_hz},
          {"window_s", window_s},
          {"channels", channels},
          {"channel_names", channel_names},
          {"label_set", label_set},
          {"test_per_class", test_per_class},
          {"task_description", task_description},
          {"data_description", data_description}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  try {
    DatasetConfig c;
    c.id = j.at("id").get<std::string>();
    c.modality = modality_from_string(j.value("modality", "generic"));
    c.sampling_rate_hz = j.at("sampling_rate_hz").get<double>();
    c.window_s = j.at("window_s").get<double>();
    c.label_set = j.at("label_set").get<std::vector<std::string>>();
    c.test_per_class = j.value("test_per_class", 30);
    c.task_description = j.value("task_description", "Classify the sensor data.");
    c.data_description = j.value("data_description", "");
    if (j.contains("channel_names")) {
      c.channel_names = j["channel_names"].get<std::vector<std::string>>();
      c.channels = j.value("channels", static_cast<int>(c.channel_names.size()));
    } else {
      c.channels = j.value("channels", 1);
      for (int i = 0; i < c.channels; ++i) c.channel_names.push_back(c.channels == 1 ? "signal" : "ch" + std::to_string(i + 1));
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadConfig, std::string("malformed dataset config: ") + e.what());
  }
}

const std::vector<DatasetConfig>& registry() {
  static const std::vector<DatasetConfig> r = [] {
    const std::vector<std::string> xyz{"x", "y", "z"};
    std::vector<DatasetConfig> v;
    v.push_back(make("hhar", Modality::accelerometer, 100.0, 5.0, xyz,
                     {"sit", "stand", "walk", "bike", "upstairs", "downstairs"}, 30,
                     "Recognize which basic activity the person is performing.",
                     "Three-axis smartwatch accelerometer, sampled at 100 Hz. Each sample is a 5-second window."));
    v.push_back(make("utd_mhad", Modality::accelerometer, 50.0, 3.0, xyz,
                     {"swipe left", "swipe right", "wave", "clap", "throw", "arms cross", "basketball shoot", "draw X",
                      "draw a circle (clockwise)", "draw a circle (counter-clockwise)", "draw a triangle", "bowling",
                      "boxing", "baseball swing", "tennis swing", "arm curl", "tennis serve", "push", "knock", "catch",
                      "pickup and throw"},
                     10, "Recognize which arm action the person is performing.",
                     "Three-axis accelerometer on the right wrist, sampled at 50 Hz. Each sample is a 3-second window."));
    v.push_back(make("swim", Modality::accelerometer, 30.0, 3.0, xyz,
                     {"backstroke", "breaststroke", "butterfly", "freestyle", "stationary"}, 30,
                     "Recognize the swimming style.",
                     "Three-axis wrist accelerometer worn while swimming, sampled at 30 Hz. Each sample is a 3-second "
                     "window."));
    v.push_back(ptbxl("cd", "conduction disturbance"));
    v.push_back(ptbxl("mi", "myocardial infarction"));
    v.push_back(ptbxl("hyp", "hypertrophy"));
    v.push_back(ptbxl("sttc", "ST/T change"));
    v.push_back(make("emg_gesture", Modality::emg, 2000.0, 0.2, {"emg1", "emg2", "emg3", "emg4"},
                     {"rest", "extension", "flexion", "ulnar deviation", "radial deviation", "grip",
                      "abduction of fingers", "adduction of fingers", "supination", "pronation"},
                     30, "Recognize the hand gesture from forearm muscle activity.",
                     "Four surface EMG channels on the forearm, sampled at 2000 Hz. Each sample is a 0.2-second "
                     "window."));
    v.push_back(make("wesad", Modality::respiration, 700.0, 10.0, {"respiration"}, {"baseline", "stress", "amusement"},
                     30, "Decide whether the person is in a baseline, stress or amusement state.",
                     "Chest-worn respiration sensor, sampled at 700 Hz. Each sample is a 10-second window."));
    for (const auto& c : v) c.validate();
    return v;
  }();
  return r;
}

const DatasetConfig& dataset(std::string_view id) {
  std::vector<std::string> ids;
  for (const auto& c : registry()) {
    if (c.id == id) return c;
    ids.push_back(c.id);
  }
  throw Error(ErrorKind::UnknownDataset, "unknown dataset '" + std::string(id) + "'; known: " + join(ids, ", "));
}

// ---- pools ----------------------------------------------------------------------

namespace {

std::vector<std::vector<double>> synth_channels(const DatasetConfig& cfg, std::size_t label, synth::Rng& rng) {
  const double fs = cfg.sampling_rate_hz, dur = cfg.window_s;
  const auto n_ch = static_cast<std::size_t>(cfg.channels);
  const std::size_t n_labels = cfg.label_set.size();
  std::vector<std::vector<double>> out;
  switch (cfg.modality) {
    case Modality::accelerometer: return synth::imu(fs, dur, label, n_labels, n_ch, rng);
    case Modality::ecg: {
      synth::EcgParams p;
      p.fs = fs;
      p.duration_s = dur;
      p.heart_rate_bpm = rng.uniform(55.0, 95.0);
      if (label > 0) {
        const std::string& id = cfg.id;
        auto& m = p.morphology;
        if (id.ends_with("_cd")) {
          m.qrs_width = 2.2;
        } else if (id.ends_with("_mi")) {
          m.q_amp = -0.45;
          m.r_amp = 0.7;
        } else if (id.ends_with("_hyp")) {
          m.r_amp = 2.0;
          m.s_amp = -0.6;
        } else {
          m.st_offset = -0.15;
          m.t_amp = -0.2;
        }
      }
      for (std::size_t c = 0; c < n_ch; ++c) out.push_back(synth::ecg(p, rng).values);
      return out;
    }
    case Modality::emg:
      for (std::size_t c = 0; c < n_ch; ++c) {
        const double amp = label == 0 ? 0.05 : 0.15 + 0.85 * static_cast<double>((label * 3 + c * 7) % 10) / 9.0;
        out.push_back(synth::emg(fs, dur, {{0.1 * dur, 0.9 * dur}}, 0.03, amp, rng).values);
      }
      return out;
    case Modality::respiration: {
      static constexpr double bpm[] = {12.0, 22.0, 16.0, 8.0, 28.0};
      static constexpr double amp[] = {1.0, 0.7, 1.3, 1.1, 0.5};
      for (std::size_t c = 0; c < n_ch; ++c) {
        out.push_back(synth::respiration(fs, dur, bpm[label % 5] + 2.0 * static_cast<double>(label / 5),
                                         amp[label % 5], 0.03, rng));
      }
      return out;
    }
    default:
      for (std::size_t c = 0; c < n_ch; ++c) {
        out.push_back(synth::respiration(fs, dur, 60.0 * (0.5 + static_cast<double>(label)), 1.0, 0.05, rng));
      }
      return out;
  }
}

std::vector<TimeSeries> normalize_per_user(const std::vector<TimeSeries>& series) {
  std::map<std::string, UserStats> stats;
  for (const auto& s : series) {
    const auto& u = *s.user_id();
    if (!stats.count(u)) stats.emplace(u, compute_user_stats(series, u));
  }
  std::vector<TimeSeries> out;
  out.reserve(series.size());
  for (const auto& s : series) out.push_back(z_normalize(s, stats.at(*s.user_id())));
  return out;
}

}  // namespace

std::vector<LabeledWindow> synthetic_pool(const DatasetConfig& cfg, std::size_t per_class, std::uint64_t seed,
                                          std::size_t users) {
  cfg.validate();
  if (users == 0) throw Error(ErrorKind::BadConfig, "synthetic pool needs at least one user");
  const std::size_t n_labels = cfg.label_set.size();
  std::vector<TimeSeries> series;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t c = 0; c < n_labels; ++c) {
      const std::size_t idx = i * n_labels + c;
      synth::Rng rng(mix(seed, fnv1a(cfg.id), idx));
      auto chans = synth_channels(cfg, c, rng);
      const std::size_t user = idx % users;
      const double gain = 1.0 + 0.15 * static_cast<double>(user), offset = 0.2 * static_cast<double>(user);
      std::vector<Channel> channels;
      const std::size_t n = std::min(cfg.window_samples(), chans.front().size());
      for (std::size_t ch = 0; ch < chans.size(); ++ch) {
        std::vector<double> v(chans[ch].begin(), chans[ch].begin() + static_cast<std::ptrdiff_t>(n));
        for (auto& x : v) x = gain * x + offset;
        channels.push_back({cfg.channel_names[ch], std::move(v)});
      }
      series.emplace_back(std::move(channels), cfg.sampling_rate_hz, cfg.modality, "u" + std::to_string(user),
                          cfg.label_set[c]);
      labels.push_back(cfg.label_set[c]);
    }
  }
  if (series.empty()) return {};
  const auto normalized = normalize_per_user(series);
  std::vector<LabeledWindow> pool;
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    pool.push_back({cfg.id + "-" + padded(i, 5), labels[i], whole_window(normalized[i])});
  }
  return pool;
}

std::size_t default_pool_per_class(const DatasetConfig& cfg) {
  return static_cast<std::size_t>(cfg.test_per_class) + 10;
}

std::vector<LabeledWindow> load_pool(const std::string& dir, const DatasetConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(ErrorKind::BadConfig, "data directory not found: " + dir);
  std::vector<fs::path> csvs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") csvs.push_back(e.path());
  }
  std::sort(csvs.begin(), csvs.end());
  std::vector<TimeSeries> series;
  std::vector<std::string> stems;
  for (const auto& p : csvs) {
    auto sidecar = p;
    sidecar.replace_extension(".json");
    if (!fs::exists(sidecar)) continue;
    const auto schema = load_sidecar(sidecar.string());
    if (!schema.label) throw Error(ErrorKind::BadConfig, sidecar.string() + ": missing label");
    if (std::find(cfg.label_set.begin(), cfg.label_set.end(), *schema.label) == cfg.label_set.end()) {
      throw Error(ErrorKind::BadConfig, sidecar.string() + ": label '" + *schema.label + "' is not in the label set");
    }
    auto s = load_timeseries_file(p.string(), schema);
    if (std::abs(s.sampling_rate_hz() - cfg.sampling_rate_hz) > 1e-9) {
      throw Error(ErrorKind::BadConfig, p.string() + ": sampling rate differs from the dataset config");
    }
    if (s.channel_count() != static_cast<std::size_t>(cfg.channels)) {
      throw Error(ErrorKind::BadConfig, p.string() + ": channel count differs from the dataset config");
    }
    if (s.modality() == Modality::generic) s = s.with_modality(cfg.modality);
    if (!s.user_id()) s = s.with_user("unknown");
    series.push_back(std::move(s));
    stems.push_back(p.stem().string());
  }
  if (series.empty()) throw Error(ErrorKind::EmptyInput, "no labeled CSV recordings in " + dir);
  const auto normalized = normalize_per_user(series);
  std::vector<LabeledWindow> pool;
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    const auto windows = segment_windows(normalized[i], cfg.window_s, cfg.window_s);
    for (std::size_t k = 0; k < windows.size(); ++k) {
      pool.push_back({stems[i] + "-" + padded(k, 4), *normalized[i].label(), windows[k]});
    }
  }
  std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return pool;
}

std::string_view to_string(ShotMode m) {
  switch (m) {
    case ShotMode::balanced: return "balanced";
    case ShotMode::unbalanced: return "unbalanced";
    case ShotMode::per_class: return "per_class";
  }
  return "?";
}

ShotMode shot_mode_from_string(std::string_view name) {
  for (auto m : {ShotMode::balanced, ShotMode::unbalanced, ShotMode::per_class}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::BadConfig, "unknown shot mode '" + std::string(name) + "' (balanced|unbalanced|per_class)");
}

EvalSplit sample_eval_set(const std::vector<LabeledWindow>& pool, const DatasetConfig& cfg, int shots,
                          std::uint64_t seed, ShotMode mode) {
  cfg.validate();
  if (shots < 0) throw Error(ErrorKind::BadConfig, "shots must be non-negative");
  const std::size_t n_labels = cfg.label_set.size();
  std::vector<std::vector<const LabeledWindow*>> by_label(n_labels);
  std::set<std::string> ids;
  for (const auto& w : pool) {
    const auto it = std::find(cfg.label_set.begin(), cfg.label_set.end(), w.label);
    if (it == cfg.label_set.end()) throw Error(ErrorKind::BadConfig, w.id + ": label '" + w.label + "' is not in the label set");
    if (!ids.insert(w.id).second) throw Error(ErrorKind::BadConfig, "duplicate window id " + w.id);
    by_label[static_cast<std::size_t>(it - cfg.label_set.begin())].push_back(&w);
  }
  synth::Rng rng(seed);
  for (auto& v : by_label) {
    std::sort(v.begin(), v.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
    synth::shuffle(v, rng);
  }
  std::vector<std::size_t> order(n_labels);
  for (std::size_t i = 0; i < n_labels; ++i) order[i] = i;
  synth::shuffle(order, rng);

  const auto per_test = static_cast<std::size_t>(cfg.test_per_class);
  const auto n_shots = static_cast<std::size_t>(shots);
  std::vector<std::size_t> need(n_labels, 0);
  if (mode == ShotMode::balanced) {
    for (std::size_t k = 0; k < n_shots; ++k) ++need[order[k % n_labels]];
  } else if (mode == ShotMode::per_class) {
    std::fill(need.begin(), need.end(), n_shots);
  }
  for (std::size_t c = 0; c < n_labels; ++c) {
    if (by_label[c].size() < per_test + need[c]) {
      throw Error(ErrorKind::InsufficientSamples,
                  "label '" + cfg.label_set[c] + "' has " + std::to_string(by_label[c].size()) + " windows, needs " +
                      std::to_string(per_test + need[c]));
    }
  }

  EvalSplit split;
  for (std::size_t c = 0; c < n_labels; ++c) {
    for (std::size_t i = 0; i < per_test; ++i) split.test_set.push_back(*by_label[c][i]);
  }
  std::sort(split.test_set.begin(), split.test_set.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

  std::vector<std::size_t> used(n_labels, 0);
  auto take = [&](std::size_t c) { split.examples.push_back(*by_label[c][per_test + used[c]++]); };
  switch (mode) {
    case ShotMode::balanced:
      for (std::size_t k = 0; k < n_shots; ++k) take(order[k % n_labels]);
      break;
    case ShotMode::per_class:
      for (std::size_t r = 0; r < n_shots; ++r) {
        for (auto c : order) take(c);
      }
      break;
    case ShotMode::unbalanced: {
      std::vector<const LabeledWindow*> rest;
      for (const auto& v : by_label) rest.insert(rest.end(), v.begin() + static_cast<std::ptrdiff_t>(per_test), v.end());
      if (rest.size() < n_shots) {
        throw Error(ErrorKind::InsufficientSamples, "only " + std::to_string(rest.size()) +
                                                        " non-test windows for " + std::to_string(n_shots) + " shots");
      }
      synth::shuffle(rest, rng);
      for (std::size_t k = 0; k < n_shots; ++k) split.examples.push_back(*rest[k]);
      break;
    }
  }
  return split;
}

// ---- motivation study ---------------------------------------------------------------

std::string_view to_string(WaveKind k) { return k == WaveKind::sine ? "sine" : "sawtooth"; }

void WaveTask::validate() const {
  if (length < 8) throw Error(ErrorKind::BadParams, "wave length must be at least 8");
  if (!(frequency_cycles > 0.0) || !(amplitude > 0.0) || !(noise_std >= 0.0)) {
    throw Error(ErrorKind::BadParams, "wave frequency and amplitude must be positive and noise non-negative");
  }
}

std::vector<double> gen_wave(const WaveTask& task) {
  task.validate();
  synth::Rng rng(task.seed);
  std::vector<double> v(static_cast<std::size_t>(task.length));
  for (std::size_t t = 0; t < v.size(); ++t) {
    const double th = 2.0 * kPi * task.frequency_cycles * static_cast<double>(t) / task.length + task.phase;
    double base;
    if (task.kind == WaveKind::sine) {
      base = std::sin(th);
    } else {
      const double cyc = th / (2.0 * kPi);
      base = 2.0 * (cyc - std::floor(cyc)) - 1.0;
    }
    v[t] = task.offset + task.amplitude * base + (task.noise_std > 0.0 ? task.noise_std * rng.normal() : 0.0);
  }
  return v;
}

double oracle_mean(std::span<const double> seq) {
  if (seq.size() < 8) throw Error(ErrorKind::SignalTooShort, "oracle needs at least 8 samples");
  long double sum = 0.0L;
  for (double v : seq) sum += v;
  return static_cast<double>(sum) / static_cast<double>(seq.size());
}

// A sawtooth's steps are many small rises and a few large drops.
constexpr double kSawtoothSkew = 0.8;

WaveKind oracle_wave_kind(std::span<const double> seq) {
  if (seq.size() < 8) throw Error(ErrorKind::SignalTooShort, "wave oracle needs at least 8 samples");
  std::vector<double> d(seq.size() - 1);
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) d[i] = seq[i + 1] - seq[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  double m2 = 0.0, m3 = 0.0;
  for (double v : d) {
    const double c = v - mean;
    m2 += c * c;
    m3 += c * c * c;
  }
  m2 /= static_cast<double>(d.size());
  m3 /= static_cast<double>(d.size());
  if (!(m2 > 0.0)) return WaveKind::sine;
  const double skew = m3 / std::pow(m2, 1.5);
  return std::abs(skew) > kSawtoothSkew ? WaveKind::sawtooth : WaveKind::sine;
}

WaveTask random_wave_task(int length, std::uint64_t seed, double noise_fraction) {
  synth::Rng rng(seed);
  WaveTask t;
  t.length = length;
  t.kind = rng.uniform() < 0.5 ? WaveKind::sine : WaveKind::sawtooth;
  t.frequency_cycles = rng.uniform(1.0, std::max(1.0, std::min(10.0, length / 8.0)));
  t.amplitude = rng.uniform(0.5, 2.0);
  t.phase = rng.uniform(0.0, 2.0 * kPi);
  t.noise_std = noise_fraction * t.amplitude;
  t.seed = rng.next();
  t.validate();
  return t;
}

std::optional<double> parse_number_answer(std::string_view text) {
  auto numbers_in = [](std::string_view s) {
    std::vector<double> out;
    for (std::size_t i = 0; i < s.size();) {
      const bool sign = (s[i] == '-' || s[i] == '+') && i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1]));
      if (!sign && !std::isdigit(static_cast<unsigned char>(s[i]))) {
        ++i;
        continue;
      }
      std::size_t j = i + (sign ? 1 : 0);
      while (j < s.size() && (std::isdigit(static_cast<unsigned char>(s[j])) || s[j] == ',')) ++j;
      if (j + 1 < s.size() && s[j] == '.' && std::isdigit(static_cast<unsigned char>(s[j + 1]))) {
        ++j;
        while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
      }
      std::string num;
      for (std::size_t k = i; k < j; ++k) {
        if (s[k] != ',') num += s[k];
      }
      while (!num.empty() && num.back() == ',') num.pop_back();
      try {
        out.push_back(std::stod(num));
      } catch (const std::exception&) {
      }
      i = j;
    }
    return out;
  };
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  const auto pos = lower.rfind("answer");
  if (pos != std::string::npos) {
    auto line_end = lower.find('\n', pos);
    const auto nums = numbers_in(std::string_view(text).substr(pos, line_end == std::string::npos ? std::string::npos : line_end - pos));
    if (!nums.empty()) return nums.front();
  }
  const auto all = numbers_in(text);
  if (all.empty()) return std::nullopt;
  return all.back();
}

namespace {

std::vector<double> rounded(std::vector<double> v) {
  for (auto& x : v) x = std::stod(fixed(x, 2));
  return v;
}

std::string sequence_text(const std::vector<double>& v) {
  std::vector<std::string> parts;
  parts.reserve(v.size());
  for (double x : v) parts.push_back(fixed(x, 2));
  return join(parts, ", ");
}

}  // namespace

MotivationPrompts motivation_prompts(int length, std::uint64_t seed, const Templates* templates) {
  const Templates& t = pick(templates);
  synth::Rng rng(seed);
  auto mean_wave = [&] {
    auto task = random_wave_task(length, rng.next());
    task.offset = rng.uniform(1.0, 5.0);
    return rounded(gen_wave(task));
  };
  const auto mean_example = mean_wave();
  const auto mean_target = mean_wave();
  const auto wave_example_task = random_wave_task(length, rng.next());
  const auto wave_target = rounded(gen_wave(random_wave_task(length, rng.next())));

  MotivationPrompts p;
  p.true_mean = oracle_mean(mean_target);
  p.true_kind = oracle_wave_kind(wave_target);
  p.mean.parts.push_back(TextPart{fill_template(t.get("motivation_mean"),
                                                {{"example", sequence_text(mean_example)},
                                                 {"example_mean", fixed(oracle_mean(mean_example), 2)},
                                                 {"target", sequence_text(mean_target)}})});
  const auto answer = fill_template(t.get("answer_format"), {{"labels", "sine, sawtooth"}});
  p.wave.parts.push_back(TextPart{fill_template(
      t.get("motivation_wave"), {{"example", sequence_text(rounded(gen_wave(wave_example_task)))},
                                 {"example_kind", std::string(to_string(wave_example_task.kind))},
                                 {"target", sequence_text(wave_target)},
                                 {"answer_format", answer}})});
  return p;
}

std::vector<MotivationRow> run_motivation_study(const std::vector<int>& lengths, int n_trials,
                                                mllm::MllmClient& client, std::uint64_t seed,
                                                const Templates* templates) {
  if (n_trials < 1) throw Error(ErrorKind::BadParams, "n_trials must be at least 1");
  if (lengths.empty()) throw Error(ErrorKind::BadParams, "no sequence lengths given");
  const std::vector<std::string> kinds{"sine", "sawtooth"};
  std::vector<MotivationRow> rows;
  for (int length : lengths) {
    if (length < 8) throw Error(ErrorKind::BadParams, "sequence length must be at least 8");
    MotivationRow row;
    row.length = length;
    row.trials = n_trials;
    double err = 0.0;
    int correct = 0;
    for (int trial = 0; trial < n_trials; ++trial) {
      const auto p = motivation_prompts(length, mix(seed, static_cast<std::uint64_t>(length),
                                                    static_cast<std::uint64_t>(trial)), templates);
      const auto mean_reply = client.send(p.mean);
      const auto got = parse_number_answer(mean_reply.text);
      err += got ? std::abs(*got - p.true_mean) / std::abs(p.true_mean) : 1.0;
      const auto wave_reply = client.send(p.wave);
      try {
        if (mllm::extract_label(wave_reply.text, kinds).label == to_string(p.true_kind)) ++correct;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::NoLabelFound && e.kind() != ErrorKind::AmbiguousLabel) throw;
      }
    }
    row.mean_error_rate = err / n_trials;
    row.classification_accuracy = static_cast<double>(correct) / n_trials;
    rows.push_back(row);
  }
  return rows;
}

nlohmann::json motivation_json(const std::vector<MotivationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"length", r.length},
                 {"trials", r.trials},
                 {"mean_error_rate", r.mean_error_rate},
                 {"classification_accuracy", r.classification_accuracy}});
  }
  return j;
}

std::string motivation_markdown(const std::vector<MotivationRow>& rows) {
  std::string s = "| Length | Trials | Mean error rate | Wave accuracy |\n|---:|---:|---:|---:|\n";
  for (const auto& r : rows) {
    s += "| " + std::to_string(r.length) + " | " + std::to_string(r.trials) + " | " + fixed(r.mean_error_rate, 4) +
         " | " + fixed(r.classification_accuracy, 4) + " |\n";
  }
  return s;
}

PlotImage motivation_plot(const std::vector<MotivationRow>& rows) {
  ChartSeries err{"mean error rate", {}, {}}, acc{"wave accuracy", {}, {}};
  for (const auto& r : rows) {
    err.x.push_back(r.length);
    err.y.push_back(r.mean_error_rate);
    acc.x.push_back(r.length);
    acc.y.push_back(r.classification_accuracy);
  }
  RenderStyle style;
  style.width_px = 640;
  style.height_px = 520;
  style.pane_gap = 48;
  ChartPane top{"Sequence length", "Mean error rate", {err}, std::nullopt};
  ChartPane bottom{"Sequence length", "Accuracy", {acc}, std::make_pair(0.0, 1.05)};
  return line_chart("Text prompts on long sequences", "mean prediction and wave classification", {top, bottom}, style);
}

// ---- evaluation -------------------------------------------------------------------

std::string_view to_string(PromptKind k) {
  switch (k) {
    case PromptKind::visual: return "visual";
    case PromptKind::text_only: return "text_only";
    case PromptKind::text_summarized: return "text_summarized";
  }
  return "?";
}

PromptKind prompt_kind_from_string(std::string_view name) {
  if (name == "visual") return PromptKind::visual;
  if (name == "text_only" || name == "text") return PromptKind::text_only;
  if (name == "text_summarized" || name == "summarized") return PromptKind::text_summarized;
  throw Error(ErrorKind::BadConfig, "unknown prompt kind '" + std::string(name) + "' (visual|text|summarized)");
}

void EvalConfig::validate() const {
  dataset.validate();
  if (shots < 0) throw Error(ErrorKind::BadConfig, "shots must be non-negative");
  if (decimals < 0 || decimals > 12) throw Error(ErrorKind::BadConfig, "decimals must be in [0, 12]");
}

nlohmann::json EvalConfig::to_json() const {
  return {{"dataset", dataset.to_json()},
          {"prompt_kind", to_string(prompt_kind)},
          {"shots", shots},
          {"cot", cot},
          {"layout", to_string(layout)},
          {"seed", seed},
          {"mode", mllm::to_string(mode)},
          {"shot_mode", to_string(shot_mode)},
          {"decimals", decimals}};
}

double TokenComparison::visual_reduction() const {
  return visual_total ? static_cast<double>(text_only_total) / static_cast<double>(visual_total) : 0.0;
}

nlohmann::json TokenComparison::to_json() const {
  nlohmann::json j = {{"text_only_total", text_only_total},
                      {"visual_total", visual_total},
                      {"visual_tool", to_string(visual_tool)},
                      {"visual_reduction", visual_reduction()}};
  j["summarized_total"] = summarized_total ? nlohmann::json(*summarized_total) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : per_sample) {
    samples.push_back({{"id", s.id},
                       {"gold", s.gold},
                       {"predicted", s.predicted ? nlohmann::json(*s.predicted) : nlohmann::json(nullptr)},
                       {"method", s.method},
                       {"digests", s.digests}});
  }
  auto columns = labels;
  columns.push_back("(no label)");
  return {{"config", config.to_json()},
          {"labels", labels},
          {"accuracy", accuracy},
          {"confusion", {{"rows", labels}, {"columns", columns}, {"counts", confusion}}},
          {"tokens",
           {{"text_tokens", tokens.text_tokens},
            {"image_tokens", tokens.image_tokens},
            {"total", tokens.total},
            {"tokenizer", tokens.tokenizer},
            {"approximate", tokens.approximate},
            {"prompts", prompts},
            {"feature_fallbacks", feature_fallbacks}}},
          {"token_comparison", comparison.to_json()},
          {"choice", choice ? choice->to_json() : nlohmann::json(nullptr)},
          {"example_ids", example_ids},
          {"per_sample", samples}};
}

std::string EvalReport::to_markdown() const {
  const std::string& ds = config.dataset.id;
  const auto n = per_sample.size();
  auto per_query = [&](std::size_t total) { return n ? fixed(static_cast<double>(total) / static_cast<double>(n), 1) : "0"; };
  std::string s = "# " + ds + ": " + std::string(to_string(config.prompt_kind)) + " prompt, " +
                  std::to_string(config.shots) + "-shot" + (config.cot ? ", chain of thought" : "") + "\n\n";
  s += "| Accuracy | " + ds + " |\n|---|---:|\n";
  s += "| " + std::string(to_string(config.prompt_kind)) + " | " + fixed(accuracy, 2) + " |\n\n";
  s += "| Tokens per query | " + ds + " |\n|---|---:|\n";
  s += "| text_only | " + per_query(comparison.text_only_total) + " |\n";
  s += "| visual | " + per_query(comparison.visual_total) + " (" + fixed(comparison.visual_reduction(), 1) +
       "x fewer) |\n";
  if (comparison.summarized_total) {
    const double f = *comparison.summarized_total
                         ? static_cast<double>(comparison.text_only_total) / static_cast<double>(*comparison.summarized_total)
                         : 0.0;
    s += "| text_summarized | " + per_query(*comparison.summarized_total) + " (" + fixed(f, 1) + "x fewer) |\n";
  }
  s += "\nTokens counted with the " + tokens.tokenizer + " tokenizer" + (tokens.approximate ? " (approximate)" : "") +
       "; visual prompts use " + std::string(to_string(comparison.visual_tool)) + ".\n";
  if (choice) {
    std::vector<std::string> f;
    for (auto id : choice->filtered) f.emplace_back(to_string(id));
    s += "Visualization: " + std::string(to_string(choice->selected)) + " (filtered: " + join(f, ", ") + ").\n";
  }
  s += "\n## Confusion (rows gold, columns predicted)\n\n| |";
  for (const auto& l : labels) s += " " + l + " |";
  s += " (no label) |\n|---|";
  for (std::size_t i = 0; i <= labels.size(); ++i) s += "---:|";
  s += "\n";
  for (std::size_t r = 0; r < labels.size(); ++r) {
    s += "| " + labels[r] + " |";
    for (auto c : confusion[r]) s += " " + std::to_string(c) + " |";
    s += "\n";
  }
  return s;
}

void EvalReport::check_consistency() const {
  std::size_t total = 0, trace = 0;
  if (confusion.size() != labels.size()) throw Error(ErrorKind::BadParams, "confusion has the wrong number of rows");
  for (std::size_t r = 0; r < confusion.size(); ++r) {
    if (confusion[r].size() != labels.size() + 1) throw Error(ErrorKind::BadParams, "confusion row has the wrong width");
    for (auto c : confusion[r]) total += c;
    trace += confusion[r][r];
  }
  if (total != per_sample.size()) throw Error(ErrorKind::BadParams, "confusion total differs from the sample count");
  const double expect = total ? static_cast<double>(trace) / static_cast<double>(total) : 0.0;
  if (accuracy != expect) throw Error(ErrorKind::BadParams, "accuracy differs from the confusion trace");
  for (std::size_t i = 1; i < per_sample.size(); ++i) {
    if (!(per_sample[i - 1].id < per_sample[i].id)) throw Error(ErrorKind::BadParams, "per-sample results are not sorted");
  }
}

namespace {

struct Outcome {
  SampleResult result;
  TokenReport tokens;
  std::size_t prompts = 0;
  std::size_t fallbacks = 0;
};

std::string file_stem(std::string s) {
  for (auto& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  }
  return s;
}

}  // namespace

EvalOutput run_eval(const EvalConfig& cfg, const std::vector<LabeledWindow>& pool, mllm::MllmClient& client,
                    const EvalOptions& options) {
  cfg.validate();
  const Tokenizer& tok = pick(options.tokenizer);
  const auto split = sample_eval_set(pool, cfg.dataset, cfg.shots, cfg.seed, cfg.shot_mode);
  if (split.test_set.empty()) throw Error(ErrorKind::BadConfig, "empty test set");
  const TaskSpec task = cfg.dataset.task();
  RenderStyle style;
  style.layout = cfg.layout;

  EvalOutput out;
  visgen::GeneratorOptions gopt;
  gopt.style = style;
  gopt.templates = options.templates;
  visgen::VisualizationGenerator gen(client, options.catalog, gopt);
  gen.load_cache(options.choice_cache);
  const std::size_t log_mark = client.sent_digests().size();
  std::optional<visgen::VisualizationChoice> choice;
  if (cfg.prompt_kind != PromptKind::text_summarized) {
    choice = gen.generate(split.test_set.front().window, task, cfg.dataset.id);
  }
  const VizTool tool = choice ? gen.catalog().tool(choice->selected) : builtin_tool(VizToolId::raw_waveform);

  std::vector<std::pair<Window, std::string>> examples;
  for (const auto& e : split.examples) examples.emplace_back(e.window, e.label);

  std::vector<std::string> pre_digests;
  TokenReport pre_tokens;
  std::size_t pre_prompts = 0;
  std::vector<std::pair<std::string, std::string>> example_summaries;
  if (cfg.prompt_kind == PromptKind::text_summarized) {
    for (const auto& e : split.examples) {
      const auto msg = build_summarization_prompt(e.window, task, cfg.decimals, options.templates);
      const auto req = client.make_request({msg});
      pre_digests.push_back(mllm::canonical_digest(req));
      pre_tokens += token_report(msg, tok);
      ++pre_prompts;
      const auto summary = trim(client.send(req).text);
      if (summary.empty()) throw Error(ErrorKind::EmptySummary, "empty summary for example " + e.id);
      example_summaries.emplace_back(summary, e.label);
    }
  }

  auto query = [&](const PromptMessage& m, Outcome& o) {
    PromptMessage msg = cfg.cot ? apply_cot(m) : m;
    const auto req = client.make_request({msg});
    o.result.digests.push_back(mllm::canonical_digest(req));
    auto r = token_report(msg, tok);
    r.per_part.clear();
    o.tokens += r;
    ++o.prompts;
    if (msg.feature_fallback) ++o.fallbacks;
    return client.send(req).text;
  };

  auto classify = [&](const LabeledWindow& target) {
    Outcome o;
    o.result.id = target.id;
    o.result.gold = target.label;
    std::string reply;
    switch (cfg.prompt_kind) {
      case PromptKind::visual:
        reply = query(build_visual_prompt(examples, target.window, tool, task, {style, options.templates}), o);
        break;
      case PromptKind::text_only: {
        TextPromptOptions t;
        t.decimals = cfg.decimals;
        t.parity_tool = tool;
        t.tokenizer = &tok;
        t.templates = options.templates;
        reply = query(build_text_prompt(examples, target.window, task, t), o);
        break;
      }
      case PromptKind::text_summarized: {
        PromptMessage s1 = build_summarization_prompt(target.window, task, cfg.decimals, options.templates);
        const auto req = client.make_request({s1});
        o.result.digests.push_back(mllm::canonical_digest(req));
        auto r = token_report(s1, tok);
        r.per_part.clear();
        o.tokens += r;
        ++o.prompts;
        const auto summary = trim(client.send(req).text);
        try {
          reply = query(build_summary_classification_prompt(example_summaries, summary, task, options.templates), o);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::EmptySummary) throw;
          o.result.method = "empty_summary";
          return o;
        }
        break;
      }
    }
    try {
      const auto got = mllm::extract_label(reply, task.label_set);
      o.result.predicted = got.label;
      o.result.method = std::string(mllm::to_string(got.method));
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::NoLabelFound) o.result.method = "no_label";
      else if (e.kind() == ErrorKind::AmbiguousLabel) o.result.method = "ambiguous";
      else throw;
    }
    return o;
  };

  const std::size_t n = split.test_set.size();
  std::vector<Outcome> outcomes(n);
  std::size_t jobs = options.jobs ? options.jobs : client.config().max_in_flight;
  jobs = std::clamp<std::size_t>(jobs, 1, n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n && !failed; i = next++) {
      try {
        outcomes[i] = classify(split.test_set[i]);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (error) std::rethrow_exception(error);

  EvalReport& rep = out.report;
  rep.config = cfg;
  rep.labels = task.label_set;
  rep.choice = choice;
  for (const auto& e : split.examples) rep.example_ids.push_back(e.id);
  const std::size_t L = rep.labels.size();
  rep.confusion.assign(L, std::vector<std::size_t>(L + 1, 0));
  rep.tokens = pre_tokens;
  rep.tokens.per_part.clear();
  rep.tokens.tokenizer = tok.name();
  rep.tokens.approximate = tok.approximate();
  rep.prompts = pre_prompts;
  std::size_t correct = 0;
  std::set<std::string> digests(pre_digests.begin(), pre_digests.end());
  for (auto& o : outcomes) {
    const auto gold = static_cast<std::size_t>(std::find(rep.labels.begin(), rep.labels.end(), o.result.gold) - rep.labels.begin());
    const auto col = o.result.predicted
                         ? static_cast<std::size_t>(std::find(rep.labels.begin(), rep.labels.end(), *o.result.predicted) -
                                                    rep.labels.begin())
                         : L;
    ++rep.confusion[gold][col];
    if (col == gold) ++correct;
    rep.tokens += o.tokens;
    rep.prompts += o.prompts;
    rep.feature_fallbacks += o.fallbacks;
    digests.insert(o.result.digests.begin(), o.result.digests.end());
    if (o.result.method == "no_label" || o.result.method == "ambiguous" || o.result.method == "empty_summary") {
      out.warnings.push_back(o.result.id + ": " + o.result.method + ", scored as wrong");
    }
    rep.per_sample.push_back(std::move(o.result));
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  // Token totals of the prompt kinds not run, built without querying.
  TokenComparison& cmp = rep.comparison;
  cmp.visual_tool = tool.id;
  for (const auto& target : split.test_set) {
    if (cfg.prompt_kind != PromptKind::visual) {
      auto msg = build_visual_prompt(examples, target.window, tool, task, {style, options.templates});
      if (cfg.cot) msg = apply_cot(msg);
      cmp.visual_total += token_report(msg, tok).total;
    }
    if (cfg.prompt_kind != PromptKind::text_only) {
      TextPromptOptions t;
      t.decimals = cfg.decimals;
      t.parity_tool = tool;
      t.tokenizer = &tok;
      t.templates = options.templates;
      auto msg = build_text_prompt(examples, target.window, task, t);
      if (cfg.cot) msg = apply_cot(msg);
      cmp.text_only_total += token_report(msg, tok).total;
    }
  }
  std::size_t run_total = 0;
  for (const auto& o : outcomes) run_total += o.tokens.total;
  if (cfg.prompt_kind == PromptKind::visual) cmp.visual_total = run_total;
  if (cfg.prompt_kind == PromptKind::text_only) cmp.text_only_total = run_total;
  if (cfg.prompt_kind == PromptKind::text_summarized) cmp.summarized_total = run_total + pre_tokens.total;
  rep.check_consistency();

  out.choices = gen.cache_json();
  for (auto& d : client.sent_digests(log_mark)) digests.insert(std::move(d));
  out.digests.assign(digests.begin(), digests.end());
  for (auto& w : gen.warnings()) out.warnings.push_back(std::move(w));
  if (cfg.prompt_kind != PromptKind::text_summarized) {
    for (std::size_t k = 0; k < split.examples.size(); ++k) {
      const auto& e = split.examples[k];
      out.images.emplace_back("example_" + padded(k + 1, 2) + "_" + file_stem(e.label),
                              render_labeled_example(e.window, tool, e.label, style));
    }
    const auto& t = split.test_set.front();
    out.images.emplace_back("target_" + file_stem(t.id), render(t.window, tool, std::string(kTargetTitle), style));
  }
  return out;
}

double TokenEstimate::reduction() const {
  return visual.total ? static_cast<double>(text_only.total) / static_cast<double>(visual.total) : 0.0;
}

TokenEstimate estimate_tokens(const DatasetConfig& cfg, int shots, const VizTool& tool, std::uint64_t seed,
                              const Tokenizer* tokenizer, int decimals) {
  if (shots < 0) throw Error(ErrorKind::BadConfig, "shots must be non-negative");
  DatasetConfig one = cfg;
  one.test_per_class = 1;
  const auto per_class = static_cast<std::size_t>(1 + (shots + cfg.label_set.size() - 1) / cfg.label_set.size());
  const auto split = sample_eval_set(synthetic_pool(one, per_class, seed), one, shots, seed);
  std::vector<std::pair<Window, std::string>> examples;
  for (const auto& e : split.examples) examples.emplace_back(e.window, e.label);
  const auto& target = split.test_set.front().window;
  const Tokenizer& tok = pick(tokenizer);
  TextPromptOptions t;
  t.decimals = decimals;
  t.parity_tool = tool;
  t.tokenizer = &tok;
  TokenEstimate est;
  est.visual = token_report(build_visual_prompt(examples, target, tool, cfg.task()), tok);
  est.text_only = token_report(build_text_prompt(examples, target, cfg.task(), t), tok);
  return est;
}

}  // namespace vizprompt::eval
