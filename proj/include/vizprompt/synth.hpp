#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vizprompt/signal.hpp"

// Seeded synthetic signal generators standing in for the licensed datasets.
// Output depends only on the arguments: the RNG draws are defined here rather
// than through <random> distributions, whose results vary across standard
// libraries.
namespace vizprompt::synth {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Fisher-Yates with Rng::index, so permutations are reproducible everywhere.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

struct EcgMorphology {
  double p_amp = 0.15;
  double q_amp = -0.12;
  double r_amp = 1.0;
  double s_amp = -0.25;
  double t_amp = 0.30;
  double qrs_width = 1.0;  // scales Q/R/S widths
  double st_offset = 0.0;  // level added between S and T
};

struct EcgParams {
  double fs = 100.0;
  double duration_s = 10.0;
  double heart_rate_bpm = 70.0;
  double rate_jitter = 0.03;  // relative RR jitter
  double noise_std = 0.02;
  double baseline_wander = 0.05;
  EcgMorphology morphology;
};

struct EcgSignal {
  std::vector<double> values;
  std::vector<std::size_t> r_peaks;
};

EcgSignal ecg(const EcgParams& params, Rng& rng);

// One beat centered at `r_index`, added into `out`.
void add_ecg_beat(std::vector<double>& out, double fs, double r_index, const EcgMorphology& m);

struct PpgSignal {
  std::vector<double> values;
  std::vector<std::size_t> systolic_peaks;
};

PpgSignal ppg(double fs, double duration_s, double heart_rate_bpm, double noise_std, Rng& rng);

struct EdaSignal {
  std::vector<double> values;
  std::vector<std::size_t> bump_centers;
};

// Linear tonic ramp plus Gaussian phasic bumps (width sigma_s) at the given times.
EdaSignal eda(double fs, double duration_s, double ramp_from, double ramp_to,
              const std::vector<double>& bump_times_s, double bump_amp, double bump_sigma_s,
              double noise_std, Rng& rng);

struct EmgSignal {
  std::vector<double> values;
  std::vector<std::pair<std::size_t, std::size_t>> bursts;  // [start, end)
};

// Gaussian noise of `rest_std`, raised to `burst_std` inside each burst.
EmgSignal emg(double fs, double duration_s, const std::vector<std::pair<double, double>>& bursts_s,
              double rest_std, double burst_std, Rng& rng);

struct EogSignal {
  std::vector<double> values;
  std::vector<std::size_t> blinks;
};

EogSignal eog(double fs, double duration_s, const std::vector<double>& blink_times_s, double blink_amp,
              double noise_std, Rng& rng);

// Three-axis accelerometer pattern; `style` picks the class template.
std::vector<std::vector<double>> imu(double fs, double duration_s, std::size_t style,
                                     std::size_t n_styles, std::size_t channels, Rng& rng);

std::vector<double> respiration(double fs, double duration_s, double breaths_per_min, double amplitude,
                                double noise_std, Rng& rng);

}  // namespace vizprompt::synth
