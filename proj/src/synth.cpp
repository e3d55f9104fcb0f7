#include "vizprompt/synth.hpp"

#include <cmath>
#include <numbers>

namespace vizprompt::synth {

namespace {

constexpr double kPi = std::numbers::pi;

double gauss(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z);
}

std::size_t samples_for(double fs, double duration_s) {
  return static_cast<std::size_t>(std::llround(fs * duration_s));
}

}  // namespace

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * kPi * u2);
  has_spare_ = true;
  return r * std::cos(2.0 * kPi * u2);
}

void add_ecg_beat(std::vector<double>& out, double fs, double r_index, const EcgMorphology& m) {
  // Wave positions and widths in seconds relative to the R peak.
  const double w = m.qrs_width;
  struct Wave {
    double amp, at, sigma;
  };
  const Wave waves[] = {
      {m.p_amp, -0.20, 0.025},
      {m.q_amp, -0.035 * w, 0.010 * w},
      {m.r_amp, 0.0, 0.012 * w},
      {m.s_amp, 0.035 * w, 0.012 * w},
      {m.t_amp, 0.28, 0.045},
  };
  const auto lo = static_cast<long long>(std::floor(r_index - 0.4 * fs));
  const auto hi = static_cast<long long>(std::ceil(r_index + 0.6 * fs));
  for (long long i = std::max(0LL, lo); i <= hi && i < static_cast<long long>(out.size()); ++i) {
    const double t = (static_cast<double>(i) - r_index) / fs;
    double v = 0.0;
    for (const auto& wave : waves) v += wave.amp * gauss(t, wave.at, wave.sigma);
    if (m.st_offset != 0.0 && t > 0.06 && t < 0.22) v += m.st_offset;
    out[static_cast<std::size_t>(i)] += v;
  }
}

EcgSignal ecg(const EcgParams& p, Rng& rng) {
  EcgSignal s;
  const std::size_t n = samples_for(p.fs, p.duration_s);
  s.values.assign(n, 0.0);
  const double rr = 60.0 / p.heart_rate_bpm;
  double t = rng.uniform(0.3, 0.3 + rr);
  while (t * p.fs < static_cast<double>(n)) {
    const double idx = std::round(t * p.fs);
    add_ecg_beat(s.values, p.fs, idx, p.morphology);
    s.r_peaks.push_back(static_cast<std::size_t>(idx));
    t += rr * (1.0 + p.rate_jitter * (2.0 * rng.uniform() - 1.0));
  }
  const double wander_f = rng.uniform(0.1, 0.3);
  const double wander_phase = rng.uniform(0.0, 2.0 * kPi);
  for (std::size_t i = 0; i < n; ++i) {
    const double ti = static_cast<double>(i) / p.fs;
    s.values[i] += p.baseline_wander * std::sin(2.0 * kPi * wander_f * ti + wander_phase) +
                   p.noise_std * rng.normal();
  }
  return s;
}

PpgSignal ppg(double fs, double duration_s, double heart_rate_bpm, double noise_std, Rng& rng) {
  PpgSignal s;
  const std::size_t n = samples_for(fs, duration_s);
  s.values.assign(n, 0.0);
  const double period = 60.0 / heart_rate_bpm;
  double t = rng.uniform(0.1, 0.1 + period);
  while (t < duration_s + period) {
    for (std::size_t i = 0; i < n; ++i) {
      const double ti = static_cast<double>(i) / fs;
      if (std::abs(ti - t) > 1.0) continue;
      s.values[i] += gauss(ti, t, 0.09) + 0.35 * gauss(ti, t + 0.30, 0.07);
    }
    const auto peak = static_cast<long long>(std::llround(t * fs));
    if (peak >= 0 && peak < static_cast<long long>(n)) s.systolic_peaks.push_back(static_cast<std::size_t>(peak));
    t += period * (1.0 + 0.02 * (2.0 * rng.uniform() - 1.0));
  }
  for (auto& v : s.values) v += noise_std * rng.normal();
  return s;
}

EdaSignal eda(double fs, double duration_s, double ramp_from, double ramp_to,
              const std::vector<double>& bump_times_s, double bump_amp, double bump_sigma_s,
              double noise_std, Rng& rng) {
  EdaSignal s;
  const std::size_t n = samples_for(fs, duration_s);
  s.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
    s.values[i] = ramp_from + (ramp_to - ramp_from) * frac;
  }
  for (double bt : bump_times_s) {
    for (std::size_t i = 0; i < n; ++i) {
      s.values[i] += bump_amp * gauss(static_cast<double>(i) / fs, bt, bump_sigma_s);
    }
    s.bump_centers.push_back(static_cast<std::size_t>(std::llround(bt * fs)));
  }
  if (noise_std > 0.0) {
    for (auto& v : s.values) v += noise_std * rng.normal();
  }
  return s;
}

EmgSignal emg(double fs, double duration_s, const std::vector<std::pair<double, double>>& bursts_s,
              double rest_std, double burst_std, Rng& rng) {
  EmgSignal s;
  const std::size_t n = samples_for(fs, duration_s);
  s.values.resize(n);
  for (const auto& [a, b] : bursts_s) {
    s.bursts.emplace_back(samples_for(fs, a), std::min(n, samples_for(fs, b)));
  }
  for (std::size_t i = 0; i < n; ++i) {
    double sd = rest_std;
    for (const auto& [a, b] : s.bursts) {
      if (i >= a && i < b) sd = burst_std;
    }
    s.values[i] = sd * rng.normal();
  }
  return s;
}

EogSignal eog(double fs, double duration_s, const std::vector<double>& blink_times_s, double blink_amp,
              double noise_std, Rng& rng) {
  EogSignal s;
  const std::size_t n = samples_for(fs, duration_s);
  s.values.assign(n, 0.0);
  const double drift_f = rng.uniform(0.05, 0.15);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / fs;
    double v = 0.1 * blink_amp * std::sin(2.0 * kPi * drift_f * t);
    for (double bt : blink_times_s) v += blink_amp * gauss(t, bt, 0.05);
    s.values[i] = v + noise_std * rng.normal();
  }
  for (double bt : blink_times_s) s.blinks.push_back(static_cast<std::size_t>(std::llround(bt * fs)));
  return s;
}

std::vector<std::vector<double>> imu(double fs, double duration_s, std::size_t style,
                                     std::size_t n_styles, std::size_t channels, Rng& rng) {
  const std::size_t n = samples_for(fs, duration_s);
  const double pos = n_styles > 1 ? static_cast<double>(style) / static_cast<double>(n_styles - 1) : 0.0;
  const double base_freq = 0.6 + 2.4 * pos;  // Hz
  const double amplitude = 0.1 + 1.2 * static_cast<double>(style % 4) / 3.0;
  const double harmonic = 0.15 + 0.5 * static_cast<double>((style * 7) % 5) / 4.0;
  std::vector<std::vector<double>> out(channels, std::vector<double>(n));
  for (std::size_t c = 0; c < channels; ++c) {
    const double gravity = std::cos(static_cast<double>(style + c) * 1.3);
    const double freq = base_freq * (1.0 + 0.05 * (2.0 * rng.uniform() - 1.0));
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    const double amp = amplitude * (0.8 + 0.4 * rng.uniform()) * (1.0 - 0.25 * static_cast<double>(c % 3));
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / fs;
      const double th = 2.0 * kPi * freq * t + phase;
      out[c][i] = gravity + amp * (std::sin(th) + harmonic * std::sin(2.0 * th + 0.5 * static_cast<double>(c))) +
                  0.05 * rng.normal();
    }
  }
  return out;
}

std::vector<double> respiration(double fs, double duration_s, double breaths_per_min, double amplitude,
                                double noise_std, Rng& rng) {
  const std::size_t n = samples_for(fs, duration_s);
  std::vector<double> v(n);
  const double f = breaths_per_min / 60.0 * (1.0 + 0.05 * (2.0 * rng.uniform() - 1.0));
  const double phase = rng.uniform(0.0, 2.0 * kPi);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / fs;
    v[i] = amplitude * std::sin(2.0 * kPi * f * t + phase) + noise_std * rng.normal();
  }
  return v;
}

}  // namespace vizprompt::synth
