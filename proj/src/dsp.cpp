#include "vizprompt/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "vizprompt/error.hpp"

namespace vizprompt::dsp {

namespace {

using cd = std::complex<double>;
constexpr double kPi = std::numbers::pi;

bool is_pow2(std::size_t n) { return n && !(n & (n - 1)); }

void fft_pow2(std::vector<cd>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        const cd w = std::polar(1.0, ang * static_cast<double>(k));
        const cd u = a[i + k];
        const cd v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
  if (inverse) {
    for (auto& x : a) x /= static_cast<double>(n);
  }
}

std::vector<cd> bluestein(const std::vector<cd>& x) {
  const std::size_t n = x.size();
  std::size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;
  std::vector<cd> chirp(n);
  for (std::size_t k = 0; k < n; ++k) {
    // k^2 mod 2n keeps the angle argument small for long inputs
    const auto kk = static_cast<double>((k * k) % (2 * n));
    chirp[k] = std::polar(1.0, -kPi * kk / static_cast<double>(n));
  }
  std::vector<cd> a(m), b(m);
  for (std::size_t k = 0; k < n; ++k) a[k] = x[k] * chirp[k];
  b[0] = std::conj(chirp[0]);
  for (std::size_t k = 1; k < n; ++k) b[k] = b[m - k] = std::conj(chirp[k]);
  fft_pow2(a, false);
  fft_pow2(b, false);
  for (std::size_t i = 0; i < m; ++i) a[i] *= b[i];
  fft_pow2(a, true);
  std::vector<cd> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = a[k] * chirp[k];
  return out;
}

// x[-k] = 2 x[0] - x[k] and x[n-1+k] = 2 x[n-1] - x[n-1-k]; indices clamp for short inputs.
std::vector<double> odd_pad(std::span<const double> x, std::size_t pad) {
  const std::size_t n = x.size();
  std::vector<double> out;
  out.reserve(n + 2 * pad);
  for (std::size_t k = pad; k >= 1; --k) out.push_back(2.0 * x[0] - x[std::min(k, n - 1)]);
  out.insert(out.end(), x.begin(), x.end());
  for (std::size_t k = 1; k <= pad; ++k) {
    out.push_back(2.0 * x[n - 1] - x[n - 1 - std::min(k, n - 1)]);
  }
  return out;
}

std::size_t odd_window(double seconds, double fs) {
  auto w = static_cast<std::size_t>(std::llround(seconds * fs));
  if (w < 1) w = 1;
  if (w % 2 == 0) ++w;
  return w;
}

struct Biquad {
  double b0, b1, b2, a1, a2;
};

std::vector<Biquad> butter4(double fs, double low_hz, double high_hz) {
  // Butterworth 4th order = two 2nd-order sections with these Q values.
  constexpr double kQ[2] = {0.54119610014619701, 1.3065629648763764};
  std::vector<Biquad> sections;
  auto add = [&](double f0, bool highpass) {
    const double w0 = 2.0 * kPi * f0 / fs;
    const double c = std::cos(w0);
    for (double q : kQ) {
      const double alpha = std::sin(w0) / (2.0 * q);
      const double a0 = 1.0 + alpha;
      Biquad s{};
      if (highpass) {
        s.b0 = (1.0 + c) / 2.0 / a0;
        s.b1 = -(1.0 + c) / a0;
        s.b2 = (1.0 + c) / 2.0 / a0;
      } else {
        s.b0 = (1.0 - c) / 2.0 / a0;
        s.b1 = (1.0 - c) / a0;
        s.b2 = (1.0 - c) / 2.0 / a0;
      }
      s.a1 = -2.0 * c / a0;
      s.a2 = (1.0 - alpha) / a0;
      sections.push_back(s);
    }
  };
  if (low_hz > 0.0) add(low_hz, true);
  add(high_hz, false);
  return sections;
}

// Transposed direct form II with steady-state initial conditions for a
// constant input equal to the first sample.
void sosfilt_steady(const std::vector<Biquad>& sos, std::vector<double>& x) {
  double in0 = x.front();
  for (const auto& s : sos) {
    const double gain = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
    const double y0 = gain * in0;
    double z2 = s.b2 * in0 - s.a2 * y0;
    double z1 = y0 - s.b0 * in0;
    for (double& v : x) {
      const double in = v;
      const double y = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * y + z2;
      z2 = s.b2 * in - s.a2 * y;
      v = y;
    }
    in0 = y0;
  }
}

std::vector<std::size_t> local_maxima(std::span<const double> x) {
  std::vector<std::size_t> peaks;
  const std::size_t n = x.size();
  std::size_t i = 1;
  while (i + 1 < n) {
    if (x[i] > x[i - 1]) {
      // walk across a plateau; report its middle
      std::size_t j = i;
      while (j + 1 < n && x[j + 1] == x[i]) ++j;
      if (j + 1 < n && x[j + 1] < x[i]) {
        peaks.push_back((i + j) / 2);
      }
      i = j + 1;
    } else {
      ++i;
    }
  }
  return peaks;
}

// Keep the highest peaks first, suppressing any within `distance` samples.
std::vector<std::size_t> enforce_distance(std::span<const double> x, std::vector<std::size_t> peaks,
                                          std::size_t distance) {
  if (distance <= 1 || peaks.size() < 2) return peaks;
  std::vector<std::size_t> order(peaks.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[peaks[a]] > x[peaks[b]]; });
  std::vector<bool> keep(peaks.size(), true);
  for (std::size_t oi : order) {
    if (!keep[oi]) continue;
    for (std::size_t j = oi; j-- > 0 && peaks[oi] - peaks[j] < distance;) keep[j] = false;
    for (std::size_t j = oi + 1; j < peaks.size() && peaks[j] - peaks[oi] < distance; ++j) {
      keep[j] = false;
    }
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    if (keep[i]) out.push_back(peaks[i]);
  }
  return out;
}

PeakKind kind_for(PeakPreset preset) {
  switch (preset) {
    case PeakPreset::ecg_r: return PeakKind::r_peak;
    case PeakPreset::ppg_systolic: return PeakKind::systolic;
    case PeakPreset::eog_blink: return PeakKind::blink;
    case PeakPreset::generic: return PeakKind::generic;
  }
  return PeakKind::generic;
}

PeakSet detect_r_peaks(std::span<const double> x, double fs, const PeakDetectorConfig& cfg) {
  PeakSet out{{}, PeakKind::r_peak};
  const double high = std::min(cfg.qrs_high_hz, 0.45 * fs);
  const double low = std::min(cfg.qrs_low_hz, 0.5 * high);
  const auto band = bandpass_clean(x, fs, low, high);
  const std::size_t n = band.size();
  std::vector<double> energy(n, 0.0);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double d = (band[i + 1] - band[i - 1]) * fs / 2.0;
    energy[i] = d * d;
  }
  const auto integrated = moving_average(energy, odd_window(cfg.integration_s, fs));
  const double top = *std::max_element(integrated.begin(), integrated.end());
  if (!(top > 1e-18)) return out;

  const auto refractory = static_cast<std::size_t>(std::llround(cfg.min_distance_s * fs));
  auto candidates = enforce_distance(integrated, local_maxima(integrated), refractory);

  // Pan-Tompkins running estimates, seeded from the first two seconds.
  const std::size_t learn = std::min(n, static_cast<std::size_t>(2.0 * fs));
  const double learn_max = *std::max_element(integrated.begin(), integrated.begin() + static_cast<std::ptrdiff_t>(learn));
  const double learn_mean =
      std::accumulate(integrated.begin(), integrated.begin() + static_cast<std::ptrdiff_t>(learn), 0.0) /
      static_cast<double>(learn);
  double spki = learn_max / 3.0;
  double npki = learn_mean / 2.0;
  std::vector<std::size_t> qrs;
  for (std::size_t c : candidates) {
    const double threshold = npki + 0.25 * (spki - npki);
    if (integrated[c] > threshold) {
      qrs.push_back(c);
      spki = 0.125 * integrated[c] + 0.875 * spki;
    } else {
      npki = 0.125 * integrated[c] + 0.875 * npki;
    }
  }

  // Refine to the input maximum near each integrated peak.
  const auto cleaned = bandpass_clean(x, fs, std::min(0.5, 0.25 * high), std::min(40.0, 0.45 * fs));
  const auto half = static_cast<std::size_t>(std::llround(cfg.refine_s * fs));
  std::vector<std::size_t> refined;
  for (std::size_t c : qrs) {
    const std::size_t lo = c > half ? c - half : 0;
    const std::size_t hi = std::min(n - 1, c + half);
    std::size_t best = lo;
    for (std::size_t i = lo; i <= hi; ++i) {
      if (cleaned[i] > cleaned[best]) best = i;
    }
    refined.push_back(best);
  }
  std::sort(refined.begin(), refined.end());
  refined.erase(std::unique(refined.begin(), refined.end()), refined.end());
  out.indices = enforce_distance(cleaned, refined, refractory);
  return out;
}

}  // namespace

std::vector<std::complex<double>> fft(std::vector<std::complex<double>> data) {
  if (data.size() <= 1) return data;
  if (is_pow2(data.size())) {
    fft_pow2(data, false);
    return data;
  }
  return bluestein(data);
}

std::vector<double> hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

std::vector<double> moving_average(std::span<const double> x, std::size_t window) {
  if (x.empty()) return {};
  if (window % 2 == 0) ++window;
  const std::size_t h = window / 2;
  const auto padded = odd_pad(x, h);
  std::vector<double> prefix(padded.size() + 1, 0.0);
  for (std::size_t i = 0; i < padded.size(); ++i) prefix[i + 1] = prefix[i] + padded[i];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (prefix[i + window] - prefix[i]) / static_cast<double>(window);
  }
  return out;
}

std::vector<double> moving_median(std::span<const double> x, std::size_t window) {
  if (x.empty()) return {};
  if (window % 2 == 0) ++window;
  const std::size_t h = window / 2;
  const auto padded = odd_pad(x, h);
  std::vector<double> buf(window);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::copy(padded.begin() + static_cast<std::ptrdiff_t>(i),
              padded.begin() + static_cast<std::ptrdiff_t>(i + window), buf.begin());
    std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(h), buf.end());
    out[i] = buf[h];
  }
  return out;
}

std::string_view to_string(SpectrogramMode mode) {
  switch (mode) {
    case SpectrogramMode::psd: return "psd";
    case SpectrogramMode::complex: return "complex";
    case SpectrogramMode::magnitude: return "magnitude";
    case SpectrogramMode::angle: return "angle";
    case SpectrogramMode::phase: return "phase";
  }
  return "psd";
}

SpectrogramMode spectrogram_mode_from_string(std::string_view name) {
  for (auto m : {SpectrogramMode::psd, SpectrogramMode::complex, SpectrogramMode::magnitude,
                 SpectrogramMode::angle, SpectrogramMode::phase}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::BadParams, "unknown spectrogram mode '" + std::string(name) + "'");
}

void SpectrogramParams::validate() const {
  if (!(noverlap >= 0 && noverlap < nperseg && nperseg <= nfft && nperseg > 0)) {
    throw Error(ErrorKind::BadParams, "need 0 <= noverlap < nperseg <= nfft (nfft=" +
                                          std::to_string(nfft) + ", nperseg=" +
                                          std::to_string(nperseg) + ", noverlap=" +
                                          std::to_string(noverlap) + ")");
  }
}

SpectrogramParams SpectrogramParams::defaults_for(std::size_t n) {
  int seg = 16;
  while (seg * 2 <= 256 && static_cast<std::size_t>(seg) * 2 * 8 <= n) seg *= 2;
  seg = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(seg), std::max<std::size_t>(n, 2)));
  return SpectrogramParams{seg, seg, seg / 2, SpectrogramMode::psd};
}

SpectrogramMatrix spectrogram(std::span<const double> signal, double fs,
                              const SpectrogramParams& params) {
  params.validate();
  const auto nperseg = static_cast<std::size_t>(params.nperseg);
  const auto nfft = static_cast<std::size_t>(params.nfft);
  if (signal.size() < nperseg) {
    throw Error(ErrorKind::SignalTooShort, std::to_string(signal.size()) + " samples < nperseg " +
                                               std::to_string(nperseg));
  }
  const std::size_t step = nperseg - static_cast<std::size_t>(params.noverlap);
  SpectrogramMatrix m;
  m.mode = params.mode;
  m.freq_bins = nfft / 2 + 1;
  m.time_frames = 1 + (signal.size() - nperseg) / step;
  m.values.assign(m.freq_bins * m.time_frames, 0.0);
  if (params.mode == SpectrogramMode::complex) m.complex_values.assign(m.values.size(), cd{});
  for (std::size_t k = 0; k < m.freq_bins; ++k) {
    m.freqs_hz.push_back(static_cast<double>(k) * fs / static_cast<double>(nfft));
  }

  const auto w = hann(nperseg);
  double wss = 0.0;
  for (double v : w) wss += v * v;
  const double density = 1.0 / (fs * wss);
  const std::size_t last_doubled = nfft % 2 == 0 ? m.freq_bins - 2 : m.freq_bins - 1;

  std::vector<cd> frame(nfft);
  for (std::size_t t = 0; t < m.time_frames; ++t) {
    const std::size_t start = t * step;
    m.times_s.push_back((static_cast<double>(start) + static_cast<double>(nperseg) / 2.0) / fs);
    std::fill(frame.begin(), frame.end(), cd{});
    for (std::size_t i = 0; i < nperseg; ++i) frame[i] = signal[start + i] * w[i];
    const auto spec = fft(frame);
    for (std::size_t k = 0; k < m.freq_bins; ++k) {
      const std::size_t idx = k * m.time_frames + t;
      switch (params.mode) {
        case SpectrogramMode::psd: {
          double p = std::norm(spec[k]) * density;
          if (k >= 1 && k <= last_doubled) p *= 2.0;
          m.values[idx] = p;
          break;
        }
        case SpectrogramMode::complex:
          m.complex_values[idx] = spec[k] * std::sqrt(density);
          m.values[idx] = std::abs(m.complex_values[idx]);
          break;
        case SpectrogramMode::magnitude:
          m.values[idx] = std::abs(spec[k]) * std::sqrt(density);
          break;
        case SpectrogramMode::angle:
        case SpectrogramMode::phase:
          m.values[idx] = std::arg(spec[k]);
          break;
      }
    }
    if (params.mode == SpectrogramMode::phase) {
      // np.unwrap along frequency
      double correction = 0.0;
      double prev = m.values[t];
      for (std::size_t k = 1; k < m.freq_bins; ++k) {
        const std::size_t idx = k * m.time_frames + t;
        const double raw = m.values[idx];
        const double d = raw - prev;
        double dm = std::fmod(d + kPi, 2.0 * kPi);
        if (dm < 0.0) dm += 2.0 * kPi;
        dm -= kPi;
        if (dm == -kPi && d > 0.0) dm = kPi;
        if (std::abs(d) >= kPi) correction += dm - d;
        prev = raw;
        m.values[idx] = raw + correction;
      }
    }
  }
  return m;
}

Spectrum power_spectral_density(std::span<const double> signal, double fs) {
  if (signal.size() < 8) {
    throw Error(ErrorKind::SignalTooShort, "power spectral density needs at least 8 samples");
  }
  const int seg = static_cast<int>(std::min<std::size_t>(256, signal.size()));
  const auto m = spectrogram(signal, fs, SpectrogramParams{seg, seg, seg / 2, SpectrogramMode::psd});
  Spectrum out;
  out.freqs_hz = m.freqs_hz;
  out.psd.assign(m.freq_bins, 0.0);
  for (std::size_t k = 0; k < m.freq_bins; ++k) {
    double s = 0.0;
    for (std::size_t t = 0; t < m.time_frames; ++t) s += m.at(k, t);
    out.psd[k] = s / static_cast<double>(m.time_frames);
  }
  return out;
}

std::vector<double> bandpass_clean(std::span<const double> signal, double fs, double low_hz,
                                   double high_hz) {
  if (!(low_hz >= 0.0 && low_hz < high_hz && high_hz < fs / 2.0)) {
    throw Error(ErrorKind::BadBand, "need 0 <= low < high < fs/2 (low=" + std::to_string(low_hz) +
                                        ", high=" + std::to_string(high_hz) +
                                        ", fs=" + std::to_string(fs) + ")");
  }
  if (signal.empty()) return {};
  if (signal.size() == 1) return {signal[0]};
  const auto sos = butter4(fs, low_hz, high_hz);
  const double slowest = low_hz > 0.0 ? low_hz : high_hz;
  const std::size_t want = std::max<std::size_t>(3 * (2 * sos.size() + 1),
                                                 static_cast<std::size_t>(std::ceil(fs / slowest)));
  const std::size_t pad = std::min(signal.size() - 1, want);
  auto x = odd_pad(signal, pad);
  sosfilt_steady(sos, x);
  std::reverse(x.begin(), x.end());
  sosfilt_steady(sos, x);
  std::reverse(x.begin(), x.end());
  return std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(pad),
                             x.begin() + static_cast<std::ptrdiff_t>(pad + signal.size()));
}

std::optional<Band> default_cleaning_band(Modality modality, double fs) {
  const double nyq_cap = 0.45 * fs;
  auto band = [&](double lo, double hi) -> std::optional<Band> {
    hi = std::min(hi, nyq_cap);
    if (!(hi > lo)) return std::nullopt;
    return Band{lo, hi};
  };
  switch (modality) {
    case Modality::ecg: return band(0.5, 40.0);
    case Modality::ppg: return band(0.5, 8.0);
    case Modality::eda: return band(0.0, 3.0);
    case Modality::emg: return band(20.0, 450.0);
    case Modality::eog: return band(0.1, 10.0);
    default: return std::nullopt;
  }
}

std::vector<double> clean_for_modality(std::span<const double> signal, double fs, Modality modality) {
  const auto b = default_cleaning_band(modality, fs);
  if (!b) return std::vector<double>(signal.begin(), signal.end());
  return bandpass_clean(signal, fs, b->low_hz, b->high_hz);
}

PeakDetectorConfig preset_config(PeakPreset preset) {
  PeakDetectorConfig c;
  switch (preset) {
    case PeakPreset::ecg_r:
      c.max_rate_hz = 3.5;
      c.min_distance_s = 0.200;
      break;
    case PeakPreset::ppg_systolic:
      c.max_rate_hz = 3.5;
      c.min_distance_s = 0.300;
      c.smoothing_s = 0.050;
      c.rel_prominence = 0.3;
      break;
    case PeakPreset::eog_blink:
      c.max_rate_hz = 2.0;
      c.min_distance_s = 0.250;
      c.smoothing_s = 0.050;
      c.rel_prominence = 0.3;
      break;
    case PeakPreset::generic:
      c.max_rate_hz = 2.0;
      c.min_distance_s = 0.0;
      c.smoothing_s = 0.0;
      c.rel_prominence = 0.2;
      break;
  }
  return c;
}

std::vector<double> peak_prominences(std::span<const double> x, std::span<const std::size_t> peaks) {
  std::vector<double> out;
  out.reserve(peaks.size());
  for (std::size_t p : peaks) {
    double left_min = x[p];
    for (std::size_t i = p; i-- > 0;) {
      if (x[i] > x[p]) break;
      left_min = std::min(left_min, x[i]);
    }
    double right_min = x[p];
    for (std::size_t i = p + 1; i < x.size(); ++i) {
      if (x[i] > x[p]) break;
      right_min = std::min(right_min, x[i]);
    }
    out.push_back(x[p] - std::max(left_min, right_min));
  }
  return out;
}

PeakSet detect_peaks(std::span<const double> signal, double fs, PeakPreset preset) {
  return detect_peaks(signal, fs, preset, preset_config(preset));
}

PeakSet detect_peaks(std::span<const double> signal, double fs, PeakPreset preset,
                     const PeakDetectorConfig& config) {
  const double min_len = 2.0 * fs / config.max_rate_hz;
  if (static_cast<double>(signal.size()) < min_len || signal.size() < 3) {
    throw Error(ErrorKind::SignalTooShort, std::to_string(signal.size()) + " samples; need " +
                                               std::to_string(static_cast<long>(std::ceil(min_len))));
  }
  if (preset == PeakPreset::ecg_r) return detect_r_peaks(signal, fs, config);

  PeakSet out{{}, kind_for(preset)};
  const auto smooth = config.smoothing_s > 0.0
                          ? moving_average(signal, odd_window(config.smoothing_s, fs))
                          : std::vector<double>(signal.begin(), signal.end());
  const auto [lo, hi] = std::minmax_element(smooth.begin(), smooth.end());
  const double range = *hi - *lo;
  if (!(range > 1e-12)) return out;
  auto candidates = local_maxima(smooth);
  const auto prom = peak_prominences(smooth, candidates);
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (prom[i] >= config.rel_prominence * range) kept.push_back(candidates[i]);
  }
  out.indices = enforce_distance(
      smooth, kept, static_cast<std::size_t>(std::llround(config.min_distance_s * fs)));
  return out;
}

RateSeries rate_series(const PeakSet& peaks, double fs, std::size_t n_samples) {
  if (peaks.indices.size() < 2) {
    throw Error(ErrorKind::TooFewPeaks, "rate needs at least 2 peaks, got " +
                                            std::to_string(peaks.indices.size()));
  }
  RateSeries r;
  for (std::size_t i = 0; i + 1 < peaks.indices.size(); ++i) {
    const double ibi = static_cast<double>(peaks.indices[i + 1] - peaks.indices[i]) / fs;
    r.instantaneous.push_back(60.0 / ibi);
    r.midpoints.push_back(0.5 * static_cast<double>(peaks.indices[i] + peaks.indices[i + 1]));
  }
  r.mean_rate = std::accumulate(r.instantaneous.begin(), r.instantaneous.end(), 0.0) /
                static_cast<double>(r.instantaneous.size());
  r.per_sample.resize(n_samples);
  std::size_t seg = 0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const double pos = static_cast<double>(s);
    if (pos <= r.midpoints.front()) {
      r.per_sample[s] = r.instantaneous.front();
    } else if (pos >= r.midpoints.back()) {
      r.per_sample[s] = r.instantaneous.back();
    } else {
      while (r.midpoints[seg + 1] < pos) ++seg;
      const double t = (pos - r.midpoints[seg]) / (r.midpoints[seg + 1] - r.midpoints[seg]);
      r.per_sample[s] = r.instantaneous[seg] + t * (r.instantaneous[seg + 1] - r.instantaneous[seg]);
    }
  }
  return r;
}

BeatWindowConfig ppg_beat_window() {
  BeatWindowConfig c;
  c.pre_s = 0.30;
  c.post_s = 0.50;
  c.ecg_landmarks = false;
  return c;
}

BeatWindowConfig eog_blink_window() {
  BeatWindowConfig c;
  c.pre_s = 0.30;
  c.post_s = 0.40;
  c.ecg_landmarks = false;
  return c;
}

BeatEnsemble segment_beats(std::span<const double> signal, const PeakSet& peaks, double fs,
                           const BeatWindowConfig& config) {
  if (peaks.indices.size() < 2) {
    throw Error(ErrorKind::TooFewPeaks, "beat segmentation needs at least 2 peaks, got " +
                                            std::to_string(peaks.indices.size()));
  }
  BeatEnsemble e;
  const auto pre = static_cast<std::size_t>(std::llround(config.pre_s * fs));
  const auto post = static_cast<std::size_t>(std::llround(config.post_s * fs));
  e.peak_offset = pre;
  const std::size_t len = pre + post + 1;
  for (std::size_t p : peaks.indices) {
    if (p < pre || p + post >= signal.size()) continue;
    e.beats.emplace_back(signal.begin() + static_cast<std::ptrdiff_t>(p - pre),
                         signal.begin() + static_cast<std::ptrdiff_t>(p + post + 1));
    e.beat_peaks.push_back(p);
  }
  if (e.beats.empty()) return e;

  e.mean_beat.assign(len, 0.0);
  e.median_beat.assign(len, 0.0);
  std::vector<double> column(e.beats.size());
  for (std::size_t i = 0; i < len; ++i) {
    double s = 0.0;
    for (std::size_t b = 0; b < e.beats.size(); ++b) {
      s += e.beats[b][i];
      column[b] = e.beats[b][i];
    }
    e.mean_beat[i] = s / static_cast<double>(e.beats.size());
    std::sort(column.begin(), column.end());
    const std::size_t m = column.size();
    e.median_beat[i] = m % 2 ? column[m / 2] : 0.5 * (column[m / 2 - 1] + column[m / 2]);
  }

  if (config.ecg_landmarks) {
    const auto r = static_cast<long long>(pre);
    auto off = [&](double s) { return std::llround(s * fs); };
    auto search = [&](long long from, long long to, bool want_max) -> std::optional<std::size_t> {
      if (from < 0 || to > static_cast<long long>(len) - 1 || from > to) return std::nullopt;
      auto best = static_cast<std::size_t>(from);
      for (auto i = static_cast<std::size_t>(from); i <= static_cast<std::size_t>(to); ++i) {
        if (want_max ? e.mean_beat[i] > e.mean_beat[best] : e.mean_beat[i] < e.mean_beat[best]) best = i;
      }
      return best;
    };
    if (auto q = search(r - off(config.q_search_s), r, false)) e.landmarks['Q'] = *q;
    if (auto s = search(r, r + off(config.s_search_s), false)) e.landmarks['S'] = *s;
    if (auto p = search(r - off(config.p_from_s), r - off(config.p_to_s), true)) e.landmarks['P'] = *p;
    if (auto t = search(r + off(config.t_from_s), r + off(config.t_to_s), true)) e.landmarks['T'] = *t;
  }
  return e;
}

EdaDecomposition eda_decompose(std::span<const double> signal, double fs, const EdaConfig& config) {
  if (!(fs >= 1.0) || static_cast<double>(signal.size()) < 4.0 * fs) {
    throw Error(ErrorKind::SignalTooShort, "EDA decomposition needs fs >= 1 and at least 4 s of data");
  }
  EdaDecomposition d;
  if (config.clean_lowpass_hz > 0.0 && config.clean_lowpass_hz < 0.45 * fs) {
    d.cleaned = bandpass_clean(signal, fs, 0.0, config.clean_lowpass_hz);
  } else {
    d.cleaned.assign(signal.begin(), signal.end());
  }
  const std::size_t w = odd_window(config.tonic_window_s, fs);
  d.tonic = moving_average(moving_median(d.cleaned, w), w);
  d.phasic.resize(d.cleaned.size());
  for (std::size_t i = 0; i < d.cleaned.size(); ++i) d.phasic[i] = d.cleaned[i] - d.tonic[i];

  const auto& ph = d.phasic;
  auto candidates = local_maxima(ph);
  const auto prom = peak_prominences(ph, candidates);
  const double ph_max = ph.empty() ? 0.0 : *std::max_element(ph.begin(), ph.end());
  const double min_prom = std::max(config.min_prominence, config.rel_prominence * ph_max);
  std::size_t floor_idx = 0;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const std::size_t p = candidates[c];
    if (prom[c] < min_prom || ph[p] <= 0.0) continue;
    ScrEvent ev;
    ev.peak = p;
    std::optional<std::size_t> onset;
    for (std::size_t i = p; i > floor_idx; --i) {
      if (ph[i - 1] <= 0.0 && ph[i] > 0.0) {
        onset = i;
        break;
      }
    }
    if (!onset) {
      std::size_t lo = p;
      for (std::size_t i = floor_idx; i < p; ++i) {
        if (ph[i] < ph[lo]) lo = i;
      }
      onset = lo;
    }
    ev.onset = *onset;
    const double half_level = ph[ev.onset] + 0.5 * (ph[p] - ph[ev.onset]);
    for (std::size_t i = p + 1; i < ph.size(); ++i) {
      if (ph[i] <= half_level) {
        ev.half_recovery = i;
        break;
      }
    }
    d.scr_events.push_back(ev);
    floor_idx = p;
  }
  return d;
}

ActivationSegments emg_activation(std::span<const double> signal, double fs, const EmgConfig& config) {
  if (static_cast<double>(signal.size()) < fs * 0.05 || signal.empty()) {
    throw Error(ErrorKind::SignalTooShort, "EMG activation needs at least 50 ms of data");
  }
  ActivationSegments a;
  std::vector<double> sq(signal.size());
  for (std::size_t i = 0; i < signal.size(); ++i) sq[i] = signal[i] * signal[i];
  // Edge windows shrink to the available samples.
  const std::size_t w = odd_window(config.rms_window_s, fs);
  const std::size_t h = w / 2;
  std::vector<double> prefix(sq.size() + 1, 0.0);
  for (std::size_t i = 0; i < sq.size(); ++i) prefix[i + 1] = prefix[i] + sq[i];
  a.envelope.resize(signal.size());
  for (std::size_t i = 0; i < signal.size(); ++i) {
    const std::size_t lo = i >= h ? i - h : 0;
    const std::size_t hi = std::min(signal.size(), i + h + 1);
    a.envelope[i] = std::sqrt((prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo));
  }
  const double n = static_cast<double>(a.envelope.size());
  const double mean = std::accumulate(a.envelope.begin(), a.envelope.end(), 0.0) / n;
  double var = 0.0;
  for (double v : a.envelope) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  a.threshold_used = mean + config.threshold_std * sd;
  if (!(mean > 0.0) || sd / mean < config.min_contrast) return a;

  std::vector<std::pair<std::size_t, std::size_t>> raw;
  for (std::size_t i = 0; i < a.envelope.size();) {
    if (a.envelope[i] > a.threshold_used) {
      std::size_t j = i;
      while (j < a.envelope.size() && a.envelope[j] > a.threshold_used) ++j;
      raw.emplace_back(i, j);
      i = j;
    } else {
      ++i;
    }
  }
  const auto gap = static_cast<std::size_t>(std::llround(config.merge_gap_s * fs));
  const auto min_len = static_cast<std::size_t>(std::llround(config.min_segment_s * fs));
  std::vector<std::pair<std::size_t, std::size_t>> merged;
  for (const auto& s : raw) {
    if (!merged.empty() && s.first - merged.back().second < gap) {
      merged.back().second = s.second;
    } else {
      merged.push_back(s);
    }
  }
  for (const auto& s : merged) {
    if (s.second - s.first >= min_len) a.segments.push_back(s);
  }
  return a;
}

}  // namespace vizprompt::dsp
