#pragma once

#include <complex>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vizprompt/signal.hpp"

// Signal-processing backends for the visualization catalog. Everything here is
// a pure function of its arguments.
namespace vizprompt::dsp {

// Discrete Fourier transform of any length (radix-2, Bluestein otherwise).
std::vector<std::complex<double>> fft(std::vector<std::complex<double>> data);

// Periodic Hann window of length n.
std::vector<double> hann(std::size_t n);

// Centered moving average / median over an odd window; the edges are padded
// by odd (point) reflection so linear trends pass through unchanged.
std::vector<double> moving_average(std::span<const double> x, std::size_t window);
std::vector<double> moving_median(std::span<const double> x, std::size_t window);

enum class SpectrogramMode { psd, complex, magnitude, angle, phase };

std::string_view to_string(SpectrogramMode mode);
SpectrogramMode spectrogram_mode_from_string(std::string_view name);

struct SpectrogramParams {
  int nfft = 128;
  int nperseg = 128;
  int noverlap = 64;
  SpectrogramMode mode = SpectrogramMode::psd;

  // Throws Error(BadParams) unless 0 <= noverlap < nperseg <= nfft.
  void validate() const;
  // Segment length for plotting: a power of two near n/8, within [16, 256] and <= n.
  static SpectrogramParams defaults_for(std::size_t n);
};

// Row-major freq_bins x time_frames. `values` holds the real result for every
// mode except complex, which fills `complex_values` instead (and `values`
// with magnitudes so the matrix is always plottable).
struct SpectrogramMatrix {
  std::size_t freq_bins = 0;
  std::size_t time_frames = 0;
  SpectrogramMode mode = SpectrogramMode::psd;
  std::vector<double> values;
  std::vector<std::complex<double>> complex_values;
  std::vector<double> freqs_hz;
  std::vector<double> times_s;

  double at(std::size_t bin, std::size_t frame) const { return values[bin * time_frames + frame]; }
};

// Hann-windowed one-sided STFT without detrending. psd uses density scaling
// (1 / (fs * sum w^2), doubled off DC/Nyquist), so summing psd * df over bins
// gives sum((x*w)^2) / sum(w^2) for each frame. The other modes use the
// square root of that scale and no doubling; phase unwraps along frequency.
SpectrogramMatrix spectrogram(std::span<const double> signal, double fs,
                              const SpectrogramParams& params);

struct Spectrum {
  std::vector<double> freqs_hz;
  std::vector<double> psd;
};

// Welch average of psd frames: nperseg = min(256, n), 50% overlap.
Spectrum power_spectral_density(std::span<const double> signal, double fs);

// Zero-phase 4th-order Butterworth band-pass (forward-backward). low_hz == 0
// gives a pure low-pass.
std::vector<double> bandpass_clean(std::span<const double> signal, double fs, double low_hz,
                                   double high_hz);

struct Band {
  double low_hz = 0.0;
  double high_hz = 0.0;
};

// Per-modality cleaning defaults (high edge clipped to 0.45 fs). Returns
// nullopt for modalities without a cleaning step.
std::optional<Band> default_cleaning_band(Modality modality, double fs);
std::vector<double> clean_for_modality(std::span<const double> signal, double fs, Modality modality);

enum class PeakPreset { ecg_r, ppg_systolic, eog_blink, generic };
enum class PeakKind { r_peak, systolic, scr_onset, scr_peak, blink, generic };

struct PeakSet {
  std::vector<std::size_t> indices;  // strictly increasing
  PeakKind kind = PeakKind::generic;
};

struct PeakDetectorConfig {
  double max_rate_hz = 3.5;        // sets the minimum signal length (two periods)
  double min_distance_s = 0.0;     // refractory / minimum inter-peak distance
  double smoothing_s = 0.0;        // moving-average smoothing before peak search
  double rel_prominence = 0.3;     // prominence threshold as a fraction of the range
  // ecg_r only
  double qrs_low_hz = 5.0;
  double qrs_high_hz = 15.0;
  double integration_s = 0.150;
  double refine_s = 0.075;
};

PeakDetectorConfig preset_config(PeakPreset preset);

// ecg_r: band-pass 5-15 Hz, derivative, square, moving integration, adaptive
// signal/noise threshold with a 200 ms refractory period, then refinement to
// the local maximum of the input. Other presets: smoothed local maxima with a
// prominence floor and a minimum inter-peak distance.
PeakSet detect_peaks(std::span<const double> signal, double fs, PeakPreset preset);
PeakSet detect_peaks(std::span<const double> signal, double fs, PeakPreset preset,
                     const PeakDetectorConfig& config);

// Prominence of each peak in the scipy sense: height above the higher of the
// two bases reached before a strictly higher sample (or the signal edge).
std::vector<double> peak_prominences(std::span<const double> x, std::span<const std::size_t> peaks);

struct RateSeries {
  std::vector<double> per_sample;     // beats (or blinks) per minute at every sample
  std::vector<double> instantaneous;  // 60 / IBI for each consecutive peak pair
  std::vector<double> midpoints;      // sample position of each instantaneous value
  double mean_rate = 0.0;
};

RateSeries rate_series(const PeakSet& peaks, double fs, std::size_t n_samples);

struct BeatWindowConfig {
  double pre_s = 0.25;
  double post_s = 0.45;
  bool ecg_landmarks = true;
  // Landmark search windows relative to the R peak, in seconds.
  double q_search_s = 0.080;
  double s_search_s = 0.080;
  double p_from_s = 0.250;
  double p_to_s = 0.080;
  double t_from_s = 0.120;
  double t_to_s = 0.400;
};

BeatWindowConfig ppg_beat_window();
BeatWindowConfig eog_blink_window();

struct BeatEnsemble {
  std::vector<std::vector<double>> beats;  // equal length; clipped beats dropped
  std::vector<std::size_t> beat_peaks;     // peak index of each kept beat
  std::vector<double> mean_beat;
  std::vector<double> median_beat;
  std::size_t peak_offset = 0;             // index of the peak inside a beat
  std::map<char, std::size_t> landmarks;   // 'P','Q','S','T' on the mean beat
};

BeatEnsemble segment_beats(std::span<const double> signal, const PeakSet& peaks, double fs,
                           const BeatWindowConfig& config = {});

struct ScrEvent {
  std::size_t onset = 0;
  std::size_t peak = 0;
  std::optional<std::size_t> half_recovery;
};

struct EdaConfig {
  double tonic_window_s = 4.0;
  double min_prominence = 0.01;
  double rel_prominence = 0.1;  // fraction of the largest phasic value
  double clean_lowpass_hz = 3.0;
};

struct EdaDecomposition {
  std::vector<double> cleaned;
  std::vector<double> tonic;   // SCL
  std::vector<double> phasic;  // SCR; tonic + phasic == cleaned
  std::vector<ScrEvent> scr_events;
};

EdaDecomposition eda_decompose(std::span<const double> signal, double fs, const EdaConfig& config = {});

struct EmgConfig {
  double rms_window_s = 0.025;
  double threshold_std = 1.0;
  double min_segment_s = 0.020;
  double merge_gap_s = 0.020;
  // Envelopes whose std/mean falls below this carry no activation at all.
  double min_contrast = 0.25;
};

struct ActivationSegments {
  std::vector<std::pair<std::size_t, std::size_t>> segments;  // [start, end), disjoint, ordered
  double threshold_used = 0.0;
  std::vector<double> envelope;
};

ActivationSegments emg_activation(std::span<const double> signal, double fs, const EmgConfig& config = {});

}  // namespace vizprompt::dsp
