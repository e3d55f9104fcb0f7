#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vizprompt/dsp.hpp"
#include "vizprompt/signal.hpp"

namespace vizprompt {

enum class VizToolId {
  raw_waveform,
  spectrogram,
  psd,
  eda_signal,
  eda_scr,
  eda_scl,
  ecg_signal_peaks,
  ecg_heart_rate,
  ecg_individual_beats,
  ppg_signal_peaks,
  ppg_heart_rate,
  ppg_individual_beats,
  emg_signal,
  emg_activation,
  eog_signal,
  eog_blink_rate,
  eog_individual_blinks,
};

inline constexpr std::size_t kToolCount = 17;

const std::array<VizToolId, kToolCount>& all_tool_ids();
std::string_view to_string(VizToolId id);
// Throws Error(UnknownTool).
VizToolId viz_tool_from_string(std::string_view id);
// Human-readable name drawn as the plot subtitle, e.g. "ECG individual heartbeats".
std::string_view display_name(VizToolId id);
// The modality a physiological tool analyses; nullopt for raw_waveform, spectrogram, psd.
std::optional<Modality> required_modality(VizToolId id);
bool compatible(VizToolId id, Modality modality);

struct VizTool {
  VizToolId id = VizToolId::raw_waveform;
  std::string description;
  std::optional<dsp::SpectrogramParams> params;  // present iff id == spectrogram

  // Throws Error(BadParams) when the invariants above do not hold.
  void validate() const;
};

// Tool with its catalog description (and default spectrogram params).
VizTool builtin_tool(VizToolId id);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

enum class Layout { single_plot, subplots };

std::string_view to_string(Layout layout);
Layout layout_from_string(std::string_view name);

struct RenderStyle {
  std::vector<Rgb> channel_palette = default_palette();
  Layout layout = Layout::single_plot;
  int width_px = 512;
  int height_px = 512;
  int margin_left = 62;
  int margin_right = 16;
  int margin_top = 56;
  int margin_bottom = 40;
  int pane_gap = 24;
  int line_width = 1;
  double padding_fraction = 0.05;
  // Render physiological tools on any modality instead of raising IncompatibleModality.
  bool allow_any_modality = false;

  // Okabe-Ito order, blue first.
  static std::vector<Rgb> default_palette();
  // Throws Error(BadParams) on empty palette, duplicate colors or a canvas
  // too small for the margins.
  void validate() const;
};

struct PixelRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive plot-area bounds
  bool operator==(const PixelRect&) const = default;
};

struct PlotImage {
  int width_px = 0;
  int height_px = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
  VizToolId producing_tool = VizToolId::raw_waveform;
  std::string title;
  std::string subtitle;
  std::vector<std::string> legend;
  std::vector<PixelRect> panes;

  PlotImage() = default;
  PlotImage(int width, int height, Rgb fill = {255, 255, 255});

  Rgb pixel(int x, int y) const;
  bool operator==(const PlotImage& other) const = default;
};

// Draws `window` with `tool` under `title`; the subtitle is display_name(tool.id).
// Spectrogram segments longer than the window shrink to the window length.
// Physiological tools draw one pane per channel whatever the layout, and a
// note instead of markers when too few peaks are found.
// Throws IncompatibleModality, TooManyChannels, BadParams.
PlotImage render(const Window& window, const VizTool& tool, const std::string& title,
                 const RenderStyle& style = {});

// As render, titled with the label. Throws EmptyLabel on "".
PlotImage render_labeled_example(const Window& window, const VizTool& tool, const std::string& label,
                                 const RenderStyle& style = {});

inline constexpr std::string_view kTargetTitle = "target data";

// Deterministic PNG (IHDR, IDAT, IEND only; 8-bit RGB).
std::vector<std::uint8_t> encode_png(const PlotImage& image);
// Decodes 8-bit RGB/RGBA PNGs without interlacing. Throws Error(BadImage).
PlotImage decode_png(const std::vector<std::uint8_t>& bytes);

void write_png(const PlotImage& image, const std::string& path);

struct ChartSeries {
  std::string label;
  std::vector<double> x, y;
};

struct ChartPane {
  std::string xlabel, ylabel;
  std::vector<ChartSeries> series;  // colored in palette order
  std::optional<std::pair<double, double>> y_range;
};

// Lines with dots at the data points, one pane per entry, x tick labels on
// every pane. Throws BadParams, TooManyChannels.
PlotImage line_chart(const std::string& title, const std::string& subtitle, const std::vector<ChartPane>& panes,
                     const RenderStyle& style = {});

}  // namespace vizprompt
