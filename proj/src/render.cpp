#include "vizprompt/render.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "vizprompt/error.hpp"
#include "vizprompt/resources.hpp"

namespace vizprompt {

namespace {

#include "font_data.inc"

struct Font {
  int w;
  int h;
  const unsigned char* alpha;
};

constexpr Font kSmall{k_small_width, k_small_height, k_small_alpha};
constexpr Font kLarge{k_large_width, k_large_height, k_large_alpha};

constexpr Rgb kWhite{255, 255, 255};
constexpr Rgb kText{30, 30, 30};
constexpr Rgb kAxis{70, 70, 70};
constexpr Rgb kGrid{232, 232, 232};
constexpr Rgb kRawGray{185, 185, 185};
constexpr Rgb kSpan{222, 235, 247};

struct ToolInfo {
  VizToolId id;
  std::string_view key;
  std::string_view name;
  std::optional<Modality> modality;
};

constexpr std::array<ToolInfo, kToolCount> kTools{{
    {VizToolId::raw_waveform, "raw_waveform", "raw waveform", std::nullopt},
    {VizToolId::spectrogram, "spectrogram", "spectrogram", std::nullopt},
    {VizToolId::psd, "psd", "signal power spectrum density", std::nullopt},
    {VizToolId::eda_signal, "eda_signal", "EDA signal", Modality::eda},
    {VizToolId::eda_scr, "eda_scr", "EDA skin conductance response (SCR)", Modality::eda},
    {VizToolId::eda_scl, "eda_scl", "EDA skin conductance level (SCL)", Modality::eda},
    {VizToolId::ecg_signal_peaks, "ecg_signal_peaks", "ECG signal and peaks", Modality::ecg},
    {VizToolId::ecg_heart_rate, "ecg_heart_rate", "ECG heart rate", Modality::ecg},
    {VizToolId::ecg_individual_beats, "ecg_individual_beats", "ECG individual heartbeats", Modality::ecg},
    {VizToolId::ppg_signal_peaks, "ppg_signal_peaks", "PPG signal and peaks", Modality::ppg},
    {VizToolId::ppg_heart_rate, "ppg_heart_rate", "PPG heart rate", Modality::ppg},
    {VizToolId::ppg_individual_beats, "ppg_individual_beats", "PPG individual heartbeats", Modality::ppg},
    {VizToolId::emg_signal, "emg_signal", "EMG signal", Modality::emg},
    {VizToolId::emg_activation, "emg_activation", "EMG muscle activation", Modality::emg},
    {VizToolId::eog_signal, "eog_signal", "EOG signal", Modality::eog},
    {VizToolId::eog_blink_rate, "eog_blink_rate", "EOG blink rate", Modality::eog},
    {VizToolId::eog_individual_blinks, "eog_individual_blinks", "EOG individual blinks", Modality::eog},
}};

const ToolInfo& info(VizToolId id) { return kTools[static_cast<std::size_t>(id)]; }

Rgb mix(Rgb a, Rgb b, int alpha) {
  auto m = [alpha](int x, int y) { return static_cast<std::uint8_t>((x * (255 - alpha) + y * alpha + 127) / 255); };
  return {m(a.r, b.r), m(a.g, b.g), m(a.b, b.b)};
}

class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h * 3, 255) { reset_clip(); }

  void clip(const PixelRect& r) { clip_ = r; }
  void reset_clip() { clip_ = {0, 0, w_ - 1, h_ - 1}; }

  void blend(int x, int y, Rgb c, int alpha) {
    if (alpha <= 0 || x < clip_.x0 || x > clip_.x1 || y < clip_.y0 || y > clip_.y1) return;
    auto* p = &px_[(static_cast<std::size_t>(y) * w_ + x) * 3];
    const Rgb out = mix({p[0], p[1], p[2]}, c, std::min(alpha, 255));
    p[0] = out.r;
    p[1] = out.g;
    p[2] = out.b;
  }
  void set(int x, int y, Rgb c) { blend(x, y, c, 255); }

  void fill_rect(int x0, int y0, int x1, int y1, Rgb c, int alpha = 255) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) blend(x, y, c, alpha);
  }

  void stroke_rect(const PixelRect& r, Rgb c) {
    fill_rect(r.x0, r.y0, r.x1, r.y0, c);
    fill_rect(r.x0, r.y1, r.x1, r.y1, c);
    fill_rect(r.x0, r.y0, r.x0, r.y1, c);
    fill_rect(r.x1, r.y0, r.x1, r.y1, c);
  }

  void line(double fx0, double fy0, double fx1, double fy1, Rgb c, int width) {
    int x0 = static_cast<int>(std::lround(fx0)), y0 = static_cast<int>(std::lround(fy0));
    const int x1 = static_cast<int>(std::lround(fx1)), y1 = static_cast<int>(std::lround(fy1));
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    const int lo = -(width - 1) / 2, hi = width / 2;
    while (true) {
      for (int oy = lo; oy <= hi; ++oy)
        for (int ox = lo; ox <= hi; ++ox) set(x0 + ox, y0 + oy, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void dashed_hline(int x0, int x1, int y, Rgb c, int width) {
    for (int x = x0; x <= x1; ++x) {
      if ((x - x0) % 10 < 6) {
        for (int k = 0; k < width; ++k) set(x, y + k - (width - 1) / 2, c);
      }
    }
  }

  void dot(double fcx, double fcy, int r, Rgb c) {
    const int cx = static_cast<int>(std::lround(fcx)), cy = static_cast<int>(std::lround(fcy));
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        if (dx * dx + dy * dy <= r * r + r) set(cx + dx, cy + dy, c);
  }

  void glyph(int x, int y, char ch, const Font& f, Rgb c, bool vertical) {
    const auto code = static_cast<unsigned char>(ch);
    const int index = (code >= 32 && code <= 126) ? code - 32 : '?' - 32;
    const unsigned char* a = f.alpha + static_cast<std::size_t>(index) * f.w * f.h;
    for (int gy = 0; gy < f.h; ++gy) {
      for (int gx = 0; gx < f.w; ++gx) {
        const int alpha = a[gy * f.w + gx];
        if (!alpha) continue;
        // Vertical text reads bottom to top: glyph x runs up, glyph y runs right.
        if (vertical) {
          blend(x + gy, y - gx, c, alpha);
        } else {
          blend(x + gx, y + gy, c, alpha);
        }
      }
    }
  }

  void text(int x, int y, std::string_view s, const Font& f, Rgb c) {
    for (char ch : s) {
      glyph(x, y, ch, f, c, false);
      x += f.w;
    }
  }

  // (x, y) is the bottom-left corner of the rotated text box.
  void text_vertical(int x, int y, std::string_view s, const Font& f, Rgb c) {
    for (char ch : s) {
      glyph(x, y, ch, f, c, true);
      y -= f.w;
    }
  }

  PlotImage finish(VizToolId tool, std::string title, std::string subtitle) && {
    PlotImage img;
    img.width_px = w_;
    img.height_px = h_;
    img.rgb = std::move(px_);
    img.producing_tool = tool;
    img.title = std::move(title);
    img.subtitle = std::move(subtitle);
    return img;
  }

  int width() const { return w_; }
  int height() const { return h_; }

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
  PixelRect clip_;
};

int text_width(std::string_view s, const Font& f) { return static_cast<int>(s.size()) * f.w; }

std::string fit_text(std::string s, const Font& f, int max_px) {
  const auto max_chars = static_cast<std::size_t>(std::max(0, max_px / f.w));
  if (s.size() <= max_chars) return s;
  if (max_chars <= 3) return s.substr(0, max_chars);
  return s.substr(0, max_chars - 3) + "...";
}

std::string format_number(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s.find_first_not_of("-0.") == std::string::npos && s[0] == '-') s.erase(0, 1);
  return s;
}

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

Range padded(double lo, double hi, double frac) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) return {0.0, 1.0};
  const double span = hi - lo;
  if (span <= 1e-12 * std::max(1.0, std::abs(lo))) {
    const double half = std::max(0.5, 0.1 * std::abs(lo));
    return {lo - half, hi + half};
  }
  return {lo - frac * span, hi + frac * span};
}

struct Ticks {
  std::vector<double> values;
  int decimals = 0;
};

Ticks nice_ticks(Range r, int target) {
  Ticks t;
  const double span = r.hi - r.lo;
  if (!(span > 0) || target < 1) return t;
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double norm = raw / mag;
  const double step = (norm < 1.5 ? 1.0 : norm < 3.0 ? 2.0 : norm < 7.0 ? 5.0 : 10.0) * mag;
  const double first = std::ceil(r.lo / step - 1e-9);
  for (int i = 0;; ++i) {
    const double v = (first + i) * step;
    if (v > r.hi + 1e-9 * step) break;
    t.values.push_back(std::abs(v) < 1e-9 * step ? 0.0 : v);
  }
  t.decimals = std::max(0, -static_cast<int>(std::floor(std::log10(step) + 1e-9)));
  return t;
}

struct Axes {
  PixelRect rect;
  Range x, y;

  double px(double v) const { return rect.x0 + (v - x.lo) / (x.hi - x.lo) * (rect.x1 - rect.x0); }
  double py(double v) const { return rect.y1 - (v - y.lo) / (y.hi - y.lo) * (rect.y1 - rect.y0); }
};

enum class Mark { line, dashed_line, dots, thick_line };

struct Series {
  std::vector<double> x, y;
  Rgb color;
  Mark mark = Mark::line;
  int dot_radius = 3;
};

struct Annotation {
  double x, y;
  std::string text;
  bool above = true;
};

struct LegendEntry {
  std::string label;
  Rgb color;
  Mark mark = Mark::line;
};

struct Pane {
  std::vector<Series> series;
  std::vector<std::pair<double, double>> spans;  // shaded x intervals
  std::vector<double> vlines;
  Rgb vline_color{};
  std::vector<Annotation> annotations;
  std::string note;
  std::string xlabel = "Time (s)";
  std::string ylabel = "Amplitude";
  std::optional<Range> x_range, y_range;
};

struct Heatmap {
  const dsp::SpectrogramMatrix* m = nullptr;
  std::vector<double> shown;  // freq x time, already scaled for display
  double vmin = 0.0, vmax = 1.0;
  std::string ylabel;
};

Rgb viridis(double t) {
  static constexpr Rgb anchors[] = {{68, 1, 84},    {71, 44, 122},  {59, 81, 139},
                                    {44, 113, 142}, {33, 144, 141}, {39, 173, 129},
                                    {92, 200, 99},  {170, 220, 50}, {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 8.0;
  const int i = std::min(7, static_cast<int>(t));
  const int a = static_cast<int>(std::lround((t - i) * 255.0));
  return mix(anchors[i], anchors[i + 1], a);
}

std::vector<double> time_axis(std::size_t n, double fs) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<double>(i) / fs;
  return t;
}

Range data_range(const std::vector<Series>& series, bool use_x) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series) {
    for (double v : use_x ? s.x : s.y) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (lo > hi) return {0.0, 1.0};
  return {lo, hi};
}

class Renderer {
 public:
  Renderer(const RenderStyle& style, VizToolId tool)
      : style_(style), canvas_(style.width_px, style.height_px), tool_(tool), subtitle_(display_name(tool)) {}
  Renderer(const RenderStyle& style, std::string subtitle)
      : style_(style), canvas_(style.width_px, style.height_px), subtitle_(std::move(subtitle)) {}

  void header(const std::string& title, const std::vector<LegendEntry>& legend) {
    const int w = canvas_.width();
    const std::string t = fit_text(title, kLarge, w - 8);
    canvas_.text((w - text_width(t, kLarge)) / 2, 3, t, kLarge, kText);
    const std::string& sub = subtitle_;
    canvas_.text((w - text_width(sub, kSmall)) / 2, 3 + kLarge.h + 1, sub, kSmall, kAxis);
    draw_legend(legend, 3 + kLarge.h + 1 + kSmall.h + 2);
  }

  std::vector<PixelRect> pane_rects(std::size_t n, int extra_right = 0) const {
    std::vector<PixelRect> out;
    const int x0 = style_.margin_left, x1 = style_.width_px - 1 - style_.margin_right - extra_right;
    const int top = style_.margin_top, bottom = style_.height_px - 1 - style_.margin_bottom;
    const int gaps = static_cast<int>(n - 1) * style_.pane_gap;
    const int h = std::max(8, (bottom - top - gaps) / static_cast<int>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const int y0 = top + static_cast<int>(i) * (h + style_.pane_gap);
      out.push_back({x0, y0, x1, y0 + h - 1});
    }
    return out;
  }

  void draw_pane(const Pane& pane, const PixelRect& rect, bool x_tick_labels) {
    Axes ax{rect, pane.x_range.value_or(padded(data_range(pane.series, true).lo,
                                               data_range(pane.series, true).hi, style_.padding_fraction)),
            pane.y_range.value_or(padded(data_range(pane.series, false).lo, data_range(pane.series, false).hi,
                                         style_.padding_fraction))};
    if (pane.series.empty() && !pane.x_range) ax.x = {0.0, 1.0};
    if (pane.series.empty() && !pane.y_range) ax.y = {0.0, 1.0};
    const auto xt = nice_ticks(ax.x, 6);
    const auto yt = nice_ticks(ax.y, std::max(2, (rect.y1 - rect.y0) / 45));

    canvas_.clip(rect);
    for (double v : xt.values) canvas_.fill_rect(static_cast<int>(std::lround(ax.px(v))), rect.y0,
                                                  static_cast<int>(std::lround(ax.px(v))), rect.y1, kGrid);
    for (double v : yt.values) canvas_.fill_rect(rect.x0, static_cast<int>(std::lround(ax.py(v))), rect.x1,
                                                  static_cast<int>(std::lround(ax.py(v))), kGrid);
    for (const auto& [a, b] : pane.spans) {
      canvas_.fill_rect(static_cast<int>(std::lround(ax.px(a))), rect.y0, static_cast<int>(std::lround(ax.px(b))),
                        rect.y1, kSpan);
    }
    for (double v : pane.vlines) {
      const int x = static_cast<int>(std::lround(ax.px(v)));
      canvas_.fill_rect(x, rect.y0, x, rect.y1, pane.vline_color);
    }
    for (const auto& s : pane.series) draw_series(s, ax);
    for (const auto& a : pane.annotations) {
      const int x = static_cast<int>(std::lround(ax.px(a.x))) - kSmall.w / 2;
      const int y = static_cast<int>(std::lround(ax.py(a.y))) + (a.above ? -kSmall.h - 4 : 4);
      canvas_.text(x, y, a.text, kSmall, kText);
    }
    canvas_.reset_clip();
    if (!pane.note.empty()) draw_note(pane.note, rect);
    canvas_.stroke_rect(rect, kAxis);
    draw_ticks(ax, xt, yt, x_tick_labels);
    if (x_tick_labels) {
      const std::string xl = fit_text(pane.xlabel, kSmall, rect.x1 - rect.x0);
      canvas_.text((rect.x0 + rect.x1 - text_width(xl, kSmall)) / 2, rect.y1 + 6 + kSmall.h, xl, kSmall, kText);
    }
    const std::string yl = fit_text(pane.ylabel, kSmall, rect.y1 - rect.y0);
    canvas_.text_vertical(2, (rect.y0 + rect.y1 + text_width(yl, kSmall)) / 2, yl, kSmall, kText);
  }

  void draw_heatmap(const Heatmap& h, const PixelRect& rect, bool x_tick_labels, const std::string& channel) {
    const auto& m = *h.m;
    const double hop = m.times_s.size() > 1 ? m.times_s[1] - m.times_s[0] : 2.0 * m.times_s[0];
    Axes ax{rect, {m.times_s.front() - hop / 2.0, m.times_s.back() + hop / 2.0}, {0.0, m.freqs_hz.back()}};
    const double df = m.freqs_hz.size() > 1 ? m.freqs_hz[1] : 1.0;
    for (int y = rect.y0; y <= rect.y1; ++y) {
      const double f = ax.y.lo + (rect.y1 - y + 0.5) / (rect.y1 - rect.y0 + 1) * (ax.y.hi - ax.y.lo);
      const auto bin = std::min(m.freq_bins - 1, static_cast<std::size_t>(std::max(0.0, std::floor(f / df + 0.5))));
      for (int x = rect.x0; x <= rect.x1; ++x) {
        const double t = ax.x.lo + (x - rect.x0 + 0.5) / (rect.x1 - rect.x0 + 1) * (ax.x.hi - ax.x.lo);
        const auto frame = std::min(m.time_frames - 1,
                                    static_cast<std::size_t>(std::max(0.0, std::floor((t - ax.x.lo) / hop))));
        const double v = h.shown[bin * m.time_frames + frame];
        canvas_.set(x, y, viridis(h.vmax > h.vmin ? (v - h.vmin) / (h.vmax - h.vmin) : 0.0));
      }
    }
    canvas_.stroke_rect(rect, kAxis);
    draw_ticks(ax, nice_ticks(ax.x, 6), nice_ticks(ax.y, std::max(2, (rect.y1 - rect.y0) / 45)), x_tick_labels);
    if (x_tick_labels) {
      canvas_.text((rect.x0 + rect.x1 - text_width("Time (s)", kSmall)) / 2, rect.y1 + 6 + kSmall.h, "Time (s)",
                   kSmall, kText);
    }
    const std::string yl = fit_text(channel.empty() ? "Frequency (Hz)" : channel + " freq (Hz)", kSmall,
                                    rect.y1 - rect.y0);
    canvas_.text_vertical(2, (rect.y0 + rect.y1 + text_width(yl, kSmall)) / 2, yl, kSmall, kText);
    // Colorbar to the right of the pane.
    const PixelRect bar{rect.x1 + 6, rect.y0, rect.x1 + 14, rect.y1};
    for (int y = bar.y0; y <= bar.y1; ++y) {
      const double t = static_cast<double>(bar.y1 - y) / std::max(1, bar.y1 - bar.y0);
      canvas_.fill_rect(bar.x0, y, bar.x1, y, viridis(t));
    }
    canvas_.stroke_rect(bar, kAxis);
    const Range vr{h.vmin, h.vmax > h.vmin ? h.vmax : h.vmin + 1.0};
    const auto ct = nice_ticks(vr, std::max(3, (rect.y1 - rect.y0) / 40));
    for (double v : ct.values) {
      const int y = static_cast<int>(std::lround(bar.y1 - (v - vr.lo) / (vr.hi - vr.lo) * (bar.y1 - bar.y0)));
      canvas_.fill_rect(bar.x1 + 1, y, bar.x1 + 3, y, kAxis);
      const std::string s = format_number(v, ct.decimals);
      canvas_.text(bar.x1 + 5, y - kSmall.h / 2, fit_text(s, kSmall, canvas_.width() - bar.x1 - 6), kSmall, kText);
    }
  }

  PlotImage finish(const std::string& title, std::vector<std::string> legend, std::vector<PixelRect> panes) && {
    auto img = std::move(canvas_).finish(tool_, title, subtitle_);
    img.legend = std::move(legend);
    img.panes = std::move(panes);
    return img;
  }

 private:
  void draw_series(const Series& s, const Axes& ax) {
    const std::size_t n = std::min(s.x.size(), s.y.size());
    switch (s.mark) {
      case Mark::dots:
        for (std::size_t i = 0; i < n; ++i) canvas_.dot(ax.px(s.x[i]), ax.py(s.y[i]), s.dot_radius, s.color);
        break;
      case Mark::dashed_line:
        if (n) canvas_.dashed_hline(ax.rect.x0, ax.rect.x1, static_cast<int>(std::lround(ax.py(s.y[0]))), s.color,
                                    style_.line_width + 1);
        break;
      case Mark::line:
      case Mark::thick_line: {
        const int width = style_.line_width + (s.mark == Mark::thick_line ? 1 : 0);
        if (n == 1) canvas_.dot(ax.px(s.x[0]), ax.py(s.y[0]), width, s.color);
        for (std::size_t i = 1; i < n; ++i) {
          canvas_.line(ax.px(s.x[i - 1]), ax.py(s.y[i - 1]), ax.px(s.x[i]), ax.py(s.y[i]), s.color, width);
        }
        break;
      }
    }
  }

  void draw_ticks(const Axes& ax, const Ticks& xt, const Ticks& yt, bool x_labels) {
    const auto& r = ax.rect;
    for (double v : xt.values) {
      const int x = static_cast<int>(std::lround(ax.px(v)));
      canvas_.fill_rect(x, r.y1 + 1, x, r.y1 + 4, kAxis);
      if (!x_labels) continue;
      const std::string s = format_number(v, xt.decimals);
      canvas_.text(x - text_width(s, kSmall) / 2, r.y1 + 5, s, kSmall, kText);
    }
    for (double v : yt.values) {
      const int y = static_cast<int>(std::lround(ax.py(v)));
      canvas_.fill_rect(r.x0 - 4, y, r.x0 - 1, y, kAxis);
      const std::string s = fit_text(format_number(v, yt.decimals), kSmall, r.x0 - 6 - kSmall.h - 2);
      canvas_.text(r.x0 - 6 - text_width(s, kSmall), y - kSmall.h / 2, s, kSmall, kText);
    }
  }

  void draw_note(const std::string& note, const PixelRect& r) {
    const std::string s = fit_text(note, kSmall, r.x1 - r.x0 - 8);
    const int w = text_width(s, kSmall);
    const int x = (r.x0 + r.x1 - w) / 2, y = (r.y0 + r.y1 - kSmall.h) / 2;
    canvas_.fill_rect(x - 4, y - 3, x + w + 3, y + kSmall.h + 2, kWhite);
    canvas_.stroke_rect({x - 4, y - 3, x + w + 3, y + kSmall.h + 2}, kAxis);
    canvas_.text(x, y, s, kSmall, kText);
  }

  void draw_legend(const std::vector<LegendEntry>& entries, int y) {
    if (entries.empty()) return;
    constexpr int kSwatch = 14, kGap = 12;
    const int avail = canvas_.width() - 8;
    int label_budget = avail;
    auto total = [&](int budget) {
      int t = 0;
      for (const auto& e : entries) {
        t += kSwatch + 4 + std::min(text_width(e.label, kSmall), budget);
      }
      return t + kGap * static_cast<int>(entries.size() - 1);
    };
    while (label_budget > kSmall.w * 4 && total(label_budget) > avail) label_budget -= kSmall.w;
    int x = (canvas_.width() - std::min(total(label_budget), avail)) / 2;
    const int mid = y + kSmall.h / 2;
    for (const auto& e : entries) {
      switch (e.mark) {
        case Mark::dots: canvas_.dot(x + kSwatch / 2, mid, 3, e.color); break;
        case Mark::dashed_line:
          canvas_.fill_rect(x, mid, x + 5, mid + 1, e.color);
          canvas_.fill_rect(x + 9, mid, x + kSwatch - 1, mid + 1, e.color);
          break;
        case Mark::thick_line: canvas_.fill_rect(x, mid - 1, x + kSwatch - 1, mid + 1, e.color); break;
        case Mark::line: canvas_.fill_rect(x, mid, x + kSwatch - 1, mid, e.color); break;
      }
      x += kSwatch + 4;
      const std::string label = fit_text(e.label, kSmall, label_budget);
      canvas_.text(x, y, label, kSmall, kText);
      x += text_width(label, kSmall) + kGap;
    }
  }

  const RenderStyle& style_;
  Canvas canvas_;
  VizToolId tool_ = VizToolId::raw_waveform;
  std::string subtitle_;
};

Rgb tint(Rgb c) { return mix(c, kWhite, 150); }

// Marker color that stands out from the pane's line color.
Rgb accent(const RenderStyle& style, std::size_t channel) {
  const auto& p = style.channel_palette;
  if (p.size() < 2) return kText;
  return p[channel == 1 ? 0 : 1];
}

bool recoverable(const Error& e) {
  return e.kind() == ErrorKind::SignalTooShort || e.kind() == ErrorKind::TooFewPeaks;
}

std::string format_rate(double v, std::string_view unit) { return format_number(v, 1) + " " + std::string(unit); }

struct PhysioPlan {
  std::vector<Pane> panes;
  std::vector<LegendEntry> legend;
};

dsp::PeakPreset preset_for(VizToolId id) {
  switch (id) {
    case VizToolId::ecg_signal_peaks:
    case VizToolId::ecg_heart_rate:
    case VizToolId::ecg_individual_beats: return dsp::PeakPreset::ecg_r;
    case VizToolId::ppg_signal_peaks:
    case VizToolId::ppg_heart_rate:
    case VizToolId::ppg_individual_beats: return dsp::PeakPreset::ppg_systolic;
    default: return dsp::PeakPreset::eog_blink;
  }
}

Modality analysis_modality(VizToolId id) { return info(id).modality.value_or(Modality::generic); }

// Raw + cleaned + optional peak dots.
Pane signal_pane(std::span<const double> raw, double fs, VizToolId id, Rgb color, Rgb marker, bool with_peaks,
                 const std::string& ylabel) {
  Pane p;
  p.ylabel = ylabel;
  const auto t = time_axis(raw.size(), fs);
  const auto cleaned = dsp::clean_for_modality(raw, fs, analysis_modality(id));
  p.series.push_back({t, std::vector<double>(raw.begin(), raw.end()), kRawGray});
  p.series.push_back({t, cleaned, color});
  if (with_peaks) {
    try {
      const auto peaks = dsp::detect_peaks(raw, fs, preset_for(id));
      Series dots{{}, {}, marker, Mark::dots};
      for (auto i : peaks.indices) {
        dots.x.push_back(t[i]);
        dots.y.push_back(cleaned[i]);
      }
      p.series.push_back(std::move(dots));
    } catch (const Error& e) {
      if (!recoverable(e)) throw;
      p.note = "Signal too short for peak detection";
    }
  }
  return p;
}

Pane rate_pane(std::span<const double> raw, double fs, VizToolId id, Rgb color, Rgb marker, std::string& mean_label) {
  Pane p;
  const bool blinks = id == VizToolId::eog_blink_rate;
  p.ylabel = blinks ? "Blink rate (per min)" : "Heart rate (bpm)";
  const double duration = static_cast<double>(raw.size()) / fs;
  p.x_range = padded(0.0, duration, 0.0);
  try {
    const auto signal = blinks ? dsp::clean_for_modality(raw, fs, Modality::eog) : std::vector<double>(raw.begin(), raw.end());
    const auto peaks = dsp::detect_peaks(signal, fs, preset_for(id));
    const auto rate = dsp::rate_series(peaks, fs, raw.size());
    p.series.push_back({time_axis(raw.size(), fs), rate.per_sample, color, Mark::thick_line});
    p.series.push_back({{0.0, duration}, {rate.mean_rate, rate.mean_rate}, marker, Mark::dashed_line});
    const auto r = data_range(p.series, false);
    p.y_range = padded(std::min(r.lo, rate.mean_rate - 1.0), std::max(r.hi, rate.mean_rate + 1.0),
                       0.05);
    mean_label = "Mean: " + format_rate(rate.mean_rate, blinks ? "per min" : "bpm");
  } catch (const Error& e) {
    if (!recoverable(e)) throw;
    p.note = blinks ? "Too few blinks for a rate estimate" : "Too few beats for a rate estimate";
    mean_label = "Mean: n/a";
  }
  return p;
}

Pane beats_pane(std::span<const double> raw, double fs, VizToolId id, Rgb color, Rgb marker, std::string& count_label,
                std::string& rate_label) {
  Pane p;
  const bool blinks = id == VizToolId::eog_individual_blinks;
  p.xlabel = blinks ? "Time relative to blink peak (s)" : "Time relative to peak (s)";
  p.ylabel = "Amplitude";
  const auto cleaned = dsp::clean_for_modality(raw, fs, analysis_modality(id));
  const auto config = id == VizToolId::ecg_individual_beats   ? dsp::BeatWindowConfig{}
                      : id == VizToolId::ppg_individual_beats ? dsp::ppg_beat_window()
                                                              : dsp::eog_blink_window();
  try {
    const auto peaks = dsp::detect_peaks(blinks ? std::span<const double>(cleaned) : raw, fs, preset_for(id));
    const auto rate = dsp::rate_series(peaks, fs, raw.size());
    rate_label = (blinks ? "Blink rate: " : "Avg heart rate: ") +
                 format_rate(rate.mean_rate, blinks ? "per min" : "bpm");
    const auto ens = dsp::segment_beats(cleaned, peaks, fs, config);
    count_label = (blinks ? "Blinks (n=" : "Beats (n=") + std::to_string(ens.beats.size()) + ")";
    if (ens.beats.empty()) {
      p.note = blinks ? "No complete blinks in window" : "No complete beats in window";
      return p;
    }
    std::vector<double> rel(ens.beats.front().size());
    for (std::size_t k = 0; k < rel.size(); ++k) {
      rel[k] = (static_cast<double>(k) - static_cast<double>(ens.peak_offset)) / fs;
    }
    for (const auto& b : ens.beats) p.series.push_back({rel, b, tint(color)});
    p.series.push_back({rel, blinks ? ens.median_beat : ens.mean_beat, color, Mark::thick_line});
    p.x_range = padded(rel.front(), rel.back(), 0.0);
    if (config.ecg_landmarks) {
      Series marks{{}, {}, marker, Mark::dots};
      for (const auto& [name, idx] : ens.landmarks) {
        marks.x.push_back(rel[idx]);
        marks.y.push_back(ens.mean_beat[idx]);
        p.annotations.push_back({rel[idx], ens.mean_beat[idx], std::string(1, name), name == 'P' || name == 'T'});
      }
      p.series.push_back(std::move(marks));
    }
  } catch (const Error& e) {
    if (!recoverable(e)) throw;
    p.note = blinks ? "Too few blinks to segment" : "Too few beats to segment";
    count_label = blinks ? "Blinks (n=0)" : "Beats (n=0)";
    if (rate_label.empty()) rate_label = blinks ? "Blink rate: n/a" : "Avg heart rate: n/a";
  }
  return p;
}

Pane eda_pane(std::span<const double> raw, double fs, VizToolId id, const RenderStyle& style, std::size_t ch) {
  Pane p;
  p.ylabel = "Conductance (uS)";
  const auto t = time_axis(raw.size(), fs);
  try {
    const auto d = dsp::eda_decompose(raw, fs);
    if (id == VizToolId::eda_scl) {
      p.series.push_back({t, d.tonic, style.channel_palette[ch], Mark::thick_line});
      return p;
    }
    p.ylabel = "Phasic (uS)";
    p.series.push_back({t, d.phasic, style.channel_palette[ch]});
    const auto& pal = style.channel_palette;
    Series onsets{{}, {}, pal[2 % pal.size()], Mark::dots}, peaks{{}, {}, accent(style, ch), Mark::dots},
        recov{{}, {}, pal[3 % pal.size()], Mark::dots};
    for (const auto& e : d.scr_events) {
      onsets.x.push_back(t[e.onset]);
      onsets.y.push_back(d.phasic[e.onset]);
      peaks.x.push_back(t[e.peak]);
      peaks.y.push_back(d.phasic[e.peak]);
      if (e.half_recovery) {
        recov.x.push_back(t[*e.half_recovery]);
        recov.y.push_back(d.phasic[*e.half_recovery]);
      }
    }
    p.series.push_back(std::move(onsets));
    p.series.push_back(std::move(peaks));
    p.series.push_back(std::move(recov));
  } catch (const Error& e) {
    if (!recoverable(e)) throw;
    p.series.push_back({t, std::vector<double>(raw.begin(), raw.end()), kRawGray});
    p.note = "Signal too short for tonic/phasic decomposition";
  }
  return p;
}

Pane emg_activation_pane(std::span<const double> raw, double fs, Rgb color, Rgb marker) {
  Pane p;
  p.ylabel = "Amplitude (RMS)";
  const auto t = time_axis(raw.size(), fs);
  try {
    const auto cleaned = dsp::clean_for_modality(raw, fs, Modality::emg);
    const auto act = dsp::emg_activation(cleaned, fs);
    p.series.push_back({t, act.envelope, color, Mark::thick_line});
    p.series.push_back({{t.front(), t.back()}, {act.threshold_used, act.threshold_used}, kAxis, Mark::dashed_line});
    p.vline_color = marker;
    for (const auto& [a, b] : act.segments) {
      const double ta = t[a], tb = t[b - 1];
      p.spans.emplace_back(ta, tb);
      p.vlines.push_back(ta);
      p.vlines.push_back(tb);
    }
    const auto r = data_range(p.series, false);
    p.y_range = padded(std::min(0.0, r.lo), r.hi, 0.05);
  } catch (const Error& e) {
    if (!recoverable(e)) throw;
    p.series.push_back({t, std::vector<double>(raw.begin(), raw.end()), kRawGray});
    p.note = "Signal too short for activation analysis";
  }
  return p;
}

PhysioPlan physio_plan(const TimeSeries& s, VizToolId id, const RenderStyle& style) {
  PhysioPlan plan;
  const double fs = s.sampling_rate_hz();
  const auto& pal = style.channel_palette;
  std::string extra_a, extra_b;
  for (std::size_t ch = 0; ch < s.channel_count(); ++ch) {
    const auto raw = s.values(ch);
    const Rgb color = pal[ch];
    const Rgb marker = accent(style, ch);
    Pane pane;
    switch (id) {
      case VizToolId::eda_signal:
        pane = signal_pane(raw, fs, id, color, marker, false, "Conductance (uS)");
        break;
      case VizToolId::emg_signal: pane = signal_pane(raw, fs, id, color, marker, false, "Amplitude"); break;
      case VizToolId::ecg_signal_peaks:
      case VizToolId::ppg_signal_peaks:
      case VizToolId::eog_signal: pane = signal_pane(raw, fs, id, color, marker, true, "Amplitude"); break;
      case VizToolId::eda_scr:
      case VizToolId::eda_scl: pane = eda_pane(raw, fs, id, style, ch); break;
      case VizToolId::ecg_heart_rate:
      case VizToolId::ppg_heart_rate:
      case VizToolId::eog_blink_rate: {
        std::string mean_label;
        pane = rate_pane(raw, fs, id, color, marker, mean_label);
        if (ch == 0) extra_a = mean_label;
        break;
      }
      case VizToolId::ecg_individual_beats:
      case VizToolId::ppg_individual_beats:
      case VizToolId::eog_individual_blinks: {
        std::string count, rate;
        pane = beats_pane(raw, fs, id, color, marker, count, rate);
        if (ch == 0) {
          extra_a = count;
          extra_b = rate;
        }
        break;
      }
      case VizToolId::emg_activation: pane = emg_activation_pane(raw, fs, color, marker); break;
      default: break;
    }
    if (s.channel_count() > 1) pane.ylabel = s.channels()[ch].name + ": " + pane.ylabel;
    plan.panes.push_back(std::move(pane));
  }

  const Rgb c0 = pal[0], m0 = accent(style, 0);
  auto& lg = plan.legend;
  switch (id) {
    case VizToolId::eda_signal:
    case VizToolId::emg_signal:
      lg = {{"Raw", kRawGray}, {"Cleaned", c0}};
      break;
    case VizToolId::ecg_signal_peaks: lg = {{"Raw", kRawGray}, {"Cleaned", c0}, {"R-peaks", m0, Mark::dots}}; break;
    case VizToolId::ppg_signal_peaks:
      lg = {{"Raw", kRawGray}, {"Cleaned", c0}, {"Systolic peaks", m0, Mark::dots}};
      break;
    case VizToolId::eog_signal: lg = {{"Raw", kRawGray}, {"Cleaned", c0}, {"Blinks", m0, Mark::dots}}; break;
    case VizToolId::eda_scr:
      lg = {{"Phasic (SCR)", c0},
            {"Onsets", pal[2 % pal.size()], Mark::dots},
            {"Peaks", m0, Mark::dots},
            {"Half recovery", pal[3 % pal.size()], Mark::dots}};
      break;
    case VizToolId::eda_scl: lg = {{"Tonic (SCL)", c0, Mark::thick_line}}; break;
    case VizToolId::ecg_heart_rate:
    case VizToolId::ppg_heart_rate: lg = {{"Heart rate", c0, Mark::thick_line}, {extra_a, m0, Mark::dashed_line}}; break;
    case VizToolId::eog_blink_rate: lg = {{"Blink rate", c0, Mark::thick_line}, {extra_a, m0, Mark::dashed_line}}; break;
    case VizToolId::ecg_individual_beats:
      lg = {{extra_a, tint(c0)}, {"Average beat", c0, Mark::thick_line}, {"P/Q/S/T", m0, Mark::dots}, {extra_b, kText, Mark::line}};
      break;
    case VizToolId::ppg_individual_beats:
      lg = {{extra_a, tint(c0)}, {"Average beat", c0, Mark::thick_line}, {extra_b, kText, Mark::line}};
      break;
    case VizToolId::eog_individual_blinks:
      lg = {{extra_a, tint(c0)}, {"Median blink", c0, Mark::thick_line}, {extra_b, kText, Mark::line}};
      break;
    case VizToolId::emg_activation:
      lg = {{"Amplitude", c0, Mark::thick_line}, {"Threshold", kAxis, Mark::dashed_line}, {"Activated", m0}};
      break;
    default: break;
  }
  return plan;
}

std::vector<std::string> labels_of(const std::vector<LegendEntry>& entries) {
  std::vector<std::string> out;
  for (const auto& e : entries) out.push_back(e.label);
  return out;
}

}  // namespace

const std::array<VizToolId, kToolCount>& all_tool_ids() {
  static const std::array<VizToolId, kToolCount> ids = [] {
    std::array<VizToolId, kToolCount> a{};
    for (std::size_t i = 0; i < kToolCount; ++i) a[i] = kTools[i].id;
    return a;
  }();
  return ids;
}

std::string_view to_string(VizToolId id) { return info(id).key; }

VizToolId viz_tool_from_string(std::string_view id) {
  for (const auto& t : kTools) {
    if (t.key == id) return t.id;
  }
  std::string valid;
  for (const auto& t : kTools) valid += (valid.empty() ? "" : ", ") + std::string(t.key);
  throw Error(ErrorKind::UnknownTool, "unknown tool '" + std::string(id) + "'; valid ids: " + valid);
}

std::string_view display_name(VizToolId id) { return info(id).name; }

std::optional<Modality> required_modality(VizToolId id) { return info(id).modality; }

bool compatible(VizToolId id, Modality modality) {
  const auto m = info(id).modality;
  return !m || *m == modality;
}

void VizTool::validate() const {
  if (description.empty()) throw Error(ErrorKind::BadParams, "tool description is empty");
  if (params.has_value() != (id == VizToolId::spectrogram)) {
    throw Error(ErrorKind::BadParams, "spectrogram parameters must be present exactly for the spectrogram tool");
  }
  if (params) params->validate();
}

VizTool builtin_tool(VizToolId id) {
  static const nlohmann::json catalog = nlohmann::json::parse(resource("data/catalog.json"));
  VizTool t;
  t.id = id;
  for (const auto& entry : catalog.at("tools")) {
    if (entry.at("id").get<std::string>() == to_string(id)) t.description = entry.at("description").get<std::string>();
  }
  if (id == VizToolId::spectrogram) t.params = dsp::SpectrogramParams{128, 64, 48, dsp::SpectrogramMode::psd};
  return t;
}

std::string_view to_string(Layout layout) { return layout == Layout::single_plot ? "single_plot" : "subplots"; }

Layout layout_from_string(std::string_view name) {
  if (name == "single_plot") return Layout::single_plot;
  if (name == "subplots") return Layout::subplots;
  throw Error(ErrorKind::BadParams, "unknown layout '" + std::string(name) + "' (single_plot|subplots)");
}

std::vector<Rgb> RenderStyle::default_palette() {
  return {{0, 114, 178}, {213, 94, 0},   {0, 158, 115}, {204, 121, 167},
          {230, 159, 0}, {86, 180, 233}, {240, 228, 66}, {0, 0, 0}};
}

void RenderStyle::validate() const {
  if (channel_palette.empty()) throw Error(ErrorKind::BadParams, "channel palette is empty");
  for (std::size_t i = 0; i < channel_palette.size(); ++i) {
    for (std::size_t j = i + 1; j < channel_palette.size(); ++j) {
      if (channel_palette[i] == channel_palette[j]) throw Error(ErrorKind::BadParams, "palette colors must be distinct");
    }
  }
  if (line_width < 1 || line_width > 8) throw Error(ErrorKind::BadParams, "line width must be in [1, 8]");
  if (margin_left < 0 || margin_right < 0 || margin_top < 0 || margin_bottom < 0 || pane_gap < 0 ||
      width_px - margin_left - margin_right < 64 || height_px - margin_top - margin_bottom < 64) {
    throw Error(ErrorKind::BadParams, "canvas too small for the margins");
  }
  if (!(padding_fraction >= 0.0 && padding_fraction < 1.0)) {
    throw Error(ErrorKind::BadParams, "padding fraction must be in [0, 1)");
  }
}

PlotImage::PlotImage(int width, int height, Rgb fill)
    : width_px(width), height_px(height), rgb(static_cast<std::size_t>(width) * height * 3) {
  for (std::size_t i = 0; i < rgb.size(); i += 3) {
    rgb[i] = fill.r;
    rgb[i + 1] = fill.g;
    rgb[i + 2] = fill.b;
  }
}

Rgb PlotImage::pixel(int x, int y) const {
  const auto* p = &rgb.at((static_cast<std::size_t>(y) * width_px + x) * 3);
  return {p[0], p[1], p[2]};
}

PlotImage render(const Window& window, const VizTool& tool, const std::string& title, const RenderStyle& style) {
  style.validate();
  tool.validate();
  const TimeSeries& s = window.series;
  if (!compatible(tool.id, s.modality()) && !style.allow_any_modality) {
    throw Error(ErrorKind::IncompatibleModality, std::string(to_string(tool.id)) + " needs " +
                                                     std::string(to_string(*required_modality(tool.id))) +
                                                     " data, got " + std::string(to_string(s.modality())));
  }
  if (s.channel_count() > style.channel_palette.size()) {
    throw Error(ErrorKind::TooManyChannels, std::to_string(s.channel_count()) + " channels but the palette has " +
                                                std::to_string(style.channel_palette.size()) + " colors");
  }
  const double fs = s.sampling_rate_hz();
  const auto names = s.channel_names();
  const auto& pal = style.channel_palette;
  Renderer r(style, tool.id);

  if (tool.id == VizToolId::spectrogram) {
    auto params = *tool.params;
    if (s.length() < static_cast<std::size_t>(params.nperseg)) {
      const int n = static_cast<int>(std::max<std::size_t>(s.length(), 2));
      params.noverlap = std::min(params.noverlap, n * 3 / 4);
      params.nperseg = n;
    }
    std::vector<dsp::SpectrogramMatrix> mats;
    std::vector<Heatmap> maps;
    for (std::size_t ch = 0; ch < s.channel_count(); ++ch) mats.push_back(dsp::spectrogram(s.values(ch), fs, params));
    std::string unit;
    for (const auto& m : mats) {
      Heatmap h;
      h.m = &m;
      h.shown.resize(m.values.size());
      const bool db = params.mode == dsp::SpectrogramMode::psd || params.mode == dsp::SpectrogramMode::magnitude ||
                      params.mode == dsp::SpectrogramMode::complex;
      const double scale = params.mode == dsp::SpectrogramMode::psd ? 10.0 : 20.0;
      for (std::size_t i = 0; i < m.values.size(); ++i) {
        h.shown[i] = db ? scale * std::log10(m.values[i] + 1e-20) : m.values[i];
      }
      h.vmax = *std::max_element(h.shown.begin(), h.shown.end());
      h.vmin = *std::min_element(h.shown.begin(), h.shown.end());
      if (db) {
        h.vmin = std::max(h.vmin, h.vmax - 80.0);
        for (auto& v : h.shown) v = std::max(v, h.vmin);
      }
      unit = params.mode == dsp::SpectrogramMode::psd       ? "Power (dB/Hz)"
             : params.mode == dsp::SpectrogramMode::angle   ? "Angle (rad)"
             : params.mode == dsp::SpectrogramMode::phase   ? "Unwrapped phase (rad)"
                                                            : "Magnitude (dB)";
      maps.push_back(std::move(h));
    }
    std::vector<LegendEntry> legend;
    for (std::size_t ch = 0; ch < names.size(); ++ch) legend.push_back({names[ch], pal[ch], Mark::thick_line});
    legend.push_back({unit + ", mode=" + std::string(dsp::to_string(params.mode)), kText, Mark::line});
    r.header(title, legend);
    const auto rects = r.pane_rects(maps.size(), 46);
    for (std::size_t i = 0; i < maps.size(); ++i) {
      r.draw_heatmap(maps[i], rects[i], i + 1 == maps.size(), maps.size() > 1 ? names[i] : "");
    }
    return std::move(r).finish(title, labels_of(legend), rects);
  }

  std::vector<Pane> panes;
  std::vector<LegendEntry> legend;
  if (tool.id == VizToolId::raw_waveform || tool.id == VizToolId::psd) {
    const bool spectral = tool.id == VizToolId::psd;
    for (std::size_t ch = 0; ch < s.channel_count(); ++ch) {
      Pane p;
      if (spectral) {
        const auto spec = dsp::power_spectral_density(s.values(ch), fs);
        std::vector<double> db(spec.psd.size());
        double top = -INFINITY;
        for (std::size_t k = 0; k < db.size(); ++k) {
          db[k] = 10.0 * std::log10(spec.psd[k] + 1e-20);
          top = std::max(top, db[k]);
        }
        for (auto& v : db) v = std::max(v, top - 120.0);
        p.series.push_back({spec.freqs_hz, db, pal[ch]});
        p.xlabel = "Frequency (Hz)";
        p.ylabel = "PSD (dB/Hz)";
      } else {
        const auto v = s.values(ch);
        p.series.push_back({time_axis(v.size(), fs), std::vector<double>(v.begin(), v.end()), pal[ch]});
      }
      legend.push_back({names[ch], pal[ch], Mark::thick_line});
      panes.push_back(std::move(p));
    }
    if (style.layout == Layout::single_plot && panes.size() > 1) {
      Pane merged = panes.front();
      for (std::size_t i = 1; i < panes.size(); ++i) merged.series.push_back(panes[i].series.front());
      panes = {std::move(merged)};
    } else if (panes.size() > 1) {
      for (std::size_t i = 0; i < panes.size(); ++i) panes[i].ylabel = names[i];
    }
  } else {
    auto plan = physio_plan(s, tool.id, style);
    panes = std::move(plan.panes);
    legend = std::move(plan.legend);
    if (s.channel_count() > 1) {
      for (std::size_t ch = 0; ch < names.size(); ++ch) legend.push_back({names[ch], pal[ch], Mark::thick_line});
    }
  }
  r.header(title, legend);
  const auto rects = r.pane_rects(panes.size());
  for (std::size_t i = 0; i < panes.size(); ++i) r.draw_pane(panes[i], rects[i], i + 1 == panes.size());
  return std::move(r).finish(title, labels_of(legend), rects);
}

PlotImage render_labeled_example(const Window& window, const VizTool& tool, const std::string& label,
                                 const RenderStyle& style) {
  if (label.empty()) throw Error(ErrorKind::EmptyLabel, "example label is empty");
  return render(window, tool, label, style);
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

void put_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

constexpr std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

int paeth(int a, int b, int c) {
  const int p = a + b - c, pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const PlotImage& image) {
  const std::size_t stride = static_cast<std::size_t>(image.width_px) * 3;
  if (image.width_px <= 0 || image.height_px <= 0 || image.rgb.size() != stride * image.height_px) {
    throw Error(ErrorKind::BadImage, "pixel buffer does not match dimensions");
  }
  // Sub filter on every row: deterministic and compresses flat plot areas well.
  std::vector<std::uint8_t> raw;
  raw.reserve((stride + 1) * image.height_px);
  for (int y = 0; y < image.height_px; ++y) {
    const auto* row = &image.rgb[y * stride];
    raw.push_back(1);
    for (std::size_t i = 0; i < stride; ++i) {
      raw.push_back(static_cast<std::uint8_t>(row[i] - (i >= 3 ? row[i - 3] : 0)));
    }
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw Error(ErrorKind::BadImage, "zlib compression failed");
  }
  z.resize(zlen);

  std::vector<std::uint8_t> out(std::begin(kPngSignature), std::end(kPngSignature));
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(image.width_px));
  put_u32(ihdr, static_cast<std::uint32_t>(image.height_px));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", z);
  put_chunk(out, "IEND", {});
  return out;
}

PlotImage decode_png(const std::vector<std::uint8_t>& bytes) {
  auto fail = [](const std::string& why) { return Error(ErrorKind::BadImage, why); };
  if (bytes.size() < 8 || !std::equal(std::begin(kPngSignature), std::end(kPngSignature), bytes.begin())) {
    throw fail("missing PNG signature");
  }
  std::size_t pos = 8;
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> idat;
  bool ended = false;
  while (pos + 12 <= bytes.size() && !ended) {
    const std::uint32_t len = get_u32(&bytes[pos]);
    if (pos + 12 + len > bytes.size()) throw fail("truncated chunk");
    const std::string type(reinterpret_cast<const char*>(&bytes[pos + 4]), 4);
    const std::uint8_t* data = &bytes[pos + 8];
    const auto crc = crc32(0L, &bytes[pos + 4], len + 4);
    if (crc != get_u32(&bytes[pos + 8 + len])) throw fail("CRC mismatch in " + type);
    if (type == "IHDR") {
      if (len != 13) throw fail("bad IHDR");
      width = static_cast<int>(get_u32(data));
      height = static_cast<int>(get_u32(data + 4));
      if (data[8] != 8 || (data[9] != 2 && data[9] != 6) || data[12] != 0) {
        throw fail("only 8-bit non-interlaced RGB/RGBA is supported");
      }
      channels = data[9] == 2 ? 3 : 4;
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data, data + len);
    } else if (type == "IEND") {
      ended = true;
    }
    pos += 12 + len;
  }
  if (!ended || width <= 0 || height <= 0) throw fail("incomplete PNG");
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  std::vector<std::uint8_t> raw((stride + 1) * height);
  uLongf rawlen = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &rawlen, idat.data(), static_cast<uLong>(idat.size())) != Z_OK || rawlen != raw.size()) {
    throw fail("corrupt image data");
  }
  std::vector<std::uint8_t> cur(stride), prev(stride, 0);
  PlotImage img(width, height);
  for (int y = 0; y < height; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = &raw[y * (stride + 1) + 1];
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<std::size_t>(channels) ? cur[i - channels] : 0;
      const int b = prev[i];
      const int c = i >= static_cast<std::size_t>(channels) ? prev[i - channels] : 0;
      int pred = 0;
      switch (filter) {
        case 0: pred = 0; break;
        case 1: pred = a; break;
        case 2: pred = b; break;
        case 3: pred = (a + b) / 2; break;
        case 4: pred = paeth(a, b, c); break;
        default: throw fail("unknown filter type");
      }
      cur[i] = static_cast<std::uint8_t>(src[i] + pred);
    }
    for (int x = 0; x < width; ++x) {
      std::memcpy(&img.rgb[(static_cast<std::size_t>(y) * width + x) * 3], &cur[static_cast<std::size_t>(x) * channels], 3);
    }
    std::swap(cur, prev);
  }
  return img;
}

PlotImage line_chart(const std::string& title, const std::string& subtitle, const std::vector<ChartPane>& panes,
                     const RenderStyle& style) {
  style.validate();
  if (panes.empty()) throw Error(ErrorKind::BadParams, "line chart needs at least one pane");
  Renderer r(style, subtitle);
  std::vector<LegendEntry> legend;
  std::vector<Pane> drawn;
  for (const auto& cp : panes) {
    if (cp.series.size() > style.channel_palette.size()) {
      throw Error(ErrorKind::TooManyChannels, "more chart series than palette colors");
    }
    Pane p;
    p.xlabel = cp.xlabel;
    p.ylabel = cp.ylabel;
    if (cp.y_range) p.y_range = Range{cp.y_range->first, cp.y_range->second};
    for (std::size_t i = 0; i < cp.series.size(); ++i) {
      const auto& s = cp.series[i];
      if (s.x.size() != s.y.size()) throw Error(ErrorKind::BadParams, "chart series '" + s.label + "' has unequal x and y");
      const Rgb color = style.channel_palette[i];
      p.series.push_back({s.x, s.y, color, Mark::line});
      p.series.push_back({s.x, s.y, color, Mark::dots});
      if (std::none_of(legend.begin(), legend.end(), [&](const LegendEntry& e) { return e.label == s.label; })) {
        legend.push_back({s.label, color, Mark::thick_line});
      }
    }
    drawn.push_back(std::move(p));
  }
  r.header(title, legend);
  const auto rects = r.pane_rects(drawn.size());
  for (std::size_t i = 0; i < drawn.size(); ++i) r.draw_pane(drawn[i], rects[i], true);
  return std::move(r).finish(title, labels_of(legend), rects);
}

void write_png(const PlotImage& image, const std::string& path) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::BadConfig, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace vizprompt
