#include "vizprompt/prompt.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "vizprompt/dsp.hpp"
#include "vizprompt/error.hpp"
#include "vizprompt/resources.hpp"

namespace vizprompt {

namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\v' || c == '\f' || c == '\r'; }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_letter(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80; }
bool is_upper_class(unsigned char c) { return (c >= 'A' && c <= 'Z') || c >= 0x80; }
bool is_lower_class(unsigned char c) { return (c >= 'a' && c <= 'z') || c >= 0x80; }

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  // "-0.00" reads as a sign the data does not have.
  if (s[0] == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

// Shortest of up to 3 decimals: 100 -> "100", 2.5 -> "2.5".
std::string trimmed(double v) {
  std::string s = fixed(v, 3);
  if (s.find('.') != std::string::npos) {
    while (s.back() == '0') s.pop_back();
    if (s.back() == '.') s.pop_back();
  }
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

std::string strip_final_newline(std::string_view s) {
  if (!s.empty() && s.back() == '\n') s.remove_suffix(1);
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return std::string(s);
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return is_space(c); });
}

const Templates& pick(const Templates* t) { return t ? *t : Templates::builtin(); }

std::string answer_format(const TaskSpec& task, const Templates& t) {
  if (!task.answer_format_instruction.empty()) return task.answer_format_instruction;
  return fill_template(t.get("answer_format"), {{"labels", join(task.label_set, ", ")}});
}

void check_modalities(const std::vector<std::pair<Window, std::string>>& examples, const Window& target) {
  const Modality m = target.series.modality();
  for (const auto& [w, label] : examples) {
    if (w.series.modality() != m) {
      throw Error(ErrorKind::IncompatibleModality, "example window is " + std::string(to_string(w.series.modality())) +
                                                       " but the target is " + std::string(to_string(m)));
    }
  }
}

double window_duration(const Window& w) { return w.duration_s > 0.0 ? w.duration_s : w.series.duration_s(); }

// ---- o200k pre-tokenizer ----

std::size_t contraction_at(std::string_view s, std::size_t i) {
  if (i >= s.size() || s[i] != '\'') return 0;
  auto lower = [&](std::size_t k) { return k < s.size() ? static_cast<char>(std::tolower(static_cast<unsigned char>(s[k]))) : '\0'; };
  const char a = lower(i + 1), b = lower(i + 2);
  if ((a == 'r' && b == 'e') || (a == 'v' && b == 'e') || (a == 'l' && b == 'l')) return 3;
  if (a == 's' || a == 't' || a == 'm' || a == 'd') return 2;
  return 0;
}

bool prefix_char(unsigned char c) { return c != '\r' && c != '\n' && !is_letter(c) && !is_digit(c); }

// [prefix]? upper* lower+ contraction?  /  [prefix]? upper+ lower* contraction?
std::size_t match_word(std::string_view s, std::size_t i, bool upper_first) {
  const auto u = [&](std::size_t k) { return k < s.size() && is_upper_class(static_cast<unsigned char>(s[k])); };
  const auto l = [&](std::size_t k) { return k < s.size() && is_lower_class(static_cast<unsigned char>(s[k])); };
  for (int with_prefix = 1; with_prefix >= 0; --with_prefix) {
    std::size_t p = i;
    if (with_prefix) {
      if (i >= s.size() || !prefix_char(static_cast<unsigned char>(s[i]))) continue;
      ++p;
    }
    std::size_t j = p;
    while (u(j)) ++j;
    std::size_t k = j;
    while (l(k)) ++k;
    if (!upper_first) {
      if (k == j) {
        // Give back one byte from upper* when it is also lower-class.
        if (j > p && l(j - 1)) k = j;
        else continue;
      }
    } else if (j == p) {
      continue;
    }
    return k + contraction_at(s, k) - i;
  }
  return 0;
}

std::size_t match_at(std::string_view s, std::size_t i) {
  const auto c = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  if (std::size_t n = match_word(s, i, false)) return n;
  if (std::size_t n = match_word(s, i, true)) return n;
  if (is_digit(c(i))) {
    std::size_t k = i;
    while (k < s.size() && k - i < 3 && is_digit(c(k))) ++k;
    return k - i;
  }
  {
    std::size_t p = i;
    if (c(p) == ' ' && p + 1 < s.size()) ++p;
    auto other = [&](std::size_t k) { return k < s.size() && !is_space(c(k)) && !is_letter(c(k)) && !is_digit(c(k)); };
    if (!other(p)) p = i;
    if (other(p)) {
      std::size_t k = p;
      while (other(k)) ++k;
      while (k < s.size() && (c(k) == '\r' || c(k) == '\n' || c(k) == '/')) ++k;
      return k - i;
    }
  }
  std::size_t w = i;
  while (w < s.size() && is_space(c(w))) ++w;
  if (w == i) return 1;  // unreachable for well-formed classes; guarantees progress
  for (std::size_t k = w; k > i; --k) {
    if (c(k - 1) == '\r' || c(k - 1) == '\n') return k - i;
  }
  if (w == s.size()) return w - i;
  if (w - i >= 2) return w - i - 1;
  return w - i;
}

std::string b64decode(std::string_view in) {
  if (in.empty() || in.size() % 4 != 0) throw Error(ErrorKind::TokenizerUnavailable, "bad base64 token");
  std::string out(in.size() / 4 * 3, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(in.data()), static_cast<int>(in.size()));
  if (n < 0) throw Error(ErrorKind::TokenizerUnavailable, "bad base64 token");
  std::size_t pad = 0;
  if (in.back() == '=') ++pad;
  if (in.size() >= 2 && in[in.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

// ---- parity features ----

struct ChannelData {
  std::string prefix;  // "x " for multichannel windows, else ""
  std::span<const double> raw;
};

std::vector<ChannelData> channels_of(const Window& w) {
  std::vector<ChannelData> out;
  const auto& s = w.series;
  for (std::size_t ch = 0; ch < s.channel_count(); ++ch) {
    out.push_back({s.channel_count() > 1 ? s.channels()[ch].name + " " : "", s.values(ch)});
  }
  return out;
}

std::string series_text(std::span<const double> v, int decimals) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += fixed(v[i], decimals);
  }
  return out;
}

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

bool recoverable(const Error& e) {
  return e.kind() == ErrorKind::SignalTooShort || e.kind() == ErrorKind::TooFewPeaks;
}

Modality analysis_modality(VizToolId id) { return required_modality(id).value_or(Modality::generic); }

void spectrogram_features(const ChannelData& ch, double fs, const VizTool& tool, int decimals,
                          std::vector<FeatureBlock>& out) {
  auto params = tool.params.value_or(dsp::SpectrogramParams{});
  const int n = static_cast<int>(ch.raw.size());
  if (n < params.nperseg) {
    params.noverlap = std::min(params.noverlap, n * 3 / 4);
    params.nperseg = n;
  }
  const auto m = dsp::spectrogram(ch.raw, fs, params);
  std::vector<std::string> items;
  for (std::size_t f = 0; f < m.time_frames; ++f) {
    std::size_t best = 0;
    for (std::size_t b = 1; b < m.freq_bins; ++b) {
      if (m.at(b, f) > m.at(best, f)) best = b;
    }
    items.push_back(fixed(m.times_s[f], decimals) + ": " + fixed(m.freqs_hz[best], decimals));
  }
  out.push_back({ch.prefix + "Dominant frequency per frame (time s: frequency Hz)", join(items, ", ")});
}

void psd_features(const ChannelData& ch, double fs, int decimals, std::vector<FeatureBlock>& out) {
  const auto sp = dsp::power_spectral_density(ch.raw, fs);
  std::vector<std::size_t> peaks;
  for (std::size_t k = 1; k + 1 < sp.psd.size(); ++k) {
    if (sp.psd[k] > sp.psd[k - 1] && sp.psd[k] >= sp.psd[k + 1]) peaks.push_back(k);
  }
  if (sp.psd.size() > 1 && sp.psd[0] > sp.psd[1]) peaks.insert(peaks.begin(), 0);
  std::stable_sort(peaks.begin(), peaks.end(), [&](std::size_t a, std::size_t b) { return sp.psd[a] > sp.psd[b]; });
  if (peaks.size() > 5) peaks.resize(5);
  std::sort(peaks.begin(), peaks.end());
  std::vector<std::string> items;
  for (auto k : peaks) items.push_back(fixed(sp.freqs_hz[k], decimals) + ": " + fixed(10.0 * std::log10(std::max(sp.psd[k], 1e-300)), decimals));
  out.push_back({ch.prefix + "Strongest spectral peaks (frequency Hz: power dB)", items.empty() ? "none" : join(items, ", ")});
}

void physio_features(const ChannelData& ch, double fs, VizToolId id, int decimals, std::vector<FeatureBlock>& out) {
  const auto raw = ch.raw;
  const auto& P = ch.prefix;
  switch (id) {
    case VizToolId::eda_signal:
    case VizToolId::emg_signal:
      out.push_back({P + "Cleaned signal", series_text(dsp::clean_for_modality(raw, fs, analysis_modality(id)), decimals)});
      return;
    case VizToolId::ecg_signal_peaks:
    case VizToolId::ppg_signal_peaks:
    case VizToolId::eog_signal: {
      const auto cleaned = dsp::clean_for_modality(raw, fs, analysis_modality(id));
      out.push_back({P + "Cleaned signal", series_text(cleaned, decimals)});
      try {
        const auto peaks = dsp::detect_peaks(raw, fs, preset_for(id));
        out.push_back({P + "Detected peaks (index: value)", format_peaks(peaks.indices, cleaned, decimals)});
      } catch (const Error& e) {
        if (!recoverable(e)) throw;
        out.push_back({P + "Detected peaks (index: value)", "none (signal too short)"});
      }
      return;
    }
    case VizToolId::ecg_heart_rate:
    case VizToolId::ppg_heart_rate:
    case VizToolId::eog_blink_rate: {
      const bool blinks = id == VizToolId::eog_blink_rate;
      const std::string what = blinks ? "Blink rate" : "Heart rate";
      const std::string unit = blinks ? "per min" : "bpm";
      try {
        const auto signal = blinks ? dsp::clean_for_modality(raw, fs, Modality::eog) : std::vector<double>(raw.begin(), raw.end());
        const auto rate = dsp::rate_series(dsp::detect_peaks(signal, fs, preset_for(id)), fs, raw.size());
        std::vector<std::string> items;
        for (std::size_t k = 0; k < rate.instantaneous.size(); ++k) {
          items.push_back(fixed(rate.midpoints[k] / fs, decimals) + ": " + fixed(rate.instantaneous[k], decimals));
        }
        out.push_back({P + what + " (time s: " + unit + ")", join(items, ", ")});
        out.push_back({P + "Mean " + (blinks ? "blink rate" : "heart rate"), fixed(rate.mean_rate, decimals) + " " + unit});
      } catch (const Error& e) {
        if (!recoverable(e)) throw;
        out.push_back({P + what + " (time s: " + unit + ")", blinks ? "none (too few blinks)" : "none (too few beats)"});
      }
      return;
    }
    case VizToolId::ecg_individual_beats:
    case VizToolId::ppg_individual_beats:
    case VizToolId::eog_individual_blinks: {
      const bool blinks = id == VizToolId::eog_individual_blinks;
      const auto cleaned = dsp::clean_for_modality(raw, fs, analysis_modality(id));
      const auto config = id == VizToolId::ecg_individual_beats   ? dsp::BeatWindowConfig{}
                          : id == VizToolId::ppg_individual_beats ? dsp::ppg_beat_window()
                                                                  : dsp::eog_blink_window();
      const std::string shape = blinks ? "Median blink" : "Average beat";
      try {
        const auto peaks = dsp::detect_peaks(blinks ? std::span<const double>(cleaned) : raw, fs, preset_for(id));
        const auto rate = dsp::rate_series(peaks, fs, raw.size());
        const auto ens = dsp::segment_beats(cleaned, peaks, fs, config);
        out.push_back({P + (blinks ? "Blink count" : "Beat count"), std::to_string(ens.beats.size())});
        out.push_back({P + (blinks ? "Blink rate" : "Average heart rate"),
                       fixed(rate.mean_rate, decimals) + (blinks ? " per min" : " bpm")});
        if (ens.beats.empty()) return;
        const auto& beat = blinks ? ens.median_beat : ens.mean_beat;
        out.push_back({P + shape + " (samples around the peak at position " + std::to_string(ens.peak_offset) + ")",
                       series_text(beat, decimals)});
        if (config.ecg_landmarks && !ens.landmarks.empty()) {
          std::vector<std::string> items;
          for (const auto& [name, idx] : ens.landmarks) {
            const double t = (static_cast<double>(idx) - static_cast<double>(ens.peak_offset)) / fs;
            items.push_back(std::string(1, name) + " " + fixed(t, 3) + " s: " + fixed(beat[idx], decimals));
          }
          out.push_back({P + "Landmarks (time relative to R s: value)", join(items, ", ")});
        }
      } catch (const Error& e) {
        if (!recoverable(e)) throw;
        out.push_back({P + shape, blinks ? "none (too few blinks)" : "none (too few beats)"});
      }
      return;
    }
    case VizToolId::eda_scr:
    case VizToolId::eda_scl: {
      try {
        const auto d = dsp::eda_decompose(raw, fs);
        if (id == VizToolId::eda_scl) {
          out.push_back({P + "Tonic skin conductance level", series_text(d.tonic, decimals)});
          return;
        }
        out.push_back({P + "Phasic component", series_text(d.phasic, decimals)});
        std::vector<std::string> items;
        for (const auto& e : d.scr_events) {
          std::string item = "onset " + std::to_string(e.onset) + ", peak " + std::to_string(e.peak) + " (" +
                             fixed(d.phasic[e.peak], decimals) + ")";
          if (e.half_recovery) item += ", half recovery " + std::to_string(*e.half_recovery);
          items.push_back(item);
        }
        out.push_back({P + "Skin conductance responses (sample index)", items.empty() ? "none" : join(items, "; ")});
      } catch (const Error& e) {
        if (!recoverable(e)) throw;
        out.push_back({P + "Tonic/phasic decomposition", "none (signal too short)"});
      }
      return;
    }
    case VizToolId::emg_activation: {
      try {
        const auto act = dsp::emg_activation(dsp::clean_for_modality(raw, fs, Modality::emg), fs);
        out.push_back({P + "Amplitude envelope", series_text(act.envelope, decimals)});
        out.push_back({P + "Activation threshold", fixed(act.threshold_used, decimals)});
        std::vector<std::string> items;
        for (const auto& [a, b] : act.segments) items.push_back(std::to_string(a) + "-" + std::to_string(b - 1));
        out.push_back({P + "Activated segments (sample index)", items.empty() ? "none" : join(items, ", ")});
      } catch (const Error& e) {
        if (!recoverable(e)) throw;
        out.push_back({P + "Activated segments (sample index)", "none (signal too short)"});
      }
      return;
    }
    default: return;
  }
}

std::string render_blocks(const std::vector<FeatureBlock>& blocks) {
  std::string out;
  for (const auto& b : blocks) out += b.title + ":\n" + b.body + "\n";
  return out;
}

std::string example_text(std::size_t k, const std::string& label, const std::string& body) {
  return "Example " + std::to_string(k) + " (label: " + label + "):\n" + body + "\n";
}

}  // namespace

// ---- messages -------------------------------------------------------------

std::size_t PromptMessage::image_count() const {
  return static_cast<std::size_t>(
      std::count_if(parts.begin(), parts.end(), [](const Part& p) { return std::holds_alternative<ImagePart>(p); }));
}

std::size_t PromptMessage::text_part_count() const { return parts.size() - image_count(); }

std::string PromptMessage::joined_text() const {
  std::vector<std::string> texts;
  for (const auto& p : parts) {
    if (const auto* t = std::get_if<TextPart>(&p)) texts.push_back(t->text);
  }
  return join(texts, "\n\n");
}

void PromptMessage::validate() const {
  if (parts.empty()) throw Error(ErrorKind::BadParams, "a prompt message needs at least one part");
  if (role == Role::system && image_count() > 0) {
    throw Error(ErrorKind::BadParams, "images are only allowed in user messages");
  }
}

void TaskSpec::validate() const {
  if (label_set.empty()) throw Error(ErrorKind::BadParams, "label set is empty");
  std::set<std::string> seen;
  for (const auto& l : label_set) {
    if (l.empty()) throw Error(ErrorKind::BadParams, "empty label in label set");
    if (!seen.insert(l).second) throw Error(ErrorKind::BadParams, "duplicate label '" + l + "'");
  }
}

// ---- templates ------------------------------------------------------------

std::string fill_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const auto open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      return out;
    }
    const auto close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) throw Error(ErrorKind::TemplateError, "unterminated '{{' in template");
    std::string name(tmpl.substr(open + 2, close - open - 2));
    name.erase(0, name.find_first_not_of(' '));
    name.erase(name.find_last_not_of(' ') + 1);
    const auto it = values.find(name);
    if (it == values.end()) throw Error(ErrorKind::TemplateError, "no value for placeholder '" + name + "'");
    out.append(tmpl.substr(pos, open - pos));
    out += it->second;
    pos = close + 2;
  }
}

const std::string& Templates::get(const std::string& stem) const {
  const auto it = files.find(stem);
  if (it == files.end()) throw Error(ErrorKind::TemplateError, "no template named '" + stem + "'");
  return it->second;
}

const Templates& Templates::builtin() {
  static const Templates t = [] {
    Templates out;
    constexpr std::string_view dir = "templates/", ext = ".txt";
    for (auto name : resource_names()) {
      if (name.substr(0, dir.size()) != dir || name.size() < dir.size() + ext.size() ||
          name.substr(name.size() - ext.size()) != ext) {
        continue;
      }
      const std::string stem(name.substr(dir.size(), name.size() - dir.size() - ext.size()));
      out.files[stem] = strip_final_newline(resource(name));
    }
    return out;
  }();
  return t;
}

Templates Templates::load_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(ErrorKind::TemplateError, "template directory not found: " + dir);
  Templates out = builtin();
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    out.files[entry.path().stem().string()] = strip_final_newline(ss.str());
  }
  return out;
}

// ---- tokenizers -----------------------------------------------------------

std::size_t FallbackTokenizer::count(std::string_view s) const {
  const auto c = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  const auto sign_at = [&](std::size_t k) {
    if (c(k) != '-' && c(k) != '+') return false;
    if (k + 1 >= s.size() || !is_digit(c(k + 1))) return false;
    return k == 0 || !(is_letter(c(k - 1)) || is_digit(c(k - 1)));
  };
  std::size_t total = 0, i = 0;
  while (i < s.size()) {
    const std::size_t start = i;
    if (is_space(c(i))) {
      while (i < s.size() && is_space(c(i))) ++i;
      total += (i - start == 1 && s[start] == ' ') ? 0 : 1;
    } else if (is_letter(c(i))) {
      while (i < s.size() && is_letter(c(i))) ++i;
      total += ceil_div(i - start, 10);
    } else if (is_digit(c(i)) || sign_at(i)) {
      if (!is_digit(c(i))) ++i;
      const std::size_t d0 = i;
      while (i < s.size() && is_digit(c(i))) ++i;
      total += ceil_div(i - d0, 3);
      if (i + 1 < s.size() && s[i] == '.' && is_digit(c(i + 1))) {
        const std::size_t f0 = ++i;
        while (i < s.size() && is_digit(c(i))) ++i;
        total += ceil_div(i - f0, 3);
      }
    } else {
      while (i < s.size() && !is_space(c(i)) && !is_letter(c(i)) && !is_digit(c(i)) && !(i > start && sign_at(i))) ++i;
      total += 1;
    }
  }
  return total;
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t n = match_at(text, i);
    out.push_back(text.substr(i, n));
    i += n;
  }
  return out;
}

std::shared_ptr<BpeTokenizer> BpeTokenizer::from_ranks(std::unordered_map<std::string, std::size_t> ranks,
                                                       std::string name) {
  if (ranks.empty()) throw Error(ErrorKind::TokenizerUnavailable, "empty vocabulary");
  auto t = std::shared_ptr<BpeTokenizer>(new BpeTokenizer());
  t->ranks_ = std::move(ranks);
  t->name_ = std::move(name);
  return t;
}

std::shared_ptr<BpeTokenizer> BpeTokenizer::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::TokenizerUnavailable, "cannot open vocabulary " + path);
  std::unordered_map<std::string, std::size_t> ranks;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) {
      throw Error(ErrorKind::TokenizerUnavailable, path + ":" + std::to_string(lineno) + ": expected '<base64> <rank>'");
    }
    std::size_t rank = 0;
    try {
      rank = std::stoull(line.substr(sp + 1));
    } catch (const std::exception&) {
      throw Error(ErrorKind::TokenizerUnavailable, path + ":" + std::to_string(lineno) + ": bad rank");
    }
    ranks.emplace(b64decode(std::string_view(line).substr(0, sp)), rank);
  }
  return from_ranks(std::move(ranks), std::filesystem::path(path).stem().string());
}

std::size_t BpeTokenizer::bpe_count(std::string_view piece, std::vector<std::string>* out) const {
  if (ranks_.count(std::string(piece))) {
    if (out) out->emplace_back(piece);
    return 1;
  }
  // Boundaries of the current parts; merge the adjacent pair with the lowest rank.
  std::vector<std::size_t> bounds(piece.size() + 1);
  for (std::size_t k = 0; k <= piece.size(); ++k) bounds[k] = k;
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::string key;
  auto pair_rank = [&](std::size_t k) {
    if (k + 2 >= bounds.size()) return kNone;
    key.assign(piece.substr(bounds[k], bounds[k + 2] - bounds[k]));
    const auto it = ranks_.find(key);
    return it == ranks_.end() ? kNone : it->second;
  };
  while (bounds.size() > 2) {
    std::size_t best = kNone, at = 0;
    for (std::size_t k = 0; k + 2 < bounds.size(); ++k) {
      const std::size_t r = pair_rank(k);
      if (r < best) {
        best = r;
        at = k;
      }
    }
    if (best == kNone) break;
    bounds.erase(bounds.begin() + static_cast<std::ptrdiff_t>(at) + 1);
  }
  if (out) {
    for (std::size_t k = 0; k + 1 < bounds.size(); ++k) out->emplace_back(piece.substr(bounds[k], bounds[k + 1] - bounds[k]));
  }
  return bounds.size() - 1;
}

std::size_t BpeTokenizer::count(std::string_view text) const {
  std::size_t n = 0;
  for (auto piece : pretokenize(text)) n += bpe_count(piece, nullptr);
  return n;
}

std::vector<std::string> BpeTokenizer::encode_pieces(std::string_view text) const {
  std::vector<std::string> out;
  for (auto piece : pretokenize(text)) bpe_count(piece, &out);
  return out;
}

std::size_t count_text_tokens(std::string_view text, const Tokenizer* tokenizer) {
  if (!tokenizer) throw Error(ErrorKind::TokenizerUnavailable, "no tokenizer configured");
  return tokenizer->count(text);
}

std::shared_ptr<const Tokenizer> default_tokenizer() {
  static const std::shared_ptr<const Tokenizer> t = []() -> std::shared_ptr<const Tokenizer> {
    if (const char* path = std::getenv("VIZPROMPT_TOKENIZER_VOCAB"); path && *path) {
      try {
        return BpeTokenizer::load(path);
      } catch (const Error&) {
      }
    }
    return std::make_shared<FallbackTokenizer>();
  }();
  return t;
}

// ---- token accounting -----------------------------------------------------

std::size_t image_token_cost(int width_px, int height_px) {
  if (width_px <= 0 || height_px <= 0) throw Error(ErrorKind::BadParams, "image dimensions must be positive");
  const std::size_t n = ceil_div(static_cast<std::size_t>(width_px), 512) * ceil_div(static_cast<std::size_t>(height_px), 512);
  return 85 + 170 * n;
}

TokenReport& TokenReport::operator+=(const TokenReport& other) {
  text_tokens += other.text_tokens;
  image_tokens += other.image_tokens;
  total += other.total;
  per_part.insert(per_part.end(), other.per_part.begin(), other.per_part.end());
  approximate = approximate || other.approximate;
  feature_fallback = feature_fallback || other.feature_fallback;
  if (tokenizer.empty()) tokenizer = other.tokenizer;
  return *this;
}

TokenReport token_report(const PromptMessage& message, const Tokenizer& tokenizer) {
  TokenReport r;
  r.approximate = tokenizer.approximate();
  r.feature_fallback = message.feature_fallback;
  r.tokenizer = tokenizer.name();
  for (std::size_t i = 0; i < message.parts.size(); ++i) {
    if (const auto* t = std::get_if<TextPart>(&message.parts[i])) {
      const std::size_t n = tokenizer.count(t->text);
      r.text_tokens += n;
      r.per_part.push_back({i, false, n});
    } else {
      const auto& img = std::get<ImagePart>(message.parts[i]).image;
      const std::size_t n = image_token_cost(img.width_px, img.height_px);
      r.image_tokens += n;
      r.per_part.push_back({i, true, n});
    }
  }
  r.total = r.text_tokens + r.image_tokens;
  return r;
}

// ---- builders -------------------------------------------------------------

PromptMessage build_visual_prompt(const std::vector<std::pair<Window, std::string>>& examples, const Window& target,
                                  const VizTool& tool, const TaskSpec& task, const VisualPromptOptions& options) {
  task.validate();
  tool.validate();
  check_modalities(examples, target);
  const Templates& t = pick(options.templates);

  std::string guide;
  if (examples.empty()) {
    guide = "The image titled \"" + std::string(kTargetTitle) + "\" is the data to classify.";
  } else {
    guide = examples.size() == 1 ? "The first image is a labeled example titled with its label. "
                                 : "The first " + std::to_string(examples.size()) +
                                       " images are labeled examples, each titled with its label. ";
    guide += "The last image, titled \"" + std::string(kTargetTitle) + "\", is the data to classify.";
  }
  const std::string text = fill_template(t.get("visual_instruction"), {
                                                                          {"task_description", task.task_description},
                                                                          {"data_description", task.data_description},
                                                                          {"image_count", std::to_string(examples.size() + 1)},
                                                                          {"image_guide", guide},
                                                                          {"visualization", std::string(display_name(tool.id))},
                                                                          {"duration", trimmed(window_duration(target))},
                                                                          {"labels", join(task.label_set, ", ")},
                                                                          {"answer_format", answer_format(task, t)},
                                                                      });
  PromptMessage msg;
  msg.parts.push_back(TextPart{text});
  for (const auto& [w, label] : examples) {
    msg.parts.push_back(ImagePart{render_labeled_example(w, tool, label, options.style)});
  }
  msg.parts.push_back(ImagePart{render(target, tool, std::string(kTargetTitle), options.style)});
  return msg;
}

std::string serialize_window(const Window& window, int decimals) {
  const auto& s = window.series;
  std::string out = "Sampling rate: " + trimmed(s.sampling_rate_hz()) + " Hz, " + std::to_string(s.length()) +
                    " samples per channel.\n";
  for (std::size_t ch = 0; ch < s.channel_count(); ++ch) {
    out += s.channels()[ch].name + ": " + series_text(s.values(ch), decimals) + "\n";
  }
  return out;
}

std::string format_peaks(const std::vector<std::size_t>& indices, std::span<const double> values, int decimals) {
  if (indices.empty()) return "none";
  std::vector<std::string> items;
  for (auto i : indices) {
    if (i >= values.size()) throw Error(ErrorKind::BadParams, "peak index " + std::to_string(i) + " out of range");
    items.push_back(std::to_string(i) + ": " + fixed(values[i], decimals));
  }
  return join(items, ", ");
}

std::vector<FeatureBlock> parity_features(const Window& window, const VizTool& tool, int decimals) {
  std::vector<FeatureBlock> out;
  const double fs = window.series.sampling_rate_hz();
  for (const auto& ch : channels_of(window)) {
    switch (tool.id) {
      case VizToolId::raw_waveform: break;
      case VizToolId::spectrogram: spectrogram_features(ch, fs, tool, decimals, out); break;
      case VizToolId::psd:
        try {
          psd_features(ch, fs, decimals, out);
        } catch (const Error& e) {
          if (!recoverable(e)) throw;
          out.push_back({ch.prefix + "Strongest spectral peaks (frequency Hz: power dB)", "none (signal too short)"});
        }
        break;
      default: physio_features(ch, fs, tool.id, decimals, out); break;
    }
  }
  return out;
}

PromptMessage build_text_prompt(const std::vector<std::pair<Window, std::string>>& examples, const Window& target,
                                const TaskSpec& task, const TextPromptOptions& options) {
  task.validate();
  check_modalities(examples, target);
  if (options.decimals < 0 || options.decimals > 12) throw Error(ErrorKind::BadParams, "decimals must be in [0, 12]");
  const Templates& t = pick(options.templates);
  const auto fallback_tok = options.tokenizer ? nullptr : default_tokenizer();
  const Tokenizer* tok = options.tokenizer ? options.tokenizer : fallback_tok.get();

  auto features_for = [&](const Window& w, bool is_target) {
    std::vector<FeatureBlock> blocks;
    if (options.parity_tool) blocks = parity_features(w, *options.parity_tool, options.decimals);
    if (is_target) blocks.insert(blocks.end(), options.target_features.begin(), options.target_features.end());
    return blocks;
  };
  auto compose = [&](bool with_features) {
    std::string ex;
    for (std::size_t k = 0; k < examples.size(); ++k) {
      std::string body = serialize_window(examples[k].first, options.decimals);
      if (with_features) body += render_blocks(features_for(examples[k].first, false));
      ex += example_text(k + 1, examples[k].second, body) + "\n";
    }
    std::string target_text = serialize_window(target, options.decimals);
    if (with_features) target_text += render_blocks(features_for(target, true));
    target_text = strip_final_newline(target_text);
    return fill_template(t.get("text_instruction"), {
                                                        {"task_description", task.task_description},
                                                        {"data_description", task.data_description},
                                                        {"examples", ex},
                                                        {"target", target_text},
                                                        {"labels", join(task.label_set, ", ")},
                                                        {"answer_format", answer_format(task, t)},
                                                    });
  };

  PromptMessage msg;
  const bool has_features = options.parity_tool.has_value() || !options.target_features.empty();
  std::string text = compose(has_features);
  if (has_features && tok->count(text) > options.token_limit) {
    text = compose(false);
    msg.feature_fallback = true;
  }
  msg.parts.push_back(TextPart{std::move(text)});
  return msg;
}

PromptMessage apply_cot(PromptMessage prompt) {
  for (auto it = prompt.parts.rbegin(); it != prompt.parts.rend(); ++it) {
    if (auto* t = std::get_if<TextPart>(&*it)) {
      if (!t->text.empty() && t->text.back() != '\n') t->text += '\n';
      t->text += kCotSuffix;
      return prompt;
    }
  }
  throw Error(ErrorKind::NoTextPart, "the prompt has no text part to extend");
}

PromptMessage build_summarization_prompt(const Window& target, const TaskSpec& task, int decimals,
                                         const Templates* templates) {
  const Templates& t = pick(templates);
  PromptMessage msg;
  msg.parts.push_back(TextPart{fill_template(t.get("summarize_instruction"),
                                             {{"data_description", task.data_description},
                                              {"task_description", task.task_description},
                                              {"target", strip_final_newline(serialize_window(target, decimals))}})});
  return msg;
}

PromptMessage build_summary_classification_prompt(
    const std::vector<std::pair<std::string, std::string>>& example_summaries, const std::string& target_summary,
    const TaskSpec& task, const Templates* templates) {
  task.validate();
  if (blank(target_summary)) throw Error(ErrorKind::EmptySummary, "the target summary is empty");
  const Templates& t = pick(templates);
  std::string ex;
  for (std::size_t k = 0; k < example_summaries.size(); ++k) {
    const auto& [summary, label] = example_summaries[k];
    if (blank(summary)) throw Error(ErrorKind::EmptySummary, "summary of example " + std::to_string(k + 1) + " is empty");
    ex += example_text(k + 1, label, "Summary: " + summary) + "\n";
  }
  PromptMessage msg;
  msg.parts.push_back(TextPart{fill_template(t.get("summary_classify_instruction"),
                                             {{"task_description", task.task_description},
                                              {"data_description", task.data_description},
                                              {"examples", ex},
                                              {"summary", target_summary},
                                              {"labels", join(task.label_set, ", ")},
                                              {"answer_format", answer_format(task, t)}})});
  return msg;
}

}  // namespace vizprompt
