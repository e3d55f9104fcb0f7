// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"
#include "vizprompt/dsp.hpp"
#include "vizprompt/eval.hpp"
#include "vizprompt/mllm.hpp"
#include "vizprompt/prompt.hpp"
#include "vizprompt/render.hpp"
#include "vizprompt/visgen.hpp"

using namespace vizprompt;
using namespace testsupport;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects failed checks; the first few are reported.
struct Checker {
  Outcome out;
  std::vector<std::string> failures;

  void check(bool ok, const std::string& what) {
    if (ok) return;
    out.pass = false;
    failures.push_back(what);
  }

  Outcome done(std::string detail) {
    out.detail = std::move(detail);
    if (!failures.empty()) {
      out.detail += "; failed: " + failures.front();
      if (failures.size() > 1) out.detail += " (+" + std::to_string(failures.size() - 1) + " more)";
    }
    return out;
  }
};

std::string fmt(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

bool golden_equals(const std::string& name, const std::string& actual) {
  const auto path = source_dir() / "tests" / "golden" / name;
  return fs::exists(path) && read_file(path) == actual;
}

// ---- criteria -------------------------------------------------------------------

Outcome token_formula() {
  Checker c;
  const auto a = image_token_cost(512, 512);
  const auto b = image_token_cost(1024, 512);
  c.check(a == 255, "512x512 gave " + std::to_string(a));
  c.check(b == 425, "1024x512 gave " + std::to_string(b));
  return c.done("512x512 -> " + std::to_string(a) + ", 1024x512 -> " + std::to_string(b));
}

Outcome cost_scaling() {
  Checker c;
  const FallbackTokenizer tok;
  const auto raw = builtin_tool(VizToolId::raw_waveform);
  const auto hhar = eval::dataset("hhar");
  c.check(hhar.channels == 3 && hhar.sampling_rate_hz == 100.0 && hhar.window_s == 5.0, "HHAR geometry");
  const auto base = eval::estimate_tokens(hhar, 1, raw, 0, &tok);
  const double ratio = static_cast<double>(base.text_only.total) / static_cast<double>(base.visual.total);
  c.check(base.visual.total * 10 <= base.text_only.total, "visual above 1/10 of text");

  auto longer = hhar;
  longer.window_s *= 12.0;
  const auto big = eval::estimate_tokens(longer, 1, raw, 0, &tok);
  const double growth = static_cast<double>(big.text_only.total) / static_cast<double>(base.text_only.total);
  c.check(big.visual.image_tokens == base.visual.image_tokens, "image tokens changed with window length");
  c.check(growth >= 10.0, "text grew only " + fmt(growth, 1) + "x");
  return c.done("text/visual " + std::to_string(base.text_only.total) + "/" + std::to_string(base.visual.total) + " = " +
                fmt(ratio, 1) + "x; 12x window: image tokens " + std::to_string(base.visual.image_tokens) + " -> " +
                std::to_string(big.visual.image_tokens) + ", text x" + fmt(growth, 1));
}

Outcome motivation_oracles() {
  Checker c;
  // Values k/8 make the exact mean a single correctly rounded division.
  synth::Rng gen(9);
  int exact = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 8 + gen.index(500);
    std::vector<double> v(n);
    long long sum = 0;
    for (auto& x : v) {
      const long long k = static_cast<long long>(gen.index(20001)) - 10000;
      sum += k;
      x = static_cast<double>(k) / 8.0;
    }
    exact += eval::oracle_mean(v) == static_cast<double>(sum) / 8.0 / static_cast<double>(n);
  }
  c.check(exact == 1000, "oracle_mean exact on " + std::to_string(exact) + "/1000");

  int right[2] = {0, 0};
  for (int noisy = 0; noisy < 2; ++noisy) {
    for (int i = 0; i < 1000; ++i) {
      synth::Rng rng(50000 + 1000 * noisy + i);
      eval::WaveTask t;
      t.kind = rng.uniform() < 0.5 ? eval::WaveKind::sine : eval::WaveKind::sawtooth;
      t.length = 50 + static_cast<int>(rng.index(451));
      t.frequency_cycles = rng.uniform(1.0, 10.0);
      t.amplitude = rng.uniform(0.5, 2.0);
      t.phase = rng.uniform(0.0, 2.0 * kPi);
      t.offset = rng.uniform(-1.0, 1.0);
      t.noise_std = noisy ? 0.05 * t.amplitude : 0.0;
      t.seed = rng.next();
      right[noisy] += eval::oracle_wave_kind(eval::gen_wave(t)) == t.kind;
    }
  }
  c.check(right[0] >= 990, "clean accuracy " + std::to_string(right[0]) + "/1000");
  c.check(right[1] >= 950, "noisy accuracy " + std::to_string(right[1]) + "/1000");
  return c.done("mean exact " + std::to_string(exact) + "/1000; wave kind clean " + std::to_string(right[0]) +
                "/1000, noise 0.05A " + std::to_string(right[1]) + "/1000");
}

Outcome dsp_suite() {
  Checker c;
  synth::Rng rng(21);

  int tone_hits = 0;
  for (int i = 0; i < 50; ++i) {
    const double fs = rng.uniform(50.0, 1000.0);
    const std::size_t k = 5 + rng.index(100);
    const double f = static_cast<double>(k) * fs / 256.0;
    std::vector<double> x(2048);
    for (std::size_t n = 0; n < x.size(); ++n) x[n] = std::sin(2.0 * kPi * f * static_cast<double>(n) / fs) + 0.1 * rng.normal();
    const auto s = dsp::power_spectral_density(x, fs);
    const auto bin = static_cast<std::size_t>(std::max_element(s.psd.begin(), s.psd.end()) - s.psd.begin());
    tone_hits += bin == k;
  }
  c.check(tone_hits == 50, "PSD tone bin " + std::to_string(tone_hits) + "/50");

  double worst_parseval = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 256 + rng.index(512);
    const int nperseg = 32 + static_cast<int>(rng.index(64));
    const double fs = rng.uniform(10.0, 1000.0);
    std::vector<double> x(n);
    for (auto& v : x) v = rng.normal();
    const dsp::SpectrogramParams p{nperseg, nperseg, nperseg / 2, dsp::SpectrogramMode::psd};
    const auto m = dsp::spectrogram(x, fs, p);
    const auto w = dsp::hann(static_cast<std::size_t>(nperseg));
    double wss = 0.0;
    for (double v : w) wss += v * v;
    for (std::size_t t = 0; t < m.time_frames; ++t) {
      double power = 0.0, expected = 0.0;
      for (std::size_t k = 0; k < m.freq_bins; ++k) power += m.at(k, t) * fs / nperseg;
      for (std::size_t i = 0; i < static_cast<std::size_t>(nperseg); ++i) {
        const double xw = x[t * static_cast<std::size_t>(nperseg - nperseg / 2) + i] * w[i];
        expected += xw * xw;
      }
      expected /= wss;
      worst_parseval = std::max(worst_parseval, std::abs(power - expected) / expected);
    }
  }
  c.check(worst_parseval <= 0.01, "Parseval error " + fmt(worst_parseval, 4));

  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    synth::Rng r(1000 + seed);
    synth::EcgParams p;
    p.heart_rate_bpm = r.uniform(50.0, 150.0);
    const auto sig = synth::ecg(p, r);
    const auto found = dsp::detect_peaks(sig.values, p.fs, dsp::PeakPreset::ecg_r).indices;
    std::vector<bool> used(found.size(), false);
    for (auto truth : sig.r_peaks) {
      bool hit = false;
      for (std::size_t j = 0; j < found.size() && !hit; ++j) {
        if (!used[j] && std::abs(static_cast<long>(found[j]) - static_cast<long>(truth)) <= 3) used[j] = hit = true;
      }
      hit ? ++tp : ++fn;
    }
    fp += static_cast<std::size_t>(std::count(used.begin(), used.end(), false));
  }
  const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  c.check(f1 >= 0.95, "R-peak F1 " + fmt(f1));

  bool sixty = true;
  for (double fs : {50.0, 100.0, 250.0, 1000.0}) {
    dsp::PeakSet peaks{{}, dsp::PeakKind::r_peak};
    for (std::size_t i = 0; i < 10; ++i) peaks.indices.push_back(3 + i * static_cast<std::size_t>(fs));
    const auto r = dsp::rate_series(peaks, fs, static_cast<std::size_t>(11 * fs));
    sixty = sixty && r.mean_rate == 60.0;
    for (double v : r.per_sample) sixty = sixty && v == 60.0;
  }
  c.check(sixty, "rate_series not exactly 60 bpm");

  double worst_eda = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    synth::Rng r(seed);
    const auto sig = synth::eda(20.0, 40.0, r.uniform(0, 5), r.uniform(0, 5), {r.uniform(5, 35)}, r.uniform(0.1, 2), 0.7,
                                0.02, r);
    const auto d = dsp::eda_decompose(sig.values, 20.0);
    for (std::size_t i = 0; i < d.cleaned.size(); ++i) {
      worst_eda = std::max(worst_eda, std::abs(d.tonic[i] + d.phasic[i] - d.cleaned[i]));
    }
  }
  c.check(worst_eda <= 1e-9, "EDA reconstruction error " + std::to_string(worst_eda));

  double worst_overlap = 1.0;
  double worst_spill = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    synth::Rng r(300 + seed);
    const double fs = 2000.0;
    const double start = r.uniform(0.3, 1.2);
    const auto sig = synth::emg(fs, 2.0, {{start, start + r.uniform(0.4, 0.6)}}, 0.02, 1.0, r);
    const auto a = dsp::emg_activation(sig.values, fs);
    const auto [bs, be] = sig.bursts[0];
    const double burst = static_cast<double>(be - bs);
    if (a.segments.size() != 1) {
      worst_overlap = 0.0;
      continue;
    }
    const auto [ss, se] = a.segments[0];
    const double ov = static_cast<double>(std::min(be, se)) - static_cast<double>(std::max(bs, ss));
    const double spill = static_cast<double>((bs > ss ? bs - ss : 0) + (se > be ? se - be : 0));
    worst_overlap = std::min(worst_overlap, ov / burst);
    worst_spill = std::max(worst_spill, spill / burst);
  }
  c.check(worst_overlap >= 0.9, "EMG burst overlap " + fmt(worst_overlap));
  c.check(worst_spill <= 0.05, "EMG spill " + fmt(worst_spill));

  return c.done("PSD bins " + std::to_string(tone_hits) + "/50, Parseval max err " + fmt(100 * worst_parseval, 4) +
                "%, R-peak F1 " + fmt(f1) + ", 60 bpm " + (sixty ? "exact" : "off") + ", EDA err " +
                std::to_string(worst_eda) + ", EMG min overlap " + fmt(worst_overlap) +
                ", max spill " + fmt(worst_spill));
}

Outcome render_determinism() {
  Checker c;
  int matched = 0;
  for (auto id : all_tool_ids()) {
    const auto w = tool_fixture(id);
    const auto png = encode_png(render(w, builtin_tool(id), "example"));
    const bool same = encode_png(render(w, builtin_tool(id), "example")) == png;
    const bool golden = golden_equals(std::string(to_string(id)) + ".png", bytes_to_string(png));
    c.check(same && golden, std::string(to_string(id)) + (same ? " differs from golden" : " not repeatable"));
    matched += same && golden;
  }
  const auto raw = builtin_tool(VizToolId::raw_waveform);
  RenderStyle single, stacked;
  stacked.layout = Layout::subplots;
  const auto a = render(imu_fixture(), raw, "example", single);
  const auto b = render(imu_fixture(), raw, "example", stacked);
  c.check(non_background_fraction(a) >= 0.01 && non_background_fraction(b) >= 0.01, "blank layout image");
  c.check(a.legend == b.legend && a.legend.size() == 3, "legends differ between layouts");
  c.check(a.panes.size() == 1 && b.panes.size() == 3, "pane counts");
  for (std::size_t ch = 0; ch < 3; ++ch) {
    c.check(count_color(a, a.panes[0], single.channel_palette[ch]) > 0, "single_plot misses a channel color");
    c.check(count_color(b, b.panes[ch], stacked.channel_palette[ch]) > 0, "subplot misses its channel color");
  }
  c.check(golden_equals("raw_waveform_subplots.png", bytes_to_string(encode_png(b))), "subplots golden");
  return c.done(std::to_string(matched) + "/17 tools match golden PNGs; layouts share legend [" +
                (a.legend.empty() ? "" : a.legend.front() + ", ...") + "], 1 vs " + std::to_string(b.panes.size()) +
                " panes");
}

Outcome prompt_goldens() {
  Checker c;
  const auto raw = builtin_tool(VizToolId::raw_waveform);
  const auto task = har_task();
  int matched = 0;
  int total = 0;
  auto golden = [&](const std::string& name, const std::string& text) {
    const bool ok = golden_equals(name, text);
    c.check(ok, name);
    matched += ok;
    ++total;
  };

  const auto one_shot = build_visual_prompt({{imu_fixture(1), "walking"}}, imu_fixture(2), raw, task);
  golden("visual_prompt_1shot.txt", std::get<TextPart>(one_shot.parts[0]).text);
  c.check(one_shot.image_count() == 2, "1-shot prompt has " + std::to_string(one_shot.image_count()) + " images");
  c.check(std::get<ImagePart>(one_shot.parts.back()).image.title == "target data", "last image title");

  std::vector<double> v(300, 0.0);
  v[100] = 0.95;
  v[200] = 0.91;
  TextPromptOptions opt;
  opt.target_features = {{"Detected peaks (index: value)", format_peaks({100, 200}, v, 2)}};
  golden("text_prompt_peaks.txt",
         std::get<TextPart>(build_text_prompt({}, make_window({v}, 100.0, Modality::ecg), task, opt).parts[0]).text);

  const auto cot = apply_cot(build_visual_prompt({}, imu_fixture(), raw, task)).joined_text();
  golden("visual_prompt_cot.txt", cot);
  std::string lower = cot;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
  c.check(lower.find("let's think step-by-step") != std::string::npos, "CoT suffix");

  const auto stage1 =
      build_summarization_prompt(make_window({{0.5, 1.25, -0.333}}, 50.0, Modality::accelerometer), task).joined_text();
  golden("summarization_prompt.txt", stage1);
  c.check(stage1.find("summarize the pattern or tendency") != std::string::npos, "summarization instruction");
  golden("summary_classification_prompt.txt",
         build_summary_classification_prompt({{"steady oscillation", "walking"}}, "increasing trend", task).joined_text());

  const auto catalog = visgen::VizCatalog::builtin();
  golden("filter_prompt.txt", visgen::build_filter_prompt(catalog, ecg_task()).joined_text());
  std::vector<std::pair<VizTool, PlotImage>> candidates;
  for (auto id : {VizToolId::ecg_signal_peaks, VizToolId::ecg_heart_rate, VizToolId::ecg_individual_beats}) {
    candidates.emplace_back(catalog.tool(id), render(ecg_window(), catalog.tool(id), "sample data"));
  }
  golden("selection_prompt.txt", visgen::build_selection_prompt(candidates, ecg_task()).joined_text());
  return c.done(std::to_string(matched) + "/" + std::to_string(total) + " prompts match goldens; 1-shot visual prompt has " +
                std::to_string(one_shot.image_count()) + " images ending with \"" +
                std::get<ImagePart>(one_shot.parts.back()).image.title + "\"");
}

Outcome visgen_pipeline() {
  Checker c;
  const auto catalog = visgen::VizCatalog::builtin();
  c.check(catalog.tools.size() == 17, "catalog size " + std::to_string(catalog.tools.size()));
  auto t = mllm::ScriptedTransport::answering([](const nlohmann::json& body) {
    return mllm::wire_text(body).find("Output a JSON array") != std::string::npos
               ? kEcgFilter
               : std::string("Beat shapes differ most.\nSelection: ecg_individual_beats");
  });
  mllm::ClientConfig cc;
  cc.mode = mllm::Mode::live;
  mllm::MllmClient client(cc, nullptr, t);
  visgen::VisualizationGenerator gen(client, catalog);
  std::optional<visgen::VisualizationChoice> first;
  for (std::uint64_t s = 0; s < 60; ++s) {
    const auto ch = gen.generate(ecg_window(100 + s), ecg_task(), "ptbxl_cd");
    if (!first) first = ch;
    c.check(std::find(ch.filtered.begin(), ch.filtered.end(), ch.selected) != ch.filtered.end(), "selected not filtered");
  }
  c.check(first->filtered.size() == 3, "filtered size");
  c.check(first->selected == VizToolId::ecg_individual_beats, "selected tool");
  c.check(t->calls() == 2, std::to_string(t->calls()) + " calls for 60 windows");

  auto bad = mllm::ScriptedTransport::answering([](const nlohmann::json&) { return std::string("[ecg_signal_peaks,"); });
  mllm::MllmClient bad_client(cc, nullptr, bad);
  visgen::VisualizationGenerator bad_gen(bad_client, catalog);
  std::string err = "none";
  try {
    bad_gen.generate(ecg_window(), ecg_task(), "ptbxl_cd");
  } catch (const Error& e) {
    err = std::string(to_string(e.kind()));
  }
  c.check(err == "FilterFailed", "malformed JSON raised " + err);
  c.check(bad->calls() == 2, "malformed JSON attempts " + std::to_string(bad->calls()));
  return c.done("selected " + std::string(to_string(first->selected)) + " from " + std::to_string(first->filtered.size()) +
                " filtered tools; " + std::to_string(t->calls()) + " calls for 60 windows; malformed JSON -> " +
                std::to_string(bad->calls()) + " attempts, " + err);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + VIZPROMPT_CLI + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome replay_determinism() {
  Checker c;
  const auto dir = fs::temp_directory_path() / ("vizprompt_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const auto fixture = source_dir() / "tests" / "fixtures" / "ptbxl_cd_visual_1shot.jsonl";
  const std::string base = "eval --dataset ptbxl_cd --prompt visual --shots 1 --mode replay --transcripts \"" +
                           fixture.string() + "\" --out \"" + dir.string() + "\"";
  std::vector<std::string> reports;
  const std::vector<std::pair<std::string, int>> runs{{"r1", 4}, {"r2", 4}, {"r3", 4}, {"j1", 1}, {"j4", 4}};
  for (const auto& [id, jobs] : runs) {
    const int rc = run_cli(base + " --run-id " + id + " --jobs " + std::to_string(jobs));
    c.check(rc == 0, id + " exited " + std::to_string(rc));
    reports.push_back(read_file(dir / id / "report.json"));
  }
  for (std::size_t i = 1; i < reports.size(); ++i) {
    c.check(!reports[0].empty() && reports[i] == reports[0], runs[i].first + " report differs");
  }
  double accuracy = -1.0;
  if (!reports[0].empty()) accuracy = nlohmann::json::parse(reports[0])["accuracy"].get<double>();
  // Value frozen when the fixture was recorded.
  c.check(accuracy == 0.85, "accuracy " + fmt(accuracy, 4));
  const int miss = run_cli("eval --dataset ptbxl_cd --mode replay --transcripts \"" + (dir / "none.jsonl").string() +
                           "\" --out \"" + dir.string() + "\"");
  c.check(miss == 3, "missing fixture exited " + std::to_string(miss));
  const int usage = run_cli("eval --dataset ptbxl_cd --shots -1");
  c.check(usage == 2, "--shots -1 exited " + std::to_string(usage));
  fs::remove_all(dir);
  return c.done("report.json identical over 3 runs and jobs 1 vs 4 (" + std::to_string(reports[0].size()) +
                " bytes), accuracy " + fmt(accuracy, 2) + "; missing fixture -> " + std::to_string(miss) +
                ", --shots -1 -> " + std::to_string(usage));
}

struct RegistryRow {
  const char* id;
  double rate;
  double window;
  int channels;
  std::size_t classes;
};

Outcome registry_fidelity() {
  Checker c;
  constexpr RegistryRow table[] = {
      {"hhar", 100.0, 5.0, 3, 6},          {"utd_mhad", 50.0, 3.0, 3, 21},    {"swim", 30.0, 3.0, 3, 5},
      {"ptbxl_cd", 100.0, 10.0, 1, 2},     {"ptbxl_mi", 100.0, 10.0, 1, 2},   {"ptbxl_hyp", 100.0, 10.0, 1, 2},
      {"ptbxl_sttc", 100.0, 10.0, 1, 2},   {"emg_gesture", 2000.0, 0.2, 4, 10}, {"wesad", 700.0, 10.0, 1, 3},
  };
  const auto& reg = eval::registry();
  c.check(reg.size() == std::size(table), "registry has " + std::to_string(reg.size()) + " entries");
  std::string classes;
  for (std::size_t i = 0; i < std::min(reg.size(), std::size(table)); ++i) {
    const auto& r = reg[i];
    const auto& t = table[i];
    c.check(r.id == t.id, r.id + " out of order");
    c.check(r.sampling_rate_hz == t.rate, r.id + " rate");
    c.check(r.window_s == t.window, r.id + " window");
    c.check(r.channels == t.channels && r.channel_names.size() == static_cast<std::size_t>(t.channels), r.id + " channels");
    c.check(r.label_set.size() == t.classes, r.id + " classes");
    classes += (classes.empty() ? "" : "/") + std::to_string(r.label_set.size());
  }
  return c.done("9 datasets, class counts " + classes);
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    double budget_ms;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"token_formula", 1.0, token_formula},
      {"cost_scaling", 5000.0, cost_scaling},
      {"motivation_oracles", 30000.0, motivation_oracles},
      {"dsp_oracle_suite", 60000.0, dsp_suite},
      {"rendering_determinism", 30000.0, render_determinism},
      {"prompt_goldens", 1e9, prompt_goldens},
      {"visgen_pipeline", 5000.0, visgen_pipeline},
      {"e2e_replay_determinism", 30000.0, replay_determinism},
      {"registry_fidelity", 1e9, registry_fidelity},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = cr.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (ms > cr.budget_ms) {
      o.pass = false;
      o.detail += "; over the " + fmt(cr.budget_ms, 0) + " ms budget";
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << cr.name << ": " << o.detail << " [" << fmt(ms, 1) << " ms]\n";
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed\n";
  return failed ? 1 : 0;
}
