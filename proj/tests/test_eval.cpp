#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "support.hpp"
#include "vizprompt/eval.hpp"

using namespace vizprompt;
using namespace vizprompt::eval;
using namespace testsupport;

namespace {

struct RegistryRow {
  const char* id;
  double rate;
  double window;
  int channels;
  std::size_t labels;
  int per_class;
  Modality modality;
};

// Sampling rates, windows, channels and class counts of the nine tasks.
constexpr RegistryRow kRegistry[] = {
    {"hhar", 100.0, 5.0, 3, 6, 30, Modality::accelerometer},
    {"utd_mhad", 50.0, 3.0, 3, 21, 10, Modality::accelerometer},
    {"swim", 30.0, 3.0, 3, 5, 30, Modality::accelerometer},
    {"ptbxl_cd", 100.0, 10.0, 1, 2, 30, Modality::ecg},
    {"ptbxl_mi", 100.0, 10.0, 1, 2, 30, Modality::ecg},
    {"ptbxl_hyp", 100.0, 10.0, 1, 2, 30, Modality::ecg},
    {"ptbxl_sttc", 100.0, 10.0, 1, 2, 30, Modality::ecg},
    {"emg_gesture", 2000.0, 0.2, 4, 10, 30, Modality::emg},
    {"wesad", 700.0, 10.0, 1, 3, 30, Modality::respiration},
};

mllm::MllmClient scripted_client(std::shared_ptr<mllm::HttpTransport> t, std::size_t in_flight = 4) {
  mllm::ClientConfig c;
  c.mode = mllm::Mode::live;
  c.max_in_flight = in_flight;
  c.sleep = [](double) {};
  return mllm::MllmClient(c, nullptr, std::move(t));
}

std::string line_after(const std::string& text, const std::string& marker) {
  const auto p = text.rfind(marker);
  if (p == std::string::npos) return {};
  const auto b = p + marker.size();
  return text.substr(b, text.find('\n', b) - b);
}

std::vector<double> parse_sequence(const std::string& s) {
  std::vector<double> v;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t used = 0;
    v.push_back(std::stod(s.substr(i), &used));
    i += used;
    while (i < s.size() && (s[i] == ',' || s[i] == ' ')) ++i;
  }
  return v;
}

// Answers motivation prompts from the oracles.
std::string oracle_reply(const nlohmann::json& body) {
  const auto text = mllm::wire_text(body);
  const auto seq = parse_sequence(line_after(text, "Sequence: "));
  char buf[64];
  if (text.find("arithmetic mean") != std::string::npos) {
    std::snprintf(buf, sizeof buf, "Answer: %.17g", oracle_mean(seq));
    return buf;
  }
  return "Answer: " + std::string(to_string(oracle_wave_kind(seq)));
}

DatasetConfig small(const std::string& id, int per_class) {
  auto c = dataset(id);
  c.test_per_class = per_class;
  return c;
}

// Scripted model that knows the gold label of every target in `pool`: visual
// prompts are matched by the target image, text prompts by the serialized data.
struct GoldModel {
  std::map<std::string, std::string> by_image, by_text;
  std::vector<std::string> labels;
  std::string filter = R"(["ecg_individual_beats"])";
  // Sample ids whose answer is withheld.
  std::set<std::string> silent;
  std::map<std::string, std::string> id_of;

  GoldModel(const std::vector<LabeledWindow>& pool, VizToolId tool, std::vector<std::string> label_set)
      : labels(std::move(label_set)) {
    for (const auto& w : pool) {
      const auto png = encode_png(render(w.window, builtin_tool(tool), std::string(kTargetTitle)));
      const auto url = "data:image/png;base64," + mllm::base64_encode(bytes_to_string(png));
      by_image[mllm::sha256_hex(url)] = w.label;
      id_of[mllm::sha256_hex(url)] = w.id;
      by_text[serialize_window(w.window, 2)] = w.label;
    }
  }

  std::string answer(const nlohmann::json& body) const {
    const auto text = mllm::wire_text(body);
    if (text.find("Output a JSON array") != std::string::npos) return filter;
    if (text.find("Selection:") != std::string::npos) return "Selection: ecg_individual_beats";
    if (text.find("summarize the pattern") != std::string::npos) {
      for (const auto& [data, gold] : by_text) {
        if (text.find(data) != std::string::npos) {
          return "pattern-" + std::to_string(std::find(labels.begin(), labels.end(), gold) - labels.begin());
        }
      }
      return "unclear";
    }
    if (text.find("Summary of the target data:") != std::string::npos) {
      const auto s = line_after(text, "Summary of the target data:\n");
      if (s.rfind("pattern-", 0) == 0) return "Answer: " + labels.at(std::stoul(s.substr(8)));
      return "unsure";
    }
    const auto& content = body["messages"][0]["content"];
    for (auto it = content.rbegin(); it != content.rend(); ++it) {
      if ((*it)["type"] != "image_url") continue;
      const auto key = mllm::sha256_hex((*it)["image_url"]["url"].get<std::string>());
      if (silent.count(id_of.at(key))) return "I cannot tell.";
      return "Reasoning...\nAnswer: " + by_image.at(key);
    }
    for (const auto& [data, gold] : by_text) {
      if (text.find("Target data:\n" + data) != std::string::npos) return "Answer: " + gold;
    }
    return "no idea";
  }
};

}  // namespace

TEST_CASE("registry matches the task table") {
  const auto& r = registry();
  REQUIRE(r.size() == std::size(kRegistry));
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto& row = kRegistry[i];
    CAPTURE(row.id);
    CHECK(r[i].id == row.id);
    CHECK(r[i].sampling_rate_hz == row.rate);
    CHECK(r[i].window_s == row.window);
    CHECK(r[i].channels == row.channels);
    CHECK(r[i].label_set.size() == row.labels);
    CHECK(r[i].test_per_class == row.per_class);
    CHECK(r[i].modality == row.modality);
  }
  CHECK(dataset("hhar").label_set == std::vector<std::string>{"sit", "stand", "walk", "bike", "upstairs", "downstairs"});
  CHECK(dataset("emg_gesture").window_samples() == 400);
  CHECK(kind_of([] { dataset("mnist"); }) == ErrorKind::UnknownDataset);
  const auto back = DatasetConfig::from_json(dataset("swim").to_json());
  CHECK(back.to_json() == dataset("swim").to_json());
  auto bad = dataset("swim");
  bad.test_per_class = 0;
  CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::BadConfig);
}

TEST_CASE("wave generator") {
  WaveTask t{WaveKind::sine, 100, 2.0, 1.0, 0.0, 0.0, 0.0, 1};
  const auto v = gen_wave(t);
  CHECK(v[0] == 0.0);
  CHECK(v[12] == doctest::Approx(0.9980).epsilon(1e-4));
  CHECK(gen_wave(t) == v);
  t.noise_std = 0.1;
  CHECK(gen_wave(t) == gen_wave(t));
  CHECK(gen_wave(t) != v);

  // Wraps happen where the phase crosses a whole cycle.
  std::mt19937 gen(2);
  for (int i = 0; i < 200; ++i) {
    WaveTask s{WaveKind::sawtooth, 50 + static_cast<int>(gen() % 451), 1.0 + (gen() % 900) / 100.0,
               0.5 + (gen() % 150) / 100.0, (gen() % 628) / 100.0, 0.0, 0.0, 0};
    const auto w = gen_wave(s);
    int jumps = 0;
    for (std::size_t k = 1; k < w.size(); ++k) jumps += std::abs(w[k] - w[k - 1]) > s.amplitude;
    const double start = s.phase / (2.0 * M_PI);
    const double end = start + s.frequency_cycles * (s.length - 1) / s.length;
    CHECK(jumps == static_cast<int>(std::floor(end) - std::floor(start)));
  }
  t.length = 7;
  CHECK(kind_of([&] { gen_wave(t); }) == ErrorKind::BadParams);
}

TEST_CASE("motivation oracles") {
  CHECK(oracle_mean(std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8}) == 4.5);
  CHECK(kind_of([] { oracle_mean(std::vector<double>{1, 2}); }) == ErrorKind::SignalTooShort);
  CHECK(kind_of([] { oracle_wave_kind(std::vector<double>(7, 1.0)); }) == ErrorKind::SignalTooShort);

  std::mt19937_64 gen(9);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 8 + gen() % 500;
    std::vector<double> v(n);
    std::int64_t sum = 0;
    for (auto& x : v) {
      const auto k = static_cast<std::int64_t>(gen() % 20001) - 10000;
      sum += k;
      x = static_cast<double>(k) / 8.0;
    }
    CHECK(oracle_mean(v) == static_cast<double>(sum) / 8.0 / static_cast<double>(n));
  }

  for (double noise : {0.0, 0.05}) {
    int right = 0;
    for (int i = 0; i < 1000; ++i) {
      synth::Rng rng(1000 + i);
      WaveTask t;
      t.kind = i % 2 ? WaveKind::sawtooth : WaveKind::sine;
      t.length = 50 + static_cast<int>(rng.index(451));
      t.frequency_cycles = rng.uniform(1.0, 10.0);
      t.amplitude = rng.uniform(0.5, 2.0);
      t.phase = rng.uniform(0.0, 2.0 * M_PI);
      t.noise_std = noise * t.amplitude;
      t.seed = rng.next();
      right += oracle_wave_kind(gen_wave(t)) == t.kind;
    }
    CAPTURE(noise);
    CHECK(right >= (noise == 0.0 ? 990 : 950));
  }
}

TEST_CASE("number answers") {
  CHECK(parse_number_answer("The mean is about 3.\nAnswer: 2.51") == 2.51);
  CHECK(parse_number_answer("Answer: -0.25 (approx)") == -0.25);
  CHECK(parse_number_answer("I computed 1,234.5 overall") == 1234.5);
  CHECK(parse_number_answer("values 1, 2 and finally 3.75") == 3.75);
  CHECK_FALSE(parse_number_answer("no numbers here").has_value());
}

TEST_CASE("motivation study") {
  SUBCASE("oracle fixture") {
    auto t = mllm::ScriptedTransport::answering(oracle_reply);
    auto client = scripted_client(t);
    const auto rows = run_motivation_study({50, 100, 200}, 5, client, 3);
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) {
      CHECK(r.mean_error_rate == 0.0);
      CHECK(r.classification_accuracy == 1.0);
    }
    CHECK(t->calls() == 30);
    CHECK(motivation_json(rows)[1]["length"] == 100);
    CHECK(motivation_markdown(rows).find("| 200 | 5 | 0.0000 | 1.0000 |") != std::string::npos);
    const auto img = motivation_plot(rows);
    CHECK(img.panes.size() == 2);
    CHECK(img.legend.size() == 2);
  }
  SUBCASE("random labels") {
    auto t = mllm::ScriptedTransport::answering([](const nlohmann::json& body) {
      const auto h = mllm::sha256_hex(body.dump());
      return std::string(h[0] < '8' ? "Answer: sine" : "Answer: sawtooth");
    });
    auto client = scripted_client(t);
    const auto rows = run_motivation_study({120}, 30, client, 5);
    CHECK(rows[0].classification_accuracy >= 0.30);
    CHECK(rows[0].classification_accuracy <= 0.70);
    CHECK(rows[0].mean_error_rate == 1.0);
  }
  SUBCASE("degrading fixture") {
    auto t = mllm::ScriptedTransport::answering([](const nlohmann::json& body) {
      const auto text = mllm::wire_text(body);
      const auto n = parse_sequence(line_after(text, "Sequence: ")).size();
      if (n <= 100) return oracle_reply(body);
      return std::string("no idea");
    });
    auto client = scripted_client(t);
    const auto rows = run_motivation_study({50, 500}, 4, client);
    CHECK(rows[0].classification_accuracy == 1.0);
    CHECK(rows[1].classification_accuracy == 0.0);
    CHECK(rows[0].mean_error_rate < rows[1].mean_error_rate);
  }
  auto t = mllm::ScriptedTransport::answering(oracle_reply);
  auto client = scripted_client(t);
  CHECK(kind_of([&] { run_motivation_study({50}, 0, client); }) == ErrorKind::BadParams);
}

TEST_CASE("synthetic pools") {
  const auto cfg = dataset("hhar");
  const auto a = synthetic_pool(cfg, 3, 7);
  REQUIRE(a.size() == 18);
  CHECK(a[0].id == "hhar-00000");
  CHECK(a[0].label == "sit");
  CHECK(a[1].label == "stand");
  CHECK(a[0].window.series.length() == 500);
  CHECK(a[0].window.series.channel_count() == 3);
  const auto b = synthetic_pool(cfg, 3, 7);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(serialize_csv(a[i].window.series) == serialize_csv(b[i].window.series));

  // Each user's data is z-normalized.
  std::map<std::string, std::pair<double, std::size_t>> per_user;
  for (const auto& w : a) {
    for (double v : w.window.series.values(0)) {
      auto& [sum, n] = per_user[*w.window.series.user_id()];
      sum += v;
      ++n;
    }
  }
  for (const auto& [u, sn] : per_user) CHECK(std::abs(sn.first / static_cast<double>(sn.second)) < 1e-9);

  for (const auto& c : registry()) {
    const auto p = synthetic_pool(c, 1, 1);
    CHECK(p.size() == c.label_set.size());
    CHECK(p[0].window.series.length() == c.window_samples());
    CHECK(p[0].window.series.modality() == c.modality);
  }
}

TEST_CASE("labeled pool from CSV files") {
  const auto dir = std::filesystem::temp_directory_path() / "vizprompt_pool";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto cfg = dataset("swim");
  synth::Rng rng(4);
  for (int r = 0; r < 2; ++r) {
    const auto chans = synth::imu(30.0, 10.0, r, 5, 3, rng);
    std::string csv = "x,y,z\n";
    for (std::size_t i = 0; i < chans[0].size(); ++i) {
      csv += std::to_string(chans[0][i]) + "," + std::to_string(chans[1][i]) + "," + std::to_string(chans[2][i]) + "\n";
    }
    write_file(dir / ("rec" + std::to_string(r) + ".csv"), csv);
    write_file(dir / ("rec" + std::to_string(r) + ".json"),
               nlohmann::json({{"sampling_rate_hz", 30.0}, {"modality", "accelerometer"}, {"user_id", "u1"},
                               {"label", cfg.label_set[r]}}).dump());
  }
  const auto pool = load_pool(dir.string(), cfg);
  REQUIRE(pool.size() == 6);  // 10 s recordings, 3 s windows
  CHECK(pool[0].id == "rec0-0000");
  CHECK(pool[3].label == "breaststroke");
  CHECK(pool[0].window.series.length() == 90);

  write_file(dir / "rec0.json", nlohmann::json({{"sampling_rate_hz", 30.0}, {"label", "diving"}}).dump());
  CHECK(kind_of([&] { load_pool(dir.string(), cfg); }) == ErrorKind::BadConfig);
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluation split sampling") {
  auto cfg = dataset("ptbxl_cd");
  const auto pool = synthetic_pool(cfg, 40, 1);
  const auto s = sample_eval_set(pool, cfg, 1, 42);
  CHECK(s.test_set.size() == 60);
  CHECK(s.examples.size() == 1);
  std::set<std::string> test_ids;
  for (const auto& w : s.test_set) test_ids.insert(w.id);
  CHECK(test_ids.size() == 60);
  CHECK_FALSE(test_ids.count(s.examples[0].id));
  CHECK(std::is_sorted(s.test_set.begin(), s.test_set.end(), [](const auto& a, const auto& b) { return a.id < b.id; }));
  std::map<std::string, int> per_label;
  for (const auto& w : s.test_set) ++per_label[w.label];
  CHECK(per_label["normal"] == 30);

  const auto again = sample_eval_set(pool, cfg, 1, 42);
  CHECK(again.examples[0].id == s.examples[0].id);
  for (std::size_t i = 0; i < s.test_set.size(); ++i) CHECK(again.test_set[i].id == s.test_set[i].id);

  CHECK(kind_of([&] { sample_eval_set(synthetic_pool(cfg, 30, 1), cfg, 1, 42); }) == ErrorKind::InsufficientSamples);
  CHECK(kind_of([&] { sample_eval_set(pool, cfg, -1, 42); }) == ErrorKind::BadConfig);

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto split = sample_eval_set(pool, cfg, 5, seed);
    std::set<std::string> ids;
    for (const auto& w : split.test_set) ids.insert(w.id);
    std::map<std::string, int> shot_labels;
    for (const auto& e : split.examples) {
      CHECK_FALSE(ids.count(e.id));
      ++shot_labels[e.label];
    }
    CHECK(std::abs(shot_labels["normal"] - shot_labels["conduction disturbance"]) == 1);
  }

  const auto pc = sample_eval_set(pool, cfg, 2, 3, ShotMode::per_class);
  CHECK(pc.examples.size() == 4);
  const auto ub = sample_eval_set(pool, cfg, 7, 3, ShotMode::unbalanced);
  CHECK(ub.examples.size() == 7);
  CHECK(shot_mode_from_string("per_class") == ShotMode::per_class);
}

TEST_CASE("visual evaluation with a gold-answering model") {
  const auto cfg_ds = small("ptbxl_cd", 6);
  const auto pool = synthetic_pool(cfg_ds, 8, 2);
  GoldModel model(pool, VizToolId::ecg_individual_beats, cfg_ds.label_set);
  auto t = mllm::ScriptedTransport::answering([&](const nlohmann::json& b) { return model.answer(b); });
  EvalConfig cfg;
  cfg.dataset = cfg_ds;
  cfg.seed = 5;
  auto client = scripted_client(t);
  const auto out = run_eval(cfg, pool, client);
  const auto& rep = out.report;
  CHECK(rep.accuracy == 1.0);
  CHECK(rep.per_sample.size() == 12);
  CHECK_NOTHROW(rep.check_consistency());
  REQUIRE(rep.choice);
  CHECK(rep.choice->selected == VizToolId::ecg_individual_beats);
  CHECK(rep.prompts == 12);
  CHECK(rep.tokens.image_tokens == 12 * 2 * 255);
  CHECK(t->calls() == 13);  // one filter call, single tool so no selection
  CHECK(out.digests.size() == 13);
  CHECK(out.images.size() == 2);
  CHECK(rep.comparison.visual_total == rep.tokens.total);
  CHECK(rep.comparison.text_only_total > rep.comparison.visual_total);

  SUBCASE("parallel and repeated runs give identical reports") {
    auto c1 = scripted_client(t, 1);
    EvalOptions one;
    one.jobs = 1;
    const auto a = run_eval(cfg, pool, c1, one).report.to_json().dump();
    auto c4 = scripted_client(t, 4);
    EvalOptions four;
    four.jobs = 4;
    const auto b = run_eval(cfg, pool, c4, four).report.to_json().dump();
    CHECK(a == b);
    CHECK(a == rep.to_json().dump());
  }
  SUBCASE("unparseable replies count as wrong") {
    model.silent.insert(rep.per_sample[0].id);
    auto c = scripted_client(t);
    const auto r = run_eval(cfg, pool, c).report;
    CHECK(r.accuracy == doctest::Approx(11.0 / 12.0));
    CHECK(r.per_sample[0].method == "no_label");
    CHECK_FALSE(r.per_sample[0].predicted);
    CHECK_NOTHROW(r.check_consistency());
    std::size_t unlabeled = 0;
    for (const auto& row : r.confusion) unlabeled += row.back();
    CHECK(unlabeled == 1);
  }
  SUBCASE("choices are reused") {
    EvalOptions o;
    o.choice_cache = out.choices;
    auto c = scripted_client(t);
    const auto before = t->calls();
    run_eval(cfg, pool, c, o);
    CHECK(t->calls() - before == 12);
  }
  SUBCASE("tampered reports fail the consistency check") {
    auto broken = rep;
    broken.accuracy = 0.5;
    CHECK(kind_of([&] { broken.check_consistency(); }) == ErrorKind::BadParams);
  }
}

TEST_CASE("text pipelines") {
  const auto cfg_ds = small("ptbxl_cd", 3);
  const auto pool = synthetic_pool(cfg_ds, 5, 2);
  GoldModel model(pool, VizToolId::ecg_individual_beats, cfg_ds.label_set);
  auto t = mllm::ScriptedTransport::answering([&](const nlohmann::json& b) { return model.answer(b); });
  EvalConfig cfg;
  cfg.dataset = cfg_ds;
  cfg.prompt_kind = PromptKind::text_only;
  auto client = scripted_client(t);
  const auto text = run_eval(cfg, pool, client).report;
  CHECK(text.accuracy == 1.0);
  CHECK(text.tokens.image_tokens == 0);
  CHECK(text.comparison.visual_reduction() > 1.0);

  cfg.prompt_kind = PromptKind::text_summarized;
  cfg.shots = 2;
  const auto before = t->calls();
  const auto summ = run_eval(cfg, pool, client).report;
  CHECK(summ.accuracy == 1.0);
  CHECK_FALSE(summ.choice);
  CHECK(summ.prompts == 2 + 6 * 2);
  CHECK(t->calls() - before == 14);
  REQUIRE(summ.comparison.summarized_total);
  CHECK(*summ.comparison.summarized_total == summ.tokens.total);
  for (const auto& s : summ.per_sample) CHECK(s.digests.size() == 2);

  cfg.cot = true;
  cfg.prompt_kind = PromptKind::visual;
  cfg.shots = 1;
  const auto cot = run_eval(cfg, pool, client).report;
  CHECK(cot.accuracy == 1.0);
  CHECK(cot.to_markdown().find("chain of thought") != std::string::npos);
}

TEST_CASE("token accounting across prompt kinds") {
  const auto hhar = small("hhar", 1);
  const auto pool = synthetic_pool(hhar, 3, 4);
  auto t = mllm::ScriptedTransport::answering([](const nlohmann::json& b) {
    return mllm::wire_text(b).find("Output a JSON array") != std::string::npos ? "[\"raw_waveform\"]" : "Answer: walk";
  });
  auto client = scripted_client(t);
  EvalConfig cfg;
  cfg.dataset = hhar;
  const auto visual = run_eval(cfg, pool, client).report;
  cfg.prompt_kind = PromptKind::text_only;
  const auto text = run_eval(cfg, pool, client).report;
  CHECK(visual.comparison.text_only_total == text.tokens.total);
  CHECK(visual.tokens.total * 5 < text.tokens.total);
  CHECK(visual.accuracy == doctest::Approx(1.0 / 6.0));

  cfg.prompt_kind = PromptKind::visual;
  for (int shots : {1, 3, 5}) {
    cfg.shots = shots;
    const auto r = run_eval(cfg, pool, client).report;
    CHECK(r.tokens.image_tokens == r.prompts * static_cast<std::size_t>(shots + 1) * 255);
  }
}

TEST_CASE("token estimates") {
  const auto raw = builtin_tool(VizToolId::raw_waveform);
  const auto hhar = estimate_tokens(dataset("hhar"), 1, raw);
  CHECK(hhar.visual.image_tokens == 510);
  CHECK(hhar.reduction() >= 10.0);
  CHECK(estimate_tokens(dataset("hhar"), 0, raw).reduction() > 1.0);
  double best = 0.0;
  std::string best_id;
  for (const auto& c : registry()) {
    const double f = estimate_tokens(c, 1, raw).reduction();
    if (f > best) {
      best = f;
      best_id = c.id;
    }
  }
  CHECK(best_id == "wesad");
}
