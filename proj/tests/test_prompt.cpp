#include <doctest.h>

#include <algorithm>
#include <cctype>
#include <nlohmann/json.hpp>
#include <random>

#include "support.hpp"
#include "vizprompt/prompt.hpp"

using namespace vizprompt;
using namespace testsupport;

namespace {


const PlotImage& image_at(const PromptMessage& m, std::size_t i) { return std::get<ImagePart>(m.parts.at(i)).image; }
const std::string& text_at(const PromptMessage& m, std::size_t i) { return std::get<TextPart>(m.parts.at(i)).text; }

std::string random_text(std::mt19937& gen, std::size_t n) {
  static const std::string alphabet = "aZq  \n\t0123456789.,-+'/:;()_\xc3\xa9";
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += alphabet[pick(gen)];
  return s;
}

std::shared_ptr<BpeTokenizer> o200k() {
  const std::string path = VIZPROMPT_O200K_VOCAB;
  if (path.empty()) return nullptr;
  return BpeTokenizer::load(path);
}

Window ramp_window(double seconds, double fs = 50.0) {
  std::vector<double> v(static_cast<std::size_t>(seconds * fs));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(0.05 * static_cast<double>(i));
  return make_window({v}, fs, Modality::accelerometer);
}

}  // namespace

TEST_CASE("image token cost") {
  CHECK(image_token_cost(512, 512) == 255);
  CHECK(image_token_cost(1024, 512) == 425);
  CHECK(image_token_cost(1, 1) == 255);
  CHECK(image_token_cost(513, 1025) == 85 + 170 * 6);
  CHECK(kind_of([] { image_token_cost(0, 5); }) == ErrorKind::BadParams);
}

TEST_CASE("fallback tokenizer rules") {
  FallbackTokenizer t;
  CHECK(t.count("") == 0);
  CHECK(t.count("1.02 -0.88 0.43") == 6);
  CHECK(t.count("hello world") == 2);
  CHECK(t.count("abcdefghijk") == 2);
  CHECK(t.count("1234567") == 3);
  CHECK(t.count("0.1234") == 3);
  CHECK(t.count("a  b") == 3);
  CHECK(t.count("x,-1") == 3);
  CHECK(t.count("x-1") == 3);
  CHECK(t.count("...") == 1);
  CHECK(t.count("\n") == 1);
  CHECK(t.approximate());
  CHECK(count_text_tokens("a b", &t) == 2);
  CHECK(kind_of([] { count_text_tokens("x", nullptr); }) == ErrorKind::TokenizerUnavailable);
}

TEST_CASE("tokenizer counts never decrease when text is appended") {
  std::mt19937 gen(5);
  FallbackTokenizer fb;
  const auto bpe = o200k();
  for (int trial = 0; trial < 300; ++trial) {
    const std::string s = random_text(gen, 30);
    std::size_t prev = 0, prev_bpe = 0;
    for (std::size_t k = 0; k <= s.size(); ++k) {
      const auto prefix = std::string_view(s).substr(0, k);
      const std::size_t c = fb.count(prefix);
      REQUIRE(c >= prev);
      prev = c;
      if (bpe && trial < 60) {
        const std::size_t b = bpe->count(prefix);
        REQUIRE(b >= prev_bpe);
        prev_bpe = b;
      }
    }
  }
}

TEST_CASE("pre-tokenizer splits") {
  using V = std::vector<std::string_view>;
  CHECK(pretokenize("Hello world") == V{"Hello", " world"});
  CHECK(pretokenize("a  b") == V{"a", " ", " b"});
  CHECK(pretokenize("x\n\ny") == V{"x", "\n\n", "y"});
  CHECK(pretokenize("I'm here") == V{"I'm", " here"});
  CHECK(pretokenize("12345") == V{"123", "45"});
  CHECK(pretokenize("HTTPServer ok") == V{"HTTPServer", " ok"});
  CHECK(pretokenize("ABC def") == V{"ABC", " def"});
  CHECK(pretokenize(" ...!\n") == V{" ...!\n"});
  CHECK(pretokenize("  \n  x") == V{"  \n", " ", " x"});
  CHECK(pretokenize("end  ") == V{"end", "  "});
  CHECK(pretokenize("").empty());
}

TEST_CASE("byte pair merges by lowest rank") {
  auto t = BpeTokenizer::from_ranks({{"a", 0}, {"b", 1}, {"c", 2}, {"ab", 3}, {"bc", 4}, {"abc", 5}}, "toy");
  CHECK(t->count("abc") == 1);
  // ab(3) beats bc(4), then ab+c is abc(5); the trailing b stays alone.
  CHECK(t->encode_pieces("abcb") == std::vector<std::string>{"abc", "b"});
  // Only bc is known inside "cbc": c + bc.
  CHECK(t->encode_pieces("cbc") == std::vector<std::string>{"c", "bc"});
  // Unknown bytes remain single tokens.
  CHECK(t->count("xyz") == 3);
  CHECK_FALSE(t->approximate());
  CHECK(kind_of([] { BpeTokenizer::load("/nonexistent/vocab.tiktoken"); }) == ErrorKind::TokenizerUnavailable);
}

TEST_CASE("o200k counts match the reference") {
  const auto bpe = o200k();
  if (!bpe) {
    MESSAGE("o200k vocabulary not found; exact-count check skipped");
    return;
  }
  const auto golden = nlohmann::json::parse(read_file(source_dir() / "tests/golden/o200k_counts.json"));
  REQUIRE(golden.size() > 400);
  for (const auto& row : golden) {
    INFO(row["text"].get<std::string>());
    CHECK(bpe->count(row["text"].get<std::string>()) == row["tokens"].get<std::size_t>());
  }
  CHECK(bpe->count("1.02 -0.88 0.43") == 11);
}

TEST_CASE("template filling") {
  CHECK(fill_template("a {{x}} b {{ y }}", {{"x", "1"}, {"y", "2"}}) == "a 1 b 2");
  CHECK(fill_template("no placeholders", {}) == "no placeholders");
  CHECK(kind_of([] { fill_template("{{missing}}", {}); }) == ErrorKind::TemplateError);
  CHECK(kind_of([] { fill_template("{{open", {{"open", ""}}); }) == ErrorKind::TemplateError);

  const auto& b = Templates::builtin();
  for (const char* stem : {"visual_instruction", "text_instruction", "summarize_instruction",
                           "summary_classify_instruction", "answer_format", "filter_instruction",
                           "selection_intro", "selection_instruction", "format_reminder"}) {
    CHECK_FALSE(b.get(stem).empty());
    CHECK(b.get(stem).back() != '\n');
  }
  CHECK(kind_of([&] { b.get("nope"); }) == ErrorKind::TemplateError);

  const auto dir = std::filesystem::temp_directory_path() / "vizprompt_tmpl_test";
  write_file(dir / "answer_format.txt", "Say only the label from {{labels}}.\n");
  const auto custom = Templates::load_dir(dir.string());
  CHECK(custom.get("answer_format") == "Say only the label from {{labels}}.");
  CHECK(custom.get("visual_instruction") == b.get("visual_instruction"));
  VisualPromptOptions opt;
  opt.templates = &custom;
  const auto msg = build_visual_prompt({}, imu_fixture(), builtin_tool(VizToolId::raw_waveform), har_task(), opt);
  CHECK(text_at(msg, 0).find("Say only the label from walking, sitting, standing.") != std::string::npos);
  std::filesystem::remove_all(dir);
  CHECK(kind_of([] { Templates::load_dir("/nonexistent/templates"); }) == ErrorKind::TemplateError);
}

TEST_CASE("visual prompt structure") {
  const auto tool = builtin_tool(VizToolId::raw_waveform);
  const auto task = har_task();
  const Window ex = imu_fixture(1), target = imu_fixture(2);

  SUBCASE("one example") {
    const auto msg = build_visual_prompt({{ex, "walking"}}, target, tool, task);
    REQUIRE(msg.parts.size() == 3);
    CHECK(std::holds_alternative<TextPart>(msg.parts[0]));
    CHECK(image_at(msg, 1).title == "walking");
    CHECK(image_at(msg, 2).title == "target data");
    CHECK(image_at(msg, 1) == render_labeled_example(ex, tool, "walking"));
    CHECK(image_at(msg, 2) == render(target, tool, "target data"));
    CHECK_NOTHROW(msg.validate());
  }
  SUBCASE("zero shot") {
    const auto msg = build_visual_prompt({}, target, tool, task);
    CHECK(msg.parts.size() == 2);
    CHECK(msg.text_part_count() == 1);
    CHECK(image_at(msg, 1).title == "target data");
  }
  SUBCASE("five examples") {
    std::vector<std::pair<Window, std::string>> exs;
    for (int i = 0; i < 5; ++i) exs.emplace_back(imu_fixture(10 + i), task.label_set[i % 3]);
    const auto msg = build_visual_prompt(exs, target, tool, task);
    CHECK(msg.image_count() == 6);
    const auto r = token_report(msg, FallbackTokenizer{});
    CHECK(r.image_tokens == 6 * 255);
    CHECK(r.total == r.text_tokens + r.image_tokens);
  }
  SUBCASE("instruction text") {
    const auto msg = build_visual_prompt({{ex, "walking"}}, target, tool, task);
    const auto& text = text_at(msg, 0);
    for (const auto& l : task.label_set) CHECK(text.find(l) != std::string::npos);
    CHECK(text.find(task.task_description) != std::string::npos);
    CHECK(text.find(task.data_description) != std::string::npos);
    CHECK(text.find("2 plot image(s)") != std::string::npos);
    CHECK(text.find("\"target data\"") != std::string::npos);
    const auto last_line = text.substr(text.rfind('\n') + 1);
    CHECK(last_line.find("Answer: <label>") != std::string::npos);
    CHECK(matches_golden("visual_prompt_1shot.txt", text));
  }
  SUBCASE("mixed modalities") {
    const auto ecg = tool_fixture(VizToolId::ecg_signal_peaks);
    CHECK(kind_of([&] { build_visual_prompt({{ecg, "walking"}}, target, tool, task); }) ==
          ErrorKind::IncompatibleModality);
  }
  SUBCASE("deterministic") {
    const auto a = build_visual_prompt({{ex, "walking"}}, target, tool, task);
    const auto b = build_visual_prompt({{ex, "walking"}}, target, tool, task);
    CHECK(text_at(a, 0) == text_at(b, 0));
    CHECK(encode_png(image_at(a, 2)) == encode_png(image_at(b, 2)));
  }
}

TEST_CASE("image cost ignores window length, text cost grows with it") {
  const auto tool = builtin_tool(VizToolId::raw_waveform);
  const auto task = har_task();
  FallbackTokenizer fb;
  const auto v5 = token_report(build_visual_prompt({{ramp_window(5), "walking"}}, ramp_window(5), tool, task), fb);
  const auto v60 = token_report(build_visual_prompt({{ramp_window(60), "walking"}}, ramp_window(60), tool, task), fb);
  CHECK(v5.image_tokens == v60.image_tokens);
  CHECK(v5.image_tokens == 510);

  std::size_t prev = 0;
  for (double secs : {1.0, 5.0, 20.0, 60.0}) {
    const auto t = token_report(build_text_prompt({{ramp_window(secs), "walking"}}, ramp_window(secs), task), fb);
    CHECK(t.text_tokens > prev);
    prev = t.text_tokens;
  }
}

TEST_CASE("token report sums its parts") {
  FallbackTokenizer fb;
  const auto msg = apply_cot(build_visual_prompt({{imu_fixture(1), "sitting"}, {imu_fixture(4), "walking"}},
                                                 imu_fixture(2), builtin_tool(VizToolId::psd), har_task()));
  const auto r = token_report(msg, fb);
  REQUIRE(r.per_part.size() == msg.parts.size());
  std::size_t text = 0, image = 0;
  for (std::size_t i = 0; i < msg.parts.size(); ++i) {
    if (const auto* t = std::get_if<TextPart>(&msg.parts[i])) {
      text += fb.count(t->text);
    } else {
      const auto& img = std::get<ImagePart>(msg.parts[i]).image;
      image += image_token_cost(img.width_px, img.height_px);
    }
    CHECK(r.per_part[i].index == i);
  }
  CHECK(r.text_tokens == text);
  CHECK(r.image_tokens == image);
  CHECK(r.total == text + image);
  CHECK(r.approximate);
  CHECK(r.tokenizer == "fallback");

  TokenReport sum;
  sum += r;
  sum += r;
  CHECK(sum.total == 2 * r.total);
  CHECK(sum.per_part.size() == 2 * r.per_part.size());
}

TEST_CASE("text prompt serialization") {
  const auto task = har_task();
  const auto target = make_window({{0.5, 1.25, -0.333}}, 50.0, Modality::accelerometer);

  const auto msg = build_text_prompt({}, target, task);
  REQUIRE(msg.parts.size() == 1);
  const auto& text = text_at(msg, 0);
  CHECK(text.find("signal: 0.50, 1.25, -0.33") != std::string::npos);
  CHECK(text.find("Sampling rate: 50 Hz, 3 samples per channel.") != std::string::npos);
  for (const auto& l : task.label_set) CHECK(text.find(l) != std::string::npos);
  CHECK_FALSE(msg.feature_fallback);

  TextPromptOptions three;
  three.decimals = 3;
  CHECK(text_at(build_text_prompt({}, target, task, three), 0).find("0.500, 1.250, -0.333") != std::string::npos);

  CHECK(serialize_window(make_window({{-0.001, 2.0}, {1.0, 3.0}}, 10.0, Modality::accelerometer), 2) ==
        "Sampling rate: 10 Hz, 2 samples per channel.\nx: 0.00, 2.00\ny: 1.00, 3.00\n");

  const auto with_example = build_text_prompt({{target, "sitting"}}, target, task);
  CHECK(text_at(with_example, 0).find("Example 1 (label: sitting):") != std::string::npos);
  CHECK(kind_of([&] { build_text_prompt({{tool_fixture(VizToolId::ecg_heart_rate), "x"}}, target, task); }) ==
        ErrorKind::IncompatibleModality);
}

TEST_CASE("text prompt peak features") {
  std::vector<double> v(300, 0.0);
  v[100] = 0.95;
  v[200] = 0.91;
  const auto target = make_window({v}, 100.0, Modality::ecg);
  TextPromptOptions opt;
  opt.target_features = {{"Detected peaks (index: value)", format_peaks({100, 200}, v, 2)}};
  const auto text = text_at(build_text_prompt({}, target, har_task(), opt), 0);
  CHECK(text.find("Detected peaks (index: value):\n100: 0.95, 200: 0.91\n") != std::string::npos);
  CHECK(matches_golden("text_prompt_peaks.txt", text));
  CHECK(kind_of([&] { format_peaks({400}, v, 2); }) == ErrorKind::BadParams);
  CHECK(format_peaks({}, v, 2) == "none");
}

TEST_CASE("parity features mirror the selected tool") {
  for (auto id : all_tool_ids()) {
    INFO(to_string(id));
    const auto w = tool_fixture(id);
    const auto blocks = parity_features(w, builtin_tool(id), 2);
    if (id == VizToolId::raw_waveform) {
      CHECK(blocks.empty());
      continue;
    }
    REQUIRE_FALSE(blocks.empty());
    for (const auto& b : blocks) {
      CHECK_FALSE(b.title.empty());
      CHECK_FALSE(b.body.empty());
    }
    const auto again = parity_features(w, builtin_tool(id), 2);
    CHECK(again.size() == blocks.size());
  }

  const auto ecg = tool_fixture(VizToolId::ecg_signal_peaks);
  const auto blocks = parity_features(ecg, builtin_tool(VizToolId::ecg_signal_peaks), 2);
  const auto it = std::find_if(blocks.begin(), blocks.end(),
                               [](const FeatureBlock& b) { return b.title == "Detected peaks (index: value)"; });
  REQUIRE(it != blocks.end());
  const auto peaks = dsp::detect_peaks(ecg.series.values(0), 100.0, dsp::PeakPreset::ecg_r);
  CHECK(static_cast<std::size_t>(std::count(it->body.begin(), it->body.end(), ':')) == peaks.indices.size());

  const auto imu = imu_fixture();
  const auto imu_blocks = parity_features(imu, builtin_tool(VizToolId::psd), 2);
  CHECK(imu_blocks.size() == 3);
  CHECK(imu_blocks[0].title.rfind("x ", 0) == 0);
}

TEST_CASE("feature blocks are dropped past the token limit") {
  const auto ecg = tool_fixture(VizToolId::ecg_signal_peaks);
  FallbackTokenizer fb;
  TextPromptOptions opt;
  opt.parity_tool = builtin_tool(VizToolId::ecg_signal_peaks);
  opt.tokenizer = &fb;

  const auto full = build_text_prompt({}, ecg, har_task(), opt);
  CHECK_FALSE(full.feature_fallback);
  CHECK(text_at(full, 0).find("Detected peaks (index: value)") != std::string::npos);

  opt.token_limit = fb.count(text_at(full, 0)) - 1;
  const auto cut = build_text_prompt({}, ecg, har_task(), opt);
  CHECK(cut.feature_fallback);
  CHECK(text_at(cut, 0).find("Detected peaks") == std::string::npos);
  CHECK(text_at(cut, 0).find(serialize_window(ecg, 2)) != std::string::npos);
  CHECK(token_report(cut, fb).feature_fallback);
}

TEST_CASE("chain of thought suffix") {
  const auto base = build_visual_prompt({}, imu_fixture(), builtin_tool(VizToolId::raw_waveform), har_task());
  const auto once = apply_cot(base);
  CHECK(once.parts.size() == base.parts.size());
  const auto& t = text_at(once, 0);
  CHECK(t.substr(t.rfind('\n') + 1) == "Let's think step-by-step.");
  CHECK(t.substr(0, text_at(base, 0).size()) == text_at(base, 0));
  CHECK(image_at(once, 1) == image_at(base, 1));
  CHECK(matches_golden("visual_prompt_cot.txt", once.joined_text()));

  const auto twice = apply_cot(once);
  const auto& t2 = text_at(twice, 0);
  std::size_t n = 0;
  for (auto p = t2.find(kCotSuffix); p != std::string::npos; p = t2.find(kCotSuffix, p + 1)) ++n;
  CHECK(n == 2);

  PromptMessage images_only;
  images_only.parts.push_back(ImagePart{image_at(base, 1)});
  CHECK(kind_of([&] { apply_cot(images_only); }) == ErrorKind::NoTextPart);
}

TEST_CASE("summarize then classify") {
  const auto task = har_task();
  const auto target = make_window({{0.5, 1.25, -0.333}}, 50.0, Modality::accelerometer);
  const auto stage1 = build_summarization_prompt(target, task);
  REQUIRE(stage1.parts.size() == 1);
  CHECK(text_at(stage1, 0).find("summarize the pattern or tendency of the data") != std::string::npos);
  CHECK(text_at(stage1, 0).find("0.50, 1.25, -0.33") != std::string::npos);
  CHECK(matches_golden("summarization_prompt.txt", stage1.joined_text()));

  const auto stage2 = build_summary_classification_prompt({{"steady oscillation", "walking"}}, "increasing trend", task);
  const auto& t = text_at(stage2, 0);
  CHECK(t.find("increasing trend") != std::string::npos);
  CHECK(t.find("steady oscillation") != std::string::npos);
  CHECK(std::none_of(t.begin(), t.end(), [](unsigned char c) { return std::isdigit(c) && c != '1'; }));
  CHECK(t.find("0.50") == std::string::npos);
  for (const auto& l : task.label_set) CHECK(t.find(l) != std::string::npos);
  CHECK(matches_golden("summary_classification_prompt.txt", t));

  CHECK(kind_of([&] { build_summary_classification_prompt({}, "", task); }) == ErrorKind::EmptySummary);
  CHECK(kind_of([&] { build_summary_classification_prompt({}, " \n", task); }) == ErrorKind::EmptySummary);
  CHECK(kind_of([&] { build_summary_classification_prompt({{"", "walking"}}, "ok", task); }) ==
        ErrorKind::EmptySummary);
}

TEST_CASE("message and task invariants") {
  PromptMessage empty;
  CHECK(kind_of([&] { empty.validate(); }) == ErrorKind::BadParams);
  PromptMessage sys;
  sys.role = Role::system;
  sys.parts.push_back(ImagePart{PlotImage(4, 4)});
  CHECK(kind_of([&] { sys.validate(); }) == ErrorKind::BadParams);

  TaskSpec t = har_task();
  t.label_set.push_back("walking");
  CHECK(kind_of([&] { t.validate(); }) == ErrorKind::BadParams);
  t.label_set.clear();
  CHECK(kind_of([&] { t.validate(); }) == ErrorKind::BadParams);
}
