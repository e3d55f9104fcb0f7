#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vizprompt/mllm.hpp"
#include "vizprompt/prompt.hpp"
#include "vizprompt/render.hpp"
#include "vizprompt/signal.hpp"
#include "vizprompt/visgen.hpp"

namespace vizprompt::eval {

// ---- dataset registry -------------------------------------------------------

struct DatasetConfig {
  std::string id;
  Modality modality = Modality::generic;
  double sampling_rate_hz = 0.0;
  double window_s = 0.0;
  int channels = 1;
  std::vector<std::string> channel_names;
  std::vector<std::string> label_set;
  int test_per_class = 30;
  std::string task_description;
  std::string data_description;

  std::size_t window_samples() const;
  TaskSpec task() const;
  // Throws BadConfig.
  void validate() const;

  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

// hhar, utd_mhad, swim, ptbxl_cd, ptbxl_mi, ptbxl_hyp, ptbxl_sttc, emg_gesture, wesad.
const std::vector<DatasetConfig>& registry();
// Throws UnknownDataset listing the known ids.
const DatasetConfig& dataset(std::string_view id);

// ---- labeled pools ----------------------------------------------------------

struct LabeledWindow {
  std::string id;
  std::string label;
  Window window;
};

// Seeded synthetic stand-in for the dataset: `per_class` windows per label
// spread over `users` users, each user with its own gain and offset, then
// z-normalized per user. Ids are "<dataset>-<5 digits>", labels interleaved.
std::vector<LabeledWindow> synthetic_pool(const DatasetConfig& cfg, std::size_t per_class, std::uint64_t seed,
                                          std::size_t users = 4);

// Pool size per label used by the command-line runs: the test windows plus
// room for up to 10 examples per label.
std::size_t default_pool_per_class(const DatasetConfig& cfg);

// Every "<name>.csv" in `dir` with a "<name>.json" sidecar carrying a label
// (and usually user_id) becomes non-overlapping windows of cfg.window_s.
// Windows are z-normalized per user over all of that user's windows.
// Throws the loader errors, BadConfig for a label outside the label set or a
// rate or channel count differing from cfg.
std::vector<LabeledWindow> load_pool(const std::string& dir, const DatasetConfig& cfg);

enum class ShotMode {
  balanced,    // round-robin over a seeded label order
  unbalanced,  // uniformly from every non-test window
  per_class,   // `shots` examples for every label
};
std::string_view to_string(ShotMode m);
ShotMode shot_mode_from_string(std::string_view name);  // throws BadConfig

struct EvalSplit {
  std::vector<LabeledWindow> examples;  // prompt order
  std::vector<LabeledWindow> test_set;  // sorted by id
};

// test_per_class windows per label for testing, plus the examples, disjoint.
// Throws InsufficientSamples naming the first label without enough windows.
EvalSplit sample_eval_set(const std::vector<LabeledWindow>& pool, const DatasetConfig& cfg, int shots,
                          std::uint64_t seed, ShotMode mode = ShotMode::balanced);

// ---- motivation study -------------------------------------------------------

enum class WaveKind { sine, sawtooth };
std::string_view to_string(WaveKind k);

struct WaveTask {
  WaveKind kind = WaveKind::sine;
  int length = 100;
  double frequency_cycles = 1.0;  // cycles over the whole sequence
  double amplitude = 1.0;
  double phase = 0.0;
  double noise_std = 0.0;
  double offset = 0.0;
  std::uint64_t seed = 0;

  // Throws BadParams unless length >= 8, frequency and amplitude > 0, noise >= 0.
  void validate() const;
};

// offset + A*sin(2*pi*f*t/L + phase) or offset + A*saw(...) plus Gaussian
// noise, where saw rises from -1 to 1 once per cycle.
std::vector<double> gen_wave(const WaveTask& task);

// Throws SignalTooShort below 8 samples.
double oracle_mean(std::span<const double> seq);
// Sawtooth when the skewness of the first differences exceeds 0.8 in
// magnitude. Throws SignalTooShort below 8 samples.
WaveKind oracle_wave_kind(std::span<const double> seq);

// A seeded task: kind, frequency in [1, min(10, L/8)], amplitude in [0.5, 2],
// any phase, offset 0.
WaveTask random_wave_task(int length, std::uint64_t seed, double noise_fraction = 0.0);

// The last number after "Answer:", else the last number in the text.
std::optional<double> parse_number_answer(std::string_view text);

struct MotivationRow {
  int length = 0;
  int trials = 0;
  double mean_error_rate = 0.0;  // mean |predicted - true| / |true|, unparsed replies count 1
  double classification_accuracy = 0.0;
};

struct MotivationPrompts {
  PromptMessage mean;
  PromptMessage wave;
  double true_mean = 0.0;
  WaveKind true_kind = WaveKind::sine;
};

// The two 1-shot text prompts of one trial.
MotivationPrompts motivation_prompts(int length, std::uint64_t seed, const Templates* templates = nullptr);

// n_trials trials per length, each querying both prompts. Throws BadParams
// for n_trials < 1 or an empty length list; propagates client errors.
std::vector<MotivationRow> run_motivation_study(const std::vector<int>& lengths, int n_trials,
                                                mllm::MllmClient& client, std::uint64_t seed = 0,
                                                const Templates* templates = nullptr);

nlohmann::json motivation_json(const std::vector<MotivationRow>& rows);
std::string motivation_markdown(const std::vector<MotivationRow>& rows);
PlotImage motivation_plot(const std::vector<MotivationRow>& rows);

// ---- evaluation ---------------------------------------------------------------

enum class PromptKind { visual, text_only, text_summarized };
std::string_view to_string(PromptKind k);
PromptKind prompt_kind_from_string(std::string_view name);  // also accepts "text" and "summarized"

struct EvalConfig {
  DatasetConfig dataset;
  PromptKind prompt_kind = PromptKind::visual;
  int shots = 1;
  bool cot = false;
  Layout layout = Layout::single_plot;
  std::uint64_t seed = 0;
  mllm::Mode mode = mllm::Mode::replay;
  ShotMode shot_mode = ShotMode::balanced;
  int decimals = 2;

  // Throws BadConfig for negative shots or decimals, or an invalid dataset.
  void validate() const;
  nlohmann::json to_json() const;
};

struct EvalOptions {
  visgen::VizCatalog catalog = visgen::VizCatalog::builtin();
  const Templates* templates = nullptr;
  const Tokenizer* tokenizer = nullptr;  // fallback tokenizer when null
  // Worker threads issuing sample queries; 0 uses the client's in-flight limit.
  std::size_t jobs = 0;
  // Previously resolved choices (choices.json) to reuse.
  nlohmann::json choice_cache = nlohmann::json::object();
};

struct SampleResult {
  std::string id;
  std::string gold;
  std::optional<std::string> predicted;
  std::string method;  // "format", "fuzzy", or the extraction failure
  std::vector<std::string> digests;  // request digests in query order
};

// Token totals of the test-set prompts, actual or built for comparison only.
struct TokenComparison {
  std::size_t text_only_total = 0;
  std::size_t visual_total = 0;
  std::optional<std::size_t> summarized_total;  // summarized runs only
  VizToolId visual_tool = VizToolId::raw_waveform;

  double visual_reduction() const;  // text_only_total / visual_total
  nlohmann::json to_json() const;
};

struct EvalReport {
  EvalConfig config;
  std::vector<std::string> labels;
  // Rows are gold labels; columns are the labels plus a last column for
  // replies without a usable label.
  std::vector<std::vector<std::size_t>> confusion;
  double accuracy = 0.0;
  TokenReport tokens;  // every classification and summarization prompt sent
  std::size_t prompts = 0;
  std::size_t feature_fallbacks = 0;
  TokenComparison comparison;
  std::optional<visgen::VisualizationChoice> choice;
  std::vector<std::string> example_ids;
  std::vector<SampleResult> per_sample;  // sorted by id

  nlohmann::json to_json() const;
  std::string to_markdown() const;
  // Throws BadParams when accuracy, confusion and per_sample disagree.
  void check_consistency() const;
};

struct EvalOutput {
  EvalReport report;
  nlohmann::json choices = nlohmann::json::object();  // generator cache
  std::vector<std::string> digests;                   // every request, sorted, unique
  std::vector<std::pair<std::string, PlotImage>> images;  // file stem -> example and first target plots
  std::vector<std::string> warnings;
};

EvalOutput run_eval(const EvalConfig& cfg, const std::vector<LabeledWindow>& pool, mllm::MllmClient& client,
                    const EvalOptions& options = {});

// Token totals for one prompt pair (examples + target) without any model call.
struct TokenEstimate {
  TokenReport visual;
  TokenReport text_only;
  double reduction() const;
};

TokenEstimate estimate_tokens(const DatasetConfig& cfg, int shots, const VizTool& tool, std::uint64_t seed = 0,
                              const Tokenizer* tokenizer = nullptr, int decimals = 2);

}  // namespace vizprompt::eval
