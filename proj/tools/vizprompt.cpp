// Command-line entry point. Exit codes: 0 ok, 1 other failure, 2 usage or
// validation error, 3 replay miss, 4 missing credentials.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "run_support.hpp"
#include "vizprompt/error.hpp"
#include "vizprompt/eval.hpp"
#include "vizprompt/mllm.hpp"
#include "vizprompt/prompt.hpp"
#include "vizprompt/render.hpp"
#include "vizprompt/signal.hpp"
#include "vizprompt/visgen.hpp"

namespace fs = std::filesystem;
using namespace vizprompt;
using tools::write_text;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitReplayMiss = 3;
constexpr int kExitAuth = 4;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MissingTranscript: return kExitReplayMiss;
    case ErrorKind::AuthMissing: return kExitAuth;
    case ErrorKind::MalformedRow:
    case ErrorKind::ChannelCountMismatch:
    case ErrorKind::EmptyInput:
    case ErrorKind::InvalidSeries:
    case ErrorKind::NoDataForUser:
    case ErrorKind::ChannelLayoutMismatch:
    case ErrorKind::WindowLongerThanSeries:
    case ErrorKind::BadMetadata:
    case ErrorKind::BadParams:
    case ErrorKind::IncompatibleModality:
    case ErrorKind::TooManyChannels:
    case ErrorKind::TemplateError:
    case ErrorKind::UnknownTool:
    case ErrorKind::EmptyCatalog:
    case ErrorKind::BadTranscript:
    case ErrorKind::InsufficientSamples:
    case ErrorKind::UnknownDataset:
    case ErrorKind::BadConfig: return kExitUsage;
    default: return kExitFailure;
  }
}

constexpr const char* kConfigNote =
    "--config FILE reads these flags from a JSON object or TOML file keyed by the long flag names\n"
    "(e.g. {\"dataset\": \"hhar\", \"shots\": 3}); flags on the command line win.";

// Reads --config files: JSON objects (nested objects become sections) or TOML.
// Keys outside a subcommand section apply to the subcommand being run.
class JsonOrTomlConfig : public CLI::ConfigTOML {
 public:
  explicit JsonOrTomlConfig(const CLI::App* root) : root_(root) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    const std::string text(std::istreambuf_iterator<char>(input), {});
    const auto first = text.find_first_not_of(" \t\r\n");
    std::vector<CLI::ConfigItem> items;
    if (first == std::string::npos || text[first] != '{') {
      std::istringstream toml(text);
      items = CLI::ConfigTOML::from_config(toml);
    } else {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(text);
      } catch (const nlohmann::json::exception& e) {
        throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
      }
      flatten(j, {}, items);
    }
    const auto selected = root_->get_subcommands();
    if (selected.size() != 1) return items;
    const std::string sub = selected.front()->get_name();
    for (auto& item : items) {
      const bool sectioned = !item.parents.empty() && root_->get_subcommand_no_throw(item.parents.front()) != nullptr;
      if (!sectioned) item.parents.insert(item.parents.begin(), sub);
    }
    return items;
  }

 private:
  const CLI::App* root_;

  static std::string scalar(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

  static void flatten(const nlohmann::json& obj, const std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, value] : obj.items()) {
      if (value.is_object()) {
        auto p = parents;
        p.push_back(key);
        flatten(value, p, items);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
  }
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Every option of `cmd` by name with its effective value, usable as a --config file.
nlohmann::json config_snapshot(const CLI::App& cmd) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : cmd.get_options()) {
    const auto name = opt->get_single_name();
    if (name == "help" || name == "config" || name.empty()) continue;
    if (opt->get_expected_max() == 0) {
      if (opt->as<bool>()) j[name] = true;
      continue;
    }
    const auto& results = opt->results();
    if (opt->get_expected_max() > 1) {
      j[name] = results.empty() ? nlohmann::json::array() : nlohmann::json(results);
    } else {
      const auto value = results.empty() ? opt->get_default_str() : results.back();
      if (!value.empty()) j[name] = value;
    }
  }
  return j;
}

struct RunDir {
  fs::path path;
  nlohmann::json manifest;
};

RunDir open_run(const std::string& out, const std::string& run_id, const CLI::App& cmd, std::uint64_t seed,
                const std::string& mode) {
  RunDir r;
  r.path = fs::path(out) / run_id;
  fs::create_directories(r.path);
  r.manifest = {{"run_id", run_id},
                {"command", cmd.get_name()},
                {"config", config_snapshot(cmd)},
                {"versions",
                 {{"vizprompt", VIZPROMPT_VERSION},
                  {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                        std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                        std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                  {"cli11", CLI11_VERSION},
                  {"compiler", __VERSION__}}},
                {"seed", seed},
                {"transport_mode", mode},
                {"started_at", utc_now()}};
  return r;
}

void close_run(RunDir& r) {
  r.manifest["finished_at"] = utc_now();
  write_text(r.path / "manifest.json", r.manifest.dump(2) + "\n");
}

struct ClientFlags {
  std::string mode = "replay";
  std::string transcripts = "transcripts.jsonl";
  std::size_t jobs = 4;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--mode", mode, "Model transport: live, record or replay")
        ->check(CLI::IsMember({"live", "record", "replay"}))
        ->capture_default_str();
    cmd->add_option("--transcripts", transcripts, "Transcript store read in replay and extended in record mode")
        ->capture_default_str();
    cmd->add_option("--jobs", jobs, "Maximum concurrent model requests")->check(CLI::Range(1, 64))->capture_default_str();
  }

  // Live runs keep their transcripts in memory so they can be exported.
  mllm::MllmClient client() const {
    mllm::ClientConfig c;
    c.mode = mllm::mode_from_string(mode);
    c.max_in_flight = jobs;
    std::shared_ptr<mllm::TranscriptStore> store = c.mode == mllm::Mode::live
                                                       ? std::make_shared<mllm::TranscriptStore>()
                                                       : mllm::TranscriptStore::open(transcripts);
    std::shared_ptr<mllm::HttpTransport> transport;
    if (c.mode != mllm::Mode::replay) {
      const auto ep = mllm::endpoint_from_env();
      c.model = ep.model;
      transport = mllm::make_http_transport(ep);
    }
    return mllm::MllmClient(c, std::move(store), std::move(transport));
  }
};

// Writes the stored exchange of each digest, in the given order.
void export_transcripts(const mllm::MllmClient& client, const std::vector<std::string>& digests, const fs::path& path) {
  std::string text;
  if (auto store = client.store()) {
    for (const auto& d : digests) {
      if (auto line = store->record_json(d)) text += line->dump() + "\n";
    }
  }
  write_text(path, text);
}

std::vector<std::string> sorted_unique(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

struct Resources {
  std::string templates_dir;
  std::string catalog_path;
  Templates templates;
  visgen::VizCatalog catalog;

  void add_to(CLI::App* cmd, bool with_catalog) {
    cmd->add_option("--templates", templates_dir, "Directory of instruction templates overriding the bundled ones")
        ->check(CLI::ExistingDirectory);
    if (with_catalog) {
      cmd->add_option("--catalog", catalog_path, "Visualization catalog JSON")->check(CLI::ExistingFile);
    }
  }

  void load() {
    templates = templates_dir.empty() ? Templates::builtin() : Templates::load_dir(templates_dir);
    catalog = catalog_path.empty() ? visgen::VizCatalog::builtin() : visgen::VizCatalog::load(catalog_path);
  }
};

nlohmann::json tokens_json(const TokenReport& t) {
  return {{"text_tokens", t.text_tokens},
          {"image_tokens", t.image_tokens},
          {"total", t.total},
          {"tokenizer", t.tokenizer},
          {"approximate", t.approximate},
          {"feature_fallback", t.feature_fallback}};
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

// ---- visualize ----------------------------------------------------------------

struct VisualizeCmd {
  std::string input;
  std::string meta;
  std::string tool = "raw_waveform";
  std::string layout = "single_plot";
  std::string title = std::string(kTargetTitle);
  std::string out = ".";
  double seconds = 0.0;
  std::size_t index = 0;
  bool json = false;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("visualize", "Render a CSV recording with one visualization tool or all of them");
    cmd->add_option("input", input, "CSV file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--meta", meta, "Sidecar JSON (default: the input path with a .json extension)");
    cmd->add_option("--tool", tool, "Tool id, or all")->capture_default_str();
    cmd->add_option("--layout", layout, "single_plot or subplots")
        ->check(CLI::IsMember({"single_plot", "subplots"}))
        ->capture_default_str();
    cmd->add_option("--title", title, "Plot title")->capture_default_str();
    cmd->add_option("--seconds", seconds, "Window length in seconds; 0 plots the whole recording")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--index", index, "Which non-overlapping window to plot");
    cmd->add_option("--out", out, "Output directory")->capture_default_str();
    cmd->add_flag("--json", json, "Print the written and skipped files as JSON");
    cmd->footer(kConfigNote);
    cmd->callback([this] { code = run(); });
  }

  int code = kExitOk;

  int run() const {
    const std::string sidecar = meta.empty() ? fs::path(input).replace_extension(".json").string() : meta;
    const auto series = load_timeseries_file(input, load_sidecar(sidecar));
    Window window = whole_window(series);
    if (seconds > 0.0) {
      const auto windows = segment_windows(series, seconds, seconds);
      if (index >= windows.size()) {
        throw Error(ErrorKind::BadConfig, "--index " + std::to_string(index) + " is past the last of " +
                                              std::to_string(windows.size()) + " windows");
      }
      window = windows[index];
    }
    RenderStyle style;
    style.layout = layout_from_string(layout);
    std::vector<VizToolId> ids;
    if (tool == "all") {
      ids.assign(all_tool_ids().begin(), all_tool_ids().end());
    } else {
      ids.push_back(viz_tool_from_string(tool));
    }
    const auto stem = fs::path(input).stem().string();
    nlohmann::json written = nlohmann::json::array(), skipped = nlohmann::json::array();
    for (auto id : ids) {
      const auto path = fs::path(out) / (stem + "_" + std::string(to_string(id)) + ".png");
      try {
        const auto img = render(window, builtin_tool(id), title, style);
        fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
        write_png(img, path.string());
        written.push_back(path.string());
      } catch (const Error& e) {
        const bool skippable = e.kind() == ErrorKind::IncompatibleModality || e.kind() == ErrorKind::TooManyChannels ||
                               e.kind() == ErrorKind::TooFewPeaks || e.kind() == ErrorKind::SignalTooShort;
        if (ids.size() == 1 || !skippable) throw;
        std::cerr << "warning: skipped " << to_string(id) << ": " << e.what() << "\n";
        skipped.push_back({{"tool", to_string(id)}, {"reason", e.what()}});
      }
    }
    if (json) {
      std::cout << nlohmann::json({{"written", written}, {"skipped", skipped}}).dump(2) << "\n";
    } else {
      std::cout << "wrote " << written.size() << " of " << ids.size() << " plots to " << out << "\n";
    }
    return kExitOk;
  }
};

// ---- shared dataset flags ---------------------------------------------------------

struct DatasetFlags {
  std::string dataset;
  std::string pool_dir;
  std::uint64_t seed = 0;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--dataset", dataset, "Registry id or path to a dataset config JSON")->required();
    cmd->add_option("--pool", pool_dir, "Directory of labeled CSV recordings (default: synthetic data)")
        ->check(CLI::ExistingDirectory);
    cmd->add_option("--seed", seed, "Seed for data generation and sampling")->capture_default_str();
  }
};

// ---- build-prompt -------------------------------------------------------------

struct BuildPromptCmd {
  DatasetFlags data;
  Resources res;
  std::string prompt = "visual";
  int shots = 1;
  bool cot = false;
  std::string tool = "raw_waveform";
  std::string layout = "single_plot";
  int decimals = 2;
  std::string out = "results";
  std::string run_id;
  bool json = false;
  CLI::App* cmd = nullptr;
  int code = kExitOk;

  void add(CLI::App& app) {
    cmd = app.add_subcommand("build-prompt", "Build the prompt for the first test sample without querying a model");
    data.add_to(cmd);
    res.add_to(cmd, false);
    cmd->add_option("--prompt", prompt, "visual, text or summarized")
        ->check(CLI::IsMember({"visual", "text", "text_only", "summarized", "text_summarized"}))
        ->capture_default_str();
    cmd->add_option("--shots", shots, "Labeled examples per prompt")->check(CLI::NonNegativeNumber)->capture_default_str();
    cmd->add_flag("--cot", cot, "Append the step-by-step suffix");
    cmd->add_option("--tool", tool, "Visualization tool for visual prompts and parity features")->capture_default_str();
    cmd->add_option("--layout", layout, "single_plot or subplots")
        ->check(CLI::IsMember({"single_plot", "subplots"}))
        ->capture_default_str();
    cmd->add_option("--decimals", decimals, "Decimals of serialized values")->check(CLI::Range(0, 8))->capture_default_str();
    cmd->add_option("--out", out, "Results root")->capture_default_str();
    cmd->add_option("--run-id", run_id, "Run directory name (default derived from the flags)");
    cmd->add_flag("--json", json, "Print the token report as JSON");
    cmd->footer(kConfigNote);
    cmd->callback([this] { code = run(); });
  }

  int run() {
    res.load();
    const auto cfg = tools::dataset_arg(data.dataset);
    const auto kind = eval::prompt_kind_from_string(prompt);
    const auto pool = tools::pool_for(cfg, data.pool_dir, data.seed);
    const auto split = eval::sample_eval_set(pool, cfg, shots, data.seed);
    const auto task = cfg.task();
    const auto viz = res.catalog.tool(viz_tool_from_string(tool));
    std::vector<std::pair<Window, std::string>> examples;
    for (const auto& e : split.examples) examples.emplace_back(e.window, e.label);
    const auto& target = split.test_set.front().window;

    PromptMessage msg;
    if (kind == eval::PromptKind::visual) {
      RenderStyle style;
      style.layout = layout_from_string(layout);
      msg = build_visual_prompt(examples, target, viz, task, {style, &res.templates});
    } else if (kind == eval::PromptKind::text_only) {
      TextPromptOptions t;
      t.decimals = decimals;
      t.parity_tool = viz;
      t.templates = &res.templates;
      msg = build_text_prompt(examples, target, task, t);
    } else {
      msg = build_summarization_prompt(target, task, decimals, &res.templates);
    }
    if (cot && kind != eval::PromptKind::text_summarized) msg = apply_cot(msg);

    if (run_id.empty()) {
      run_id = cfg.id + "_" + std::string(to_string(kind)) + "_" + std::to_string(shots) + "shot_prompt";
    }
    auto run = open_run(out, run_id, *cmd, data.seed, "none");
    std::string text;
    std::size_t image_no = 0;
    for (const auto& part : msg.parts) {
      if (const auto* t = std::get_if<TextPart>(&part)) {
        text += t->text + "\n";
      } else {
        const auto& img = std::get<ImagePart>(part).image;
        char name[32];
        std::snprintf(name, sizeof name, "image_%02zu.png", ++image_no);
        write_png(img, (run.path / name).string());
        text += "<image " + std::string(name) + ": " + img.title + ">\n";
      }
    }
    write_text(run.path / "prompt.txt", text);
    const auto tok = default_tokenizer();
    const auto report = token_report(msg, *tok);
    auto tj = tokens_json(report);
    tj["images"] = msg.image_count();
    tj["target_id"] = split.test_set.front().id;
    write_text(run.path / "tokens.json", tj.dump(2) + "\n");
    close_run(run);
    if (json) {
      std::cout << tj.dump(2) << "\n";
    } else {
      std::cout << to_string(kind) << " prompt: " << msg.image_count() << " images, " << report.text_tokens
                << " text + " << report.image_tokens << " image = " << report.total << " tokens ("
                << report.tokenizer << (report.approximate ? ", approximate" : "") << ") -> " << run.path.string()
                << "\n";
    }
    return kExitOk;
  }
};

// ---- generate -----------------------------------------------------------------

struct GenerateCmd {
  DatasetFlags data;
  ClientFlags client_flags;
  Resources res;
  std::string out = "results";
  std::string run_id;
  bool json = false;
  CLI::App* cmd = nullptr;
  int code = kExitOk;

  void add(CLI::App& app) {
    cmd = app.add_subcommand("generate", "Pick the visualization for a dataset with the two-phase generator");
    data.add_to(cmd);
    client_flags.add_to(cmd);
    res.add_to(cmd, true);
    cmd->add_option("--out", out, "Results root")->capture_default_str();
    cmd->add_option("--run-id", run_id, "Run directory name (default derived from the flags)");
    cmd->add_flag("--json", json, "Print the choice as JSON");
    cmd->footer(kConfigNote);
    cmd->callback([this] { code = run(); });
  }

  int run() {
    res.load();
    const auto cfg = tools::dataset_arg(data.dataset);
    const auto pool = tools::pool_for(cfg, data.pool_dir, data.seed);
    const auto split = eval::sample_eval_set(pool, cfg, 0, data.seed);
    auto client = client_flags.client();
    visgen::GeneratorOptions opts;
    opts.templates = &res.templates;
    visgen::VisualizationGenerator gen(client, res.catalog, opts);
    const auto choice = gen.generate(split.test_set.front().window, cfg.task(), cfg.id);
    for (const auto& w : gen.warnings()) std::cerr << "warning: " << w << "\n";

    if (run_id.empty()) run_id = cfg.id + "_generate_seed" + std::to_string(data.seed);
    auto run = open_run(out, run_id, *cmd, data.seed, client_flags.mode);
    write_text(run.path / "choices.json", gen.cache_json().dump(2) + "\n");
    export_transcripts(client, sorted_unique(client.sent_digests()), run.path / "transcripts.jsonl");
    close_run(run);
    if (json) {
      std::cout << choice.to_json().dump(2) << "\n";
    } else {
      std::string filtered;
      for (auto id : choice.filtered) filtered += (filtered.empty() ? "" : ", ") + std::string(to_string(id));
      std::cout << cfg.id << ": selected " << to_string(choice.selected) << " from [" << filtered << "] -> "
                << run.path.string() << "\n";
    }
    return kExitOk;
  }
};

// ---- eval ---------------------------------------------------------------------

struct EvalCmd {
  DatasetFlags data;
  ClientFlags client_flags;
  Resources res;
  std::string prompt = "visual";
  int shots = 1;
  bool cot = false;
  std::string layout = "single_plot";
  bool unbalanced = false;
  bool per_class = false;
  int decimals = 2;
  std::string choices_path;
  std::string out = "results";
  std::string run_id;
  bool json = false;
  CLI::App* cmd = nullptr;
  int code = kExitOk;

  void add(CLI::App& app) {
    cmd = app.add_subcommand("eval", "Few-shot classification of a dataset's test windows");
    data.add_to(cmd);
    client_flags.add_to(cmd);
    res.add_to(cmd, true);
    cmd->add_option("--prompt", prompt, "visual, text or summarized")
        ->check(CLI::IsMember({"visual", "text", "text_only", "summarized", "text_summarized"}))
        ->capture_default_str();
    cmd->add_option("--shots", shots, "Labeled examples per prompt")->check(CLI::NonNegativeNumber)->capture_default_str();
    cmd->add_flag("--cot", cot, "Append the step-by-step suffix to every classification prompt");
    cmd->add_option("--layout", layout, "single_plot or subplots")
        ->check(CLI::IsMember({"single_plot", "subplots"}))
        ->capture_default_str();
    cmd->add_flag("--unbalanced", unbalanced, "Draw examples uniformly instead of one label at a time");
    cmd->add_flag("--per-class", per_class, "Use --shots examples for every label (not with --unbalanced)");
    cmd->add_option("--decimals", decimals, "Decimals of serialized values")->check(CLI::Range(0, 8))->capture_default_str();
    cmd->add_option("--choices", choices_path, "choices.json of an earlier run to reuse")->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "Results root")->capture_default_str();
    cmd->add_option("--run-id", run_id, "Run directory name (default derived from the flags)");
    cmd->add_flag("--json", json, "Print report.json to stdout");
    cmd->footer(kConfigNote);
    cmd->callback([this] { code = run(); });
  }

  int run() {
    if (unbalanced && per_class) throw Error(ErrorKind::BadConfig, "--unbalanced and --per-class exclude each other");
    res.load();
    eval::EvalConfig cfg;
    cfg.dataset = tools::dataset_arg(data.dataset);
    cfg.prompt_kind = eval::prompt_kind_from_string(prompt);
    cfg.shots = shots;
    cfg.cot = cot;
    cfg.layout = layout_from_string(layout);
    cfg.seed = data.seed;
    cfg.mode = mllm::mode_from_string(client_flags.mode);
    cfg.shot_mode = unbalanced ? eval::ShotMode::unbalanced : per_class ? eval::ShotMode::per_class : eval::ShotMode::balanced;
    cfg.decimals = decimals;
    cfg.validate();

    eval::EvalOptions opts;
    opts.catalog = res.catalog;
    opts.templates = &res.templates;
    const auto tok = default_tokenizer();
    opts.tokenizer = tok.get();
    opts.jobs = client_flags.jobs;
    if (!choices_path.empty()) {
      std::ifstream in(choices_path);
      opts.choice_cache = nlohmann::json::parse(in);
    }

    const auto pool = tools::pool_for(cfg.dataset, data.pool_dir, data.seed);
    auto client = client_flags.client();
    const auto result = eval::run_eval(cfg, pool, client, opts);
    for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";

    if (run_id.empty()) {
      run_id = cfg.dataset.id + "_" + std::string(to_string(cfg.prompt_kind)) + "_" + std::to_string(shots) + "shot" +
               (cot ? "_cot" : "") + "_seed" + std::to_string(data.seed);
    }
    auto run = open_run(out, run_id, *cmd, data.seed, client_flags.mode);
    const auto& rep = result.report;
    write_text(run.path / "report.json", rep.to_json().dump(2) + "\n");
    write_text(run.path / "report.md", rep.to_markdown());
    write_text(run.path / "choices.json", result.choices.dump(2) + "\n");
    export_transcripts(client, result.digests, run.path / "transcripts.jsonl");
    for (const auto& [stem, img] : result.images) write_png(img, (run.path / (stem + ".png")).string());
    run.manifest["warnings"] = result.warnings;
    close_run(run);

    if (json) {
      std::cout << rep.to_json().dump(2) << "\n";
    } else {
      std::size_t correct = 0;
      for (const auto& s : rep.per_sample) correct += s.predicted && *s.predicted == s.gold;
      std::cout << cfg.dataset.id << " " << to_string(cfg.prompt_kind) << " " << shots << "-shot: accuracy "
                << fixed(rep.accuracy, 4) << " (" << correct << "/" << rep.per_sample.size() << "), "
                << rep.tokens.total << " tokens over " << rep.prompts << " prompts, visual "
                << fixed(rep.comparison.visual_reduction(), 1) << "x fewer than text -> " << run.path.string()
                << "\n";
    }
    return kExitOk;
  }
};

// ---- motivation ---------------------------------------------------------------

struct MotivationCmd {
  ClientFlags client_flags;
  Resources res;
  std::vector<int> lengths{50, 100, 200, 500, 1000};
  int trials = 10;
  std::uint64_t seed = 0;
  std::string out = "results";
  std::string run_id;
  bool json = false;
  CLI::App* cmd = nullptr;
  int code = kExitOk;

  void add(CLI::App& app) {
    cmd = app.add_subcommand("motivation", "Mean prediction and sine/sawtooth classification from text at growing lengths");
    client_flags.add_to(cmd);
    res.add_to(cmd, false);
    cmd->add_option("--lengths", lengths, "Sequence lengths")->delimiter(',')->check(CLI::Range(8, 100000))
        ->capture_default_str();
    cmd->add_option("--trials", trials, "Trials per length")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--seed", seed, "Seed of the generated sequences")->capture_default_str();
    cmd->add_option("--out", out, "Results root")->capture_default_str();
    cmd->add_option("--run-id", run_id, "Run directory name (default derived from the flags)");
    cmd->add_flag("--json", json, "Print the table as JSON");
    cmd->footer(kConfigNote);
    cmd->callback([this] { code = run(); });
  }

  int run() {
    res.load();
    auto client = client_flags.client();
    const auto rows = eval::run_motivation_study(lengths, trials, client, seed, &res.templates);
    if (run_id.empty()) run_id = "motivation_seed" + std::to_string(seed);
    auto run = open_run(out, run_id, *cmd, seed, client_flags.mode);
    const auto table = eval::motivation_json(rows);
    write_text(run.path / "motivation.json", table.dump(2) + "\n");
    write_text(run.path / "motivation.md", eval::motivation_markdown(rows));
    write_png(eval::motivation_plot(rows), (run.path / "motivation.png").string());
    export_transcripts(client, sorted_unique(client.sent_digests()), run.path / "transcripts.jsonl");
    close_run(run);
    if (json) {
      std::cout << table.dump(2) << "\n";
    } else {
      std::cout << eval::motivation_markdown(rows) << "-> " << run.path.string() << "\n";
    }
    return kExitOk;
  }
};

// ---- token-report ---------------------------------------------------------------

struct TokenReportCmd {
  std::string dataset = "all";
  int shots = 1;
  std::string tool = "raw_waveform";
  std::uint64_t seed = 0;
  int decimals = 2;
  bool json = false;
  int code = kExitOk;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("token-report", "Text-only vs visual prompt tokens without any model call");
    cmd->add_option("--dataset", dataset, "Registry id, dataset config JSON, or all")->capture_default_str();
    cmd->add_option("--shots", shots, "Labeled examples per prompt")->check(CLI::NonNegativeNumber)->capture_default_str();
    cmd->add_option("--tool", tool, "Visualization tool of the visual prompt")->capture_default_str();
    cmd->add_option("--seed", seed, "Seed of the synthetic windows")->capture_default_str();
    cmd->add_option("--decimals", decimals, "Decimals of serialized values")->check(CLI::Range(0, 8))->capture_default_str();
    cmd->add_flag("--json", json, "Print the table as JSON");
    cmd->footer(kConfigNote);
    cmd->callback([this] { code = run(); });
  }

  int run() const {
    std::vector<eval::DatasetConfig> cfgs;
    if (dataset == "all") {
      cfgs = eval::registry();
    } else {
      cfgs.push_back(tools::dataset_arg(dataset));
    }
    const auto viz = builtin_tool(viz_tool_from_string(tool));
    const auto tok = default_tokenizer();
    nlohmann::json rows = nlohmann::json::array();
    std::string table = "| dataset | samples x channels | text-only tokens | visual tokens | image tokens | reduction |\n"
                        "|---|---:|---:|---:|---:|---:|\n";
    double sum = 0.0;
    for (const auto& c : cfgs) {
      RenderStyle style;
      VizTool t = viz;
      // Physiological tools only apply to their own modality.
      if (!compatible(t.id, c.modality)) t = builtin_tool(VizToolId::raw_waveform);
      const auto est = eval::estimate_tokens(c, shots, t, seed, tok.get(), decimals);
      sum += est.reduction();
      const auto size = c.window_samples() * static_cast<std::size_t>(c.channels);
      rows.push_back({{"dataset", c.id},
                      {"samples_x_channels", size},
                      {"tool", to_string(t.id)},
                      {"text_only", tokens_json(est.text_only)},
                      {"visual", tokens_json(est.visual)},
                      {"reduction", est.reduction()}});
      table += "| " + c.id + " | " + std::to_string(size) + " | " + std::to_string(est.text_only.total) + " | " +
               std::to_string(est.visual.total) + " | " + std::to_string(est.visual.image_tokens) + " | " +
               fixed(est.reduction(), 1) + "x |\n";
    }
    const double mean = sum / static_cast<double>(cfgs.size());
    if (json) {
      std::cout << nlohmann::json({{"shots", shots}, {"tokenizer", tok->name()}, {"rows", rows}, {"mean_reduction", mean}})
                       .dump(2)
                << "\n";
    } else {
      std::cout << table;
      if (cfgs.size() > 1) std::cout << "\nmean reduction: " << fixed(mean, 1) << "x";
      std::cout << "\n" << shots << "-shot prompts, " << tok->name() << " tokenizer"
                << (tok->approximate() ? " (approximate)" : "") << "\n";
    }
    return kExitOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual prompting of multimodal models for sensor time-series classification"};
  app.config_formatter(std::make_shared<JsonOrTomlConfig>(&app));
  app.set_config("--config", "", "Read subcommand flags from a JSON or TOML file");
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.set_version_flag("--version", VIZPROMPT_VERSION);
  app.footer("Exit codes: 0 ok, 1 failure, 2 usage or validation error, 3 replay miss, 4 missing API key.\n"
             "Model access: VIZPROMPT_ENDPOINT, VIZPROMPT_API_KEY, VIZPROMPT_MODEL.");

  VisualizeCmd visualize;
  BuildPromptCmd build_prompt;
  GenerateCmd generate;
  EvalCmd evaluate;
  MotivationCmd motivation;
  TokenReportCmd token_report_cmd;
  visualize.add(app);
  build_prompt.add(app);
  generate.add(app);
  evaluate.add(app);
  motivation.add(app);
  token_report_cmd.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: invalid JSON: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  for (int c : {visualize.code, build_prompt.code, generate.code, evaluate.code, motivation.code, token_report_cmd.code}) {
    if (c != kExitOk) return c;
  }
  return kExitOk;
}
