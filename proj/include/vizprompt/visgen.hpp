#pragma once

#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vizprompt/mllm.hpp"
#include "vizprompt/prompt.hpp"
#include "vizprompt/render.hpp"

namespace vizprompt::visgen {

struct Demonstration {
  std::string task_description;
  std::string data_description;
  std::vector<VizToolId> chosen;
  std::string rationale;
};

struct VizCatalog {
  std::vector<VizTool> tools;
  std::vector<Demonstration> demonstrations;

  // The bundled catalog: all 17 tools and two demonstrations.
  static VizCatalog builtin();
  // {"tools":[{"id","description"}...],"demonstrations":[{"task_description",
  // "data_description","chosen":[ids],"rationale"}...]}. Missing descriptions
  // fall back to the bundled ones. Throws UnknownTool, BadConfig.
  static VizCatalog from_json(const nlohmann::json& j);
  static VizCatalog load(const std::string& path);

  bool contains(VizToolId id) const;
  const VizTool& tool(VizToolId id) const;  // throws UnknownTool
  // Throws EmptyCatalog, or BadConfig for duplicate ids or demonstrations
  // naming tools outside the catalog.
  void validate() const;
};

struct VisualizationChoice {
  std::vector<VizToolId> filtered;
  VizToolId selected = VizToolId::raw_waveform;
  std::string selection_transcript_digest;  // empty when selection was skipped

  // Throws BadParams unless filtered is non-empty, duplicate-free, inside the
  // catalog, and contains selected.
  static VisualizationChoice make(std::vector<VizToolId> filtered, VizToolId selected, std::string digest,
                                  const VizCatalog& catalog);

  nlohmann::json to_json() const;
  static VisualizationChoice from_json(const nlohmann::json& j, const VizCatalog& catalog);
};

PromptMessage build_filter_prompt(const VizCatalog& catalog, const TaskSpec& task,
                                  const Templates* templates = nullptr);

struct ParsedTools {
  std::vector<VizToolId> ids;
  std::vector<std::string> warnings;
};

// First JSON array of strings in the text (code fences and prose around it
// are ignored). Unknown ids are dropped with a warning; repeats are removed
// keeping the first. Throws NoJsonArray, AllIdsUnknown.
ParsedTools parse_tool_list(std::string_view response, const VizCatalog& catalog);
std::string serialize_tool_list(const std::vector<VizToolId>& ids);

// [intro text] + one image per candidate + [instruction text].
// Throws TooFewCandidates for fewer than 2 candidates.
PromptMessage build_selection_prompt(const std::vector<std::pair<VizTool, PlotImage>>& candidates, const TaskSpec& task,
                                     const Templates* templates = nullptr);

// The last "Selection: <id>" naming a candidate, else the only candidate id
// mentioned in the text.
std::optional<VizToolId> parse_selection(std::string_view response, const std::vector<VizToolId>& candidates);

struct GeneratorOptions {
  // Reuse one choice per (dataset id, task); off selects per window.
  bool cache = true;
  // Total attempts per phase; each retry appends a format reminder.
  int max_attempts = 2;
  RenderStyle style;
  const Templates* templates = nullptr;
};

// Filter, render every compatible filtered tool on the window, select.
// Safe to call concurrently; each cache key is computed once.
class VisualizationGenerator {
 public:
  VisualizationGenerator(mllm::MllmClient& client, VizCatalog catalog, GeneratorOptions options = {});

  // Throws FilterFailed, SelectionFailed, or client errors.
  VisualizationChoice generate(const Window& window, const TaskSpec& task, const std::string& dataset_id);

  static std::string cache_key(const std::string& dataset_id, const TaskSpec& task);

  // choices.json: {"<key>": choice.to_json(), ...}, keys sorted.
  nlohmann::json cache_json() const;
  void load_cache(const nlohmann::json& j);

  std::vector<std::string> warnings() const;
  const VizCatalog& catalog() const { return catalog_; }

 private:
  VisualizationChoice compute(const Window& window, const TaskSpec& task);
  std::vector<VizToolId> run_filter(const Window& window, const TaskSpec& task);
  std::pair<VizToolId, std::string> run_selection(const Window& window, const TaskSpec& task,
                                                  const std::vector<VizToolId>& filtered);
  void warn(std::string message);

  mllm::MllmClient& client_;
  VizCatalog catalog_;
  GeneratorOptions options_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_future<VisualizationChoice>> cache_;
  std::vector<std::string> warnings_;
};

}  // namespace vizprompt::visgen
