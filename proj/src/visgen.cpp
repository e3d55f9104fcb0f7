#include "vizprompt/visgen.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "vizprompt/error.hpp"
#include "vizprompt/resources.hpp"

namespace vizprompt::visgen {

namespace {

constexpr std::string_view kCandidateTitle = "sample data";

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::vector<std::string> id_strings(const std::vector<VizToolId>& ids) {
  std::vector<std::string> out;
  for (auto id : ids) out.emplace_back(to_string(id));
  return out;
}

const Templates& pick(const Templates* t) { return t ? *t : Templates::builtin(); }

// End of the bracketed span starting at `open`, skipping string literals.
std::size_t matching_bracket(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (c == '\\') ++i;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '[') ++depth;
    else if (c == ']' && --depth == 0) return i;
  }
  return std::string_view::npos;
}

PromptMessage with_reminder(PromptMessage msg, const std::string& reminder, const Templates& t) {
  msg.parts.push_back(TextPart{fill_template(t.get("format_reminder"), {{"reminder", reminder}})});
  return msg;
}

}  // namespace

// ---- catalog ----------------------------------------------------------------

VizCatalog VizCatalog::from_json(const nlohmann::json& j) {
  try {
    VizCatalog c;
    for (const auto& t : j.at("tools")) {
      VizTool tool = builtin_tool(viz_tool_from_string(t.at("id").get<std::string>()));
      if (t.contains("description")) tool.description = t["description"].get<std::string>();
      c.tools.push_back(std::move(tool));
    }
    for (const auto& d : j.value("demonstrations", nlohmann::json::array())) {
      Demonstration demo;
      demo.task_description = d.at("task_description").get<std::string>();
      demo.data_description = d.at("data_description").get<std::string>();
      for (const auto& id : d.at("chosen")) demo.chosen.push_back(viz_tool_from_string(id.get<std::string>()));
      demo.rationale = d.value("rationale", "");
      c.demonstrations.push_back(std::move(demo));
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadConfig, std::string("malformed catalog: ") + e.what());
  }
}

VizCatalog VizCatalog::builtin() {
  static const VizCatalog c = from_json(nlohmann::json::parse(resource("data/catalog.json")));
  return c;
}

VizCatalog VizCatalog::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::BadConfig, "cannot open catalog " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::BadConfig, path + ": " + e.what());
  }
}

bool VizCatalog::contains(VizToolId id) const {
  return std::any_of(tools.begin(), tools.end(), [&](const VizTool& t) { return t.id == id; });
}

const VizTool& VizCatalog::tool(VizToolId id) const {
  for (const auto& t : tools) {
    if (t.id == id) return t;
  }
  throw Error(ErrorKind::UnknownTool, "tool '" + std::string(to_string(id)) + "' is not in the catalog");
}

void VizCatalog::validate() const {
  if (tools.empty()) throw Error(ErrorKind::EmptyCatalog, "the visualization catalog has no tools");
  std::set<VizToolId> seen;
  for (const auto& t : tools) {
    if (!seen.insert(t.id).second) throw Error(ErrorKind::BadConfig, "duplicate tool " + std::string(to_string(t.id)));
    t.validate();
  }
  for (const auto& d : demonstrations) {
    for (auto id : d.chosen) {
      if (!seen.count(id)) {
        throw Error(ErrorKind::BadConfig, "demonstration uses tool outside the catalog: " + std::string(to_string(id)));
      }
    }
  }
}

// ---- choice -------------------------------------------------------------------

VisualizationChoice VisualizationChoice::make(std::vector<VizToolId> filtered, VizToolId selected, std::string digest,
                                              const VizCatalog& catalog) {
  if (filtered.empty()) throw Error(ErrorKind::BadParams, "filtered tool list is empty");
  std::set<VizToolId> seen;
  for (auto id : filtered) {
    if (!catalog.contains(id)) throw Error(ErrorKind::BadParams, std::string(to_string(id)) + " is not in the catalog");
    if (!seen.insert(id).second) throw Error(ErrorKind::BadParams, "duplicate filtered tool " + std::string(to_string(id)));
  }
  if (!seen.count(selected)) {
    throw Error(ErrorKind::BadParams, "selected tool " + std::string(to_string(selected)) + " was not filtered");
  }
  return VisualizationChoice{std::move(filtered), selected, std::move(digest)};
}

nlohmann::json VisualizationChoice::to_json() const {
  return {{"filtered", id_strings(filtered)},
          {"selected", to_string(selected)},
          {"selection_transcript_digest", selection_transcript_digest}};
}

VisualizationChoice VisualizationChoice::from_json(const nlohmann::json& j, const VizCatalog& catalog) {
  try {
    std::vector<VizToolId> filtered;
    for (const auto& id : j.at("filtered")) filtered.push_back(viz_tool_from_string(id.get<std::string>()));
    return make(std::move(filtered), viz_tool_from_string(j.at("selected").get<std::string>()),
                j.value("selection_transcript_digest", ""), catalog);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadConfig, std::string("malformed choice: ") + e.what());
  }
}

// ---- prompts --------------------------------------------------------------------

PromptMessage build_filter_prompt(const VizCatalog& catalog, const TaskSpec& task, const Templates* templates) {
  catalog.validate();
  std::string tools;
  for (const auto& t : catalog.tools) tools += "- " + std::string(to_string(t.id)) + ": " + t.description + "\n";
  std::vector<std::string> demos;
  for (std::size_t k = 0; k < catalog.demonstrations.size(); ++k) {
    const auto& d = catalog.demonstrations[k];
    demos.push_back("Example " + std::to_string(k + 1) + "\nTask: " + d.task_description +
                    "\nData: " + d.data_description + "\nChosen tools: " + serialize_tool_list(d.chosen) +
                    (d.rationale.empty() ? "" : "\nReason: " + d.rationale));
  }
  PromptMessage msg;
  msg.parts.push_back(TextPart{fill_template(pick(templates).get("filter_instruction"),
                                             {{"tools", tools.empty() ? tools : tools.substr(0, tools.size() - 1)},
                                              {"demonstrations", demos.empty() ? "(none)" : join(demos, "\n\n")},
                                              {"task_description", task.task_description},
                                              {"data_description", task.data_description}})});
  return msg;
}

std::string serialize_tool_list(const std::vector<VizToolId>& ids) { return nlohmann::json(id_strings(ids)).dump(); }

ParsedTools parse_tool_list(std::string_view response, const VizCatalog& catalog) {
  std::optional<nlohmann::json> array;
  for (auto open = response.find('['); open != std::string_view::npos; open = response.find('[', open + 1)) {
    const auto close = matching_bracket(response, open);
    if (close == std::string_view::npos) continue;
    auto j = nlohmann::json::parse(response.substr(open, close - open + 1), nullptr, false);
    if (!j.is_discarded() && j.is_array()) {
      array = std::move(j);
      break;
    }
  }
  if (!array) throw Error(ErrorKind::NoJsonArray, "no JSON array in the response");

  ParsedTools out;
  std::set<VizToolId> seen;
  for (const auto& item : *array) {
    if (!item.is_string()) {
      out.warnings.push_back("ignored non-string entry " + item.dump());
      continue;
    }
    const auto name = item.get<std::string>();
    VizToolId id;
    try {
      id = viz_tool_from_string(name);
    } catch (const Error&) {
      out.warnings.push_back("ignored unknown tool id '" + name + "'");
      continue;
    }
    if (!catalog.contains(id)) {
      out.warnings.push_back("ignored tool outside the catalog '" + name + "'");
      continue;
    }
    if (seen.insert(id).second) out.ids.push_back(id);
  }
  if (out.ids.empty()) throw Error(ErrorKind::AllIdsUnknown, "no catalog tool ids in " + array->dump());
  return out;
}

PromptMessage build_selection_prompt(const std::vector<std::pair<VizTool, PlotImage>>& candidates, const TaskSpec& task,
                                     const Templates* templates) {
  if (candidates.size() < 2) {
    throw Error(ErrorKind::TooFewCandidates, "selection needs at least 2 candidates, got " + std::to_string(candidates.size()));
  }
  const Templates& t = pick(templates);
  std::vector<std::string> names, ids;
  for (const auto& [tool, image] : candidates) {
    ids.emplace_back(to_string(tool.id));
    names.push_back(std::string(to_string(tool.id)) + " (" + std::string(display_name(tool.id)) + ")");
  }
  PromptMessage msg;
  msg.parts.push_back(TextPart{fill_template(t.get("selection_intro"), {{"task_description", task.task_description},
                                                                        {"data_description", task.data_description},
                                                                        {"candidates", join(names, ", ")}})});
  for (const auto& [tool, image] : candidates) msg.parts.push_back(ImagePart{image});
  msg.parts.push_back(TextPart{fill_template(t.get("selection_instruction"), {{"candidate_ids", join(ids, ", ")}})});
  return msg;
}

std::optional<VizToolId> parse_selection(std::string_view response, const std::vector<VizToolId>& candidates) {
  std::string text(response);
  std::transform(text.begin(), text.end(), text.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  auto is_id_char = [](unsigned char c) { return std::isalnum(c) || c == '_'; };

  std::optional<VizToolId> chosen;
  for (auto pos = text.find("selection"); pos != std::string::npos; pos = text.find("selection", pos + 1)) {
    std::size_t k = pos + 9;
    while (k < text.size() && (text[k] == ' ' || text[k] == '*')) ++k;
    if (k >= text.size() || text[k] != ':') continue;
    ++k;
    while (k < text.size() && !is_id_char(static_cast<unsigned char>(text[k])) && text[k] != '\n') ++k;
    std::size_t e = k;
    while (e < text.size() && is_id_char(static_cast<unsigned char>(text[e]))) ++e;
    const std::string word = text.substr(k, e - k);
    for (auto id : candidates) {
      if (to_string(id) == word) chosen = id;
    }
  }
  if (chosen) return chosen;

  std::optional<VizToolId> only;
  for (auto id : candidates) {
    const std::string needle(to_string(id));
    for (auto p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) {
      const std::size_t e = p + needle.size();
      const bool left = p == 0 || !is_id_char(static_cast<unsigned char>(text[p - 1]));
      const bool right = e == text.size() || !is_id_char(static_cast<unsigned char>(text[e]));
      if (left && right) {
        if (only && *only != id) return std::nullopt;
        only = id;
        break;
      }
    }
  }
  return only;
}

// ---- generator --------------------------------------------------------------------

VisualizationGenerator::VisualizationGenerator(mllm::MllmClient& client, VizCatalog catalog, GeneratorOptions options)
    : client_(client), catalog_(std::move(catalog)), options_(std::move(options)) {
  catalog_.validate();
  if (options_.max_attempts < 1) throw Error(ErrorKind::BadConfig, "max_attempts must be at least 1");
}

std::string VisualizationGenerator::cache_key(const std::string& dataset_id, const TaskSpec& task) {
  const nlohmann::json j = {{"task_description", task.task_description},
                            {"data_description", task.data_description},
                            {"label_set", task.label_set},
                            {"answer_format_instruction", task.answer_format_instruction}};
  return dataset_id + ":" + mllm::sha256_hex(j.dump()).substr(0, 16);
}

void VisualizationGenerator::warn(std::string message) {
  std::lock_guard lock(mutex_);
  warnings_.push_back(std::move(message));
}

std::vector<std::string> VisualizationGenerator::warnings() const {
  std::lock_guard lock(mutex_);
  return warnings_;
}

std::vector<VizToolId> VisualizationGenerator::run_filter(const Window& window, const TaskSpec& task) {
  const Templates& t = pick(options_.templates);
  const PromptMessage base = build_filter_prompt(catalog_, task, options_.templates);
  const Modality modality = window.series.modality();
  std::string last_problem;
  for (int attempt = 0; attempt < options_.max_attempts; ++attempt) {
    const PromptMessage msg =
        attempt == 0 ? base
                     : with_reminder(base, "Reply with only a JSON array of tool ids from the catalog, for example "
                                           "[\"raw_waveform\", \"spectrogram\"].", t);
    const auto reply = client_.send(msg);
    try {
      auto parsed = parse_tool_list(reply.text, catalog_);
      for (auto& w : parsed.warnings) warn("filter: " + w);
      std::vector<VizToolId> usable;
      for (auto id : parsed.ids) {
        if (compatible(id, modality) || options_.style.allow_any_modality) {
          usable.push_back(id);
        } else {
          warn("filter: dropped " + std::string(to_string(id)) + ", which does not apply to " +
               std::string(to_string(modality)) + " data");
        }
      }
      if (!usable.empty()) return usable;
      last_problem = "no filtered tool applies to " + std::string(to_string(modality)) + " data";
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoJsonArray && e.kind() != ErrorKind::AllIdsUnknown) throw;
      last_problem = e.what();
    }
  }
  throw Error(ErrorKind::FilterFailed, "tool filtering failed after " + std::to_string(options_.max_attempts) +
                                           " attempt(s): " + last_problem);
}

std::pair<VizToolId, std::string> VisualizationGenerator::run_selection(const Window& window, const TaskSpec& task,
                                                                        const std::vector<VizToolId>& filtered) {
  std::vector<std::pair<VizTool, PlotImage>> candidates;
  for (auto id : filtered) {
    const VizTool& tool = catalog_.tool(id);
    candidates.emplace_back(tool, render(window, tool, std::string(kCandidateTitle), options_.style));
  }
  const Templates& t = pick(options_.templates);
  const PromptMessage base = build_selection_prompt(candidates, task, options_.templates);
  for (int attempt = 0; attempt < options_.max_attempts; ++attempt) {
    const PromptMessage msg =
        attempt == 0 ? base
                     : with_reminder(base, "End with a line \"Selection: <tool_id>\" using one of: " +
                                               join(id_strings(filtered), ", ") + ".", t);
    const auto request = client_.make_request({msg});
    const auto reply = client_.send(request);
    if (const auto id = parse_selection(reply.text, filtered)) return {*id, mllm::canonical_digest(request)};
  }
  throw Error(ErrorKind::SelectionFailed,
              "no candidate named after " + std::to_string(options_.max_attempts) + " attempt(s)");
}

VisualizationChoice VisualizationGenerator::compute(const Window& window, const TaskSpec& task) {
  task.validate();
  const auto filtered = run_filter(window, task);
  if (filtered.size() == 1) return VisualizationChoice::make(filtered, filtered.front(), "", catalog_);
  auto [selected, digest] = run_selection(window, task, filtered);
  return VisualizationChoice::make(filtered, selected, std::move(digest), catalog_);
}

VisualizationChoice VisualizationGenerator::generate(const Window& window, const TaskSpec& task,
                                                     const std::string& dataset_id) {
  if (!options_.cache) return compute(window, task);
  const std::string key = cache_key(dataset_id, task);
  std::promise<VisualizationChoice> promise;
  std::shared_future<VisualizationChoice> future;
  bool owner = false;
  {
    std::lock_guard lock(mutex_);
    const auto it = cache_.find(key);
    if (it != cache_.end()) {
      future = it->second;
    } else {
      future = promise.get_future().share();
      cache_.emplace(key, future);
      owner = true;
    }
  }
  if (owner) {
    try {
      promise.set_value(compute(window, task));
    } catch (...) {
      promise.set_exception(std::current_exception());
      std::lock_guard lock(mutex_);
      cache_.erase(key);
    }
  }
  return future.get();
}

nlohmann::json VisualizationGenerator::cache_json() const {
  std::lock_guard lock(mutex_);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, future] : cache_) {
    if (future.wait_for(std::chrono::seconds(0)) != std::future_status::ready) continue;
    try {
      j[key] = future.get().to_json();
    } catch (const Error&) {
    }
  }
  return j;
}

void VisualizationGenerator::load_cache(const nlohmann::json& j) {
  std::lock_guard lock(mutex_);
  for (const auto& [key, value] : j.items()) {
    std::promise<VisualizationChoice> p;
    p.set_value(VisualizationChoice::from_json(value, catalog_));
    cache_[key] = p.get_future().share();
  }
}

}  // namespace vizprompt::visgen
