// Records the shipped replay transcripts with a scripted stand-in model.
// The model filters to three ECG tools, selects the beat plot, and labels each
// target from its image: correctly for most windows, wrongly for ids whose
// hash ends in 0 and without any usable label for ids whose hash ends in 1.

#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "run_support.hpp"
#include "vizprompt/eval.hpp"
#include "vizprompt/mllm.hpp"
#include "vizprompt/render.hpp"

using namespace vizprompt;

namespace {

struct Target {
  std::string id;
  std::string label;
};

std::string classify(const Target& t, const std::vector<std::string>& labels) {
  const char last = mllm::sha256_hex(t.id).back();
  if (last == '1') return "The beats look irregular in places and I cannot decide between the classes.";
  std::string answer = t.label;
  if (last == '0') answer = labels[0] == t.label ? labels[1] : labels[0];
  return "QRS width and the ST segment of the target beats resemble the " + answer + " example.\nAnswer: " + answer;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Record replay fixtures for the bundled synthetic ECG task"};
  std::string out = "tests/fixtures/ptbxl_cd_visual_1shot.jsonl";
  std::string dataset_id = "ptbxl_cd";
  std::uint64_t seed = 0;
  app.add_option("--out", out, "Transcript file to extend")->capture_default_str();
  app.add_option("--dataset", dataset_id, "Registry id of a two-class ECG task")->capture_default_str();
  app.add_option("--seed", seed, "Seed of the matching eval run")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = tools::dataset_arg(dataset_id);
    const auto pool = tools::pool_for(cfg, "", seed);
    const VizTool beats = builtin_tool(VizToolId::ecg_individual_beats);
    std::map<std::string, Target> by_image;
    for (const auto& w : pool) {
      const auto png = encode_png(render(w.window, beats, std::string(kTargetTitle)));
      const auto url = "data:image/png;base64," + mllm::base64_encode(std::string(png.begin(), png.end()));
      by_image[mllm::sha256_hex(url)] = {w.id, w.label};
    }

    auto transport = mllm::ScriptedTransport::answering([&](const nlohmann::json& body) -> std::string {
      const auto text = mllm::wire_text(body);
      if (text.find("Output a JSON array") != std::string::npos) {
        return "Beat morphology and rhythm matter most here.\n"
               "[\"ecg_signal_peaks\", \"ecg_heart_rate\", \"ecg_individual_beats\"]";
      }
      if (text.find("Selection:") != std::string::npos) {
        return "Overlaid beats expose QRS and ST shape differences best.\nSelection: ecg_individual_beats";
      }
      const auto& content = body["messages"][0]["content"];
      for (auto it = content.rbegin(); it != content.rend(); ++it) {
        if ((*it)["type"] != "image_url") continue;
        const auto hit = by_image.find(mllm::sha256_hex((*it)["image_url"]["url"].get<std::string>()));
        if (hit != by_image.end()) return classify(hit->second, cfg.label_set);
        break;
      }
      return "I cannot tell.";
    });

    mllm::ClientConfig cc;
    cc.mode = mllm::Mode::record;
    mllm::MllmClient client(cc, mllm::TranscriptStore::open(out), transport);
    eval::EvalConfig ec;
    ec.dataset = cfg;
    ec.seed = seed;
    ec.mode = mllm::Mode::record;
    const auto result = eval::run_eval(ec, pool, client);
    std::cout << "recorded " << transport->calls() << " new exchanges to " << out << "; accuracy "
              << result.report.accuracy << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
