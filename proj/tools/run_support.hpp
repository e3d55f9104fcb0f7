#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vizprompt/error.hpp"
#include "vizprompt/eval.hpp"

namespace vizprompt::tools {

// A registry id, or a path to a DatasetConfig JSON file.
inline eval::DatasetConfig dataset_arg(const std::string& value) {
  if (value.size() > 5 && value.ends_with(".json")) {
    std::ifstream in(value);
    if (!in) throw Error(ErrorKind::BadConfig, "cannot read dataset config " + value);
    auto cfg = eval::DatasetConfig::from_json(nlohmann::json::parse(in));
    cfg.validate();
    return cfg;
  }
  return eval::dataset(value);
}

// The labeled pool every command samples from: CSV recordings from `pool_dir`
// when given, else the seeded synthetic stand-in of default size.
inline std::vector<eval::LabeledWindow> pool_for(const eval::DatasetConfig& cfg, const std::string& pool_dir,
                                                 std::uint64_t seed) {
  if (!pool_dir.empty()) return eval::load_pool(pool_dir, cfg);
  return eval::synthetic_pool(cfg, eval::default_pool_per_class(cfg), seed);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::BadConfig, "cannot write " + path.string());
  out << text;
}

}  // namespace vizprompt::tools
