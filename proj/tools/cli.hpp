#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfact/evalkit.hpp"
#include "counterfact/service.hpp"
#include "counterfact/training.hpp"
#include "counterfact/tumorsim.hpp"

namespace cfx::cli {

struct SplitConfig {
  std::vector<double> ratios{0.7, 0.15, 0.15};
  std::uint64_t seed = 10;
};

struct EvaluateConfig {
  std::size_t tau_max = 6;
  std::size_t t_min = 1;
  std::size_t origin_stride = 1;
  bool counterfactual = true;     // needs simulator ground truth next to the data
  std::string split = "test";     // train, val, test or all
  std::string noise = "common";   // oracle noise: common or zero
};

struct PredictConfig {
  std::size_t horizon = 6;
  std::size_t ig_steps = 64;
  std::size_t top_k = 5;
  std::size_t target = 0;
  std::optional<std::pair<double, double>> target_range;
  bool include_phi = false;
};

// Inputs normally given as flags; kept in the resolved copy so a run can be replayed from it.
struct RunInputs {
  std::string data;
  std::string checkpoint;
  std::string balanced_checkpoint;
  std::string patient;
  std::size_t origin = 0;  // 0: forecast after the last step
  std::string plan;
};

// One configuration file with a section per command. Sections absent from the file keep
// their defaults; unknown sections and keys are rejected.
struct RunConfig {
  std::optional<tumorsim::SimCohortConfig> simulate;
  TrainConfig train;
  SplitConfig split;
  EvaluateConfig evaluate;
  ProbeConfig probe;
  PredictConfig predict;
  ServiceConfig serve;
  RunInputs run;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

// TOML for *.toml, JSON otherwise.
nlohmann::json read_config_document(const std::filesystem::path& path);
nlohmann::json toml_to_json(const std::string& text, const std::string& source = "config");

struct KeyDoc {
  std::string key;       // dotted path, [] for list entries
  std::string fallback;  // default value as JSON text
  std::string unit;
  std::string description;
};

// Every config key with its default and unit.
std::vector<KeyDoc> config_keys();
std::string config_keys_text();

// Runs the command line and returns the process exit code:
// 0 success, 1 runtime failure, 2 usage or configuration error, 3 non-finite numerics.
int run_cli(int argc, const char* const* argv);

}  // namespace cfx::cli
