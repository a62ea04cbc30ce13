#pragma once

// One declarative JSON config drives the whole pipeline. Parsing validates
// every field and reports precise error paths ("nas.delta: must be >= 0").

#include "longtail/meta.hpp"
#include "longtail/nas.hpp"
#include "longtail/synthgen.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace longtail {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InitConfig {
  int n_initial_scenarios = 8;  // clipped to the universe size
  bool use_hpo = true;
  int hpo_trials = 1;
  bool use_nas = false;
};

struct ExperimentConfig {
  UniverseConfig universe;
  ArchConfig heavy;
  ArchConfig light;
  TrainConfig train;
  MetaConfig meta;
  NasConfig nas;  // flops_budget 0 means "match the pre-defined light model"
  InitConfig init;
  std::vector<std::string> strategies = {"SinH", "MeH", "MeL", "Ours"};
  std::vector<std::uint64_t> seeds = {1};
  std::string out_dir = "out";
  int latency_batch = 256;
  int latency_reps = 5;

  void validate() const;
  static ExperimentConfig desk_default();
};

ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace longtail
