#pragma once

// End-to-end orchestration of the four training strategies, evaluation
// reports (AUC, FLOPs, parameters, latency) and the in-process batch-serving
// stub.

#include "longtail/config.hpp"
#include "longtail/serialize.hpp"

namespace longtail {

struct ReportRow {
  std::uint64_t seed = 0;
  int scenario_id = 0;
  std::string strategy;
  double test_auc = 0.0;
  long flops = 0;
  long params = 0;
  double mean_latency_ms = 0.0;
  double p95_latency_ms = 0.0;
  bool failed = false;
  std::string error;
};

struct StrategyReport {
  std::vector<ReportRow> rows;
  long flops_budget = 0;  // full-model budget applied to Ours rows
  bool partial = false;   // a scenario failed and was skipped

  // averages over the non-failed rows of one strategy
  double avg_auc(const std::string& strategy) const;
  double avg_flops(const std::string& strategy) const;
  double avg_latency(const std::string& strategy) const;
};

struct LatencyStats {
  double mean_ms = 0.0;
  double p95_ms = 0.0;
  std::vector<double> samples_ms;
};

// One warm-up pass, then `reps` timed forward passes over the same requests.
// Predictions are identical across reps and are returned once.
std::pair<Vector, LatencyStats> serve_batch(const ModelArtifact& artifact,
                                            const Batch& requests, int reps);

// Runs every configured strategy over freshly generated scenarios for one
// seed. AUC/FLOPs outputs are deterministic per (cfg, seed).
StrategyReport run_experiment(const ExperimentConfig& cfg, std::uint64_t seed);

// records.jsonl (one record per row) + summary.txt (rendered table)
void write_report(const StrategyReport& report, const std::string& dir);
StrategyReport read_report(const std::string& dir);
std::string render_report(const StrategyReport& report);

// full-model FLOPs budget implied by the config (explicit value, or the
// pre-defined light model's count), and its encoder-level part for the search
long resolve_budget(const ExperimentConfig& cfg);
long encoder_budget(const ExperimentConfig& cfg, const SpaceSpec& space);

}  // namespace longtail
