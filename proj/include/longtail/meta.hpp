#pragma once

// Lifecycle of the scenario-agnostic model: initialization by candidate
// comparison, per-scenario fine-tuning, query-set feedback, aggregated
// multi-scenario updates and periodic refresh from archived data.

#include "longtail/hpo.hpp"
#include "longtail/nas.hpp"
#include "longtail/nets.hpp"

#include <memory>
#include <mutex>

namespace longtail {

struct MetaConfig {
  double gamma = 0.1;         // inner fine-tune rate (plain gradient steps)
  double eta = -1.0;          // outer rate; < 0 means 0.1 * gamma
  int inner_steps = 1;        // passes over the support set
  int batch_size = 128;
  long staleness_bound = 4;   // drop packets older than this many versions
  bool second_order = false;  // exact curvature term (tiny models only)
  TrainConfig refresh;        // optimizer settings for periodic_refresh

  double resolved_eta() const { return eta >= 0.0 ? eta : 0.1 * gamma; }
  void validate() const;
};

struct MetaState {
  ModelArtifact agnostic;  // theta_0
  MetaConfig cfg;
  long version = 0;
  std::vector<std::shared_ptr<const ScenarioDataset>> archive;
};

struct FeedbackPacket {
  int scenario_id = 0;
  std::map<std::string, Matrix> query_gradient;  // shaped like theta_0
  double query_loss = 0.0;
  long base_version = 0;
};

// Configuration of the two initialization pipelines (either may be disabled,
// not both).
struct InitCandidates {
  bool use_hpo = true;
  int hpo_trials = 4;
  ArchConfig predesigned;  // tuned around its own defaults
  TrainConfig train;

  bool use_nas = false;
  SpaceSpec nas_space;
  NasConfig nas;
};

struct InitReport {
  bool hpo_ran = false, nas_ran = false;
  double hpo_auc = 0.0, nas_auc = 0.0;
  long hpo_flops = 0, nas_flops = 0;
  std::string selected;  // "predesigned" or "searched"
};

// Trains the enabled candidate pipelines on the pooled support rows, compares
// them on the pooled query rows and keeps the better artifact as theta_0.
// AUC ties within 1e-6 go to the lower-FLOPs candidate.
MetaState init_agnostic(const std::vector<const ScenarioDataset*>& pooled,
                        const InitCandidates& candidates, const MetaConfig& cfg,
                        std::uint64_t seed, InitReport* report = nullptr);

// theta_u after inner_steps passes over the support set at rate gamma, plus
// the query-set feedback packet. theta_0 is untouched.
std::pair<ModelArtifact, FeedbackPacket> fine_tune(const MetaState& state,
                                                   const ScenarioDataset& ds);

struct MetaUpdateReport {
  int applied = 0;
  std::vector<int> dropped_stale;  // scenario ids
};

// theta_0 <- theta_0 - eta * sum of query gradients; version increments when
// at least one packet applies. All packets stale is a warning-level no-op.
MetaState meta_update(MetaState state, const std::vector<FeedbackPacket>& packets,
                      MetaUpdateReport* report = nullptr);

// Retrains theta_0 over the archived union for cfg.refresh.epochs epochs.
// Empty archive or zero epochs is an identity no-op.
MetaState periodic_refresh(MetaState state);

// Thread-safe holder: fine-tunes read an immutable snapshot, commits are
// serialized single-writer updates.
class MetaEngine {
 public:
  explicit MetaEngine(MetaState state) : state_(std::move(state)) {}

  MetaState snapshot() const;
  long version() const;
  std::pair<ModelArtifact, FeedbackPacket> fine_tune_scenario(const ScenarioDataset& ds) const;
  MetaUpdateReport commit(const std::vector<FeedbackPacket>& packets);
  void archive_scenario(std::shared_ptr<const ScenarioDataset> ds);
  void refresh();

 private:
  mutable std::mutex mu_;
  MetaState state_;
};

}  // namespace longtail
