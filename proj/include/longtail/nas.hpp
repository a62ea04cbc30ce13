#pragma once

// Budget-limited architecture search: Gumbel-Softmax supernet over the
// layered space with straight-through sampled branches, alternating bilevel
// optimization with a FLOPs penalty and distillation, and constrained
// maximum-joint-probability genotype derivation.

#include "longtail/flops.hpp"
#include "longtail/nets.hpp"
#include "longtail/synthgen.hpp"

#include <memory>
#include <utility>

namespace longtail {

struct NasConfig {
  double lambda = -1.0;   // < 0: auto-calibrate so the penalty is ~0.1x the initial CE
  double delta = 1.0;     // distillation balance
  double beta = 0.003;    // network weight learning rate
  double arch_lr = 0.05;  // architecture logit learning rate
  double tau_start = 5.0;
  double tau_end = 0.1;
  int epochs = 12;
  int batch_size = 64;
  long flops_budget = 0;  // encoder-level budget; 0 means the space maximum
  double train_split = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

std::pair<int, Vector> gumbel_sample(const Vector& logits, double tau, Rng& rng);
// Relaxed probabilities with explicit noise (zero noise gives plain softmax
// of logits/tau).
Vector gumbel_relaxed(const Vector& logits, const Vector& noise, double tau);

// One sampled decision set (indices plus the noise that produced them) so a
// forward pass can be replayed deterministically.
struct DecisionPlan {
  std::vector<int> input_choice;
  std::vector<int> op_choice;
  std::vector<std::vector<bool>> residual_include;
  std::vector<Vector> input_noise;
  std::vector<Vector> op_noise;
  std::vector<std::vector<Eigen::Vector2d>> residual_noise;
};

struct Supernet {
  SpaceSpec space;
  ArchConfig base;  // encoder fields unused; supplies profile/head/embed dims
  std::map<std::string, Matrix> weights;
  ArchWeights arch;
};

Supernet build_supernet(const SpaceSpec& space, const ArchConfig& base, std::uint64_t seed);

DecisionPlan sample_decisions(const Supernet& sn, Rng& rng);

// Architecture logits bound into a graph so gradients can flow to them.
struct ArchVars {
  std::vector<ad::Var> input_logits;
  std::vector<ad::Var> op_logits;
  std::vector<std::vector<ad::Var>> residual_logits;
  ad::Var agg_scores;
};

ArchVars bind_arch(ad::Graph& g, const ArchWeights& aw, bool trainable);

// The frozen "detached" probability copies used by the straight-through
// scaling. Anchoring at the current logits makes every gate exactly 1; a
// finite-difference check holds the anchor fixed while perturbing logits.
struct GateAnchor {
  std::vector<double> input_pm, op_pm;
  std::vector<std::vector<double>> residual_pm;
};

GateAnchor gate_anchor(const Supernet& sn, const DecisionPlan& plan);

// Forward with the straight-through scaling (1 - detached(P) + P) * branch:
// the value equals the sampled sub-network's output exactly, gradients flow
// to the sampled logits. `anchor` defaults to the current probabilities.
ad::Var supernet_forward(ad::Graph& g, const Supernet& sn, ParamVars& wv, ArchVars& av,
                         const DecisionPlan& plan, const Batch& b,
                         const GateAnchor* anchor = nullptr);

// Genotype induced by a plan, and the sampled sub-network's parameters named
// as a plain searched model expects (used by tests and diagnostics).
Genotype plan_genotype(const DecisionPlan& plan);
std::map<std::string, Matrix> subnetwork_params(const Supernet& sn, const Genotype& g);

// Adam state for the two bilevel steps.
class SearchOptimizers {
 public:
  SearchOptimizers(double beta, double arch_lr);
  ~SearchOptimizers();
  struct Impl;
  std::unique_ptr<Impl> impl;
};

struct SearchStepResult {
  double train_loss = 0;
  double val_loss = 0;  // includes the FLOPs penalty
};

// (a) weight step on the train batch minimizing the distillation loss,
// (b) architecture step on the val batch minimizing loss + lambda *
//     normalized expected FLOPs. Fresh Gumbel samples for each step.
SearchStepResult search_step(Supernet& sn, const Batch& train_batch, const Batch& val_batch,
                             const ModelArtifact* teacher, const NasConfig& cfg, double lambda,
                             SearchOptimizers& opt, Rng& rng);

struct SearchResult {
  Supernet supernet;
  double lambda = 0;  // the value actually used (after auto-calibration)
  std::vector<double> epoch_val_losses;
};

SearchResult search(const SpaceSpec& space, const ArchConfig& base, const DataView& train_rows,
                    const ModelArtifact* teacher, const NasConfig& cfg);

// Highest-joint-probability genotype with genotype_flops <= budget, by lazy
// best-first enumeration over the independent decisions. Ties break toward
// lower FLOPs, then lexicographic decision order.
Genotype derive_genotype(const ArchWeights& aw, const SpaceSpec& space, long budget,
                         const SeqShape& shape);

// Retrains the derived architecture from fresh initialization with the
// distillation loss.
ModelArtifact train_light(const Genotype& genotype, const SpaceSpec& space,
                          const ArchConfig& base, const DataView& data,
                          const ModelArtifact* teacher, const TrainConfig& cfg, double delta,
                          TrainStats* stats = nullptr);

}  // namespace longtail
