#pragma once

// The differentiable model zoo: profile encoder, recurrent/attention behavior
// encoders, searched-genotype encoders, prediction head, training loop,
// losses and AUC.

#include "longtail/arch.hpp"
#include "longtail/data.hpp"
#include "longtail/graph.hpp"

#include <functional>
#include <map>
#include <string>

namespace longtail {

struct TrainConfig {
  double learning_rate = 0.001;
  int batch_size = 128;
  int epochs = 5;
  enum class Optimizer { adam, sgd } optimizer = Optimizer::adam;
  std::uint64_t seed = 0;
  bool shuffle = true;
  // continues the per-epoch shuffle stream, so training K epochs and then
  // `epochs` more with offset K replays one K+epochs run (with sgd)
  int epoch_offset = 0;
};

struct LossSpec {
  enum class Kind { ce, distill } kind = Kind::ce;
  const ModelArtifact* teacher = nullptr;
  double delta = 0.0;

  static LossSpec cross_entropy() { return {}; }
  static LossSpec distill(const ModelArtifact& teacher, double delta) {
    return {Kind::distill, &teacher, delta};
  }
};

struct TrainStats {
  std::vector<double> epoch_losses;
};

using ParamVars = std::map<std::string, ad::Var>;

// Fresh artifact with fan-in-scaled deterministic initialization.
ModelArtifact build_model(const ArchConfig& arch, std::uint64_t seed);
ModelArtifact build_model(const ModelArch& arch, std::uint64_t seed);

// Forward pass usable for both training (params bound as graph leaves) and
// prediction. Returns probabilities, shape [B x 1].
ad::Var model_forward(ad::Graph& g, const ModelArch& arch, ParamVars& pv, const Batch& batch);

ParamVars bind_params(ad::Graph& g, const std::map<std::string, Matrix>& params);

Vector predict(const ModelArtifact& m, const Batch& batch);
Vector predict(const ModelArtifact& m, const DataView& data, int batch_size = 256);

// Mini-batch training; returns a new artifact, the input is untouched.
ModelArtifact train_model(const ModelArtifact& model, const DataView& data,
                          const TrainConfig& cfg, const LossSpec& loss,
                          TrainStats* stats = nullptr);

// Mean loss and mean-loss gradient over a whole view at fixed parameters.
double dataset_loss(const ModelArtifact& m, const DataView& data, const LossSpec& loss,
                    int batch_size = 256);
std::map<std::string, Matrix> loss_gradient(const ModelArtifact& m, const DataView& data,
                                            const LossSpec& loss, int batch_size = 256);

// Losses on plain vectors (probabilities clamped at 1e-7).
double ce_loss(const Vector& probs, const Vector& labels);
double distill_loss(const Vector& student_probs, const Vector& teacher_probs,
                    const Vector& labels, double delta);

// Probability that a random positive outranks a random negative, ties 1/2.
double auc(const Vector& scores, const Vector& labels);

double evaluate_auc(const ModelArtifact& m, const DataView& data, int batch_size = 256);

// Shared with the supernet assembly in the architecture search.
Matrix glorot_init(Rng& rng, int rows, int cols);
void add_op_params(std::vector<std::pair<std::string, Matrix>>& items, Rng& rng,
                   const std::string& prefix, const OpSpec& op, int channels);
void add_base_params(std::vector<std::pair<std::string, Matrix>>& items, Rng& rng,
                     const ArchConfig& base, int seq_out_dim, bool with_positions);
ad::Var apply_op(ad::Graph& g, ParamVars& pv, const std::string& prefix, const OpSpec& op,
                 ad::Var x, const Vector& mask, int batch, int seq_len, int heads);
ad::Var forward_profile(ad::Graph& g, ParamVars& pv, const ArchConfig& base, const Batch& b);
ad::Var forward_sequence_input(ad::Graph& g, ParamVars& pv, const Batch& b,
                               bool with_positions);
ad::Var forward_head(ParamVars& pv, const ArchConfig& base, ad::Var profile_out,
                     ad::Var seq_pooled);

}  // namespace longtail
