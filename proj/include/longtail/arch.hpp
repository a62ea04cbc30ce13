#pragma once

// Architecture descriptions shared by the model zoo, the FLOPs meter and the
// architecture search.

#include "longtail/common.hpp"

#include <map>
#include <string>
#include <variant>
#include <vector>

namespace longtail {

enum class EncoderKind { recurrent, attention };

// A pre-designed model: profile MLP + behavior encoder stack + head.
struct ArchConfig {
  EncoderKind encoder_kind = EncoderKind::recurrent;
  int n_encoder_layers = 6;
  int hidden_dim = 15;
  int intermediate_dim = 32;
  std::vector<int> profile_mlp_dims = {32, 32};
  std::vector<int> head_mlp_dims = {64, 32};
  int embed_dim = 0;  // 0 means hidden_dim
  int attention_heads = 3;
  // input shape
  int profile_dim = 16;
  int vocab_size = 24;
  int max_seq_len = 32;

  int resolved_embed_dim() const { return embed_dim > 0 ? embed_dim : hidden_dim; }
  void validate() const;
};

enum class OpKind { conv1d, dilated_conv1d, avg_pool1d, max_pool1d, recurrent, self_attention };

struct OpSpec {
  OpKind kind = OpKind::conv1d;
  int kernel = 1;
  int dilation = 1;
  int channels_in = 0;
  int channels_out = 0;
  int heads = 1;

  std::string name() const;
  void validate() const;
};

// Layered search space: layer L picks one input among {original, out_1, ...,
// out_{L-1}}, one op, and an independent include/exclude bit per earlier
// output as residual input. All ops are shape preserving.
struct SpaceSpec {
  int n_layers = 3;
  int channels = 15;
  int heads = 3;
  std::vector<OpSpec> op_candidates;

  void validate() const;
  // conv/dilated k in {1,3,5,7}, avg/max pool k=3, recurrent, self-attention
  static SpaceSpec standard(int n_layers, int channels, int heads);
};

struct Genotype {
  struct Layer {
    int input_index = 0;            // 0 = original input, j = output of layer j
    int op_index = 0;               // into SpaceSpec::op_candidates
    std::vector<int> residual_set;  // sorted subset of {0..layer_position-1}
  };
  std::vector<Layer> layers;

  void validate(const SpaceSpec& space) const;
  std::string describe(const SpaceSpec& space) const;
};

// Learnable architecture-distribution logits for every decision in the
// supernet: one op choice and one input choice per layer, one include/exclude
// logit pair per residual edge, plus the shared aggregation-attention scores.
struct ArchWeights {
  std::vector<Vector> input_logits;  // layer l (0-based): length l+1
  std::vector<Vector> op_logits;     // layer l: length |op_candidates|
  std::vector<std::vector<Eigen::Vector2d>> residual_logits;  // [l][e]: (include, exclude)
  Vector agg_scores;                 // length n_layers
  double tau = 1.0;

  static ArchWeights zeros(const SpaceSpec& space);
  void validate(const SpaceSpec& space) const;
};

// A searched light model: the genotype replaces the pre-designed encoder
// stack; profile/head/embedding dims come from `base` (whose encoder fields
// are ignored).
struct SearchedArch {
  SpaceSpec space;
  Genotype genotype;
  ArchConfig base;
};

using ModelArch = std::variant<ArchConfig, SearchedArch>;

struct Provenance {
  std::string strategy = "none";
  std::string scenario = "agnostic";
  std::uint64_t seed = 0;
  std::string config_hash;
};

// A trained (or freshly initialized) model: architecture + named parameter
// arrays + provenance. Artifacts are immutable values; training returns a new
// one.
struct ModelArtifact {
  ModelArch arch;
  std::map<std::string, Matrix> params;
  Provenance provenance;
};

long param_count(const ModelArtifact& m);

}  // namespace longtail
