#pragma once

// Exact FLOPs accounting for candidate ops, genotypes and whole models, plus
// the probability-weighted expected count used by the search regularizer.
// Conventions (one multiply-accumulate = 2 FLOPs, scalar nonlinearity = 1,
// embedding lookups excluded, softmax arithmetic included) are documented in
// docs/flops.md together with every closed-form formula.

#include "longtail/arch.hpp"

#include <vector>

namespace longtail {

struct SeqShape {
  int seq_len = 0;
  int channels = 0;
};

// dense [in -> out] applied at `positions` time positions
long dense_flops(int in_dim, int out_dim, int positions = 1);

long op_flops(const OpSpec& op, int seq_len);

long residual_edge_flops(const SeqShape& shape);
long aggregation_flops(int n_layers, const SeqShape& shape);

struct FlopsReport {
  std::vector<long> per_layer;
  long residual_total = 0;
  long aggregation = 0;
  long total = 0;
  long reference = 0;     // max-FLOPs genotype of the space
  double normalized = 0;  // total / reference, in (0, 1]
};

FlopsReport genotype_flops(const Genotype& g, const SpaceSpec& space, const SeqShape& shape);

long space_max_flops(const SpaceSpec& space, const SeqShape& shape);
long space_min_flops(const SpaceSpec& space, const SeqShape& shape);

// Probability-weighted FLOPs over the architecture distribution (temperature
// free Eq.-style probabilities, softmax of the raw logits). Differentiable in
// the logits; reduces to genotype_flops().total when one-hot.
double expected_flops(const ArchWeights& aw, const SpaceSpec& space, const SeqShape& shape);

// Analytic gradient of expected_flops w.r.t. the logits (same layout; input
// logits and aggregation scores carry no FLOPs and get zero gradient).
ArchWeights expected_flops_grad(const ArchWeights& aw, const SpaceSpec& space,
                                const SeqShape& shape);

// Whole-model counts used in reports and for the search budget.
long model_flops(const ModelArch& arch);
long encoder_flops(const ArchConfig& arch);  // pre-designed behavior encoder stack only

}  // namespace longtail
