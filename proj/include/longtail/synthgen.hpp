#pragma once

// Families of related synthetic scenarios with controllable cross-scenario
// similarity. Labels come from a planted mixture
//   p(y|x) = sigmoid(sharpness * standardize(shared_strength * f_shared(z)
//                    + (1 - shared_strength) * f_scenario(z)))
// where z concatenates the profile vector with a bag-of-events summary of the
// sequence (unigram frequencies plus a small set of planted bigram motifs).
// Sequences are Markov chains with scenario-tilted transition matrices.

#include "longtail/data.hpp"

#include <vector>

namespace longtail {

struct UniverseConfig {
  int profile_dim = 16;
  int vocab_size = 24;
  int max_seq_len = 32;
  int n_scenarios = 6;
  double shared_strength = 0.9;
  double noise_rate = 0.05;           // label flip probability
  std::vector<int> size_profile;      // per-scenario sample counts
  double label_sharpness = 4.0;       // logistic slope on the standardized score
  double test_frac = 0.2;
  double support_frac = 0.8;

  void validate() const;
};

std::vector<ScenarioDataset> generate_scenarios(const UniverseConfig& cfg, std::uint64_t seed);

// Re-tags the train rows into support/query with |support| =
// round(support_frac * |train|). Retries internally (up to 10 reseeds) until
// both classes appear in both parts, then fails.
ScenarioDataset split_support_query(const ScenarioDataset& ds, double support_frac,
                                    std::uint64_t seed);

}  // namespace longtail
