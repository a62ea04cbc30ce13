#include "longtail/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace longtail {

namespace {

constexpr int kMotifCount = 8;
constexpr int kPlantedHidden = 6;
constexpr int kCalibrationSamples = 1500;
constexpr double kTransitionTilt = 0.45;
constexpr double kProfileShift = 0.25;
// relative weight of the standardized feature groups in the planted score
constexpr double kProfileWeight = 1.0;
constexpr double kUnigramWeight = 0.9;
constexpr double kMotifWeight = 0.7;

struct MarkovChain {
  Matrix transition;  // V x V, row stochastic
  Vector initial;     // V

  std::vector<int> sample(Rng& rng, int length) const {
    const int v = static_cast<int>(initial.size());
    std::vector<int> seq(static_cast<std::size_t>(length));
    auto draw = [&](const Vector& dist) {
      double u = rng.uniform();
      for (int i = 0; i < v; ++i) {
        u -= dist(i);
        if (u <= 0.0) return i;
      }
      return v - 1;
    };
    int state = draw(initial);
    seq[0] = state;
    for (int t = 1; t < length; ++t) {
      state = draw(transition.row(state));
      seq[static_cast<std::size_t>(t)] = state;
    }
    return seq;
  }
};

MarkovChain base_chain(Rng& rng, int vocab) {
  MarkovChain c;
  c.transition.resize(vocab, vocab);
  for (int i = 0; i < vocab; ++i) {
    for (int j = 0; j < vocab; ++j) c.transition(i, j) = std::exp(rng.normal());
    c.transition.row(i) /= c.transition.row(i).sum();
  }
  c.initial.resize(vocab);
  for (int i = 0; i < vocab; ++i) c.initial(i) = std::exp(rng.normal());
  c.initial /= c.initial.sum();
  return c;
}

MarkovChain tilted_chain(const MarkovChain& base, Rng& rng, double tilt) {
  MarkovChain c = base;
  for (Eigen::Index i = 0; i < c.transition.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.transition.cols(); ++j)
      c.transition(i, j) *= std::exp(tilt * rng.normal());
    c.transition.row(i) /= c.transition.row(i).sum();
  }
  for (Eigen::Index i = 0; i < c.initial.size(); ++i)
    c.initial(i) *= std::exp(tilt * rng.normal());
  c.initial /= c.initial.sum();
  return c;
}

// two-layer random nonlinear map over the standardized feature vector
struct PlantedMap {
  Matrix w1;  // hidden x dim
  Vector b1;
  Vector w2;  // hidden

  static PlantedMap random(Rng& rng, int dim) {
    PlantedMap f;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    f.w1.resize(kPlantedHidden, dim);
    for (Eigen::Index i = 0; i < f.w1.rows(); ++i)
      for (Eigen::Index j = 0; j < f.w1.cols(); ++j) f.w1(i, j) = scale * rng.normal();
    f.b1.resize(kPlantedHidden);
    for (Eigen::Index i = 0; i < f.b1.size(); ++i) f.b1(i) = 0.3 * rng.normal();
    f.w2.resize(kPlantedHidden);
    for (Eigen::Index i = 0; i < f.w2.size(); ++i) f.w2(i) = rng.normal();
    return f;
  }

  double operator()(const Vector& z) const {
    return ((w1 * z + b1).array().tanh() * w2.array()).sum();
  }
};

struct Universe {
  MarkovChain base;
  std::vector<std::pair<int, int>> motifs;  // planted bigrams (0-based events)
  PlantedMap shared_map;
  Vector feat_mean, feat_std;  // universe-level standardization
  int feature_dim = 0;
};

int feature_dim(const UniverseConfig& cfg) {
  return cfg.profile_dim + cfg.vocab_size + kMotifCount;
}

// profile ++ unigram frequencies ++ planted-motif frequencies
Vector raw_features(const UniverseConfig& cfg, const Universe& u, const Vector& profile,
                    const std::vector<int>& events) {
  Vector z = Vector::Zero(feature_dim(cfg));
  z.head(cfg.profile_dim) = profile;
  const double len = static_cast<double>(events.size());
  for (int e : events) z(cfg.profile_dim + e) += 1.0 / len;
  if (events.size() > 1) {
    const double pairs = len - 1.0;
    for (std::size_t t = 0; t + 1 < events.size(); ++t) {
      for (int mi = 0; mi < kMotifCount; ++mi) {
        const auto& [a, b] = u.motifs[static_cast<std::size_t>(mi)];
        if (events[t] == a && events[t + 1] == b)
          z(cfg.profile_dim + cfg.vocab_size + mi) += 1.0 / pairs;
      }
    }
  }
  return z;
}

Vector standardized(const UniverseConfig& cfg, const Universe& u, const Vector& raw) {
  Vector z = (raw - u.feat_mean).cwiseQuotient(u.feat_std);
  z.head(cfg.profile_dim) *= kProfileWeight;
  z.segment(cfg.profile_dim, cfg.vocab_size) *= kUnigramWeight;
  z.tail(kMotifCount) *= kMotifWeight;
  return z;
}

int sample_length(Rng& rng, int max_len) {
  const int lo = std::max(2, max_len / 2);
  return lo + rng.uniform_int(max_len - lo + 1);
}

Universe build_universe(const UniverseConfig& cfg, std::uint64_t seed) {
  Universe u;
  Rng rng(mix_seed(seed, 0x07A1));
  u.base = base_chain(rng, cfg.vocab_size);
  for (int i = 0; i < kMotifCount; ++i) {
    int a = rng.uniform_int(cfg.vocab_size);
    int b = rng.uniform_int(cfg.vocab_size);
    u.motifs.emplace_back(a, b);
  }
  u.feature_dim = feature_dim(cfg);
  u.shared_map = PlantedMap::random(rng, u.feature_dim);

  // freeze standardization constants from a base-chain calibration sample
  Matrix feats(kCalibrationSamples, u.feature_dim);
  Vector profile(cfg.profile_dim);
  for (int i = 0; i < kCalibrationSamples; ++i) {
    for (int d = 0; d < cfg.profile_dim; ++d) profile(d) = rng.normal();
    const auto events = u.base.sample(rng, sample_length(rng, cfg.max_seq_len));
    feats.row(i) = raw_features(cfg, u, profile, events);
  }
  u.feat_mean = feats.colwise().mean();
  u.feat_std.resize(u.feature_dim);
  for (int d = 0; d < u.feature_dim; ++d) {
    const double var = (feats.col(d).array() - u.feat_mean(d)).square().mean();
    u.feat_std(d) = std::max(std::sqrt(var), 1e-3);
  }
  return u;
}

// tags rows listed in `train_rows` as support/query; returns false on a
// degenerate single-class part
bool try_tag_support_query(ScenarioDataset& ds, const std::vector<int>& train_rows,
                           double support_frac, Rng& rng) {
  std::vector<int> rows = train_rows;
  rng.shuffle(rows);
  const int n_support =
      static_cast<int>(std::lround(support_frac * static_cast<double>(rows.size())));
  if (n_support < 1 || n_support >= static_cast<int>(rows.size())) return false;
  for (std::size_t i = 0; i < rows.size(); ++i)
    ds.partition[static_cast<std::size_t>(rows[i])] =
        static_cast<int>(i) < n_support ? Part::train_support : Part::train_query;
  bool sp = false, sn = false, qp = false, qn = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const bool pos = ds.labels(rows[i]) == 1.0;
    if (static_cast<int>(i) < n_support)
      (pos ? sp : sn) = true;
    else
      (pos ? qp : qn) = true;
  }
  return sp && sn && qp && qn;
}

ScenarioDataset generate_one(const UniverseConfig& cfg, const Universe& u, int scenario_id,
                             int n_rows, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5CE0 + static_cast<std::uint64_t>(scenario_id)));
  const MarkovChain chain = tilted_chain(u.base, rng, kTransitionTilt);
  const PlantedMap scen_map = PlantedMap::random(rng, u.feature_dim);
  Vector profile_shift(cfg.profile_dim);
  for (int d = 0; d < cfg.profile_dim; ++d) profile_shift(d) = kProfileShift * rng.normal();

  ScenarioDataset ds;
  ds.scenario_id = scenario_id;
  ds.vocab_size = cfg.vocab_size;
  ds.profiles.resize(n_rows, cfg.profile_dim);
  ds.sequences = IntMatrix::Zero(n_rows, cfg.max_seq_len);
  ds.seq_mask = Matrix::Zero(n_rows, cfg.max_seq_len);
  ds.labels.resize(n_rows);
  ds.partition.assign(static_cast<std::size_t>(n_rows), Part::train_support);

  Vector scores(n_rows);
  for (int r = 0; r < n_rows; ++r) {
    Vector profile(cfg.profile_dim);
    for (int d = 0; d < cfg.profile_dim; ++d) profile(d) = profile_shift(d) + rng.normal();
    ds.profiles.row(r) = profile;
    const auto events = chain.sample(rng, sample_length(rng, cfg.max_seq_len));
    for (std::size_t t = 0; t < events.size(); ++t) {
      ds.sequences(r, static_cast<int>(t)) = events[t] + 1;  // 0 is padding
      ds.seq_mask(r, static_cast<int>(t)) = 1.0;
    }
    const Vector z = standardized(cfg, u, raw_features(cfg, u, profile, events));
    scores(r) = cfg.shared_strength * u.shared_map(z) +
                (1.0 - cfg.shared_strength) * scen_map(z);
  }

  // per-scenario standardization keeps classes balanced at any mixture
  const double mean = scores.mean();
  const double sd = std::max(std::sqrt((scores.array() - mean).square().mean()), 1e-9);
  for (int r = 0; r < n_rows; ++r) {
    const double p = 1.0 / (1.0 + std::exp(-cfg.label_sharpness * (scores(r) - mean) / sd));
    double y = rng.uniform() < p ? 1.0 : 0.0;
    if (cfg.noise_rate > 0.0 && rng.uniform() < cfg.noise_rate) y = 1.0 - y;
    ds.labels(r) = y;
  }

  // partition: test split, then support/query inside the train rows
  const int n_test = std::max(1, static_cast<int>(std::lround(cfg.test_frac * n_rows)));
  std::vector<int> order(static_cast<std::size_t>(n_rows));
  std::iota(order.begin(), order.end(), 0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    Rng part_rng(mix_seed(seed, 0xBA55 + static_cast<std::uint64_t>(scenario_id) * 131 +
                                    static_cast<std::uint64_t>(attempt)));
    part_rng.shuffle(order);
    for (int i = 0; i < n_rows; ++i)
      ds.partition[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
          i < n_test ? Part::test : Part::train_support;
    bool tp = false, tn = false;
    for (int i = 0; i < n_test; ++i) {
      const int r = order[static_cast<std::size_t>(i)];
      (ds.labels(r) == 1.0 ? tp : tn) = true;
    }
    if (!(tp && tn)) continue;
    std::vector<int> train_rows(order.begin() + n_test, order.end());
    if (try_tag_support_query(ds, train_rows, cfg.support_frac, part_rng)) {
      ds.validate();
      return ds;
    }
  }
  throw std::runtime_error("generate_scenarios: scenario " + std::to_string(scenario_id) +
                           " could not satisfy the partition class invariants");
}

}  // namespace

void UniverseConfig::validate() const {
  if (profile_dim < 1 || vocab_size < 1 || max_seq_len < 1 || n_scenarios < 1)
    throw std::invalid_argument("UniverseConfig: all dims must be >= 1");
  if (shared_strength < 0.0 || shared_strength > 1.0)
    throw std::invalid_argument("UniverseConfig: shared_strength must lie in [0,1]");
  if (noise_rate < 0.0 || noise_rate >= 1.0)
    throw std::invalid_argument("UniverseConfig: noise_rate must lie in [0,1)");
  if (static_cast<int>(size_profile.size()) != n_scenarios)
    throw std::invalid_argument("UniverseConfig: size_profile length must equal n_scenarios");
  for (int s : size_profile)
    if (s < 20)
      throw std::invalid_argument(
          "UniverseConfig: size_profile entries below 20 cannot satisfy the partition "
          "invariants");
  if (test_frac <= 0.0 || test_frac >= 1.0 || support_frac <= 0.0 || support_frac >= 1.0)
    throw std::invalid_argument("UniverseConfig: fractions must lie in (0,1)");
  if (label_sharpness <= 0.0)
    throw std::invalid_argument("UniverseConfig: label_sharpness must be positive");
}

std::vector<ScenarioDataset> generate_scenarios(const UniverseConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Universe u = build_universe(cfg, seed);
  std::vector<ScenarioDataset> out;
  for (int n = 0; n < cfg.n_scenarios; ++n)
    out.push_back(generate_one(cfg, u, n, cfg.size_profile[static_cast<std::size_t>(n)], seed));
  return out;
}

ScenarioDataset split_support_query(const ScenarioDataset& ds, double support_frac,
                                    std::uint64_t seed) {
  if (support_frac <= 0.0 || support_frac >= 1.0)
    throw std::invalid_argument("split_support_query: support_frac must lie in (0,1)");
  ScenarioDataset out = ds;
  const std::vector<int> train_rows =
      out.rows_with({Part::train_support, Part::train_query});
  if (train_rows.empty()) throw std::invalid_argument("split_support_query: no train rows");
  for (int attempt = 0; attempt < 10; ++attempt) {
    Rng rng(mix_seed(seed, 0x59F7 + static_cast<std::uint64_t>(attempt)));
    if (try_tag_support_query(out, train_rows, support_frac, rng)) return out;
  }
  throw std::runtime_error("split_support_query: degenerate class split after 10 attempts");
}

}  // namespace longtail
