#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "longtail/flops.hpp"
#include "longtail/nets.hpp"
#include "oracles.hpp"

using namespace longtail;

namespace {

ScenarioDataset toy_dataset(int m, int profile_dim, int vocab, int seq_len, std::uint64_t seed,
                            bool separable) {
  Rng rng(seed);
  ScenarioDataset ds;
  ds.scenario_id = 0;
  ds.vocab_size = vocab;
  ds.profiles.resize(m, profile_dim);
  ds.sequences.resize(m, seq_len);
  ds.seq_mask.resize(m, seq_len);
  ds.labels.resize(m);
  ds.partition.assign(static_cast<std::size_t>(m), Part::train_support);
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < profile_dim; ++c) ds.profiles(r, c) = rng.normal();
    const int len = 1 + rng.uniform_int(seq_len);
    for (int t = 0; t < seq_len; ++t) {
      const int ev = t < len ? 1 + rng.uniform_int(vocab) : 0;
      ds.sequences(r, t) = ev;
      ds.seq_mask(r, t) = ev != 0 ? 1.0 : 0.0;
    }
    if (separable)
      ds.labels(r) = ds.profiles(r, 0) + ds.profiles(r, 1) > 0.0 ? 1.0 : 0.0;
    else
      ds.labels(r) = rng.uniform() < 0.5 ? 1.0 : 0.0;
  }
  // ensure both classes
  ds.labels(0) = 0.0;
  ds.labels(m - 1) = 1.0;
  return ds;
}

ArchConfig tiny_arch(EncoderKind kind) {
  ArchConfig a;
  a.encoder_kind = kind;
  a.n_encoder_layers = 2;
  a.hidden_dim = 4;
  a.intermediate_dim = 4;
  a.profile_mlp_dims = {3};
  a.head_mlp_dims = {4};
  a.embed_dim = 4;
  a.attention_heads = 2;
  a.profile_dim = 3;
  a.vocab_size = 5;
  a.max_seq_len = 6;
  return a;
}

double model_fd_check(const ArchConfig& arch, std::uint64_t seed) {
  ModelArtifact m = build_model(arch, seed);
  ScenarioDataset ds = toy_dataset(6, arch.profile_dim, arch.vocab_size, arch.max_seq_len,
                                   seed + 1, true);
  const Batch b = make_batch(support_view(ds));
  ad::Graph g;
  ParamVars pv = bind_params(g, m.params);
  ad::Var loss = ad::bce(model_forward(g, m.arch, pv, b), b.labels);
  g.backward(loss);

  std::vector<Matrix*> ptrs;
  std::vector<Matrix> analytic;
  for (auto& [name, mat] : m.params) {
    ptrs.push_back(&mat);
    analytic.push_back(pv.at(name).grad());
  }
  auto eval = [&]() {
    ad::Graph g2;
    ParamVars pv2 = bind_params(g2, m.params);
    return ad::bce(model_forward(g2, m.arch, pv2, b), b.labels).value()(0, 0);
  };
  return oracle::fd_max_rel_err(ptrs, analytic, eval);
}

}  // namespace

TEST_CASE("build_model is deterministic per (arch, seed)") {
  const ArchConfig a = tiny_arch(EncoderKind::recurrent);
  ModelArtifact m1 = build_model(a, 42);
  ModelArtifact m2 = build_model(a, 42);
  ModelArtifact m3 = build_model(a, 43);
  REQUIRE(m1.params.size() == m2.params.size());
  bool all_equal = true, any_diff_other_seed = false;
  for (auto& [k, v] : m1.params) {
    all_equal = all_equal && v == m2.params.at(k);
    any_diff_other_seed = any_diff_other_seed || v != m3.params.at(k);
  }
  CHECK(all_equal);
  CHECK(any_diff_other_seed);
}

TEST_CASE("heavy default arch emits probabilities in (0,1)") {
  ArchConfig a;  // heavy defaults: 6 recurrent layers, hidden 15
  a.profile_dim = 16;
  a.vocab_size = 24;
  a.max_seq_len = 32;
  ModelArtifact m = build_model(a, 1);
  ScenarioDataset ds = toy_dataset(4, 16, 24, 32, 2, false);
  const Vector p = predict(m, make_batch(support_view(ds)));
  REQUIRE(p.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(p(i) > 0.0);
    CHECK(p(i) < 1.0);
  }
}

TEST_CASE("parameter count of a 16->8 profile layer is 136") {
  ArchConfig a = tiny_arch(EncoderKind::recurrent);
  a.profile_dim = 16;
  a.profile_mlp_dims = {8};
  ModelArtifact m = build_model(a, 3);
  CHECK(m.params.at("profile.0.w").size() + m.params.at("profile.0.b").size() == 136);
}

TEST_CASE("shape-inconsistent arch reports the mismatched dims") {
  ArchConfig a = tiny_arch(EncoderKind::attention);
  a.embed_dim = 3;  // != hidden_dim
  CHECK_THROWS_WITH_AS(build_model(a, 1),
                       doctest::Contains("embed_dim == hidden_dim"), std::invalid_argument);
  ArchConfig b = tiny_arch(EncoderKind::attention);
  b.attention_heads = 3;  // does not divide hidden 4
  CHECK_THROWS_AS(build_model(b, 1), std::invalid_argument);
}

TEST_CASE("gradient check: recurrent encoder") {
  CHECK(model_fd_check(tiny_arch(EncoderKind::recurrent), 7) < 1e-5);
}

TEST_CASE("gradient check: attention encoder") {
  CHECK(model_fd_check(tiny_arch(EncoderKind::attention), 9) < 1e-5);
}

namespace {

// two-feature linearly separable set with a margin; sequences carry no signal
ScenarioDataset separable_dataset(int m, int vocab, int seq_len, std::uint64_t seed) {
  Rng rng(seed);
  ScenarioDataset ds = toy_dataset(m, 2, vocab, seq_len, seed, true);
  for (int r = 0; r < m; ++r) {
    double s;
    do {
      ds.profiles(r, 0) = rng.normal();
      ds.profiles(r, 1) = rng.normal();
      s = ds.profiles(r, 0) + ds.profiles(r, 1);
    } while (std::abs(s) < 0.3);
    ds.labels(r) = s > 0.0 ? 1.0 : 0.0;
  }
  ds.labels(0) = ds.profiles(0, 0) + ds.profiles(0, 1) > 0.0 ? 1.0 : 0.0;
  return ds;
}

}  // namespace

TEST_CASE("training fits a separable toy set") {
  ArchConfig a = tiny_arch(EncoderKind::recurrent);
  a.n_encoder_layers = 1;
  a.profile_dim = 2;
  ModelArtifact m = build_model(a, 11);
  ScenarioDataset ds = separable_dataset(200, a.vocab_size, a.max_seq_len, 12);
  const DataView train = support_view(ds);
  TrainConfig cfg;
  cfg.learning_rate = 0.03;
  cfg.batch_size = 16;
  cfg.epochs = 5;
  cfg.seed = 13;
  TrainStats stats;
  ModelArtifact trained = train_model(m, train, cfg, LossSpec::cross_entropy(), &stats);
  CHECK(evaluate_auc(trained, train) >= 0.99);
  REQUIRE(stats.epoch_losses.size() == 5);
  for (std::size_t e = 1; e < stats.epoch_losses.size(); ++e)
    CHECK(stats.epoch_losses[e] <= stats.epoch_losses[e - 1] + 1e-9);
  // original untouched
  for (auto& [k, v] : m.params) CHECK(v == build_model(a, 11).params.at(k));
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  ArchConfig a = tiny_arch(EncoderKind::recurrent);
  ModelArtifact m = build_model(a, 17);
  ScenarioDataset ds = toy_dataset(30, a.profile_dim, a.vocab_size, a.max_seq_len, 18, true);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.epochs = 2;
  for (auto opt : {TrainConfig::Optimizer::adam, TrainConfig::Optimizer::sgd}) {
    cfg.optimizer = opt;
    ModelArtifact t = train_model(m, support_view(ds), cfg, LossSpec::cross_entropy());
    for (auto& [k, v] : m.params) CHECK(v == t.params.at(k));
  }
}

TEST_CASE("training is deterministic per seed") {
  ArchConfig a = tiny_arch(EncoderKind::recurrent);
  ModelArtifact m = build_model(a, 19);
  ScenarioDataset ds = toy_dataset(60, a.profile_dim, a.vocab_size, a.max_seq_len, 20, true);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 21;
  ModelArtifact t1 = train_model(m, support_view(ds), cfg, LossSpec::cross_entropy());
  ModelArtifact t2 = train_model(m, support_view(ds), cfg, LossSpec::cross_entropy());
  for (auto& [k, v] : t1.params) CHECK(v == t2.params.at(k));
}

TEST_CASE("ce_loss matches analytic values") {
  Vector p1(1), y1(1);
  p1 << 1.0 - 1e-7;
  y1 << 1.0;
  CHECK(ce_loss(p1, y1) == doctest::Approx(0.0).epsilon(1e-6));

  Vector p2(2), y2(2);
  p2 << 0.5, 0.5;
  y2 << 0.0, 1.0;
  CHECK(ce_loss(p2, y2) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("ce_loss agrees with the direct formula on random cases") {
  Rng rng(23);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 17;
    Vector p(n), y(n);
    for (int i = 0; i < n; ++i) {
      p(i) = rng.uniform(0.01, 0.99);
      y(i) = rng.uniform() < 0.5 ? 0.0 : 1.0;
    }
    double direct = 0.0;
    for (int i = 0; i < n; ++i)
      direct -= y(i) * std::log(p(i)) + (1.0 - y(i)) * std::log(1.0 - p(i));
    direct /= n;
    CHECK(ce_loss(p, y) == doctest::Approx(direct).epsilon(1e-12));
  }
}

TEST_CASE("ce_loss and auc are permutation invariant") {
  Rng rng(29);
  const int n = 40;
  Vector p(n), y(n);
  for (int i = 0; i < n; ++i) {
    p(i) = rng.uniform(0.05, 0.95);
    y(i) = i % 3 == 0 ? 1.0 : 0.0;
  }
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Vector pp(n), yp(n);
  for (int i = 0; i < n; ++i) {
    pp(i) = p(perm[static_cast<std::size_t>(i)]);
    yp(i) = y(perm[static_cast<std::size_t>(i)]);
  }
  CHECK(ce_loss(pp, yp) == doctest::Approx(ce_loss(p, y)).epsilon(1e-12));
  CHECK(auc(pp, yp) == doctest::Approx(auc(p, y)).epsilon(1e-12));
}

TEST_CASE("distill_loss special cases") {
  Vector student(3), teacher(3), labels(3);
  student << 0.3, 0.6, 0.8;
  teacher << 0.5, 0.5, 0.5;
  labels << 1, 0, 1;
  CHECK(distill_loss(student, teacher, labels, 0.0) == ce_loss(student, labels));

  // delta=1, teacher=student=0.5, label=1 -> ln2 + ln2
  Vector half(1), one(1);
  half << 0.5;
  one << 1.0;
  CHECK(distill_loss(half, half, one, 1.0) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  // student == teacher with perfect hard labels: soft term is the teacher's
  // own binary entropy
  Vector q(2), hard(2);
  q << 0.7, 0.2;
  hard << 1.0, 0.0;
  const double entropy =
      (-(0.7 * std::log(0.7) + 0.3 * std::log(0.3)) - (0.2 * std::log(0.2) + 0.8 * std::log(0.8))) /
      2.0;
  const double base = ce_loss(q, hard);
  CHECK(distill_loss(q, q, hard, 1.0) == doctest::Approx(base + entropy).epsilon(1e-10));
}

TEST_CASE("auc basic cases") {
  Vector s(2), y(2);
  s << 0.9, 0.1;
  y << 1, 0;
  CHECK(auc(s, y) == 1.0);

  Vector s2 = Vector::Constant(6, 0.4), y2(6);
  y2 << 1, 0, 1, 0, 0, 1;
  CHECK(auc(s2, y2) == 0.5);

  Vector y3 = Vector::Ones(4);
  CHECK_THROWS_AS(auc(Vector::Random(4), y3), std::invalid_argument);
}

TEST_CASE("auc equals the pairwise oracle on random instances") {
  Rng rng(31);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 50;
    Vector s(n), y(n);
    for (int i = 0; i < n; ++i) {
      // quantized scores so ties actually occur
      s(i) = std::round(rng.uniform() * 10.0) / 10.0;
      y(i) = rng.uniform() < 0.4 ? 1.0 : 0.0;
    }
    y(0) = 1.0;
    y(1) = 0.0;
    CHECK(std::abs(auc(s, y) - oracle::pairwise_auc(s, y)) < 1e-9);
  }
}

TEST_CASE("distillation training with zero delta equals plain CE training") {
  ArchConfig a = tiny_arch(EncoderKind::recurrent);
  a.n_encoder_layers = 1;
  ModelArtifact m = build_model(a, 37);
  ModelArtifact teacher = build_model(a, 38);
  ScenarioDataset ds = toy_dataset(50, a.profile_dim, a.vocab_size, a.max_seq_len, 39, true);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 40;
  ModelArtifact t1 = train_model(m, support_view(ds), cfg, LossSpec::cross_entropy());
  ModelArtifact t2 = train_model(m, support_view(ds), cfg, LossSpec::distill(teacher, 0.0));
  for (auto& [k, v] : t1.params)
    CHECK((v - t2.params.at(k)).lpNorm<Eigen::Infinity>() < 1e-12);
}
