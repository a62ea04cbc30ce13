#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "longtail/meta.hpp"
#include "longtail/synthgen.hpp"

#include <thread>

using namespace longtail;

namespace {

UniverseConfig small_universe(int n_scenarios, int rows) {
  UniverseConfig cfg;
  cfg.profile_dim = 4;
  cfg.vocab_size = 7;
  cfg.max_seq_len = 8;
  cfg.n_scenarios = n_scenarios;
  cfg.size_profile.assign(static_cast<std::size_t>(n_scenarios), rows);
  cfg.shared_strength = 1.0;
  cfg.noise_rate = 0.0;
  cfg.label_sharpness = 6.0;
  return cfg;
}

ArchConfig small_arch(const UniverseConfig& u, int layers = 1, int hidden = 5) {
  ArchConfig a;
  a.encoder_kind = EncoderKind::recurrent;
  a.n_encoder_layers = layers;
  a.hidden_dim = hidden;
  a.embed_dim = hidden;
  a.profile_mlp_dims = {4};
  a.head_mlp_dims = {4};
  a.profile_dim = u.profile_dim;
  a.vocab_size = u.vocab_size;
  a.max_seq_len = u.max_seq_len;
  return a;
}

MetaState plain_state(const ArchConfig& arch, const MetaConfig& cfg, std::uint64_t seed) {
  MetaState s;
  s.agnostic = build_model(arch, seed);
  s.cfg = cfg;
  return s;
}

FeedbackPacket packet_like(const ModelArtifact& m, int scenario, long base, double scale,
                           std::uint64_t seed) {
  Rng rng(seed);
  FeedbackPacket p;
  p.scenario_id = scenario;
  p.base_version = base;
  for (const auto& [k, v] : m.params) {
    Matrix g(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = scale * rng.normal();
    p.query_gradient.emplace(k, std::move(g));
  }
  return p;
}

double max_param_diff(const ModelArtifact& a, const ModelArtifact& b) {
  double worst = 0.0;
  for (const auto& [k, v] : a.params)
    worst = std::max(worst, (v - b.params.at(k)).lpNorm<Eigen::Infinity>());
  return worst;
}

}  // namespace

TEST_CASE("meta_update applies eta times the gradient exactly") {
  const UniverseConfig u = small_universe(1, 60);
  const ArchConfig arch = small_arch(u);
  MetaConfig cfg;
  cfg.gamma = 0.1;
  cfg.eta = 0.05;
  MetaState state = plain_state(arch, cfg, 1);
  const FeedbackPacket p = packet_like(state.agnostic, 0, 0, 1.0, 2);
  const MetaState next = meta_update(state, {p});
  CHECK(next.version == 1);
  for (const auto& [k, v] : state.agnostic.params) {
    const Matrix expect = v - 0.05 * p.query_gradient.at(k);
    CHECK((next.agnostic.params.at(k) - expect).lpNorm<Eigen::Infinity>() < 1e-9);
  }
}

TEST_CASE("aggregated update equals the summed-gradient update") {
  const UniverseConfig u = small_universe(1, 60);
  MetaConfig cfg;
  cfg.gamma = 0.2;
  MetaState state = plain_state(small_arch(u), cfg, 3);
  const FeedbackPacket p1 = packet_like(state.agnostic, 0, 0, 1.0, 4);
  const FeedbackPacket p2 = packet_like(state.agnostic, 1, 0, 0.5, 5);
  FeedbackPacket sum = p1;
  for (auto& [k, g] : sum.query_gradient) g += p2.query_gradient.at(k);
  const MetaState a = meta_update(state, {p1, p2});
  const MetaState b = meta_update(state, {sum});
  CHECK(max_param_diff(a.agnostic, b.agnostic) < 1e-9);
}

TEST_CASE("aggregated update equals sequential updates at a fixed base") {
  const UniverseConfig u = small_universe(1, 60);
  MetaConfig cfg;
  cfg.gamma = 0.2;
  MetaState state = plain_state(small_arch(u), cfg, 31);
  std::vector<FeedbackPacket> packets;
  for (int i = 0; i < 4; ++i)
    packets.push_back(packet_like(state.agnostic, i, 0, 0.7, 40 + static_cast<std::uint64_t>(i)));
  const MetaState agg = meta_update(state, packets);
  // sequential single-packet applications with gradients precomputed at base
  ModelArtifact seq = state.agnostic;
  const double eta = cfg.resolved_eta();
  for (const auto& p : packets)
    for (auto& [k, v] : seq.params) v -= eta * p.query_gradient.at(k);
  CHECK(max_param_diff(agg.agnostic, seq) < 1e-9);
}

TEST_CASE("eta zero leaves parameters bit-identical but bumps the version") {
  const UniverseConfig u = small_universe(1, 60);
  MetaConfig cfg;
  cfg.gamma = 0.2;
  cfg.eta = 0.0;
  MetaState state = plain_state(small_arch(u), cfg, 6);
  const MetaState next = meta_update(state, {packet_like(state.agnostic, 0, 0, 1.0, 7)});
  CHECK(next.version == state.version + 1);
  for (const auto& [k, v] : state.agnostic.params) CHECK(v == next.agnostic.params.at(k));
}

TEST_CASE("stale packets are dropped and reported; all-stale is a no-op") {
  const UniverseConfig u = small_universe(1, 60);
  MetaConfig cfg;
  cfg.gamma = 0.2;
  cfg.staleness_bound = 2;
  MetaState state = plain_state(small_arch(u), cfg, 8);
  state.version = 5;
  MetaUpdateReport rep;
  const MetaState next = meta_update(
      state, {packet_like(state.agnostic, 7, 1, 1.0, 9), packet_like(state.agnostic, 8, 4, 1.0, 10)},
      &rep);
  CHECK(rep.applied == 1);
  CHECK(rep.dropped_stale == std::vector<int>{7});
  CHECK(next.version == 6);

  MetaUpdateReport rep2;
  const MetaState same = meta_update(state, {packet_like(state.agnostic, 7, 0, 1.0, 11)}, &rep2);
  CHECK(rep2.applied == 0);
  CHECK(same.version == 5);
  CHECK(max_param_diff(same.agnostic, state.agnostic) == 0.0);
}

TEST_CASE("gamma zero fine-tune copies theta_0 bit-exactly") {
  const UniverseConfig u = small_universe(1, 80);
  const auto scen = generate_scenarios(u, 12);
  MetaConfig cfg;
  cfg.gamma = 1e-300;  // effectively zero while staying positive
  MetaState state = plain_state(small_arch(u), cfg, 13);
  auto [tuned, packet] = fine_tune(state, scen[0]);
  for (const auto& [k, v] : state.agnostic.params) {
    const Matrix& t = tuned.params.at(k);
    CHECK((v - t).lpNorm<Eigen::Infinity>() < 1e-290);
  }
  CHECK(packet.base_version == 0);
}

TEST_CASE("single full-batch step matches the symbolic gradient on head params") {
  // constant sequences make the sequence branch a fixed constant, so the
  // prediction is sigmoid(w0*x + w1*c + b) and the CE gradient is hand
  // computable: dL/dw0 = mean((p-y)x), dL/db = mean(p-y)
  UniverseConfig u = small_universe(1, 40);
  u.profile_dim = 1;
  auto scen = generate_scenarios(u, 14);
  ScenarioDataset& ds = scen[0];
  for (int r = 0; r < ds.rows(); ++r)
    for (int t = 0; t < ds.max_seq_len(); ++t) {
      ds.sequences(r, t) = 1;
      ds.seq_mask(r, t) = 1.0;
    }
  ArchConfig arch = small_arch(u);
  arch.profile_dim = 1;
  arch.profile_mlp_dims = {};  // raw profile feature feeds the head
  arch.head_mlp_dims = {};
  MetaConfig cfg;
  cfg.gamma = 0.25;
  cfg.inner_steps = 1;
  cfg.batch_size = 4096;  // full batch
  MetaState state = plain_state(arch, cfg, 15);

  const DataView support = support_view(ds);
  const Vector probs = predict(state.agnostic, support);
  const Vector labels = labels_of(support);
  double gw0 = 0.0, gb = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double x = support[static_cast<std::size_t>(i)].ds->profiles(
        support[static_cast<std::size_t>(i)].row, 0);
    gw0 += (probs(i) - labels(i)) * x;
    gb += probs(i) - labels(i);
  }
  gw0 /= static_cast<double>(probs.size());
  gb /= static_cast<double>(probs.size());

  auto [tuned, packet] = fine_tune(state, ds);
  const double w0_before = state.agnostic.params.at("head.out.w")(0, 0);
  const double b_before = state.agnostic.params.at("head.out.b")(0, 0);
  CHECK(tuned.params.at("head.out.w")(0, 0) ==
        doctest::Approx(w0_before - 0.25 * gw0).epsilon(1e-10));
  CHECK(tuned.params.at("head.out.b")(0, 0) ==
        doctest::Approx(b_before - 0.25 * gb).epsilon(1e-10));
}

TEST_CASE("fine_tune never mutates theta_0 and improves the query loss on average" *
          doctest::timeout(120)) {
  int improved = 0;
  double diff_sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    UniverseConfig u = small_universe(1, 500);
    const auto scen = generate_scenarios(u, seed);
    MetaConfig cfg;
    cfg.gamma = 0.25;
    cfg.inner_steps = 2;
    cfg.batch_size = 64;
    MetaState state = plain_state(small_arch(u, 2, 6), cfg, 100 + seed);
    // give theta_0 a rough start so fine-tuning has signal to use
    TrainConfig warm;
    warm.epochs = 1;
    warm.seed = seed;
    state.agnostic = train_model(state.agnostic, support_view(scen[0]), warm,
                                 LossSpec::cross_entropy());

    const ModelArtifact before = state.agnostic;
    auto [tuned, packet] = fine_tune(state, scen[0]);
    CHECK(max_param_diff(before, state.agnostic) == 0.0);  // isolation
    const double base_loss =
        dataset_loss(state.agnostic, query_view(scen[0]), LossSpec::cross_entropy());
    diff_sum += base_loss - packet.query_loss;
    improved += packet.query_loss <= base_loss ? 1 : 0;
  }
  CHECK(diff_sum > 0.0);
  CHECK(improved >= 4);
}

TEST_CASE("second-order packets differ from first-order and stay finite") {
  UniverseConfig u = small_universe(1, 60);
  const auto scen = generate_scenarios(u, 16);
  MetaConfig cfg;
  cfg.gamma = 0.3;
  cfg.batch_size = 4096;
  MetaState state = plain_state(small_arch(u), cfg, 17);
  auto [t1, first] = fine_tune(state, scen[0]);
  state.cfg.second_order = true;
  auto [t2, second] = fine_tune(state, scen[0]);
  double diff = 0.0;
  for (const auto& [k, g] : first.query_gradient) {
    CHECK(second.query_gradient.at(k).allFinite());
    diff = std::max(diff, (g - second.query_gradient.at(k)).lpNorm<Eigen::Infinity>());
  }
  CHECK(diff > 0.0);
  state.cfg.inner_steps = 2;
  CHECK_THROWS_AS(fine_tune(state, scen[0]), std::invalid_argument);
}

TEST_CASE("init_agnostic compares the candidate pipelines" * doctest::timeout(300)) {
  UniverseConfig u = small_universe(2, 150);
  const auto scen = generate_scenarios(u, 18);
  std::vector<const ScenarioDataset*> pooled = {&scen[0], &scen[1]};
  MetaConfig mcfg;
  mcfg.gamma = 0.1;

  InitCandidates cand;
  cand.predesigned = small_arch(u, 1, 6);
  cand.train.epochs = 2;
  cand.train.batch_size = 64;
  cand.hpo_trials = 2;
  cand.use_nas = true;
  cand.nas_space = SpaceSpec::standard(1, 6, 2);
  cand.nas.epochs = 2;
  cand.nas.delta = 0.0;
  cand.nas.batch_size = 32;

  InitReport rep;
  const MetaState state = init_agnostic(pooled, cand, mcfg, 19, &rep);
  CHECK(rep.hpo_ran);
  CHECK(rep.nas_ran);
  const bool tie = std::abs(rep.hpo_auc - rep.nas_auc) <= 1e-6;
  if (tie)
    CHECK(rep.selected == (rep.hpo_flops <= rep.nas_flops ? "predesigned" : "searched"));
  else
    CHECK(rep.selected == (rep.hpo_auc > rep.nas_auc ? "predesigned" : "searched"));
  CHECK(state.version == 0);

  // one pipeline disabled selects the other without comparison
  InitCandidates only_hpo = cand;
  only_hpo.use_nas = false;
  only_hpo.hpo_trials = 1;
  InitReport rep2;
  const MetaState s2 = init_agnostic(pooled, only_hpo, mcfg, 20, &rep2);
  CHECK(rep2.selected == "predesigned");
  CHECK_FALSE(rep2.nas_ran);
  CHECK(std::holds_alternative<ArchConfig>(s2.agnostic.arch));

  InitCandidates none = cand;
  none.use_hpo = false;
  none.use_nas = false;
  CHECK_THROWS_AS(init_agnostic(pooled, none, mcfg, 21), std::invalid_argument);
  CHECK_THROWS_AS(init_agnostic({}, cand, mcfg, 22), std::invalid_argument);
}

TEST_CASE("periodic refresh: no-op cases and loss guard" * doctest::timeout(200)) {
  UniverseConfig u = small_universe(3, 200);
  const auto scen = generate_scenarios(u, 23);
  MetaConfig cfg;
  cfg.gamma = 0.2;
  cfg.refresh.epochs = 0;
  MetaState state = plain_state(small_arch(u), cfg, 24);

  // empty archive: identity
  const MetaState same = periodic_refresh(state);
  CHECK(same.version == state.version);
  CHECK(max_param_diff(same.agnostic, state.agnostic) == 0.0);

  // zero refresh epochs: identity even with an archive
  state.archive.push_back(std::make_shared<ScenarioDataset>(scen[0]));
  const MetaState same2 = periodic_refresh(state);
  CHECK(max_param_diff(same2.agnostic, state.agnostic) == 0.0);

  // warm-start, then three scenario feedbacks, then refresh: the pooled
  // validation loss may not degrade by more than 5% relative
  TrainConfig warm;
  warm.epochs = 2;
  warm.seed = 25;
  DataView pooled_train;
  for (const auto& ds : scen) append(pooled_train, support_view(ds));
  state.agnostic = train_model(state.agnostic, pooled_train, warm, LossSpec::cross_entropy());
  for (const auto& ds : scen) {
    auto [tuned, packet] = fine_tune(state, ds);
    state = meta_update(state, {packet});
  }
  DataView pooled_val;
  for (const auto& ds : scen) append(pooled_val, query_view(ds));
  const double before = dataset_loss(state.agnostic, pooled_val, LossSpec::cross_entropy());
  state.archive.clear();
  for (const auto& ds : scen) state.archive.push_back(std::make_shared<ScenarioDataset>(ds));
  state.cfg.refresh.epochs = 1;
  state.cfg.refresh.seed = 26;
  const MetaState refreshed = periodic_refresh(state);
  CHECK(refreshed.version == state.version + 1);
  const double after = dataset_loss(refreshed.agnostic, pooled_val, LossSpec::cross_entropy());
  CHECK(after <= before * 1.05);
}

TEST_CASE("refresh with the sgd stream continues the initial trajectory") {
  UniverseConfig u = small_universe(1, 120);
  const auto scen = generate_scenarios(u, 27);
  const DataView train = train_view(scen[0]);
  TrainConfig tc;
  tc.optimizer = TrainConfig::Optimizer::sgd;
  tc.learning_rate = 0.05;
  tc.epochs = 4;
  tc.seed = 28;
  const ModelArtifact base = build_model(small_arch(u), 29);
  const ModelArtifact full = train_model(base, train, tc, LossSpec::cross_entropy());

  TrainConfig head = tc;
  head.epochs = 2;
  MetaConfig cfg;
  cfg.gamma = 0.2;
  MetaState state = plain_state(small_arch(u), cfg, 29);
  state.agnostic = train_model(base, train, head, LossSpec::cross_entropy());
  state.archive.push_back(std::make_shared<ScenarioDataset>(scen[0]));
  state.cfg.refresh = tc;
  state.cfg.refresh.epochs = 2;
  state.cfg.refresh.epoch_offset = 2;  // continue the shuffle stream
  const MetaState resumed = periodic_refresh(state);
  CHECK(max_param_diff(resumed.agnostic, full) < 1e-12);
}

TEST_CASE("engine versions are monotone under concurrent commits") {
  UniverseConfig u = small_universe(1, 60);
  MetaConfig cfg;
  cfg.gamma = 0.2;
  cfg.staleness_bound = 1000;
  MetaEngine engine(plain_state(small_arch(u), cfg, 30));
  const MetaState base = engine.snapshot();
  std::vector<std::thread> threads;
  std::atomic<int> commits{0};
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t]() {
      for (int i = 0; i < 8; ++i) {
        const FeedbackPacket p =
            packet_like(base.agnostic, t, engine.version(), 0.01,
                        static_cast<std::uint64_t>(t * 100 + i));
        engine.commit({p});
        ++commits;
      }
    });
  }
  for (auto& th : threads) th.join();
  CHECK(commits == 32);
  CHECK(engine.version() == 32);
}
