#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "longtail/hpo.hpp"

#include <chrono>
#include <cmath>
#include <thread>

using namespace longtail;

namespace {

SearchSpaceSpec quadratic_space() {
  SearchSpaceSpec s;
  ParamSpec x;
  x.name = "x";
  x.kind = ParamSpec::Kind::log_uniform;
  x.lo = std::exp(-3.0);
  x.hi = std::exp(3.0);
  ParamSpec y = x;
  y.name = "y";
  s.params = {x, y};
  return s;
}

// negative squared distance to a known optimum, in the space's log metric
Objective quadratic_objective(double ox, double oy) {
  return [ox, oy](const TrialConfig& cfg, TrialContext&) {
    const double dx = std::log(std::get<double>(cfg.at("x"))) - ox;
    const double dy = std::log(std::get<double>(cfg.at("y"))) - oy;
    return -(dx * dx + dy * dy);
  };
}

}  // namespace

TEST_CASE("random_suggest stays inside the declared domains") {
  SearchSpaceSpec space = quadratic_space();
  ParamSpec cat;
  cat.name = "c";
  cat.kind = ParamSpec::Kind::categorical;
  cat.categories = {"a", "b"};
  ParamSpec ir;
  ir.name = "n";
  ir.kind = ParamSpec::Kind::integer_range;
  ir.int_lo = 2;
  ir.int_hi = 6;
  space.params.push_back(cat);
  space.params.push_back(ir);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const TrialConfig cfg = random_suggest(space, rng);
    const double x = std::get<double>(cfg.at("x"));
    CHECK(x >= std::exp(-3.0));
    CHECK(x <= std::exp(3.0));
    const long n = std::get<long>(cfg.at("n"));
    CHECK(n >= 2);
    CHECK(n <= 6);
    const std::string c = std::get<std::string>(cfg.at("c"));
    CHECK((c == "a" || c == "b"));
  }
}

TEST_CASE("racos_suggest: empty history samples the full space") {
  const SearchSpaceSpec space = quadratic_space();
  Rng rng(2);
  const TrialConfig cfg = racos_suggest({}, space, 0.2, 0.0, rng);
  const double x = std::get<double>(cfg.at("x"));
  CHECK(x >= std::exp(-3.0));
  CHECK(x <= std::exp(3.0));
}

TEST_CASE("racos_suggest: shared top categorical value is kept with epsilon 0") {
  SearchSpaceSpec space;
  ParamSpec cat;
  cat.name = "c";
  cat.kind = ParamSpec::Kind::categorical;
  cat.categories = {"v", "w", "u"};
  space.params = {cat};
  std::vector<TrialRecord> history;
  for (int i = 0; i < 10; ++i) {
    TrialRecord t;
    t.trial_id = i;
    t.status = TrialRecord::Status::done;
    t.metric = i < 2 ? 1.0 : 0.0;  // the two best share value v
    t.config["c"] = std::string(i < 2 ? "v" : (i % 2 ? "w" : "u"));
    history.push_back(t);
  }
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const TrialConfig cfg = racos_suggest(history, space, 0.2, 0.0, rng);
    CHECK(std::get<std::string>(cfg.at("c")) == "v");
  }
}

TEST_CASE("racos_suggest: epsilon 1 samples the full space") {
  SearchSpaceSpec space;
  ParamSpec cat;
  cat.name = "c";
  cat.kind = ParamSpec::Kind::categorical;
  cat.categories = {"v", "w"};
  space.params = {cat};
  std::vector<TrialRecord> history;
  TrialRecord t;
  t.trial_id = 0;
  t.status = TrialRecord::Status::done;
  t.metric = 1.0;
  t.config["c"] = std::string("v");
  history.push_back(t);
  Rng rng(4);
  bool saw_w = false;
  for (int i = 0; i < 100; ++i) {
    const TrialConfig cfg = racos_suggest(history, space, 0.2, 1.0, rng);
    saw_w = saw_w || std::get<std::string>(cfg.at("c")) == "w";
  }
  CHECK(saw_w);
}

TEST_CASE("optimize: single trial is the best trial") {
  TrialBudget budget;
  budget.max_trials = 1;
  HpoOptions opt;
  opt.seed = 5;
  const HpoResult r = optimize(quadratic_objective(0.0, 0.0), quadratic_space(), budget, opt);
  REQUIRE(r.history.size() == 1);
  CHECK(r.best.trial_id == r.history[0].trial_id);
}

TEST_CASE("optimize: failed trials are recorded and skipped; all-failed throws") {
  int calls = 0;
  Objective flaky = [&calls](const TrialConfig& cfg, TrialContext&) {
    ++calls;
    if (calls % 2 == 1) throw std::runtime_error("boom");
    const double x = std::log(std::get<double>(cfg.at("x")));
    return -x * x;
  };
  TrialBudget budget;
  budget.max_trials = 6;
  HpoOptions opt;
  opt.seed = 6;
  const HpoResult r = optimize(flaky, quadratic_space(), budget, opt);
  REQUIRE(r.history.size() == 6);
  int failed = 0;
  for (const auto& t : r.history) failed += t.status == TrialRecord::Status::failed ? 1 : 0;
  CHECK(failed == 3);
  CHECK(r.best.has_metric());

  Objective always = [](const TrialConfig&, TrialContext&) -> double {
    throw std::runtime_error("boom");
  };
  CHECK_THROWS_AS(optimize(always, quadratic_space(), budget, opt), std::runtime_error);
}

TEST_CASE("optimize: deterministic trial sequence per seed") {
  TrialBudget budget;
  budget.max_trials = 30;
  HpoOptions opt;
  opt.seed = 7;
  const HpoResult a = optimize(quadratic_objective(0.5, -0.7), quadratic_space(), budget, opt);
  const HpoResult b = optimize(quadratic_objective(0.5, -0.7), quadratic_space(), budget, opt);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i)
    CHECK(to_string(a.history[i].config.at("x")) == to_string(b.history[i].config.at("x")));
}

TEST_CASE("optimize: best-so-far metric is non-decreasing") {
  TrialBudget budget;
  budget.max_trials = 60;
  HpoOptions opt;
  opt.seed = 8;
  const HpoResult r = optimize(quadratic_objective(0.3, 0.9), quadratic_space(), budget, opt);
  double best = -1e300;
  for (const auto& t : r.history) {
    if (!t.has_metric()) continue;
    best = std::max(best, t.metric);
    CHECK(best >= t.metric);
  }
  CHECK(r.best.metric == best);
}

TEST_CASE("optimize: per-trial deadline marks slow trials timed out") {
  Objective slow = [](const TrialConfig&, TrialContext& ctx) {
    while (!ctx.deadline_exceeded())
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    return 1.0;
  };
  TrialBudget budget;
  budget.max_trials = 2;
  budget.per_trial_seconds = 0.05;
  HpoOptions opt;
  opt.seed = 9;
  CHECK_THROWS_AS(optimize(slow, quadratic_space(), budget, opt), std::runtime_error);
  // mixed: slow then fine
  int calls = 0;
  Objective mixed = [&calls](const TrialConfig& cfg, TrialContext& ctx) {
    ++calls;
    if (calls == 1) {
      while (!ctx.deadline_exceeded())
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    (void)cfg;
    return 0.5;
  };
  const HpoResult r = optimize(mixed, quadratic_space(), budget, opt);
  CHECK(r.history[0].status == TrialRecord::Status::timed_out);
  CHECK(r.history[1].status == TrialRecord::Status::done);
}

TEST_CASE("optimize: total time budget halts the loop") {
  Objective nap = [](const TrialConfig&, TrialContext&) {
    std::this_thread::sleep_for(std::chrono::milliseconds(30));
    return 1.0;
  };
  TrialBudget budget;
  budget.max_trials = 1000;
  budget.max_total_seconds = 0.15;
  HpoOptions opt;
  opt.seed = 10;
  const HpoResult r = optimize(nap, quadratic_space(), budget, opt);
  CHECK(r.history.size() < 20);
}

TEST_CASE("optimize: median rule stops futureless trials") {
  // metric equals a per-trial level reported at steps 0..4; late trials with
  // a poor level are cut at the first report once three baselines exist
  int calls = 0;
  Objective staged = [&calls](const TrialConfig&, TrialContext& ctx) {
    const double level = calls < 4 ? 1.0 : 0.1;
    ++calls;
    double metric = 0.0;
    for (int step = 0; step < 5; ++step) {
      metric = level * (1.0 + step);
      if (ctx.report(step, metric)) return metric;
    }
    return metric;
  };
  TrialBudget budget;
  budget.max_trials = 6;
  HpoOptions opt;
  opt.seed = 11;
  const HpoResult r = optimize(staged, quadratic_space(), budget, opt);
  CHECK(r.history[5].status == TrialRecord::Status::early_stopped);
  CHECK(r.history[5].metric == doctest::Approx(0.1));
  CHECK(r.history[1].status == TrialRecord::Status::done);
}

TEST_CASE("optimize: initial configs are evaluated first") {
  TrialConfig warm;
  warm["x"] = std::exp(0.4);
  warm["y"] = std::exp(-1.1);
  TrialBudget budget;
  budget.max_trials = 3;
  HpoOptions opt;
  opt.seed = 12;
  opt.initial_configs = {warm};
  const HpoResult r = optimize(quadratic_objective(0.4, -1.1), quadratic_space(), budget, opt);
  CHECK(std::get<double>(r.history[0].config.at("x")) == std::exp(0.4));
  CHECK(r.best.trial_id == 0);  // the warm start is the exact optimum
}

TEST_CASE("racos finds a 2-D quadratic optimum and beats random search" *
          doctest::timeout(120)) {
  const double ox = 0.7, oy = -1.1;
  int racos_hits = 0, racos_wins = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    TrialBudget budget;
    budget.max_trials = 200;
    HpoOptions racos_opt;
    racos_opt.seed = seed;
    const HpoResult racos = optimize(quadratic_objective(ox, oy), quadratic_space(), budget,
                                     racos_opt);
    HpoOptions rand_opt;
    rand_opt.seed = seed;
    rand_opt.method = HpoMethod::random;
    const HpoResult rnd = optimize(quadratic_objective(ox, oy), quadratic_space(), budget,
                                   rand_opt);
    if (std::sqrt(-racos.best.metric) < 1e-2) ++racos_hits;
    if (racos.best.metric >= rnd.best.metric) ++racos_wins;
  }
  CHECK(racos_hits >= 9);
  CHECK(racos_wins >= 7);
}
