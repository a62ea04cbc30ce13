#include "longtail/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace longtail {

namespace {

namespace fs = std::filesystem;

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t tag, int scenario = 0) {
  return mix_seed(seed, (tag << 16) + static_cast<std::uint64_t>(scenario));
}

Genotype min_flops_genotype(const SpaceSpec& space, const SeqShape& shape) {
  int best = 0;
  long best_f = op_flops(space.op_candidates[0], shape.seq_len);
  for (std::size_t i = 1; i < space.op_candidates.size(); ++i) {
    const long f = op_flops(space.op_candidates[i], shape.seq_len);
    if (f < best_f) {
      best_f = f;
      best = static_cast<int>(i);
    }
  }
  Genotype g;
  for (int l = 0; l < space.n_layers; ++l) g.layers.push_back({0, best, {}});
  return g;
}

double mean_over(const std::vector<ReportRow>& rows, const std::string& strategy,
                 const std::function<double(const ReportRow&)>& f) {
  double sum = 0.0;
  int n = 0;
  for (const ReportRow& r : rows) {
    if (r.strategy != strategy || r.failed) continue;
    sum += f(r);
    ++n;
  }
  return n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

double StrategyReport::avg_auc(const std::string& strategy) const {
  return mean_over(rows, strategy, [](const ReportRow& r) { return r.test_auc; });
}

double StrategyReport::avg_flops(const std::string& strategy) const {
  return mean_over(rows, strategy, [](const ReportRow& r) { return static_cast<double>(r.flops); });
}

double StrategyReport::avg_latency(const std::string& strategy) const {
  return mean_over(rows, strategy, [](const ReportRow& r) { return r.mean_latency_ms; });
}

std::pair<Vector, LatencyStats> serve_batch(const ModelArtifact& artifact, const Batch& requests,
                                            int reps) {
  if (reps < 3) throw std::invalid_argument("serve_batch: reps must be >= 3");
  Vector first = predict(artifact, requests);  // warm-up, kept for the identity check
  LatencyStats stats;
  Vector out;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    out = predict(artifact, requests);
    const auto t1 = std::chrono::steady_clock::now();
    stats.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    if (out != first)
      throw std::runtime_error("serve_batch: predictions changed between repetitions");
  }
  stats.mean_ms = std::accumulate(stats.samples_ms.begin(), stats.samples_ms.end(), 0.0) /
                  static_cast<double>(reps);
  std::vector<double> sorted = stats.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  const auto idx = static_cast<std::size_t>(
      std::ceil(0.95 * static_cast<double>(sorted.size()))) - 1;
  stats.p95_ms = sorted[std::min(idx, sorted.size() - 1)];
  return {std::move(out), std::move(stats)};
}

long resolve_budget(const ExperimentConfig& cfg) {
  if (cfg.nas.flops_budget > 0) return cfg.nas.flops_budget;
  ArchConfig light = cfg.light;
  light.profile_dim = cfg.universe.profile_dim;
  light.vocab_size = cfg.universe.vocab_size;
  light.max_seq_len = cfg.universe.max_seq_len;
  return model_flops(light);
}

long encoder_budget(const ExperimentConfig& cfg, const SpaceSpec& space) {
  ArchConfig base = cfg.light;
  base.profile_dim = cfg.universe.profile_dim;
  base.vocab_size = cfg.universe.vocab_size;
  base.max_seq_len = cfg.universe.max_seq_len;
  const SeqShape shape{base.max_seq_len, space.channels};
  const Genotype probe = min_flops_genotype(space, shape);
  const long fixed = model_flops(SearchedArch{space, probe, base}) -
                     genotype_flops(probe, space, shape).total;
  const long budget = resolve_budget(cfg) - fixed;
  if (budget < space_min_flops(space, shape))
    throw std::invalid_argument(
        "encoder_budget: the FLOPs budget leaves no feasible genotype (encoder budget " +
        std::to_string(budget) + ", space minimum " +
        std::to_string(space_min_flops(space, shape)) + ")");
  return budget;
}

namespace {

struct ScenarioRuntime {
  const ScenarioDataset* ds = nullptr;
  Batch latency_batch;
};

ReportRow evaluate_row(const ExperimentConfig& cfg, const ScenarioRuntime& rt,
                       const ModelArtifact& artifact, const std::string& strategy,
                       std::uint64_t seed) {
  ReportRow row;
  row.seed = seed;
  row.scenario_id = rt.ds->scenario_id;
  row.strategy = strategy;
  row.test_auc = evaluate_auc(artifact, test_view(*rt.ds));
  row.flops = model_flops(artifact.arch);
  row.params = param_count(artifact);
  auto [probs, stats] = serve_batch(artifact, rt.latency_batch, cfg.latency_reps);
  row.mean_latency_ms = stats.mean_ms;
  row.p95_latency_ms = stats.p95_ms;
  return row;
}

}  // namespace

StrategyReport run_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::set<std::string> wanted(cfg.strategies.begin(), cfg.strategies.end());
  const bool meta_needed = wanted.count("MeH") || wanted.count("MeL") || wanted.count("Ours");

  ArchConfig heavy = cfg.heavy;
  ArchConfig light = cfg.light;
  heavy.profile_dim = light.profile_dim = cfg.universe.profile_dim;
  heavy.vocab_size = light.vocab_size = cfg.universe.vocab_size;
  heavy.max_seq_len = light.max_seq_len = cfg.universe.max_seq_len;

  const std::vector<ScenarioDataset> scenarios = generate_scenarios(cfg.universe, seed);

  StrategyReport report;
  report.flops_budget = resolve_budget(cfg);

  const SpaceSpec space = SpaceSpec::standard(3, light.resolved_embed_dim(),
                                              light.attention_heads);
  const SeqShape shape{light.max_seq_len, space.channels};
  const long search_budget = wanted.count("Ours") ? encoder_budget(cfg, space) : 0;

  // scenario-agnostic model
  std::unique_ptr<MetaEngine> engine;
  if (meta_needed) {
    std::vector<int> order(scenarios.size());
    std::iota(order.begin(), order.end(), 0);
    Rng pick(sub_seed(seed, 0x1417));
    pick.shuffle(order);
    const int n_init = std::min<int>(cfg.init.n_initial_scenarios,
                                     static_cast<int>(scenarios.size()));
    std::vector<const ScenarioDataset*> pooled;
    for (int i = 0; i < n_init; ++i)
      pooled.push_back(&scenarios[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);

    InitCandidates cand;
    cand.use_hpo = cfg.init.use_hpo;
    cand.hpo_trials = cfg.init.hpo_trials;
    cand.use_nas = cfg.init.use_nas;
    cand.predesigned = heavy;
    cand.train = cfg.train;
    cand.train.seed = sub_seed(seed, 0x171);
    if (cand.use_nas) {
      cand.nas_space = space;
      cand.nas = cfg.nas;
      cand.nas.delta = 0.0;
      cand.nas.flops_budget = 0;
    }
    MetaState state = init_agnostic(pooled, cand, cfg.meta, sub_seed(seed, 0x172));
    state.cfg.refresh = cfg.train;
    state.cfg.refresh.epochs = 0;
    engine = std::make_unique<MetaEngine>(std::move(state));
  }

  for (const ScenarioDataset& ds : scenarios) {
    ScenarioRuntime rt;
    rt.ds = &ds;
    const DataView test = test_view(ds);
    std::vector<int> idx;
    for (int i = 0; i < std::min<int>(cfg.latency_batch, static_cast<int>(test.size())); ++i)
      idx.push_back(i);
    rt.latency_batch = make_batch(test, idx);

    // the shared meta chain: fine-tuned heavy teacher + one feedback commit
    ModelArtifact teacher;
    bool teacher_ok = false;
    std::string teacher_error;
    if (meta_needed) {
      try {
        auto [tuned, packet] = engine->fine_tune_scenario(ds);
        engine->commit({packet});
        teacher = std::move(tuned);
        teacher_ok = true;
      } catch (const std::exception& e) {
        teacher_error = e.what();
        report.partial = true;
      }
    }

    auto guarded = [&](const std::string& strategy, const std::function<ModelArtifact()>& make) {
      if (!wanted.count(strategy)) return;
      ReportRow row;
      try {
        const ModelArtifact artifact = make();
        row = evaluate_row(cfg, rt, artifact, strategy, seed);
      } catch (const std::exception& e) {
        row.seed = seed;
        row.scenario_id = ds.scenario_id;
        row.strategy = strategy;
        row.failed = true;
        row.error = e.what();
        report.partial = true;
      }
      report.rows.push_back(std::move(row));
    };

    guarded("SinH", [&]() {
      TrainConfig tc = cfg.train;
      tc.seed = sub_seed(seed, 0x51, ds.scenario_id);
      ModelArtifact m = build_model(heavy, sub_seed(seed, 0x52, ds.scenario_id));
      m = train_model(m, train_view(ds), tc, LossSpec::cross_entropy());
      m.provenance.strategy = "SinH";
      m.provenance.scenario = std::to_string(ds.scenario_id);
      return m;
    });

    auto need_teacher = [&]() {
      if (!teacher_ok)
        throw std::runtime_error("scenario teacher unavailable: " + teacher_error);
      return &teacher;
    };

    guarded("MeH", [&]() { return *need_teacher(); });

    guarded("MeL", [&]() {
      TrainConfig tc = cfg.train;
      tc.seed = sub_seed(seed, 0x53, ds.scenario_id);
      ModelArtifact m = build_model(light, sub_seed(seed, 0x54, ds.scenario_id));
      m = train_model(m, train_view(ds), tc, LossSpec::distill(*need_teacher(), cfg.nas.delta));
      m.provenance.strategy = "MeL";
      m.provenance.scenario = std::to_string(ds.scenario_id);
      return m;
    });

    guarded("Ours", [&]() {
      const ModelArtifact* t = need_teacher();
      NasConfig nc = cfg.nas;
      nc.seed = sub_seed(seed, 0x55, ds.scenario_id);
      nc.flops_budget = search_budget;
      const SearchResult sr = search(space, light, train_view(ds), t, nc);
      const Genotype geno = derive_genotype(sr.supernet.arch, space, search_budget, shape);
      TrainConfig tc = cfg.train;
      tc.seed = sub_seed(seed, 0x56, ds.scenario_id);
      ModelArtifact m = train_light(geno, space, light, train_view(ds), t, tc, cfg.nas.delta);
      m.provenance.strategy = "Ours";
      m.provenance.scenario = std::to_string(ds.scenario_id);
      if (model_flops(m.arch) > report.flops_budget)
        throw std::logic_error("budget violation: searched model has " +
                               std::to_string(model_flops(m.arch)) + " FLOPs over budget " +
                               std::to_string(report.flops_budget));
      return m;
    });
  }
  return report;
}

// ---- report files ------------------------------------------------------------

void write_report(const StrategyReport& report, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream records(dir + "/records.jsonl", std::ios::trunc);
  if (!records) throw std::runtime_error("write_report: cannot open " + dir + "/records.jsonl");
  for (const ReportRow& r : report.rows) {
    nlohmann::json j;
    j["seed"] = r.seed;
    j["scenario_id"] = r.scenario_id;
    j["strategy"] = r.strategy;
    j["failed"] = r.failed;
    if (r.failed) {
      j["error"] = r.error;
    } else {
      j["test_auc"] = r.test_auc;
      j["flops"] = r.flops;
      j["params"] = r.params;
      j["mean_latency_ms"] = r.mean_latency_ms;
      j["p95_latency_ms"] = r.p95_latency_ms;
    }
    records << j.dump() << "\n";
  }
  nlohmann::json meta;
  meta["flops_budget"] = report.flops_budget;
  meta["partial"] = report.partial;
  std::ofstream mf(dir + "/report.json", std::ios::trunc);
  mf << meta.dump(2) << "\n";
  std::ofstream summary(dir + "/summary.txt", std::ios::trunc);
  summary << render_report(report);
}

StrategyReport read_report(const std::string& dir) {
  StrategyReport report;
  std::ifstream mf(dir + "/report.json");
  if (mf) {
    nlohmann::json meta;
    mf >> meta;
    report.flops_budget = meta.value("flops_budget", 0L);
    report.partial = meta.value("partial", false);
  }
  std::ifstream records(dir + "/records.jsonl");
  if (!records) throw std::runtime_error("read_report: cannot open " + dir + "/records.jsonl");
  std::string line;
  while (std::getline(records, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    ReportRow r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.scenario_id = j.at("scenario_id").get<int>();
    r.strategy = j.at("strategy").get<std::string>();
    r.failed = j.at("failed").get<bool>();
    if (r.failed) {
      r.error = j.value("error", "");
    } else {
      r.test_auc = j.at("test_auc").get<double>();
      r.flops = j.at("flops").get<long>();
      r.params = j.at("params").get<long>();
      r.mean_latency_ms = j.at("mean_latency_ms").get<double>();
      r.p95_latency_ms = j.at("p95_latency_ms").get<double>();
    }
    report.rows.push_back(std::move(r));
  }
  return report;
}

std::string render_report(const StrategyReport& report) {
  std::vector<std::string> strategies;
  std::set<int> scenario_ids;
  for (const ReportRow& r : report.rows) {
    if (std::find(strategies.begin(), strategies.end(), r.strategy) == strategies.end())
      strategies.push_back(r.strategy);
    scenario_ids.insert(r.scenario_id);
  }
  std::ostringstream os;
  os << std::fixed;
  os << "test AUC per scenario\n";
  os << std::setw(10) << "scenario";
  for (const auto& s : strategies) os << std::setw(10) << s;
  os << "\n";
  for (int id : scenario_ids) {
    os << std::setw(10) << id;
    for (const auto& s : strategies) {
      // cell = average across seeds
      double sum = 0.0;
      int n = 0;
      for (const ReportRow& r : report.rows)
        if (r.scenario_id == id && r.strategy == s && !r.failed) {
          sum += r.test_auc;
          ++n;
        }
      if (n > 0)
        os << std::setw(10) << std::setprecision(4) << sum / n;
      else
        os << std::setw(10) << "failed";
    }
    os << "\n";
  }
  os << std::setw(10) << "AVG";
  for (const auto& s : strategies) os << std::setw(10) << std::setprecision(4) << report.avg_auc(s);
  os << "\n\n";
  os << "averaged FLOPs and inference time (batch latency, ms)\n";
  os << std::setw(10) << " " << std::setw(14) << "FLOPs" << std::setw(12) << "mean ms"
     << "\n";
  for (const auto& s : strategies) {
    os << std::setw(10) << s << std::setw(14) << std::setprecision(0) << report.avg_flops(s)
       << std::setw(12) << std::setprecision(3) << report.avg_latency(s) << "\n";
  }
  if (report.flops_budget > 0)
    os << "\nFLOPs budget for searched models: " << report.flops_budget << "\n";
  if (report.partial) os << "\nWARNING: partial run, some rows failed\n";
  return os.str();
}

}  // namespace longtail
