// Command-line front end: one declarative config file drives data generation,
// scenario-agnostic initialization, strategy runs, light-model search,
// evaluation and the batch-serving stub.

#include <CLI11.hpp>

#include "longtail/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace longtail;

namespace {

std::vector<ScenarioDataset> load_scenario_dirs(const std::string& dir) {
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && entry.path().filename().string().rfind("scenario_", 0) == 0)
      names.push_back(entry.path().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw std::runtime_error("no scenario_* directories under " + dir);
  std::vector<ScenarioDataset> out;
  for (const auto& n : names) out.push_back(load_scenario(n));
  std::sort(out.begin(), out.end(),
            [](const ScenarioDataset& a, const ScenarioDataset& b) {
              return a.scenario_id < b.scenario_id;
            });
  return out;
}

ArchConfig shaped(const ExperimentConfig& cfg, ArchConfig arch) {
  arch.profile_dim = cfg.universe.profile_dim;
  arch.vocab_size = cfg.universe.vocab_size;
  arch.max_seq_len = cfg.universe.max_seq_len;
  return arch;
}

int run_command(const ExperimentConfig& cfg, std::uint64_t seed_override, bool has_seed,
                const std::string& out_dir) {
  std::vector<std::uint64_t> seeds = cfg.seeds;
  if (has_seed) seeds = {seed_override};
  StrategyReport all;
  all.flops_budget = resolve_budget(cfg);
  for (std::uint64_t seed : seeds) {
    std::cout << "running seed " << seed << " ..." << std::endl;
    const StrategyReport r = run_experiment(cfg, seed);
    write_report(r, out_dir + "/seed_" + std::to_string(seed));
    all.partial = all.partial || r.partial;
    all.rows.insert(all.rows.end(), r.rows.begin(), r.rows.end());
  }
  write_report(all, out_dir + "/aggregate");
  std::cout << render_report(all);
  return all.partial ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"long-tail scenario modeling pipeline"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path = "out", model_path, teacher_path, records_dir;
  std::string part = "test";
  std::uint64_t seed = 1;
  long flops_budget = 0;
  int batch = 256, reps = 5;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    if (needs_config)
      cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
    cmd->add_option("--seed", seed, "seed override");
    cmd->add_option("--out", out_path, "output path");
  };

  CLI::App* datagen = app.add_subcommand("datagen", "generate and persist scenario datasets");
  add_common(datagen, true);

  CLI::App* init = app.add_subcommand("init-agnostic",
                                      "initialize the scenario-agnostic model by candidate "
                                      "comparison");
  add_common(init, true);
  init->add_option("--data", data_dir, "directory of scenario_* datasets")->required();

  CLI::App* run = app.add_subcommand("run", "run the configured strategies end to end");
  add_common(run, true);

  CLI::App* searchcmd = app.add_subcommand("search-light",
                                           "budget-limited search of a light model for one "
                                           "scenario");
  add_common(searchcmd, true);
  searchcmd->add_option("--data", data_dir, "scenario dataset directory")->required();
  searchcmd->add_option("--teacher", teacher_path, "teacher artifact prefix")->required();
  searchcmd->add_option("--flops-budget", flops_budget,
                        "full-model FLOPs budget (0 = pre-defined light model)");

  CLI::App* evaluate = app.add_subcommand("evaluate", "AUC/FLOPs/params of a saved model");
  add_common(evaluate, false);
  evaluate->add_option("--model", model_path, "artifact prefix")->required();
  evaluate->add_option("--data", data_dir, "scenario dataset directory")->required();
  evaluate->add_option("--part", part, "train|test");

  CLI::App* serve = app.add_subcommand("serve", "timed batch serving stub");
  add_common(serve, false);
  serve->add_option("--model", model_path, "artifact prefix")->required();
  serve->add_option("--data", data_dir, "scenario dataset directory")->required();
  serve->add_option("--batch", batch, "requests per batch");
  serve->add_option("--reps", reps, "timed repetitions");

  CLI::App* report = app.add_subcommand("report", "render a saved report directory");
  add_common(report, false);
  report->add_option("--records", records_dir, "report directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const bool seed_given = app.count_all() && (datagen->count("--seed") || init->count("--seed") ||
                                                run->count("--seed") || searchcmd->count("--seed"));
    if (datagen->parsed()) {
      const ExperimentConfig cfg = load_config(config_path);
      const auto scenarios = generate_scenarios(cfg.universe, seed);
      for (const auto& ds : scenarios)
        save_scenario(ds, out_path + "/scenario_" + std::to_string(ds.scenario_id));
      std::cout << "wrote " << scenarios.size() << " scenarios under " << out_path << "\n";
      return 0;
    }
    if (init->parsed()) {
      const ExperimentConfig cfg = load_config(config_path);
      const auto scenarios = load_scenario_dirs(data_dir);
      std::vector<int> order(scenarios.size());
      std::iota(order.begin(), order.end(), 0);
      Rng pick(mix_seed(seed, 0x1417 << 16));
      pick.shuffle(order);
      const int n_init =
          std::min<int>(cfg.init.n_initial_scenarios, static_cast<int>(scenarios.size()));
      std::vector<const ScenarioDataset*> pooled;
      for (int i = 0; i < n_init; ++i)
        pooled.push_back(&scenarios[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
      InitCandidates cand;
      cand.use_hpo = cfg.init.use_hpo;
      cand.hpo_trials = cfg.init.hpo_trials;
      cand.use_nas = cfg.init.use_nas;
      cand.predesigned = shaped(cfg, cfg.heavy);
      cand.train = cfg.train;
      cand.train.seed = mix_seed(seed, 0x171 << 16);
      if (cand.use_nas) {
        cand.nas_space = SpaceSpec::standard(3, shaped(cfg, cfg.light).resolved_embed_dim(),
                                             cfg.light.attention_heads);
        cand.nas = cfg.nas;
        cand.nas.delta = 0.0;
        cand.nas.flops_budget = 0;
      }
      InitReport rep;
      const MetaState state =
          init_agnostic(pooled, cand, cfg.meta, mix_seed(seed, 0x172 << 16), &rep);
      save_meta_state(state, out_path);
      std::cout << "selected " << rep.selected << " candidate";
      if (rep.hpo_ran) std::cout << "  predesigned AUC " << rep.hpo_auc;
      if (rep.nas_ran) std::cout << "  searched AUC " << rep.nas_auc;
      std::cout << "\nsaved meta state to " << out_path << "\n";
      return 0;
    }
    if (run->parsed()) {
      const ExperimentConfig cfg = load_config(config_path);
      return run_command(cfg, seed, run->count("--seed") > 0, out_path);
    }
    if (searchcmd->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      if (flops_budget > 0) cfg.nas.flops_budget = flops_budget;
      const ScenarioDataset ds = load_scenario(data_dir);
      const ModelArtifact teacher = load_artifact(teacher_path);
      const ArchConfig light = shaped(cfg, cfg.light);
      const SpaceSpec space =
          SpaceSpec::standard(3, light.resolved_embed_dim(), light.attention_heads);
      const SeqShape shape{light.max_seq_len, space.channels};
      NasConfig nc = cfg.nas;
      nc.seed = seed;
      const long budget = encoder_budget(cfg, space);
      nc.flops_budget = budget;
      const SearchResult sr = search(space, light, train_view(ds), &teacher, nc);
      const Genotype geno = derive_genotype(sr.supernet.arch, space, budget, shape);
      TrainConfig tc = cfg.train;
      tc.seed = mix_seed(seed, 0x56 << 16);
      ModelArtifact m = train_light(geno, space, light, train_view(ds), &teacher, tc,
                                    cfg.nas.delta);
      m.provenance.strategy = "Ours";
      m.provenance.scenario = std::to_string(ds.scenario_id);
      save_artifact(m, out_path);
      std::ofstream desc(out_path + ".genotype.txt");
      desc << geno.describe(space);
      const FlopsReport fr = genotype_flops(geno, space, shape);
      std::cout << "searched genotype (encoder FLOPs " << fr.total << ", budget " << budget
                << "):\n"
                << geno.describe(space) << "test AUC "
                << evaluate_auc(m, test_view(ds)) << "\n";
      return 0;
    }
    if (evaluate->parsed()) {
      const ModelArtifact m = load_artifact(model_path);
      const ScenarioDataset ds = load_scenario(data_dir);
      const DataView rows = part == "train" ? train_view(ds) : test_view(ds);
      nlohmann::json j;
      j["auc"] = evaluate_auc(m, rows);
      j["flops"] = model_flops(m.arch);
      j["params"] = param_count(m);
      j["rows"] = rows.size();
      j["part"] = part;
      const std::string line = j.dump();
      std::cout << line << "\n";
      if (evaluate->count("--out")) {
        std::ofstream out(out_path);
        out << line << "\n";
      }
      return 0;
    }
    if (serve->parsed()) {
      const ModelArtifact m = load_artifact(model_path);
      const ScenarioDataset ds = load_scenario(data_dir);
      const DataView rows = test_view(ds);
      std::vector<int> idx;
      for (int i = 0; i < std::min<int>(batch, static_cast<int>(rows.size())); ++i)
        idx.push_back(i);
      auto [probs, stats] = serve_batch(m, make_batch(rows, idx), reps);
      nlohmann::json j;
      j["batch"] = idx.size();
      j["reps"] = reps;
      j["mean_ms"] = stats.mean_ms;
      j["p95_ms"] = stats.p95_ms;
      std::cout << j.dump() << "\n";
      return 0;
    }
    if (report->parsed()) {
      const std::string rendered = render_report(read_report(records_dir));
      std::cout << rendered;
      if (report->count("--out")) {
        std::ofstream out(out_path);
        out << rendered;
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
