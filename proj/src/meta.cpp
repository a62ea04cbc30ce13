#include "longtail/meta.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace longtail {

void MetaConfig::validate() const {
  if (gamma <= 0.0) throw std::invalid_argument("MetaConfig: gamma must be positive");
  if (eta >= 0.0 && eta > gamma)
    throw std::invalid_argument("MetaConfig: eta must not exceed gamma (conservative outer rate)");
  if (inner_steps < 1) throw std::invalid_argument("MetaConfig: inner_steps must be >= 1");
  if (staleness_bound < 0) throw std::invalid_argument("MetaConfig: staleness_bound must be >= 0");
}

namespace {

DataView pooled_view(const std::vector<const ScenarioDataset*>& pooled,
                     std::initializer_list<Part> parts) {
  DataView v;
  for (const ScenarioDataset* ds : pooled) append(v, view_of(*ds, parts));
  return v;
}

ArchConfig apply_trial(const ArchConfig& base, const TrialConfig& cfg, TrainConfig& train) {
  ArchConfig out = base;
  auto dims_of = [](const std::string& s) {
    std::vector<int> dims;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) dims.push_back(std::stoi(tok));
    return dims;
  };
  for (const auto& [name, value] : cfg) {
    if (name == "learning_rate")
      train.learning_rate = std::stod(std::get<std::string>(value));
    else if (name == "profile_mlp_dims")
      out.profile_mlp_dims = dims_of(std::get<std::string>(value));
    else if (name == "head_mlp_dims")
      out.head_mlp_dims = dims_of(std::get<std::string>(value));
    else if (name == "n_encoder_layers")
      out.n_encoder_layers = static_cast<int>(std::get<long>(value));
  }
  return out;
}

TrialConfig default_trial(const ArchConfig& base, const TrainConfig& train) {
  auto join = [](const std::vector<int>& dims) {
    std::string s;
    for (std::size_t i = 0; i < dims.size(); ++i)
      s += (i ? "," : "") + std::to_string(dims[i]);
    return s;
  };
  TrialConfig t;
  std::ostringstream lr;
  lr << train.learning_rate;
  t["learning_rate"] = lr.str();
  t["profile_mlp_dims"] = join(base.profile_mlp_dims);
  t["head_mlp_dims"] = join(base.head_mlp_dims);
  t["n_encoder_layers"] = static_cast<long>(base.n_encoder_layers);
  return t;
}

}  // namespace

MetaState init_agnostic(const std::vector<const ScenarioDataset*>& pooled,
                        const InitCandidates& candidates, const MetaConfig& cfg,
                        std::uint64_t seed, InitReport* report) {
  cfg.validate();
  if (pooled.empty()) throw std::invalid_argument("init_agnostic: empty pooled scenario set");
  if (!candidates.use_hpo && !candidates.use_nas)
    throw std::invalid_argument("init_agnostic: both candidate pipelines are disabled");
  const DataView fit_rows = pooled_view(pooled, {Part::train_support});
  const DataView val_rows = pooled_view(pooled, {Part::train_query});
  if (fit_rows.empty() || val_rows.empty())
    throw std::invalid_argument("init_agnostic: pooled scenarios lack support/query rows");

  InitReport local;
  InitReport& rep = report ? *report : local;

  ModelArtifact hpo_artifact, nas_artifact;
  if (candidates.use_hpo) {
    rep.hpo_ran = true;
    auto train_candidate = [&](const TrialConfig& trial) {
      TrainConfig tc = candidates.train;
      const ArchConfig arch = apply_trial(candidates.predesigned, trial, tc);
      tc.seed = mix_seed(seed, 0x7E57);
      const ModelArtifact m =
          train_model(build_model(arch, mix_seed(seed, 0xB111D)), fit_rows, tc,
                      LossSpec::cross_entropy());
      return m;
    };
    Objective objective = [&](const TrialConfig& trial, TrialContext&) {
      return evaluate_auc(train_candidate(trial), val_rows);
    };
    TrialBudget budget;
    budget.max_trials = std::max(1, candidates.hpo_trials);
    HpoOptions options;
    options.seed = mix_seed(seed, 0x4AC05);
    options.initial_configs = {default_trial(candidates.predesigned, candidates.train)};
    const HpoResult result = optimize(objective, default_arch_space(), budget, options);
    hpo_artifact = train_candidate(result.best.config);
    hpo_artifact.provenance.strategy = "agnostic-init-predesigned";
    rep.hpo_auc = result.best.metric;
    rep.hpo_flops = model_flops(hpo_artifact.arch);
  }
  if (candidates.use_nas) {
    rep.nas_ran = true;
    NasConfig nc = candidates.nas;
    nc.seed = mix_seed(seed, 0x9A5);
    const SearchResult sr =
        search(candidates.nas_space, candidates.predesigned, fit_rows, nullptr, nc);
    const SeqShape shape{candidates.predesigned.max_seq_len, candidates.nas_space.channels};
    const long budget = nc.flops_budget > 0 ? nc.flops_budget
                                            : space_max_flops(candidates.nas_space, shape);
    const Genotype geno = derive_genotype(sr.supernet.arch, candidates.nas_space, budget, shape);
    TrainConfig tc = candidates.train;
    tc.seed = mix_seed(seed, 0x111A);
    nas_artifact = train_light(geno, candidates.nas_space, candidates.predesigned, fit_rows,
                               nullptr, tc, 0.0);
    nas_artifact.provenance.strategy = "agnostic-init-searched";
    rep.nas_auc = evaluate_auc(nas_artifact, val_rows);
    rep.nas_flops = model_flops(nas_artifact.arch);
  }

  MetaState state;
  state.cfg = cfg;
  state.version = 0;
  if (!candidates.use_nas) {
    rep.selected = "predesigned";
    state.agnostic = std::move(hpo_artifact);
  } else if (!candidates.use_hpo) {
    rep.selected = "searched";
    state.agnostic = std::move(nas_artifact);
  } else if (std::abs(rep.hpo_auc - rep.nas_auc) <= 1e-6) {
    // tie: keep the lighter candidate
    const bool keep_hpo = rep.hpo_flops <= rep.nas_flops;
    rep.selected = keep_hpo ? "predesigned" : "searched";
    state.agnostic = keep_hpo ? std::move(hpo_artifact) : std::move(nas_artifact);
  } else if (rep.hpo_auc > rep.nas_auc) {
    rep.selected = "predesigned";
    state.agnostic = std::move(hpo_artifact);
  } else {
    rep.selected = "searched";
    state.agnostic = std::move(nas_artifact);
  }
  state.agnostic.provenance.scenario = "agnostic";
  return state;
}

std::pair<ModelArtifact, FeedbackPacket> fine_tune(const MetaState& state,
                                                   const ScenarioDataset& ds) {
  state.cfg.validate();
  const DataView support = support_view(ds);
  const DataView query = query_view(ds);
  if (support.empty()) throw std::invalid_argument("fine_tune: scenario has no support rows");
  if (query.empty()) throw std::invalid_argument("fine_tune: scenario has no query rows");

  TrainConfig tc;
  tc.learning_rate = state.cfg.gamma;
  tc.optimizer = TrainConfig::Optimizer::sgd;
  tc.epochs = state.cfg.inner_steps;
  tc.batch_size = state.cfg.batch_size;
  tc.seed = mix_seed(static_cast<std::uint64_t>(state.version) * 0x9E37 + 0xF1,
                     static_cast<std::uint64_t>(ds.scenario_id));
  ModelArtifact tuned = train_model(state.agnostic, support, tc, LossSpec::cross_entropy());
  tuned.provenance.strategy = "scenario-heavy";
  tuned.provenance.scenario = std::to_string(ds.scenario_id);

  FeedbackPacket packet;
  packet.scenario_id = ds.scenario_id;
  packet.base_version = state.version;
  packet.query_loss = dataset_loss(tuned, query, LossSpec::cross_entropy());
  packet.query_gradient = loss_gradient(tuned, query, LossSpec::cross_entropy());

  if (state.cfg.second_order) {
    // exact first-step curvature correction: g <- (I - gamma H_support) g via
    // a central-difference Hessian-vector product at theta_0
    if (state.cfg.inner_steps != 1 ||
        state.cfg.batch_size < static_cast<int>(support.size()))
      throw std::invalid_argument(
          "fine_tune: second_order requires inner_steps=1 and full-batch support");
    const double eps = 1e-4;
    double vnorm = 0.0;
    for (const auto& [k, g] : packet.query_gradient) vnorm += g.squaredNorm();
    vnorm = std::sqrt(vnorm);
    if (vnorm > 0.0) {
      auto shifted = [&](double sign) {
        ModelArtifact m = state.agnostic;
        for (auto& [k, p] : m.params)
          p += sign * (eps / vnorm) * packet.query_gradient.at(k);
        return loss_gradient(m, support, LossSpec::cross_entropy());
      };
      const auto gp = shifted(1.0);
      const auto gm = shifted(-1.0);
      for (auto& [k, g] : packet.query_gradient) {
        const Matrix hv = (gp.at(k) - gm.at(k)) * (vnorm / (2.0 * eps));
        g -= state.cfg.gamma * hv;
      }
    }
  }
  return {std::move(tuned), std::move(packet)};
}

MetaState meta_update(MetaState state, const std::vector<FeedbackPacket>& packets,
                      MetaUpdateReport* report) {
  if (packets.empty()) throw std::invalid_argument("meta_update: no packets");
  MetaUpdateReport local;
  MetaUpdateReport& rep = report ? *report : local;
  std::map<std::string, Matrix> total;
  for (const FeedbackPacket& p : packets) {
    if (state.version - p.base_version > state.cfg.staleness_bound) {
      rep.dropped_stale.push_back(p.scenario_id);
      continue;
    }
    for (const auto& [name, g] : p.query_gradient) {
      auto it = state.agnostic.params.find(name);
      if (it == state.agnostic.params.end())
        throw std::invalid_argument("meta_update: packet gradient has unknown array " + name);
      if (g.rows() != it->second.rows() || g.cols() != it->second.cols())
        throw std::invalid_argument("meta_update: packet gradient shape mismatch for " + name);
      if (!g.allFinite())
        throw std::invalid_argument("meta_update: non-finite gradient for " + name);
      auto [slot, fresh] = total.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
      slot->second += g;
    }
    ++rep.applied;
  }
  if (rep.applied == 0) return state;  // every packet stale: warning-level no-op
  const double eta = state.cfg.resolved_eta();
  for (auto& [name, g] : total) state.agnostic.params.at(name) -= eta * g;
  state.version += 1;
  return state;
}

MetaState periodic_refresh(MetaState state) {
  if (state.archive.empty() || state.cfg.refresh.epochs < 1) return state;  // no-op
  DataView rows;
  for (const auto& ds : state.archive) append(rows, train_view(*ds));
  state.agnostic = train_model(state.agnostic, rows, state.cfg.refresh,
                               LossSpec::cross_entropy());
  state.version += 1;
  return state;
}

MetaState MetaEngine::snapshot() const {
  std::lock_guard<std::mutex> lock(mu_);
  return state_;
}

long MetaEngine::version() const {
  std::lock_guard<std::mutex> lock(mu_);
  return state_.version;
}

std::pair<ModelArtifact, FeedbackPacket> MetaEngine::fine_tune_scenario(
    const ScenarioDataset& ds) const {
  return fine_tune(snapshot(), ds);
}

MetaUpdateReport MetaEngine::commit(const std::vector<FeedbackPacket>& packets) {
  std::lock_guard<std::mutex> lock(mu_);
  MetaUpdateReport report;
  state_ = meta_update(std::move(state_), packets, &report);
  return report;
}

void MetaEngine::archive_scenario(std::shared_ptr<const ScenarioDataset> ds) {
  std::lock_guard<std::mutex> lock(mu_);
  state_.archive.push_back(std::move(ds));
}

void MetaEngine::refresh() {
  std::lock_guard<std::mutex> lock(mu_);
  state_ = periodic_refresh(std::move(state_));
}

}  // namespace longtail
