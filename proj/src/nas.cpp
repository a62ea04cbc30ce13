#include "longtail/nas.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

namespace longtail {

void NasConfig::validate() const {
  if (delta < 0.0) throw std::invalid_argument("NasConfig: delta must be >= 0");
  if (beta <= 0.0 || arch_lr <= 0.0)
    throw std::invalid_argument("NasConfig: learning rates must be positive");
  if (tau_start <= 0.0 || tau_end <= 0.0 || tau_end > tau_start)
    throw std::invalid_argument("NasConfig: need 0 < tau_end <= tau_start");
  if (epochs < 1 || batch_size < 1)
    throw std::invalid_argument("NasConfig: epochs and batch_size must be >= 1");
  if (train_split <= 0.0 || train_split >= 1.0)
    throw std::invalid_argument("NasConfig: train_split must lie in (0,1)");
  if (flops_budget < 0) throw std::invalid_argument("NasConfig: flops_budget must be >= 0");
}

Vector gumbel_relaxed(const Vector& logits, const Vector& noise, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("gumbel_relaxed: tau must be positive");
  if (noise.size() != logits.size())
    throw std::invalid_argument("gumbel_relaxed: noise size mismatch");
  Vector z = (logits + noise) / tau;
  z = (z.array() - z.maxCoeff()).exp();
  return z / z.sum();
}

std::pair<int, Vector> gumbel_sample(const Vector& logits, double tau, Rng& rng) {
  Vector noise(logits.size());
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise(i) = rng.gumbel();
  const Vector probs = gumbel_relaxed(logits, noise, tau);
  int arg = 0;
  probs.maxCoeff(&arg);
  return {arg, probs};
}

// ---- supernet ---------------------------------------------------------------

Supernet build_supernet(const SpaceSpec& space, const ArchConfig& base, std::uint64_t seed) {
  space.validate();
  base.validate();
  if (space.channels != base.resolved_embed_dim())
    throw std::invalid_argument("build_supernet: space channels (" +
                                std::to_string(space.channels) + ") must equal embed dim (" +
                                std::to_string(base.resolved_embed_dim()) + ")");
  Supernet sn;
  sn.space = space;
  sn.base = base;
  Rng rng(mix_seed(seed, 0x5B9E7));
  std::vector<std::pair<std::string, Matrix>> items;
  add_base_params(items, rng, base, space.channels, true);
  for (int l = 0; l < space.n_layers; ++l)
    for (std::size_t m = 0; m < space.op_candidates.size(); ++m)
      add_op_params(items, rng, "super." + std::to_string(l) + "." + std::to_string(m),
                    space.op_candidates[m], space.channels);
  for (auto& [k, v] : items) {
    if (sn.weights.count(k)) throw std::logic_error("build_supernet: duplicate parameter " + k);
    sn.weights.emplace(k, std::move(v));
  }
  sn.arch = ArchWeights::zeros(space);
  return sn;
}

DecisionPlan sample_decisions(const Supernet& sn, Rng& rng) {
  DecisionPlan plan;
  const int n = sn.space.n_layers;
  for (int l = 0; l < n; ++l) {
    const auto sl = static_cast<std::size_t>(l);
    {
      Vector noise(sn.arch.input_logits[sl].size());
      for (Eigen::Index i = 0; i < noise.size(); ++i) noise(i) = rng.gumbel();
      const Vector p = gumbel_relaxed(sn.arch.input_logits[sl], noise, sn.arch.tau);
      int arg = 0;
      p.maxCoeff(&arg);
      plan.input_choice.push_back(arg);
      plan.input_noise.push_back(noise);
    }
    {
      Vector noise(sn.arch.op_logits[sl].size());
      for (Eigen::Index i = 0; i < noise.size(); ++i) noise(i) = rng.gumbel();
      const Vector p = gumbel_relaxed(sn.arch.op_logits[sl], noise, sn.arch.tau);
      int arg = 0;
      p.maxCoeff(&arg);
      plan.op_choice.push_back(arg);
      plan.op_noise.push_back(noise);
    }
    std::vector<bool> inc;
    std::vector<Eigen::Vector2d> noises;
    for (const Eigen::Vector2d& pair : sn.arch.residual_logits[sl]) {
      Eigen::Vector2d noise(rng.gumbel(), rng.gumbel());
      const Vector p = gumbel_relaxed(pair, noise, sn.arch.tau);
      inc.push_back(p(0) >= p(1));
      noises.push_back(noise);
    }
    plan.residual_include.push_back(std::move(inc));
    plan.residual_noise.push_back(std::move(noises));
  }
  return plan;
}

ArchVars bind_arch(ad::Graph& g, const ArchWeights& aw, bool trainable) {
  auto bind = [&](const Vector& v) {
    Matrix row = v.transpose();
    return trainable ? g.leaf(std::move(row)) : g.constant(std::move(row));
  };
  ArchVars av;
  for (const Vector& v : aw.input_logits) av.input_logits.push_back(bind(v));
  for (const Vector& v : aw.op_logits) av.op_logits.push_back(bind(v));
  for (const auto& edges : aw.residual_logits) {
    std::vector<ad::Var> row;
    for (const Eigen::Vector2d& pair : edges) row.push_back(bind(pair));
    av.residual_logits.push_back(std::move(row));
  }
  av.agg_scores = bind(aw.agg_scores);
  return av;
}

namespace {

double relaxed_pm(const Vector& logits, const Vector& noise, double tau, int index) {
  return gumbel_relaxed(logits, noise, tau)(index);
}

// straight-through gate for option `index` of one decision
ad::Var decision_gate(ad::Graph& g, ad::Var logits_row, const Vector& noise, double tau,
                      int index, double detached) {
  ad::Var noisy = ad::add(logits_row, g.constant(noise.transpose()));
  ad::Var probs = ad::softmax_rows(ad::scale(noisy, 1.0 / tau));
  return ad::st_gate(ad::pick(probs, 0, index), detached);
}

}  // namespace

GateAnchor gate_anchor(const Supernet& sn, const DecisionPlan& plan) {
  GateAnchor a;
  for (std::size_t l = 0; l < plan.op_choice.size(); ++l) {
    a.input_pm.push_back(relaxed_pm(sn.arch.input_logits[l], plan.input_noise[l], sn.arch.tau,
                                    plan.input_choice[l]));
    a.op_pm.push_back(
        relaxed_pm(sn.arch.op_logits[l], plan.op_noise[l], sn.arch.tau, plan.op_choice[l]));
    std::vector<double> row;
    for (std::size_t e = 0; e < plan.residual_include[l].size(); ++e)
      row.push_back(relaxed_pm(Vector(sn.arch.residual_logits[l][e]),
                               Vector(plan.residual_noise[l][e]), sn.arch.tau, 0));
    a.residual_pm.push_back(std::move(row));
  }
  return a;
}

ad::Var supernet_forward(ad::Graph& g, const Supernet& sn, ParamVars& wv, ArchVars& av,
                         const DecisionPlan& plan, const Batch& b, const GateAnchor* anchor) {
  const int n = sn.space.n_layers;
  if (static_cast<int>(plan.op_choice.size()) != n)
    throw std::invalid_argument("supernet_forward: plan does not match the space");
  GateAnchor fresh;
  if (anchor == nullptr) {
    fresh = gate_anchor(sn, plan);
    anchor = &fresh;
  }
  ad::Var prof = forward_profile(g, wv, sn.base, b);
  std::vector<ad::Var> outputs;
  outputs.push_back(forward_sequence_input(g, wv, b, true));
  for (int l = 0; l < n; ++l) {
    const auto sl = static_cast<std::size_t>(l);
    const int in_idx = plan.input_choice[sl];
    const int op_idx = plan.op_choice[sl];
    ad::Var gate_in = decision_gate(g, av.input_logits[sl], plan.input_noise[sl], sn.arch.tau,
                                    in_idx, anchor->input_pm[sl]);
    ad::Var x_in = ad::mul_scalar(outputs[static_cast<std::size_t>(in_idx)], gate_in);
    const OpSpec& op = sn.space.op_candidates[static_cast<std::size_t>(op_idx)];
    ad::Var y = apply_op(g, wv, "super." + std::to_string(l) + "." + std::to_string(op_idx), op,
                         x_in, b.mask, b.batch_size, b.seq_len, sn.space.heads);
    ad::Var gate_op = decision_gate(g, av.op_logits[sl], plan.op_noise[sl], sn.arch.tau, op_idx,
                                    anchor->op_pm[sl]);
    y = ad::mul_scalar(y, gate_op);
    for (std::size_t e = 0; e < plan.residual_include[sl].size(); ++e) {
      if (!plan.residual_include[sl][e]) continue;  // excluded branch contributes nothing
      ad::Var gate_res =
          decision_gate(g, av.residual_logits[sl][e], Vector(plan.residual_noise[sl][e]),
                        sn.arch.tau, 0, anchor->residual_pm[sl][e]);
      y = ad::add(y, ad::mul_scalar(outputs[e], gate_res));
    }
    outputs.push_back(y);
  }
  ad::Var weights = ad::softmax_rows(av.agg_scores);
  ad::Var agg;
  for (int l = 0; l < n; ++l) {
    ad::Var term =
        ad::mul_scalar(outputs[static_cast<std::size_t>(l) + 1], ad::pick(weights, 0, l));
    agg = l == 0 ? term : ad::add(agg, term);
  }
  ad::Var pooled = ad::masked_mean(agg, b.mask, b.batch_size, b.seq_len);
  return forward_head(wv, sn.base, prof, pooled);
}

Genotype plan_genotype(const DecisionPlan& plan) {
  Genotype g;
  for (std::size_t l = 0; l < plan.op_choice.size(); ++l) {
    Genotype::Layer layer;
    layer.input_index = plan.input_choice[l];
    layer.op_index = plan.op_choice[l];
    for (std::size_t e = 0; e < plan.residual_include[l].size(); ++e)
      if (plan.residual_include[l][e]) layer.residual_set.push_back(static_cast<int>(e));
    g.layers.push_back(std::move(layer));
  }
  return g;
}

std::map<std::string, Matrix> subnetwork_params(const Supernet& sn, const Genotype& g) {
  g.validate(sn.space);
  std::map<std::string, Matrix> params;
  for (const auto& [name, mat] : sn.weights)
    if (name.rfind("super.", 0) != 0) params.emplace(name, mat);
  for (std::size_t l = 0; l < g.layers.size(); ++l) {
    const std::string src =
        "super." + std::to_string(l) + "." + std::to_string(g.layers[l].op_index) + ".";
    const std::string dst = "enc." + std::to_string(l) + ".";
    for (const auto& [name, mat] : sn.weights)
      if (name.rfind(src, 0) == 0) params.emplace(dst + name.substr(src.size()), mat);
  }
  params.emplace("agg.scores", sn.arch.agg_scores.transpose());
  return params;
}

// ---- bilevel search ----------------------------------------------------------

namespace {

class Adam {
 public:
  explicit Adam(double lr) : lr_(lr) {}

  void step(std::map<std::string, Matrix>& params, const std::map<std::string, Matrix>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const Matrix& gr = it->second;
      if ((gr.array() == 0.0).all()) continue;  // unsampled branch
      auto [mi, um] = m_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
      auto [vi, uv] = v_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
      mi->second = 0.9 * mi->second + 0.1 * gr;
      vi->second = 0.999 * vi->second + 0.001 * gr.cwiseProduct(gr);
      p.array() -= lr_ * (mi->second.array() / bc1) / ((vi->second.array() / bc2).sqrt() + 1e-8);
    }
  }

 private:
  double lr_;
  long t_ = 0;
  std::map<std::string, Matrix> m_, v_;
};

std::map<std::string, Matrix> arch_as_params(const ArchWeights& aw) {
  std::map<std::string, Matrix> p;
  for (std::size_t l = 0; l < aw.op_logits.size(); ++l) {
    const std::string s = std::to_string(l);
    p.emplace("in." + s, aw.input_logits[l].transpose());
    p.emplace("op." + s, aw.op_logits[l].transpose());
    for (std::size_t e = 0; e < aw.residual_logits[l].size(); ++e)
      p.emplace("res." + s + "." + std::to_string(e), aw.residual_logits[l][e].transpose());
  }
  p.emplace("agg", aw.agg_scores.transpose());
  return p;
}

void params_to_arch(const std::map<std::string, Matrix>& p, ArchWeights& aw) {
  for (std::size_t l = 0; l < aw.op_logits.size(); ++l) {
    const std::string s = std::to_string(l);
    aw.input_logits[l] = p.at("in." + s).transpose();
    aw.op_logits[l] = p.at("op." + s).transpose();
    for (std::size_t e = 0; e < aw.residual_logits[l].size(); ++e)
      aw.residual_logits[l][e] = p.at("res." + s + "." + std::to_string(e)).transpose();
  }
  aw.agg_scores = p.at("agg").transpose();
}

ad::Var supernet_loss(ad::Graph& g, const Supernet& sn, ParamVars& wv, ArchVars& av,
                      const DecisionPlan& plan, const Batch& b, const ModelArtifact* teacher,
                      double delta) {
  ad::Var probs = supernet_forward(g, sn, wv, av, plan, b);
  ad::Var loss = ad::bce(probs, b.labels);
  if (teacher != nullptr && delta > 0.0) {
    const Vector tprobs = predict(*teacher, b);
    loss = ad::add(loss, ad::scale(ad::soft_bce(probs, tprobs), delta));
  }
  return loss;
}

}  // namespace

struct SearchOptimizers::Impl {
  Impl(double beta, double arch_lr) : weights(beta), arch(arch_lr) {}
  Adam weights;
  Adam arch;
};

SearchOptimizers::SearchOptimizers(double beta, double arch_lr)
    : impl(std::make_unique<Impl>(beta, arch_lr)) {}
SearchOptimizers::~SearchOptimizers() = default;

SearchStepResult search_step(Supernet& sn, const Batch& train_batch, const Batch& val_batch,
                             const ModelArtifact* teacher, const NasConfig& cfg, double lambda,
                             SearchOptimizers& opt, Rng& rng) {
  if (cfg.delta > 0.0 && teacher == nullptr)
    throw std::invalid_argument("search_step: delta > 0 requires a teacher");
  SearchStepResult result;
  const SeqShape shape{sn.base.max_seq_len, sn.space.channels};
  const double reference = static_cast<double>(space_max_flops(sn.space, shape));

  {  // (a) network weights on the train split
    const DecisionPlan plan = sample_decisions(sn, rng);
    ad::Graph g;
    ParamVars wv = bind_params(g, sn.weights);
    ArchVars av = bind_arch(g, sn.arch, false);
    ad::Var loss = supernet_loss(g, sn, wv, av, plan, train_batch, teacher, cfg.delta);
    result.train_loss = loss.value()(0, 0);
    if (!std::isfinite(result.train_loss))
      throw std::runtime_error("search_step: non-finite train loss; sampled genotype:\n" +
                               plan_genotype(plan).describe(sn.space));
    g.backward(loss);
    std::map<std::string, Matrix> grads;
    for (auto& [name, var] : wv) grads.emplace(name, var.grad());
    opt.impl->weights.step(sn.weights, grads);
  }

  {  // (b) architecture logits on the val split, with the FLOPs penalty
    const DecisionPlan plan = sample_decisions(sn, rng);
    ad::Graph g;
    ParamVars wv;
    for (const auto& [name, mat] : sn.weights) wv.emplace(name, g.constant(mat));
    ArchVars av = bind_arch(g, sn.arch, true);
    ad::Var loss = supernet_loss(g, sn, wv, av, plan, val_batch, teacher, cfg.delta);
    const double penalty =
        lambda * expected_flops(sn.arch, sn.space, shape) / reference;
    result.val_loss = loss.value()(0, 0) + penalty;
    if (!std::isfinite(result.val_loss))
      throw std::runtime_error("search_step: non-finite val loss; sampled genotype:\n" +
                               plan_genotype(plan).describe(sn.space));
    g.backward(loss);

    std::map<std::string, Matrix> grads;
    const ArchWeights pgrad = expected_flops_grad(sn.arch, sn.space, shape);
    const double pscale = lambda / reference;
    for (std::size_t l = 0; l < av.op_logits.size(); ++l) {
      const std::string s = std::to_string(l);
      grads.emplace("in." + s, av.input_logits[l].grad());
      grads.emplace("op." + s,
                    av.op_logits[l].grad() + pscale * pgrad.op_logits[l].transpose());
      for (std::size_t e = 0; e < av.residual_logits[l].size(); ++e)
        grads.emplace("res." + s + "." + std::to_string(e),
                      av.residual_logits[l][e].grad() +
                          pscale * pgrad.residual_logits[l][e].transpose());
    }
    grads.emplace("agg", av.agg_scores.grad());
    std::map<std::string, Matrix> arch_params = arch_as_params(sn.arch);
    opt.impl->arch.step(arch_params, grads);
    params_to_arch(arch_params, sn.arch);
  }
  return result;
}

// Penalty weight when lambda is auto-calibrated. The penalty gradient is
// deterministic while the straight-through CE gradient is noisy, so the
// factor has to stay small or the search collapses to the all-pool corner.
constexpr double kAutoLambdaFactor = 0.003;

SearchResult search(const SpaceSpec& space, const ArchConfig& base, const DataView& train_rows,
                    const ModelArtifact* teacher, const NasConfig& cfg) {
  cfg.validate();
  if (train_rows.size() < 4) throw std::invalid_argument("search: too few training rows");
  const SeqShape shape{base.max_seq_len, space.channels};
  if (cfg.flops_budget > space_max_flops(space, shape))
    throw std::invalid_argument("search: budget exceeds the space maximum FLOPs");

  SearchResult out{build_supernet(space, base, cfg.seed), 0.0, {}};
  Supernet& sn = out.supernet;

  // bilevel division of the scenario train rows
  std::vector<int> order(train_rows.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(mix_seed(cfg.seed, 0xB11E));
  split_rng.shuffle(order);
  const auto n_train =
      static_cast<std::size_t>(cfg.train_split * static_cast<double>(order.size()));
  DataView wtrain, wval;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_train ? wtrain : wval).push_back(train_rows[static_cast<std::size_t>(order[i])]);
  if (wtrain.empty() || wval.empty())
    throw std::invalid_argument("search: bilevel split left an empty part");

  // lambda auto-calibration on the first val batch
  double lambda = cfg.lambda;
  if (lambda < 0.0) {
    std::vector<int> first;
    for (int i = 0; i < std::min<int>(cfg.batch_size, static_cast<int>(wval.size())); ++i)
      first.push_back(i);
    const Batch b = make_batch(wval, first);
    Rng rng0(mix_seed(cfg.seed, 0xCA1B));
    const DecisionPlan plan = sample_decisions(sn, rng0);
    ad::Graph g;
    ParamVars wv;
    for (const auto& [name, mat] : sn.weights) wv.emplace(name, g.constant(mat));
    ArchVars av = bind_arch(g, sn.arch, false);
    const double ce0 =
        supernet_loss(g, sn, wv, av, plan, b, teacher, cfg.delta).value()(0, 0);
    const double ef0 = expected_flops(sn.arch, sn.space, shape) /
                       static_cast<double>(space_max_flops(sn.space, shape));
    lambda = kAutoLambdaFactor * ce0 / std::max(ef0, 1e-9);
  }
  out.lambda = lambda;

  SearchOptimizers opt(cfg.beta, cfg.arch_lr);
  Rng rng(mix_seed(cfg.seed, 0x5EA2C4));
  const int steps_per_epoch =
      std::max<int>(1, static_cast<int>((wtrain.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                        static_cast<std::size_t>(cfg.batch_size)));
  std::vector<int> tidx(wtrain.size()), vidx(wval.size());
  std::iota(tidx.begin(), tidx.end(), 0);
  std::iota(vidx.begin(), vidx.end(), 0);
  std::size_t vpos = 0;

  for (int e = 0; e < cfg.epochs; ++e) {
    // exponential temperature decay across epochs
    const double frac = cfg.epochs > 1 ? static_cast<double>(e) / (cfg.epochs - 1) : 1.0;
    sn.arch.tau = cfg.tau_start * std::pow(cfg.tau_end / cfg.tau_start, frac);
    Rng erng(mix_seed(cfg.seed, 0xE50 + static_cast<std::uint64_t>(e)));
    erng.shuffle(tidx);
    double val_sum = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<int> tb, vb;
      for (int i = 0; i < cfg.batch_size; ++i) {
        tb.push_back(tidx[(static_cast<std::size_t>(s) * cfg.batch_size + i) % wtrain.size()]);
        vb.push_back(vidx[vpos]);
        vpos = (vpos + 1) % wval.size();
      }
      const SearchStepResult r =
          search_step(sn, make_batch(wtrain, tb), make_batch(wval, vb), teacher, cfg, lambda,
                      opt, rng);
      val_sum += r.val_loss;
    }
    out.epoch_val_losses.push_back(val_sum / steps_per_epoch);
  }
  return out;
}

// ---- constrained genotype derivation ----------------------------------------

namespace {

struct Decision {
  std::vector<int> options;     // option ids sorted by descending log-probability
  std::vector<double> logp;     // aligned with `options`
  std::vector<long> flops;      // aligned with `options`
};

Vector log_softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

struct State {
  std::vector<int> ranks;
  std::vector<int> opts;  // concrete option ids, for the lexicographic tie-break
  double logp = 0;
  long flops = 0;
};

}  // namespace

Genotype derive_genotype(const ArchWeights& aw, const SpaceSpec& space, long budget,
                         const SeqShape& shape) {
  aw.validate(space);
  const long min_flops = space_min_flops(space, shape);
  if (budget < min_flops)
    throw std::invalid_argument("derive_genotype: no genotype satisfies the budget " +
                                std::to_string(budget) + "; the space minimum is " +
                                std::to_string(min_flops) + " FLOPs");

  // decisions in lexicographic order: per layer input, op, then edges
  std::vector<Decision> decisions;
  const long edge = residual_edge_flops(shape);
  for (int l = 0; l < space.n_layers; ++l) {
    const auto sl = static_cast<std::size_t>(l);
    {
      Decision d;
      const Vector lp = log_softmax(aw.input_logits[sl]);
      for (Eigen::Index i = 0; i < lp.size(); ++i) {
        d.options.push_back(static_cast<int>(i));
        d.logp.push_back(lp(i));
        d.flops.push_back(0);
      }
      decisions.push_back(std::move(d));
    }
    {
      Decision d;
      const Vector lp = log_softmax(aw.op_logits[sl]);
      for (Eigen::Index i = 0; i < lp.size(); ++i) {
        d.options.push_back(static_cast<int>(i));
        d.logp.push_back(lp(i));
        d.flops.push_back(op_flops(space.op_candidates[static_cast<std::size_t>(i)],
                                   shape.seq_len));
      }
      decisions.push_back(std::move(d));
    }
    for (const Eigen::Vector2d& pair : aw.residual_logits[sl]) {
      Decision d;
      const Vector lp = log_softmax(pair);
      d.options = {0, 1};  // 0 = include, 1 = exclude
      d.logp = {lp(0), lp(1)};
      d.flops = {edge, 0};
      decisions.push_back(std::move(d));
    }
  }
  // sort options of each decision by (logp desc, option id asc)
  for (Decision& d : decisions) {
    std::vector<int> perm(d.options.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::sort(perm.begin(), perm.end(), [&](int a, int b) {
      if (d.logp[static_cast<std::size_t>(a)] != d.logp[static_cast<std::size_t>(b)])
        return d.logp[static_cast<std::size_t>(a)] > d.logp[static_cast<std::size_t>(b)];
      return d.options[static_cast<std::size_t>(a)] < d.options[static_cast<std::size_t>(b)];
    });
    Decision s;
    for (int p : perm) {
      s.options.push_back(d.options[static_cast<std::size_t>(p)]);
      s.logp.push_back(d.logp[static_cast<std::size_t>(p)]);
      s.flops.push_back(d.flops[static_cast<std::size_t>(p)]);
    }
    d = std::move(s);
  }

  const std::size_t nd = decisions.size();
  const long fixed = aggregation_flops(space.n_layers, shape);
  auto evaluate = [&](const std::vector<int>& ranks) {
    State st;
    st.ranks = ranks;
    st.opts.resize(nd);
    st.flops = fixed;
    for (std::size_t d = 0; d < nd; ++d) {
      st.logp += decisions[d].logp[static_cast<std::size_t>(ranks[d])];
      st.flops += decisions[d].flops[static_cast<std::size_t>(ranks[d])];
      st.opts[d] = decisions[d].options[static_cast<std::size_t>(ranks[d])];
    }
    return st;
  };
  // heap orders by joint probability, then lower FLOPs, then lexicographic
  // option order
  auto better = [&](const State& a, const State& b) {
    if (a.logp != b.logp) return a.logp > b.logp;
    if (a.flops != b.flops) return a.flops < b.flops;
    return a.opts < b.opts;
  };
  auto cmp = [&](const State& a, const State& b) { return better(b, a); };
  std::priority_queue<State, std::vector<State>, decltype(cmp)> heap(cmp);
  heap.push(evaluate(std::vector<int>(nd, 0)));

  bool have_candidate = false;
  State candidate;
  while (!heap.empty()) {
    const State st = heap.top();
    heap.pop();
    if (have_candidate && st.logp < candidate.logp) break;  // plateau exhausted
    if (st.flops <= budget && (!have_candidate || better(st, candidate))) {
      candidate = st;
      have_candidate = true;
    }
    // unique successor rule: advance decision d only when all later ranks are 0
    for (std::size_t d = nd; d-- > 0;) {
      if (st.ranks[d] + 1 < static_cast<int>(decisions[d].options.size())) {
        State next = st;
        next.ranks[d] += 1;
        heap.push(evaluate(next.ranks));
      }
      if (st.ranks[d] != 0) break;
    }
  }
  if (!have_candidate)
    throw std::logic_error("derive_genotype: enumeration ended without a feasible genotype");

  const std::vector<int>& opts = candidate.opts;
  Genotype g;
  std::size_t d = 0;
  for (int l = 0; l < space.n_layers; ++l) {
    Genotype::Layer layer;
    layer.input_index = opts[d++];
    layer.op_index = opts[d++];
    for (int e = 0; e <= l; ++e) {
      if (opts[d++] == 0) layer.residual_set.push_back(e);
    }
    g.layers.push_back(std::move(layer));
  }
  g.validate(space);
  return g;
}

ModelArtifact train_light(const Genotype& genotype, const SpaceSpec& space,
                          const ArchConfig& base, const DataView& data,
                          const ModelArtifact* teacher, const TrainConfig& cfg, double delta,
                          TrainStats* stats) {
  SearchedArch sa{space, genotype, base};
  ModelArtifact fresh = build_model(ModelArch{sa}, cfg.seed);
  const LossSpec loss = (teacher != nullptr && delta > 0.0)
                            ? LossSpec::distill(*teacher, delta)
                            : LossSpec::cross_entropy();
  return train_model(fresh, data, cfg, loss, stats);
}

}  // namespace longtail
