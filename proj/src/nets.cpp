#include "longtail/nets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace longtail {

namespace {

std::string dim_error(const std::string& what, long a, long b) {
  return what + " (" + std::to_string(a) + " vs " + std::to_string(b) + ")";
}

}  // namespace

void ArchConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("ArchConfig: ") + name + " must be >= 1");
  };
  positive(n_encoder_layers, "n_encoder_layers");
  positive(hidden_dim, "hidden_dim");
  positive(intermediate_dim, "intermediate_dim");
  positive(resolved_embed_dim(), "embed_dim");
  positive(attention_heads, "attention_heads");
  positive(profile_dim, "profile_dim");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  for (int d : profile_mlp_dims) positive(d, "profile_mlp_dims entry");
  for (int d : head_mlp_dims) positive(d, "head_mlp_dims entry");
  if (encoder_kind == EncoderKind::attention) {
    if (hidden_dim % attention_heads != 0)
      throw std::invalid_argument("ArchConfig: " +
                                  dim_error("hidden_dim not divisible by attention_heads",
                                            hidden_dim, attention_heads));
    if (resolved_embed_dim() != hidden_dim)
      throw std::invalid_argument("ArchConfig: " +
                                  dim_error("attention encoder needs embed_dim == hidden_dim",
                                            resolved_embed_dim(), hidden_dim));
  }
}

long param_count(const ModelArtifact& m) {
  long n = 0;
  for (const auto& [name, mat] : m.params) n += static_cast<long>(mat.size());
  return n;
}

// ---- initialization --------------------------------------------------------

namespace {

struct ParamInit {
  Rng rng;
  std::vector<std::pair<std::string, Matrix>> items;

  explicit ParamInit(std::uint64_t seed) : rng(seed) {}

  void weight(const std::string& name, int rows, int cols) {
    items.emplace_back(name, glorot_init(rng, rows, cols));
  }
  void zeros(const std::string& name, int rows, int cols) {
    items.emplace_back(name, Matrix::Zero(rows, cols));
  }
  void ones(const std::string& name, int rows, int cols) {
    items.emplace_back(name, Matrix::Ones(rows, cols));
  }
  // i,f,g,o gate layout; forget gate biased to 1
  void lstm_bias(const std::string& name, int hid) {
    Matrix b = Matrix::Zero(1, 4 * hid);
    b.block(0, hid, 1, hid).setOnes();
    items.emplace_back(name, std::move(b));
  }

  std::map<std::string, Matrix> take() {
    std::map<std::string, Matrix> out;
    for (auto& [k, v] : items) {
      if (out.count(k)) throw std::logic_error("duplicate parameter name " + k);
      out.emplace(k, std::move(v));
    }
    return out;
  }
};

void add_mlp_params(ParamInit& pi, const std::string& prefix, int in_dim,
                    const std::vector<int>& dims) {
  int d = in_dim;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    pi.weight(prefix + "." + std::to_string(i) + ".w", d, dims[i]);
    pi.zeros(prefix + "." + std::to_string(i) + ".b", 1, dims[i]);
    d = dims[i];
  }
}

void add_attention_params(ParamInit& pi, const std::string& prefix, int d) {
  for (const char* n : {"wq", "wk", "wv", "wo"}) pi.weight(prefix + "." + n, d, d);
  for (const char* n : {"bq", "bk", "bv", "bo"}) pi.zeros(prefix + "." + n, 1, d);
}

}  // namespace

// fan-in scaled uniform: U(-L, L) with L = sqrt(6 / (fan_in + fan_out))
Matrix glorot_init(Rng& rng, int rows, int cols) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-limit, limit);
  return m;
}

void add_op_params(std::vector<std::pair<std::string, Matrix>>& items, Rng& rng,
                   const std::string& prefix, const OpSpec& op, int channels) {
  ParamInit pi(0);
  pi.rng = rng;
  pi.items = std::move(items);
  switch (op.kind) {
    case OpKind::conv1d:
    case OpKind::dilated_conv1d:
      pi.weight(prefix + ".w", op.kernel * channels, channels);
      pi.zeros(prefix + ".b", 1, channels);
      break;
    case OpKind::avg_pool1d:
    case OpKind::max_pool1d:
      break;  // parameter free
    case OpKind::recurrent:
      pi.weight(prefix + ".wx", channels, 4 * channels);
      pi.weight(prefix + ".wh", channels, 4 * channels);
      pi.lstm_bias(prefix + ".b", channels);
      break;
    case OpKind::self_attention:
      add_attention_params(pi, prefix, channels);
      break;
  }
  items = std::move(pi.items);
  rng = pi.rng;
}

namespace {

void add_op_params_impl(ParamInit& pi, const std::string& prefix, const OpSpec& op,
                        int channels) {
  add_op_params(pi.items, pi.rng, prefix, op, channels);
}

void add_common_params(ParamInit& pi, const ArchConfig& base, bool with_positions) {
  const int e = base.resolved_embed_dim();
  pi.weight("embed.table", base.vocab_size + 1, e);
  if (with_positions) pi.weight("pos.table", base.max_seq_len, e);
  add_mlp_params(pi, "profile", base.profile_dim, base.profile_mlp_dims);
}

void add_head_params(ParamInit& pi, const ArchConfig& base, int seq_out_dim) {
  const int profile_out =
      base.profile_mlp_dims.empty() ? base.profile_dim : base.profile_mlp_dims.back();
  add_mlp_params(pi, "head", profile_out + seq_out_dim, base.head_mlp_dims);
  const int last = base.head_mlp_dims.empty() ? profile_out + seq_out_dim
                                              : base.head_mlp_dims.back();
  pi.weight("head.out.w", last, 1);
  pi.zeros("head.out.b", 1, 1);
}

}  // namespace

ModelArtifact build_model(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  ParamInit pi(mix_seed(seed, 0xA11C));
  add_common_params(pi, arch, arch.encoder_kind == EncoderKind::attention);
  const int h = arch.hidden_dim;
  int in = arch.resolved_embed_dim();
  for (int l = 0; l < arch.n_encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    if (arch.encoder_kind == EncoderKind::recurrent) {
      pi.weight(p + ".wx", in, 4 * h);
      pi.weight(p + ".wh", h, 4 * h);
      pi.lstm_bias(p + ".b", h);
      in = h;
    } else {
      add_attention_params(pi, p, h);
      pi.ones(p + ".ln1.g", 1, h);
      pi.zeros(p + ".ln1.b", 1, h);
      pi.weight(p + ".ffn1.w", h, arch.intermediate_dim);
      pi.zeros(p + ".ffn1.b", 1, arch.intermediate_dim);
      pi.weight(p + ".ffn2.w", arch.intermediate_dim, h);
      pi.zeros(p + ".ffn2.b", 1, h);
      pi.ones(p + ".ln2.g", 1, h);
      pi.zeros(p + ".ln2.b", 1, h);
    }
  }
  add_head_params(pi, arch, h);
  ModelArtifact m;
  m.arch = arch;
  m.params = pi.take();
  m.provenance.seed = seed;
  return m;
}

namespace {

ModelArtifact build_searched_model(const SearchedArch& sa, std::uint64_t seed) {
  sa.base.validate();
  sa.space.validate();
  sa.genotype.validate(sa.space);
  if (sa.space.channels != sa.base.resolved_embed_dim())
    throw std::invalid_argument("SearchedArch: " +
                                dim_error("space channels must equal embed_dim",
                                          sa.space.channels, sa.base.resolved_embed_dim()));
  ParamInit pi(mix_seed(seed, 0xA11C));
  add_common_params(pi, sa.base, true);
  for (std::size_t l = 0; l < sa.genotype.layers.size(); ++l) {
    const OpSpec& op =
        sa.space.op_candidates[static_cast<std::size_t>(sa.genotype.layers[l].op_index)];
    add_op_params_impl(pi, "enc." + std::to_string(l), op, sa.space.channels);
  }
  pi.zeros("agg.scores", 1, sa.space.n_layers);
  add_head_params(pi, sa.base, sa.space.channels);
  ModelArtifact m;
  m.arch = sa;
  m.params = pi.take();
  m.provenance.seed = seed;
  return m;
}

}  // namespace

ModelArtifact build_model(const ModelArch& arch, std::uint64_t seed) {
  if (std::holds_alternative<ArchConfig>(arch))
    return build_model(std::get<ArchConfig>(arch), seed);
  return build_searched_model(std::get<SearchedArch>(arch), seed);
}

void add_base_params(std::vector<std::pair<std::string, Matrix>>& items, Rng& rng,
                     const ArchConfig& base, int seq_out_dim, bool with_positions) {
  ParamInit pi(0);
  pi.rng = rng;
  pi.items = std::move(items);
  add_common_params(pi, base, with_positions);
  add_head_params(pi, base, seq_out_dim);
  items = std::move(pi.items);
  rng = pi.rng;
}

// ---- forward ---------------------------------------------------------------

ParamVars bind_params(ad::Graph& g, const std::map<std::string, Matrix>& params) {
  ParamVars pv;
  for (const auto& [name, mat] : params) pv.emplace(name, g.leaf(mat));
  return pv;
}

namespace {

ad::Var pv_at(ParamVars& pv, const std::string& name) {
  auto it = pv.find(name);
  if (it == pv.end()) throw std::invalid_argument("missing parameter " + name);
  return it->second;
}

ad::Var mlp_forward(ParamVars& pv, const std::string& prefix, ad::Var x, std::size_t n_layers) {
  for (std::size_t i = 0; i < n_layers; ++i) {
    const std::string p = prefix + "." + std::to_string(i);
    x = ad::relu(ad::linear(x, pv_at(pv, p + ".w"), pv_at(pv, p + ".b")));
  }
  return x;
}

// embedded, position-augmented (optional) and masked sequence input
ad::Var sequence_input(ad::Graph& g, ParamVars& pv, const Batch& b, bool with_positions) {
  ad::Var emb = ad::embedding(pv_at(pv, "embed.table"), b.events);
  if (with_positions)
    emb = ad::add(emb, ad::tile_rows(pv_at(pv, "pos.table"), b.batch_size));
  const Matrix mask_mat = b.mask.replicate(1, emb.value().cols());
  return ad::mul(emb, g.constant(mask_mat));
}

ad::Var head_forward(ParamVars& pv, const ArchConfig& base, ad::Var profile_out,
                     ad::Var seq_out) {
  ad::Var h = ad::concat_cols(profile_out, seq_out);
  h = mlp_forward(pv, "head", h, base.head_mlp_dims.size());
  return ad::sigmoid_op(ad::linear(h, pv_at(pv, "head.out.w"), pv_at(pv, "head.out.b")));
}

ad::Var transformer_block(ParamVars& pv, const std::string& p, ad::Var x, const Vector& mask,
                          int batch, int seq_len, int heads) {
  ad::Var a = ad::self_attention(x, pv_at(pv, p + ".wq"), pv_at(pv, p + ".bq"),
                                 pv_at(pv, p + ".wk"), pv_at(pv, p + ".bk"),
                                 pv_at(pv, p + ".wv"), pv_at(pv, p + ".bv"),
                                 pv_at(pv, p + ".wo"), pv_at(pv, p + ".bo"), mask, batch,
                                 seq_len, heads);
  x = ad::layer_norm(ad::add(x, a), pv_at(pv, p + ".ln1.g"), pv_at(pv, p + ".ln1.b"));
  ad::Var f = ad::relu(ad::linear(x, pv_at(pv, p + ".ffn1.w"), pv_at(pv, p + ".ffn1.b")));
  f = ad::linear(f, pv_at(pv, p + ".ffn2.w"), pv_at(pv, p + ".ffn2.b"));
  return ad::layer_norm(ad::add(x, f), pv_at(pv, p + ".ln2.g"), pv_at(pv, p + ".ln2.b"));
}

ad::Var predefined_forward(ad::Graph& g, const ArchConfig& arch, ParamVars& pv,
                           const Batch& b) {
  if (b.profiles.cols() != arch.profile_dim)
    throw std::invalid_argument("model_forward: " +
                                dim_error("batch profile dim mismatch",
                                          b.profiles.cols(), arch.profile_dim));
  if (b.seq_len != arch.max_seq_len)
    throw std::invalid_argument("model_forward: " + dim_error("batch seq_len mismatch",
                                                              b.seq_len, arch.max_seq_len));
  ad::Var prof = mlp_forward(pv, "profile", g.constant(b.profiles),
                             arch.profile_mlp_dims.size());
  ad::Var seq = sequence_input(g, pv, b, arch.encoder_kind == EncoderKind::attention);
  for (int l = 0; l < arch.n_encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    if (arch.encoder_kind == EncoderKind::recurrent) {
      seq = ad::lstm_seq(seq, pv_at(pv, p + ".wx"), pv_at(pv, p + ".wh"), pv_at(pv, p + ".b"),
                         b.batch_size, b.seq_len);
    } else {
      seq = transformer_block(pv, p, seq, b.mask, b.batch_size, b.seq_len,
                              arch.attention_heads);
    }
  }
  ad::Var pooled = ad::masked_mean(seq, b.mask, b.batch_size, b.seq_len);
  return head_forward(pv, arch, prof, pooled);
}

}  // namespace

ad::Var apply_op(ad::Graph& g, ParamVars& pv, const std::string& prefix, const OpSpec& op,
                 ad::Var x, const Vector& mask, int batch, int seq_len, int heads) {
  (void)g;
  switch (op.kind) {
    case OpKind::conv1d:
    case OpKind::dilated_conv1d:
      return ad::conv1d(x, pv_at(pv, prefix + ".w"), pv_at(pv, prefix + ".b"), batch, seq_len,
                        op.kernel, op.kind == OpKind::dilated_conv1d ? op.dilation : 1);
    case OpKind::avg_pool1d:
      return ad::avg_pool1d(x, batch, seq_len, op.kernel);
    case OpKind::max_pool1d:
      return ad::max_pool1d(x, batch, seq_len, op.kernel);
    case OpKind::recurrent:
      return ad::lstm_seq(x, pv_at(pv, prefix + ".wx"), pv_at(pv, prefix + ".wh"),
                          pv_at(pv, prefix + ".b"), batch, seq_len);
    case OpKind::self_attention:
      return ad::self_attention(x, pv_at(pv, prefix + ".wq"), pv_at(pv, prefix + ".bq"),
                                pv_at(pv, prefix + ".wk"), pv_at(pv, prefix + ".bk"),
                                pv_at(pv, prefix + ".wv"), pv_at(pv, prefix + ".bv"),
                                pv_at(pv, prefix + ".wo"), pv_at(pv, prefix + ".bo"), mask,
                                batch, seq_len, heads);
  }
  throw std::logic_error("apply_op: unknown op kind");
}

namespace {

ad::Var searched_forward(ad::Graph& g, const SearchedArch& sa, ParamVars& pv, const Batch& b) {
  ad::Var prof = mlp_forward(pv, "profile", g.constant(b.profiles),
                             sa.base.profile_mlp_dims.size());
  std::vector<ad::Var> outputs;  // outputs[0] = original input
  outputs.push_back(sequence_input(g, pv, b, true));
  for (std::size_t l = 0; l < sa.genotype.layers.size(); ++l) {
    const Genotype::Layer& layer = sa.genotype.layers[l];
    const OpSpec& op = sa.space.op_candidates[static_cast<std::size_t>(layer.op_index)];
    ad::Var y = apply_op(g, pv, "enc." + std::to_string(l), op,
                         outputs[static_cast<std::size_t>(layer.input_index)], b.mask,
                         b.batch_size, b.seq_len, sa.space.heads);
    for (int e : layer.residual_set) y = ad::add(y, outputs[static_cast<std::size_t>(e)]);
    outputs.push_back(y);
  }
  // attentive sum over the layers' outputs
  ad::Var weights = ad::softmax_rows(pv_at(pv, "agg.scores"));
  ad::Var agg;
  for (int l = 0; l < sa.space.n_layers; ++l) {
    ad::Var term = ad::mul_scalar(outputs[static_cast<std::size_t>(l) + 1],
                                  ad::pick(weights, 0, l));
    agg = l == 0 ? term : ad::add(agg, term);
  }
  ad::Var pooled = ad::masked_mean(agg, b.mask, b.batch_size, b.seq_len);
  return head_forward(pv, sa.base, prof, pooled);
}

}  // namespace

ad::Var model_forward(ad::Graph& g, const ModelArch& arch, ParamVars& pv, const Batch& b) {
  if (std::holds_alternative<ArchConfig>(arch))
    return predefined_forward(g, std::get<ArchConfig>(arch), pv, b);
  return searched_forward(g, std::get<SearchedArch>(arch), pv, b);
}

ad::Var forward_profile(ad::Graph& g, ParamVars& pv, const ArchConfig& base, const Batch& b) {
  return mlp_forward(pv, "profile", g.constant(b.profiles), base.profile_mlp_dims.size());
}

ad::Var forward_sequence_input(ad::Graph& g, ParamVars& pv, const Batch& b,
                               bool with_positions) {
  return sequence_input(g, pv, b, with_positions);
}

ad::Var forward_head(ParamVars& pv, const ArchConfig& base, ad::Var profile_out,
                     ad::Var seq_pooled) {
  return head_forward(pv, base, profile_out, seq_pooled);
}

Vector predict(const ModelArtifact& m, const Batch& batch) {
  ad::Graph g;
  ParamVars pv;
  for (const auto& [name, mat] : m.params) pv.emplace(name, g.constant(mat));
  ad::Var probs = model_forward(g, m.arch, pv, batch);
  return probs.value().col(0);
}

Vector predict(const ModelArtifact& m, const DataView& data, int batch_size) {
  Vector out(static_cast<Eigen::Index>(data.size()));
  std::vector<int> idx;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(static_cast<int>(i));
    const Vector p = predict(m, make_batch(data, idx));
    for (std::size_t i = start; i < end; ++i)
      out(static_cast<Eigen::Index>(i)) = p(static_cast<Eigen::Index>(i - start));
  }
  return out;
}

// ---- training --------------------------------------------------------------

namespace {

class Optimizer {
 public:
  Optimizer(TrainConfig::Optimizer kind, double lr) : kind_(kind), lr_(lr) {}

  void step(std::map<std::string, Matrix>& params, const std::map<std::string, Matrix>& grads) {
    if (kind_ == TrainConfig::Optimizer::sgd) {
      for (auto& [name, p] : params) {
        auto it = grads.find(name);
        if (it != grads.end()) p -= lr_ * it->second;
      }
      return;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const Matrix& gr = it->second;
      // untouched parameters (zero grad, e.g. unsampled supernet branches)
      // keep their moments frozen
      if ((gr.array() == 0.0).all()) continue;
      auto [mi, inserted_m] = m_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
      auto [vi, inserted_v] = v_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
      Matrix& mm = mi->second;
      Matrix& vv = vi->second;
      mm = beta1_ * mm + (1.0 - beta1_) * gr;
      vv = beta2_ * vv + (1.0 - beta2_) * gr.cwiseProduct(gr);
      p.array() -= lr_ * (mm.array() / bc1) / ((vv.array() / bc2).sqrt() + eps_);
    }
  }

 private:
  TrainConfig::Optimizer kind_;
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::map<std::string, Matrix> m_, v_;
};

std::map<std::string, Matrix> collect_grads(const ParamVars& pv) {
  std::map<std::string, Matrix> g;
  for (const auto& [name, var] : pv) g.emplace(name, var.grad());
  return g;
}

ad::Var batch_loss(ad::Graph& g, const ModelArtifact& m, ParamVars& pv, const Batch& b,
                   const LossSpec& loss) {
  ad::Var probs = model_forward(g, m.arch, pv, b);
  ad::Var l = ad::bce(probs, b.labels);
  if (loss.kind == LossSpec::Kind::distill) {
    if (loss.teacher == nullptr)
      throw std::invalid_argument("train_model: distill loss requires a teacher");
    const Vector tprobs = predict(*loss.teacher, b);
    l = ad::add(l, ad::scale(ad::soft_bce(probs, tprobs), loss.delta));
  }
  return l;
}

}  // namespace

ModelArtifact train_model(const ModelArtifact& model, const DataView& data,
                          const TrainConfig& cfg, const LossSpec& loss, TrainStats* stats) {
  if (data.empty()) throw std::invalid_argument("train_model: empty data");
  if (cfg.learning_rate < 0.0) throw std::invalid_argument("train_model: negative learning rate");
  if (cfg.epochs < 1) throw std::invalid_argument("train_model: epochs must be >= 1");
  ModelArtifact out = model;
  Optimizer opt(cfg.optimizer, cfg.learning_rate);
  const int n = static_cast<int>(data.size());
  const int bsz = std::max(1, std::min(cfg.batch_size, n));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  if (stats) stats->epoch_losses.clear();

  for (int e = 0; e < cfg.epochs; ++e) {
    if (cfg.shuffle) {
      Rng rng(mix_seed(cfg.seed, 0xE90C + static_cast<std::uint64_t>(cfg.epoch_offset + e)));
      rng.shuffle(order);
    }
    double loss_sum = 0.0;
    for (int start = 0, bi = 0; start < n; start += bsz, ++bi) {
      const int end = std::min(n, start + bsz);
      std::vector<int> idx(order.begin() + start, order.begin() + end);
      const Batch b = make_batch(data, idx);
      ad::Graph g;
      ParamVars pv = bind_params(g, out.params);
      ad::Var l = batch_loss(g, out, pv, b, loss);
      const double lv = l.value()(0, 0);
      if (!std::isfinite(lv))
        throw std::runtime_error("train_model: non-finite loss at epoch " + std::to_string(e) +
                                 " batch " + std::to_string(bi));
      g.backward(l);
      opt.step(out.params, collect_grads(pv));
      loss_sum += lv * static_cast<double>(end - start);
    }
    if (stats) stats->epoch_losses.push_back(loss_sum / static_cast<double>(n));
  }
  return out;
}

double dataset_loss(const ModelArtifact& m, const DataView& data, const LossSpec& loss,
                    int batch_size) {
  if (data.empty()) throw std::invalid_argument("dataset_loss: empty data");
  double total = 0.0;
  std::vector<int> idx;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(static_cast<int>(i));
    const Batch b = make_batch(data, idx);
    ad::Graph g;
    ParamVars pv;
    for (const auto& [name, mat] : m.params) pv.emplace(name, g.constant(mat));
    ad::Var l = batch_loss(g, m, pv, b, loss);
    total += l.value()(0, 0) * static_cast<double>(end - start);
  }
  return total / static_cast<double>(data.size());
}

std::map<std::string, Matrix> loss_gradient(const ModelArtifact& m, const DataView& data,
                                            const LossSpec& loss, int batch_size) {
  if (data.empty()) throw std::invalid_argument("loss_gradient: empty data");
  std::map<std::string, Matrix> acc;
  for (const auto& [name, mat] : m.params) acc.emplace(name, Matrix::Zero(mat.rows(), mat.cols()));
  std::vector<int> idx;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(static_cast<int>(i));
    const Batch b = make_batch(data, idx);
    ad::Graph g;
    ParamVars pv = bind_params(g, m.params);
    ad::Var l = batch_loss(g, m, pv, b, loss);
    g.backward(l);
    const double w = static_cast<double>(end - start) / static_cast<double>(data.size());
    for (auto& [name, a] : acc) a += w * pv.at(name).grad();
  }
  return acc;
}

// ---- losses and AUC --------------------------------------------------------

namespace {

constexpr double kProbEps = 1e-7;

double clamped(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

double soft_ce(const Vector& probs, const Vector& targets) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = clamped(probs(i));
    const double q = clamped(targets(i));
    s -= q * std::log(p) + (1.0 - q) * std::log(1.0 - p);
  }
  return s / static_cast<double>(probs.size());
}

}  // namespace

double ce_loss(const Vector& probs, const Vector& labels) {
  if (probs.size() != labels.size() || probs.size() == 0)
    throw std::invalid_argument("ce_loss: size mismatch or empty");
  double s = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = clamped(probs(i));
    s -= labels(i) * std::log(p) + (1.0 - labels(i)) * std::log(1.0 - p);
  }
  return s / static_cast<double>(probs.size());
}

double distill_loss(const Vector& student_probs, const Vector& teacher_probs,
                    const Vector& labels, double delta) {
  if (student_probs.size() != teacher_probs.size())
    throw std::invalid_argument("distill_loss: student/teacher size mismatch");
  return ce_loss(student_probs, labels) + delta * soft_ce(student_probs, teacher_probs);
}

double auc(const Vector& scores, const Vector& labels) {
  const Eigen::Index n = scores.size();
  if (n != labels.size() || n == 0) throw std::invalid_argument("auc: size mismatch or empty");
  long npos = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels(i) != 0.0 && labels(i) != 1.0)
      throw std::invalid_argument("auc: labels must be 0/1");
    if (labels(i) == 1.0) ++npos;
  }
  const long nneg = n - npos;
  if (npos == 0 || nneg == 0) throw std::invalid_argument("auc: needs both classes");
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return scores(a) < scores(b); });
  double pos_rank_sum = 0.0;
  Eigen::Index i = 0;
  while (i < n) {
    Eigen::Index j = i;
    while (j < n && scores(idx[static_cast<std::size_t>(j)]) ==
                        scores(idx[static_cast<std::size_t>(i)]))
      ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based ranks i+1 .. j
    for (Eigen::Index k = i; k < j; ++k)
      if (labels(idx[static_cast<std::size_t>(k)]) == 1.0) pos_rank_sum += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(npos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(nneg));
}

double evaluate_auc(const ModelArtifact& m, const DataView& data, int batch_size) {
  return auc(predict(m, data, batch_size), labels_of(data));
}

}  // namespace longtail
