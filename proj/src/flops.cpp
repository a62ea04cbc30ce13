#include "longtail/flops.hpp"

#include <algorithm>
#include <stdexcept>

namespace longtail {

std::string OpSpec::name() const {
  switch (kind) {
    case OpKind::conv1d:
      return "conv_k" + std::to_string(kernel);
    case OpKind::dilated_conv1d:
      return "dconv_k" + std::to_string(kernel) + "_d" + std::to_string(dilation);
    case OpKind::avg_pool1d:
      return "avgpool_k" + std::to_string(kernel);
    case OpKind::max_pool1d:
      return "maxpool_k" + std::to_string(kernel);
    case OpKind::recurrent:
      return "lstm";
    case OpKind::self_attention:
      return "attn_h" + std::to_string(heads);
  }
  return "unknown";
}

void OpSpec::validate() const {
  switch (kind) {
    case OpKind::conv1d:
    case OpKind::dilated_conv1d:
    case OpKind::avg_pool1d:
    case OpKind::max_pool1d:
      if (kernel < 1 || kernel % 2 == 0)
        throw std::invalid_argument("OpSpec " + name() + ": kernel must be odd and positive");
      break;
    case OpKind::recurrent:
    case OpKind::self_attention:
      break;
  }
  if (dilation < 1) throw std::invalid_argument("OpSpec " + name() + ": dilation must be >= 1");
  if (channels_in < 1 || channels_out < 1)
    throw std::invalid_argument("OpSpec " + name() + ": channels must be >= 1");
  if (kind == OpKind::self_attention) {
    if (heads < 1 || channels_in % heads != 0)
      throw std::invalid_argument("OpSpec " + name() + ": heads must divide channels");
  }
  if (kind == OpKind::avg_pool1d || kind == OpKind::max_pool1d || kind == OpKind::recurrent ||
      kind == OpKind::self_attention) {
    if (channels_in != channels_out)
      throw std::invalid_argument("OpSpec " + name() + ": op is shape preserving");
  }
}

long dense_flops(int in_dim, int out_dim, int positions) {
  return (2L * in_dim * out_dim + out_dim) * positions;
}

long op_flops(const OpSpec& op, int seq_len) {
  op.validate();
  if (seq_len < 1) throw std::invalid_argument("op_flops: seq_len must be >= 1");
  const long t = seq_len;
  const long cin = op.channels_in;
  const long cout = op.channels_out;
  switch (op.kind) {
    case OpKind::conv1d:
    case OpKind::dilated_conv1d:
      // 2*k*Cin*Cout*T multiply-adds plus Cout*T bias adds
      return 2L * op.kernel * cin * cout * t + cout * t;
    case OpKind::avg_pool1d:
    case OpKind::max_pool1d:
      return static_cast<long>(op.kernel) * cin * t;
    case OpKind::recurrent:
      // per step: 4 gates of 2*H*(Cin+H) MAC-FLOPs + 4H bias, 5H gate
      // nonlinearities, 4H elementwise cell/output arithmetic
      return t * (8L * cout * (cin + cout) + 13L * cout);
    case OpKind::self_attention: {
      const long d = cin;
      const long h = op.heads;
      // q/k/v/out projections + scores + scaling + softmax + context
      return 8L * d * d * t + 4L * d * t + 4L * d * t * t + 4L * h * t * t;
    }
  }
  throw std::logic_error("op_flops: unknown op kind");
}

long residual_edge_flops(const SeqShape& shape) {
  return static_cast<long>(shape.channels) * shape.seq_len;
}

long aggregation_flops(int n_layers, const SeqShape& shape) {
  // softmax over n scores + weighted sum of n [T x C] outputs
  return 3L * n_layers +
         (2L * n_layers - 1) * shape.channels * shape.seq_len;
}

void SpaceSpec::validate() const {
  if (n_layers < 1) throw std::invalid_argument("SpaceSpec: n_layers must be >= 1");
  if (channels < 1) throw std::invalid_argument("SpaceSpec: channels must be >= 1");
  if (op_candidates.empty()) throw std::invalid_argument("SpaceSpec: no op candidates");
  for (const OpSpec& op : op_candidates) {
    op.validate();
    if (op.channels_in != channels || op.channels_out != channels)
      throw std::invalid_argument("SpaceSpec: op " + op.name() +
                                  " does not preserve the space channel width");
  }
}

SpaceSpec SpaceSpec::standard(int n_layers, int channels, int heads) {
  SpaceSpec s;
  s.n_layers = n_layers;
  s.channels = channels;
  s.heads = heads;
  for (int k : {1, 3, 5, 7})
    s.op_candidates.push_back({OpKind::conv1d, k, 1, channels, channels, 1});
  for (int k : {1, 3, 5, 7})
    s.op_candidates.push_back({OpKind::dilated_conv1d, k, 2, channels, channels, 1});
  s.op_candidates.push_back({OpKind::avg_pool1d, 3, 1, channels, channels, 1});
  s.op_candidates.push_back({OpKind::max_pool1d, 3, 1, channels, channels, 1});
  s.op_candidates.push_back({OpKind::recurrent, 1, 1, channels, channels, 1});
  s.op_candidates.push_back({OpKind::self_attention, 1, 1, channels, channels, heads});
  return s;
}

void Genotype::validate(const SpaceSpec& space) const {
  if (static_cast<int>(layers.size()) != space.n_layers)
    throw std::invalid_argument("Genotype: layer count does not match the space");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& layer = layers[l];
    if (layer.input_index < 0 || layer.input_index > static_cast<int>(l))
      throw std::invalid_argument("Genotype: layer " + std::to_string(l + 1) +
                                  " input index out of range");
    if (layer.op_index < 0 || layer.op_index >= static_cast<int>(space.op_candidates.size()))
      throw std::invalid_argument("Genotype: layer " + std::to_string(l + 1) +
                                  " op index out of range");
    int prev = -1;
    for (int e : layer.residual_set) {
      if (e < 0 || e > static_cast<int>(l))
        throw std::invalid_argument("Genotype: layer " + std::to_string(l + 1) +
                                    " residual edge out of range");
      if (e <= prev)
        throw std::invalid_argument("Genotype: residual_set must be strictly increasing");
      prev = e;
    }
  }
}

std::string Genotype::describe(const SpaceSpec& space) const {
  std::string out;
  auto src = [](int i) { return i == 0 ? std::string("input") : "layer" + std::to_string(i); };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& layer = layers[l];
    out += "layer" + std::to_string(l + 1) + ": " +
           space.op_candidates[static_cast<std::size_t>(layer.op_index)].name() + "(" +
           src(layer.input_index) + ")";
    if (!layer.residual_set.empty()) {
      out += " + residual{";
      for (std::size_t i = 0; i < layer.residual_set.size(); ++i)
        out += (i ? "," : "") + src(layer.residual_set[i]);
      out += "}";
    }
    out += "\n";
  }
  return out;
}

FlopsReport genotype_flops(const Genotype& g, const SpaceSpec& space, const SeqShape& shape) {
  space.validate();
  g.validate(space);
  FlopsReport r;
  const long edge = residual_edge_flops(shape);
  for (const Genotype::Layer& layer : g.layers) {
    r.per_layer.push_back(
        op_flops(space.op_candidates[static_cast<std::size_t>(layer.op_index)], shape.seq_len));
    r.residual_total += edge * static_cast<long>(layer.residual_set.size());
  }
  r.aggregation = aggregation_flops(space.n_layers, shape);
  r.total = r.residual_total + r.aggregation;
  for (long f : r.per_layer) r.total += f;
  r.reference = space_max_flops(space, shape);
  r.normalized = static_cast<double>(r.total) / static_cast<double>(r.reference);
  return r;
}

namespace {

long extreme_space_flops(const SpaceSpec& space, const SeqShape& shape, bool maximum) {
  space.validate();
  long best_op = op_flops(space.op_candidates[0], shape.seq_len);
  for (const OpSpec& op : space.op_candidates) {
    const long f = op_flops(op, shape.seq_len);
    best_op = maximum ? std::max(best_op, f) : std::min(best_op, f);
  }
  long total = static_cast<long>(space.n_layers) * best_op +
               aggregation_flops(space.n_layers, shape);
  if (maximum) {
    const long n_edges = static_cast<long>(space.n_layers) * (space.n_layers + 1) / 2;
    total += n_edges * residual_edge_flops(shape);
  }
  return total;
}

}  // namespace

long space_max_flops(const SpaceSpec& space, const SeqShape& shape) {
  return extreme_space_flops(space, shape, true);
}

long space_min_flops(const SpaceSpec& space, const SeqShape& shape) {
  return extreme_space_flops(space, shape, false);
}

// ---- expected FLOPs over the architecture distribution ----------------------

namespace {

Vector softmax_vec(const Vector& logits) {
  Vector p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

}  // namespace

ArchWeights ArchWeights::zeros(const SpaceSpec& space) {
  ArchWeights aw;
  for (int l = 0; l < space.n_layers; ++l) {
    aw.input_logits.push_back(Vector::Zero(l + 1));
    aw.op_logits.push_back(Vector::Zero(static_cast<Eigen::Index>(space.op_candidates.size())));
    std::vector<Eigen::Vector2d> edges;
    for (int e = 0; e <= l; ++e) edges.push_back(Eigen::Vector2d::Zero());
    aw.residual_logits.push_back(std::move(edges));
  }
  aw.agg_scores = Vector::Zero(space.n_layers);
  aw.tau = 1.0;
  return aw;
}

void ArchWeights::validate(const SpaceSpec& space) const {
  if (tau <= 0.0) throw std::invalid_argument("ArchWeights: tau must be positive");
  if (static_cast<int>(input_logits.size()) != space.n_layers ||
      static_cast<int>(op_logits.size()) != space.n_layers ||
      static_cast<int>(residual_logits.size()) != space.n_layers ||
      agg_scores.size() != space.n_layers)
    throw std::invalid_argument("ArchWeights: layer count mismatch");
  for (int l = 0; l < space.n_layers; ++l) {
    if (input_logits[static_cast<std::size_t>(l)].size() != l + 1)
      throw std::invalid_argument("ArchWeights: input logits length must be layer index + 1");
    if (op_logits[static_cast<std::size_t>(l)].size() !=
        static_cast<Eigen::Index>(space.op_candidates.size()))
      throw std::invalid_argument("ArchWeights: op logits length mismatch");
    if (residual_logits[static_cast<std::size_t>(l)].size() != static_cast<std::size_t>(l + 1))
      throw std::invalid_argument("ArchWeights: residual edge count mismatch");
    for (const auto& v : {input_logits[static_cast<std::size_t>(l)],
                          op_logits[static_cast<std::size_t>(l)]})
      if (!v.allFinite()) throw std::invalid_argument("ArchWeights: non-finite logits");
  }
}

double expected_flops(const ArchWeights& aw, const SpaceSpec& space, const SeqShape& shape) {
  aw.validate(space);
  Vector opf(static_cast<Eigen::Index>(space.op_candidates.size()));
  for (Eigen::Index i = 0; i < opf.size(); ++i)
    opf(i) = static_cast<double>(
        op_flops(space.op_candidates[static_cast<std::size_t>(i)], shape.seq_len));
  const double edge = static_cast<double>(residual_edge_flops(shape));
  double total = static_cast<double>(aggregation_flops(space.n_layers, shape));
  for (int l = 0; l < space.n_layers; ++l) {
    const Vector p = softmax_vec(aw.op_logits[static_cast<std::size_t>(l)]);
    total += p.dot(opf);
    for (const Eigen::Vector2d& pair : aw.residual_logits[static_cast<std::size_t>(l)]) {
      const Vector q = softmax_vec(pair);
      total += q(0) * edge;
    }
  }
  return total;
}

ArchWeights expected_flops_grad(const ArchWeights& aw, const SpaceSpec& space,
                                const SeqShape& shape) {
  aw.validate(space);
  Vector opf(static_cast<Eigen::Index>(space.op_candidates.size()));
  for (Eigen::Index i = 0; i < opf.size(); ++i)
    opf(i) = static_cast<double>(
        op_flops(space.op_candidates[static_cast<std::size_t>(i)], shape.seq_len));
  const double edge = static_cast<double>(residual_edge_flops(shape));

  ArchWeights grad = ArchWeights::zeros(space);
  grad.tau = aw.tau;
  for (int l = 0; l < space.n_layers; ++l) {
    const auto sl = static_cast<std::size_t>(l);
    const Vector p = softmax_vec(aw.op_logits[sl]);
    const double mean_f = p.dot(opf);
    grad.op_logits[sl] = p.cwiseProduct(opf.array().matrix() - Vector::Constant(opf.size(), mean_f));
    for (std::size_t e = 0; e < aw.residual_logits[sl].size(); ++e) {
      const Vector q = softmax_vec(aw.residual_logits[sl][e]);
      const double d = q(0) * q(1) * edge;  // softmax pair jacobian
      grad.residual_logits[sl][e] = Eigen::Vector2d(d, -d);
    }
  }
  return grad;
}

// ---- whole-model accounting --------------------------------------------------

namespace {

long mlp_flops(int in_dim, const std::vector<int>& dims) {
  long total = 0;
  int d = in_dim;
  for (int out : dims) {
    total += dense_flops(d, out) + out;  // dense + relu
    d = out;
  }
  return total;
}

long head_flops(const ArchConfig& base, int seq_out_dim) {
  const int profile_out =
      base.profile_mlp_dims.empty() ? base.profile_dim : base.profile_mlp_dims.back();
  const int in = profile_out + seq_out_dim;
  long total = mlp_flops(in, base.head_mlp_dims);
  const int last = base.head_mlp_dims.empty() ? in : base.head_mlp_dims.back();
  total += dense_flops(last, 1) + 1;  // output dense + sigmoid
  return total;
}

long masked_mean_flops(const SeqShape& shape) {
  return 2L * shape.channels * shape.seq_len + shape.channels;
}

long input_mask_flops(const SeqShape& shape) {
  return static_cast<long>(shape.channels) * shape.seq_len;
}

long layer_norm_flops(const SeqShape& shape) {
  return 8L * shape.channels * shape.seq_len;
}

}  // namespace

long encoder_flops(const ArchConfig& arch) {
  arch.validate();
  const SeqShape shape{arch.max_seq_len, arch.hidden_dim};
  long total = 0;
  if (arch.encoder_kind == EncoderKind::recurrent) {
    int in = arch.resolved_embed_dim();
    for (int l = 0; l < arch.n_encoder_layers; ++l) {
      total += op_flops({OpKind::recurrent, 1, 1, in, arch.hidden_dim, 1}, arch.max_seq_len);
      in = arch.hidden_dim;
    }
  } else {
    const long t = arch.max_seq_len;
    for (int l = 0; l < arch.n_encoder_layers; ++l) {
      total += op_flops({OpKind::self_attention, 1, 1, arch.hidden_dim, arch.hidden_dim,
                         arch.attention_heads},
                        arch.max_seq_len);
      total += 2 * layer_norm_flops(shape);
      total += dense_flops(arch.hidden_dim, arch.intermediate_dim, arch.max_seq_len) +
               static_cast<long>(arch.intermediate_dim) * t;  // ffn1 + relu
      total += dense_flops(arch.intermediate_dim, arch.hidden_dim, arch.max_seq_len);
      total += 2L * arch.hidden_dim * t;  // two residual adds
    }
  }
  return total;
}

long model_flops(const ModelArch& arch) {
  if (std::holds_alternative<ArchConfig>(arch)) {
    const ArchConfig& a = std::get<ArchConfig>(arch);
    a.validate();
    const SeqShape in_shape{a.max_seq_len, a.resolved_embed_dim()};
    const SeqShape out_shape{a.max_seq_len, a.hidden_dim};
    long total = mlp_flops(a.profile_dim, a.profile_mlp_dims);
    total += input_mask_flops(in_shape);
    if (a.encoder_kind == EncoderKind::attention)
      total += static_cast<long>(a.resolved_embed_dim()) * a.max_seq_len;  // position add
    total += encoder_flops(a);
    total += masked_mean_flops(out_shape);
    total += head_flops(a, a.hidden_dim);
    return total;
  }
  const SearchedArch& sa = std::get<SearchedArch>(arch);
  sa.base.validate();
  const SeqShape shape{sa.base.max_seq_len, sa.space.channels};
  long total = mlp_flops(sa.base.profile_dim, sa.base.profile_mlp_dims);
  total += input_mask_flops(shape);
  total += static_cast<long>(sa.space.channels) * sa.base.max_seq_len;  // position add
  total += genotype_flops(sa.genotype, sa.space, shape).total;
  total += masked_mean_flops(shape);
  total += head_flops(sa.base, sa.space.channels);
  return total;
}

}  // namespace longtail
