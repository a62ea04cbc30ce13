#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "longtail/flops.hpp"

using namespace longtail;

namespace {

// Independent oracle: counts FLOPs by enumerating the computation node by
// node (loops over output positions and window taps) instead of closed forms.
long walk_op(const OpSpec& op, int T) {
  long n = 0;
  const int cin = op.channels_in, cout = op.channels_out;
  switch (op.kind) {
    case OpKind::conv1d:
    case OpKind::dilated_conv1d:
      for (int t = 0; t < T; ++t)
        for (int co = 0; co < cout; ++co) {
          for (int j = 0; j < op.kernel; ++j)
            for (int ci = 0; ci < cin; ++ci) n += 2;
          n += 1;  // bias
        }
      break;
    case OpKind::avg_pool1d:
    case OpKind::max_pool1d:
      for (int t = 0; t < T; ++t)
        for (int c = 0; c < cin; ++c) n += op.kernel;
      break;
    case OpKind::recurrent:
      for (int t = 0; t < T; ++t) {
        for (int gate = 0; gate < 4; ++gate)
          for (int h = 0; h < cout; ++h) {
            for (int i = 0; i < cin + cout; ++i) n += 2;
            n += 1;  // bias
          }
        n += 5L * cout;  // gate nonlinearities
        n += 4L * cout;  // cell/output elementwise arithmetic
      }
      break;
    case OpKind::self_attention: {
      const int d = cin, h = op.heads, dh = d / op.heads;
      for (int proj = 0; proj < 4; ++proj)
        for (int t = 0; t < T; ++t)
          for (int o = 0; o < d; ++o) {
            for (int i = 0; i < d; ++i) n += 2;
            n += 1;
          }
      for (int hh = 0; hh < h; ++hh)
        for (int t1 = 0; t1 < T; ++t1)
          for (int t2 = 0; t2 < T; ++t2) {
            for (int c = 0; c < dh; ++c) n += 2;  // score dot
            n += 1;                               // scaling
          }
      for (int hh = 0; hh < h; ++hh)
        for (int t1 = 0; t1 < T; ++t1) n += 3L * T;  // softmax row
      for (int hh = 0; hh < h; ++hh)
        for (int t1 = 0; t1 < T; ++t1)
          for (int c = 0; c < dh; ++c)
            for (int t2 = 0; t2 < T; ++t2) n += 2;  // weighted sum
      break;
    }
  }
  return n;
}

long walk_genotype(const Genotype& g, const SpaceSpec& space, const SeqShape& shape) {
  long n = 0;
  for (const auto& layer : g.layers) {
    n += walk_op(space.op_candidates[static_cast<std::size_t>(layer.op_index)], shape.seq_len);
    for (std::size_t e = 0; e < layer.residual_set.size(); ++e)
      for (int t = 0; t < shape.seq_len; ++t)
        for (int c = 0; c < shape.channels; ++c) n += 1;  // residual add
  }
  n += 3L * space.n_layers;  // aggregation softmax
  for (int l = 0; l < space.n_layers; ++l)
    for (int t = 0; t < shape.seq_len; ++t)
      for (int c = 0; c < shape.channels; ++c) n += l == 0 ? 1 : 2;  // attentive sum
  return n;
}

Genotype random_genotype(const SpaceSpec& space, Rng& rng) {
  Genotype g;
  for (int l = 0; l < space.n_layers; ++l) {
    Genotype::Layer layer;
    layer.input_index = rng.uniform_int(l + 1);
    layer.op_index = rng.uniform_int(static_cast<int>(space.op_candidates.size()));
    for (int e = 0; e <= l; ++e)
      if (rng.uniform() < 0.5) layer.residual_set.push_back(e);
    g.layers.push_back(layer);
  }
  return g;
}

}  // namespace

TEST_CASE("conv with kernel 1 counts the same as a dense layer") {
  const int d = 15, T = 32;
  OpSpec conv{OpKind::conv1d, 1, 1, d, d, 1};
  CHECK(op_flops(conv, T) == dense_flops(d, d, T));
}

TEST_CASE("hand-checked op counts") {
  // 2*3*2*2*4 + 2*4 = 104
  CHECK(op_flops({OpKind::conv1d, 3, 1, 2, 2, 1}, 4) == 104);
  // one window of 3
  CHECK(op_flops({OpKind::avg_pool1d, 3, 1, 1, 1, 1}, 1) == 3);
  // dilation does not change the tap count
  CHECK(op_flops({OpKind::dilated_conv1d, 3, 2, 2, 2, 1}, 4) ==
        op_flops({OpKind::conv1d, 3, 1, 2, 2, 1}, 4));
}

TEST_CASE("even kernels are rejected") {
  CHECK_THROWS_AS(op_flops({OpKind::conv1d, 4, 1, 2, 2, 1}, 4), std::invalid_argument);
  CHECK_THROWS_AS(op_flops({OpKind::max_pool1d, 2, 1, 2, 2, 1}, 4), std::invalid_argument);
}

TEST_CASE("every candidate op matches the enumeration oracle") {
  const SpaceSpec space = SpaceSpec::standard(3, 15, 3);
  for (const OpSpec& op : space.op_candidates) {
    CAPTURE(op.name());
    CHECK(op_flops(op, 32) == walk_op(op, 32));
  }
}

TEST_CASE("single-layer genotype total is the op plus aggregation cost") {
  SpaceSpec space = SpaceSpec::standard(1, 8, 2);
  Genotype g;
  g.layers.push_back({0, 2, {}});
  const SeqShape shape{16, 8};
  const FlopsReport r = genotype_flops(g, space, shape);
  CHECK(r.total == op_flops(space.op_candidates[2], 16) + aggregation_flops(1, shape));
  CHECK(r.total == r.per_layer[0] + r.residual_total + r.aggregation);
}

TEST_CASE("the all-max genotype normalizes to exactly 1") {
  const SpaceSpec space = SpaceSpec::standard(3, 10, 2);
  const SeqShape shape{24, 10};
  int max_op = 0;
  long best = -1;
  for (std::size_t i = 0; i < space.op_candidates.size(); ++i) {
    const long f = op_flops(space.op_candidates[i], shape.seq_len);
    if (f > best) {
      best = f;
      max_op = static_cast<int>(i);
    }
  }
  Genotype g;
  for (int l = 0; l < space.n_layers; ++l) {
    Genotype::Layer layer;
    layer.input_index = l;  // chain
    layer.op_index = max_op;
    for (int e = 0; e <= l; ++e) layer.residual_set.push_back(e);
    g.layers.push_back(layer);
  }
  const FlopsReport r = genotype_flops(g, space, shape);
  CHECK(r.total == r.reference);
  CHECK(r.normalized == 1.0);
}

TEST_CASE("random genotypes match the graph-walking oracle exactly") {
  const SpaceSpec space = SpaceSpec::standard(3, 12, 3);
  const SeqShape shape{20, 12};
  Rng rng(5);
  for (int i = 0; i < 25; ++i) {
    const Genotype g = random_genotype(space, rng);
    const FlopsReport r = genotype_flops(g, space, shape);
    CHECK(r.total == walk_genotype(g, space, shape));
    CHECK(r.normalized > 0.0);
    CHECK(r.normalized <= 1.0);
  }
}

TEST_CASE("adding a residual edge never decreases the total") {
  const SpaceSpec space = SpaceSpec::standard(3, 12, 3);
  const SeqShape shape{20, 12};
  Rng rng(6);
  for (int i = 0; i < 10; ++i) {
    Genotype g = random_genotype(space, rng);
    g.layers[2].residual_set.clear();
    const long before = genotype_flops(g, space, shape).total;
    g.layers[2].residual_set = {0};
    CHECK(genotype_flops(g, space, shape).total >= before);
  }
}

TEST_CASE("one-hot arch weights reduce expected flops to the genotype count") {
  const SpaceSpec space = SpaceSpec::standard(2, 8, 2);
  const SeqShape shape{12, 8};
  Rng rng(7);
  const Genotype g = random_genotype(space, rng);
  ArchWeights aw = ArchWeights::zeros(space);
  const double big = 60.0;
  for (int l = 0; l < space.n_layers; ++l) {
    const auto sl = static_cast<std::size_t>(l);
    aw.op_logits[sl].array() = -big;
    aw.op_logits[sl](g.layers[sl].op_index) = big;
    aw.input_logits[sl].array() = -big;
    aw.input_logits[sl](g.layers[sl].input_index) = big;
    for (std::size_t e = 0; e < aw.residual_logits[sl].size(); ++e) {
      const bool in_set = std::find(g.layers[sl].residual_set.begin(),
                                    g.layers[sl].residual_set.end(),
                                    static_cast<int>(e)) != g.layers[sl].residual_set.end();
      aw.residual_logits[sl][e] = in_set ? Eigen::Vector2d(big, -big) : Eigen::Vector2d(-big, big);
    }
  }
  const double expected = expected_flops(aw, space, shape);
  const double exact = static_cast<double>(genotype_flops(g, space, shape).total);
  CHECK(std::abs(expected - exact) < 1e-9 * exact);
}

TEST_CASE("uniform logits over two ops average their counts") {
  SpaceSpec space;
  space.n_layers = 1;
  space.channels = 6;
  space.heads = 2;
  space.op_candidates = {{OpKind::conv1d, 3, 1, 6, 6, 1}, {OpKind::avg_pool1d, 3, 1, 6, 6, 1}};
  const SeqShape shape{10, 6};
  const ArchWeights aw = ArchWeights::zeros(space);  // uniform everywhere
  const double a = static_cast<double>(op_flops(space.op_candidates[0], 10));
  const double b = static_cast<double>(op_flops(space.op_candidates[1], 10));
  const double fixed = static_cast<double>(aggregation_flops(1, shape)) +
                       0.5 * static_cast<double>(residual_edge_flops(shape));
  CHECK(expected_flops(aw, space, shape) == doctest::Approx((a + b) / 2.0 + fixed).epsilon(1e-12));
}

TEST_CASE("expected flops gradient matches central differences") {
  const SpaceSpec space = SpaceSpec::standard(2, 8, 2);
  const SeqShape shape{12, 8};
  Rng rng(11);
  ArchWeights aw = ArchWeights::zeros(space);
  for (int l = 0; l < space.n_layers; ++l) {
    const auto sl = static_cast<std::size_t>(l);
    for (Eigen::Index i = 0; i < aw.op_logits[sl].size(); ++i)
      aw.op_logits[sl](i) = rng.normal();
    for (auto& pair : aw.residual_logits[sl]) {
      pair(0) = rng.normal();
      pair(1) = rng.normal();
    }
  }
  const ArchWeights grad = expected_flops_grad(aw, space, shape);
  const double h = 1e-5;
  double worst = 0.0;
  auto fd_at = [&](double* slot, double analytic) {
    const double orig = *slot;
    *slot = orig + h;
    const double fp = expected_flops(aw, space, shape);
    *slot = orig - h;
    const double fm = expected_flops(aw, space, shape);
    *slot = orig;
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-3});
    worst = std::max(worst, std::abs(fd - analytic) / denom);
  };
  for (int l = 0; l < space.n_layers; ++l) {
    const auto sl = static_cast<std::size_t>(l);
    for (Eigen::Index i = 0; i < aw.op_logits[sl].size(); ++i)
      fd_at(&aw.op_logits[sl](i), grad.op_logits[sl](i));
    for (std::size_t e = 0; e < aw.residual_logits[sl].size(); ++e)
      for (int k = 0; k < 2; ++k)
        fd_at(&aw.residual_logits[sl][e](k), grad.residual_logits[sl][e](k));
    for (Eigen::Index i = 0; i < aw.input_logits[sl].size(); ++i)
      fd_at(&aw.input_logits[sl](i), 0.0);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("model flops: heavy exceeds light for matching shapes") {
  ArchConfig heavy;
  heavy.n_encoder_layers = 6;
  ArchConfig light = heavy;
  light.n_encoder_layers = 3;
  CHECK(model_flops(heavy) > model_flops(light));
  heavy.encoder_kind = EncoderKind::attention;
  light.encoder_kind = EncoderKind::attention;
  CHECK(model_flops(heavy) > model_flops(light));
}
