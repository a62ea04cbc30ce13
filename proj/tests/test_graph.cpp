#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "longtail/graph.hpp"
#include "oracles.hpp"

#include <map>
#include <string>

using namespace longtail;
namespace ad = longtail::ad;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = scale * rng.normal();
  return m;
}

// Generic harness: params is a name->Matrix store, `build` assembles the loss
// from graph leaves bound to those matrices.
using Builder = std::function<ad::Var(ad::Graph&, std::map<std::string, ad::Var>&)>;

double check_grads(std::map<std::string, Matrix>& params, const Builder& build, double h = 1e-5) {
  // analytic pass
  std::vector<std::string> names;
  for (auto& [k, v] : params) names.push_back(k);
  ad::Graph g;
  std::map<std::string, ad::Var> vars;
  for (auto& n : names) vars[n] = g.leaf(params[n]);
  ad::Var loss = build(g, vars);
  g.backward(loss);
  std::vector<Matrix> analytic;
  std::vector<Matrix*> ptrs;
  for (auto& n : names) {
    analytic.push_back(vars[n].grad());
    ptrs.push_back(&params[n]);
  }
  auto eval = [&]() {
    ad::Graph g2;
    std::map<std::string, ad::Var> v2;
    for (auto& n : names) v2[n] = g2.leaf(params[n]);
    return build(g2, v2).value()(0, 0);
  };
  return oracle::fd_max_rel_err(ptrs, analytic, eval, h);
}

// random projection so the scalar loss is sensitive to every output entry
ad::Var project(ad::Graph& g, ad::Var x, Rng& rng) {
  Matrix r = random_matrix(rng, static_cast<int>(x.value().rows()),
                           static_cast<int>(x.value().cols()));
  return ad::sum_all(ad::mul(x, g.constant(r)));
}

}  // namespace

TEST_CASE("dense chain gradients match finite differences") {
  Rng rng(7);
  std::map<std::string, Matrix> p;
  p["x"] = random_matrix(rng, 5, 4);
  p["w1"] = random_matrix(rng, 4, 3, 0.7);
  p["b1"] = random_matrix(rng, 1, 3, 0.1);
  p["w2"] = random_matrix(rng, 3, 2, 0.7);
  p["b2"] = random_matrix(rng, 1, 2, 0.1);
  Rng proj(11);
  auto b = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    ad::Var h1 = ad::relu(ad::linear(v["x"], v["w1"], v["b1"]));
    ad::Var h2 = ad::tanh_op(ad::linear(h1, v["w2"], v["b2"]));
    Rng local(11);
    return project(g, ad::sigmoid_op(h2), local);
  };
  CHECK(check_grads(p, b) < 1e-6);
}

TEST_CASE("elementwise and scalar ops gradients") {
  Rng rng(13);
  std::map<std::string, Matrix> p;
  p["a"] = random_matrix(rng, 3, 4);
  p["b"] = random_matrix(rng, 3, 4);
  p["s"] = random_matrix(rng, 1, 1);
  auto b = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    ad::Var m = ad::mul(ad::add(v["a"], ad::scale(v["b"], 0.5)), ad::sub(v["a"], v["b"]));
    ad::Var sc = ad::mul_scalar(m, v["s"]);
    ad::Var pk = ad::pick(ad::softmax_rows(sc), 1, 2);
    return ad::add(ad::mean_all(sc), ad::add(pk, ad::mean_all(ad::concat_cols(m, sc))));
  };
  CHECK(check_grads(p, b) < 1e-6);
}

TEST_CASE("matmul gradient") {
  Rng rng(17);
  std::map<std::string, Matrix> p;
  p["a"] = random_matrix(rng, 4, 3);
  p["b"] = random_matrix(rng, 3, 5);
  auto b = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    Rng local(5);
    return project(g, ad::matmul(v["a"], v["b"]), local);
  };
  CHECK(check_grads(p, b) < 1e-6);
}

TEST_CASE("embedding gradient scatters to looked-up rows") {
  Rng rng(19);
  std::map<std::string, Matrix> p;
  p["tab"] = random_matrix(rng, 6, 3);
  std::vector<int> ids = {0, 2, 2, 5, 1, 0};
  auto b = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    Rng local(23);
    return project(g, ad::embedding(v["tab"], ids), local);
  };
  CHECK(check_grads(p, b) < 1e-6);
}

TEST_CASE("conv1d gradients, standard and dilated") {
  for (int kernel : {1, 3, 5}) {
    for (int dilation : {1, 2}) {
      Rng rng(100 + kernel * 10 + dilation);
      const int batch = 2, seq = 6, cin = 3, cout = 2;
      std::map<std::string, Matrix> p;
      p["x"] = random_matrix(rng, batch * seq, cin);
      p["w"] = random_matrix(rng, kernel * cin, cout, 0.6);
      p["b"] = random_matrix(rng, 1, cout, 0.1);
      auto b = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
        Rng local(3);
        return project(g, ad::conv1d(v["x"], v["w"], v["b"], batch, seq, kernel, dilation), local);
      };
      CAPTURE(kernel);
      CAPTURE(dilation);
      CHECK(check_grads(p, b) < 1e-6);
    }
  }
}

TEST_CASE("pooling gradients") {
  Rng rng(31);
  const int batch = 2, seq = 5, ch = 3;
  std::map<std::string, Matrix> p;
  p["x"] = random_matrix(rng, batch * seq, ch);
  auto avg = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    Rng local(9);
    return project(g, ad::avg_pool1d(v["x"], batch, seq, 3), local);
  };
  CHECK(check_grads(p, avg) < 1e-6);
  auto mx = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    Rng local(9);
    return project(g, ad::max_pool1d(v["x"], batch, seq, 3), local);
  };
  // h small enough not to change any argmax for this draw
  CHECK(check_grads(p, mx, 1e-6) < 1e-4);
}

TEST_CASE("lstm_seq gradients match finite differences") {
  Rng rng(37);
  const int batch = 2, seq = 5, cin = 3, hid = 4;
  std::map<std::string, Matrix> p;
  p["x"] = random_matrix(rng, batch * seq, cin);
  p["wx"] = random_matrix(rng, cin, 4 * hid, 0.5);
  p["wh"] = random_matrix(rng, hid, 4 * hid, 0.5);
  p["b"] = random_matrix(rng, 1, 4 * hid, 0.1);
  auto b = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    Rng local(41);
    return project(g, ad::lstm_seq(v["x"], v["wx"], v["wh"], v["b"], batch, seq), local);
  };
  CHECK(check_grads(p, b) < 1e-5);
}

TEST_CASE("self_attention gradients match finite differences") {
  Rng rng(43);
  const int batch = 2, seq = 4, d = 4, heads = 2;
  std::map<std::string, Matrix> p;
  p["x"] = random_matrix(rng, batch * seq, d);
  for (const char* n : {"wq", "wk", "wv", "wo"}) p[n] = random_matrix(rng, d, d, 0.5);
  for (const char* n : {"bq", "bk", "bv", "bo"}) p[n] = random_matrix(rng, 1, d, 0.1);
  Vector mask(batch * seq);
  mask << 1, 1, 1, 0, 1, 1, 0, 0;
  auto b = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    Rng local(47);
    return project(g,
                   ad::self_attention(v["x"], v["wq"], v["bq"], v["wk"], v["bk"], v["wv"],
                                      v["bv"], v["wo"], v["bo"], mask, batch, seq, heads),
                   local);
  };
  CHECK(check_grads(p, b) < 1e-5);
}

TEST_CASE("layer_norm gradients") {
  Rng rng(53);
  std::map<std::string, Matrix> p;
  p["x"] = random_matrix(rng, 5, 4);
  p["gamma"] = random_matrix(rng, 1, 4, 0.5);
  p["beta"] = random_matrix(rng, 1, 4, 0.2);
  auto b = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    Rng local(59);
    return project(g, ad::layer_norm(v["x"], v["gamma"], v["beta"]), local);
  };
  CHECK(check_grads(p, b) < 1e-5);
}

TEST_CASE("masked_mean gradients") {
  Rng rng(61);
  const int batch = 3, seq = 4, ch = 2;
  std::map<std::string, Matrix> p;
  p["x"] = random_matrix(rng, batch * seq, ch);
  Vector mask(batch * seq);
  mask << 1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0;
  auto b = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    Rng local(67);
    return project(g, ad::masked_mean(v["x"], mask, batch, seq), local);
  };
  CHECK(check_grads(p, b) < 1e-6);
}

TEST_CASE("bce and soft_bce gradients through a sigmoid head") {
  Rng rng(71);
  std::map<std::string, Matrix> p;
  p["z"] = random_matrix(rng, 6, 1);
  Vector labels(6), soft(6);
  labels << 1, 0, 1, 1, 0, 0;
  for (int i = 0; i < 6; ++i) soft(i) = rng.uniform(0.1, 0.9);
  auto b = [&](ad::Graph& g, std::map<std::string, ad::Var>& v) {
    (void)g;
    ad::Var probs = ad::sigmoid_op(v["z"]);
    return ad::add(ad::bce(probs, labels), ad::scale(ad::soft_bce(probs, soft), 0.7));
  };
  CHECK(check_grads(p, b) < 1e-6);
}

TEST_CASE("st_gate forwards exactly one and passes unit gradient") {
  ad::Graph g;
  ad::Var logits = g.leaf(Matrix::Constant(1, 3, 0.3));
  ad::Var probs = ad::softmax_rows(logits);
  ad::Var pm = ad::pick(probs, 0, 1);
  ad::Var gate = ad::st_gate(pm, pm.value()(0, 0));
  CHECK(gate.value()(0, 0) == 1.0);
  ad::Var x = g.leaf(Matrix::Constant(2, 2, 3.0));
  ad::Var y = ad::mul_scalar(x, gate);
  CHECK(y.value()(0, 0) == 3.0);  // forward identical to the plain branch
  g.backward(ad::mean_all(y));
  // d mean(y) / d pm = sum(x)/4 = 3; softmax jacobian spreads it over logits
  CHECK(pm.grad()(0, 0) == doctest::Approx(3.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  ad::Graph g;
  ad::Var x = g.leaf(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
}
