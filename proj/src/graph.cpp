#include "longtail/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace longtail::ad {

const Matrix& Var::value() const { return g->val(id); }
const Matrix& Var::grad() const { return g->grd(id); }

Var Graph::make(Matrix value, bool requires_grad, std::function<void(Graph&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  n.backprop = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Graph::backward(Var loss) {
  if (!loss.valid() || loss.g != this)
    throw std::invalid_argument("backward: loss not owned by this graph");
  if (val(loss.id).size() != 1)
    throw std::invalid_argument("backward: loss must be a 1x1 value");
  if (!requires_grad(loss.id)) return;
  grd(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.requires_grad && n.backprop) n.backprop(*this);
  }
}

namespace {

Graph& graph_of(std::initializer_list<Var> vs) {
  Graph* g = vs.begin()->g;
  for (const Var& v : vs)
    if (v.g != g || v.id < 0) throw std::invalid_argument("op: vars invalid or from different graphs");
  return *g;
}

bool any_grad(Graph& g, std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (g.requires_grad(v.id)) return true;
  return false;
}

void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols)
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                                std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                                std::to_string(m.cols()));
}

}  // namespace

Var add(Var a, Var b) {
  Graph& g = graph_of({a, b});
  require_shape(g.val(b.id), g.val(a.id).rows(), g.val(a.id).cols(), "add rhs");
  Matrix v = g.val(a.id) + g.val(b.id);
  if (!any_grad(g, {a, b})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [a, b, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    if (gg.requires_grad(a.id)) gg.grd(a.id) += go;
    if (gg.requires_grad(b.id)) gg.grd(b.id) += go;
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of({a, b});
  require_shape(g.val(b.id), g.val(a.id).rows(), g.val(a.id).cols(), "sub rhs");
  Matrix v = g.val(a.id) - g.val(b.id);
  if (!any_grad(g, {a, b})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [a, b, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    if (gg.requires_grad(a.id)) gg.grd(a.id) += go;
    if (gg.requires_grad(b.id)) gg.grd(b.id) -= go;
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of({a, b});
  require_shape(g.val(b.id), g.val(a.id).rows(), g.val(a.id).cols(), "mul rhs");
  Matrix v = g.val(a.id).cwiseProduct(g.val(b.id));
  if (!any_grad(g, {a, b})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [a, b, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    if (gg.requires_grad(a.id)) gg.grd(a.id) += go.cwiseProduct(gg.val(b.id));
    if (gg.requires_grad(b.id)) gg.grd(b.id) += go.cwiseProduct(gg.val(a.id));
  });
}

Var matmul(Var a, Var b) {
  Graph& g = graph_of({a, b});
  if (g.val(a.id).cols() != g.val(b.id).rows())
    throw std::invalid_argument("matmul: inner dimensions disagree");
  Matrix v = g.val(a.id) * g.val(b.id);
  if (!any_grad(g, {a, b})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [a, b, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    if (gg.requires_grad(a.id)) gg.grd(a.id).noalias() += go * gg.val(b.id).transpose();
    if (gg.requires_grad(b.id)) gg.grd(b.id).noalias() += gg.val(a.id).transpose() * go;
  });
}

Var scale(Var x, double c) {
  Graph& g = graph_of({x});
  Matrix v = g.val(x.id) * c;
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, c, out](Graph& gg) {
    gg.grd(x.id) += gg.grd(out) * c;
  });
}

Var mul_scalar(Var x, Var s) {
  Graph& g = graph_of({x, s});
  if (g.val(s.id).size() != 1) throw std::invalid_argument("mul_scalar: s must be 1x1");
  const double sv = g.val(s.id)(0, 0);
  Matrix v = g.val(x.id) * sv;
  if (!any_grad(g, {x, s})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, s, sv, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    if (gg.requires_grad(x.id)) gg.grd(x.id) += go * sv;
    if (gg.requires_grad(s.id)) gg.grd(s.id)(0, 0) += go.cwiseProduct(gg.val(x.id)).sum();
  });
}

Var relu(Var x) {
  Graph& g = graph_of({x});
  Matrix v = g.val(x.id).cwiseMax(0.0);
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, out](Graph& gg) {
    gg.grd(x.id) += gg.grd(out).cwiseProduct(
        (gg.val(x.id).array() > 0.0).cast<double>().matrix());
  });
}

Var tanh_op(Var x) {
  Graph& g = graph_of({x});
  Matrix v = g.val(x.id).array().tanh().matrix();
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, out](Graph& gg) {
    const Matrix& y = gg.val(out);
    gg.grd(x.id).array() += gg.grd(out).array() * (1.0 - y.array().square());
  });
}

Var sigmoid_op(Var x) {
  Graph& g = graph_of({x});
  Matrix v = (1.0 / (1.0 + (-g.val(x.id).array()).exp())).matrix();
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, out](Graph& gg) {
    const Matrix& y = gg.val(out);
    gg.grd(x.id).array() += gg.grd(out).array() * y.array() * (1.0 - y.array());
  });
}

Var softmax_rows(Var x) {
  Graph& g = graph_of({x});
  Matrix v = g.val(x.id);
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mx = v.row(r).maxCoeff();
    v.row(r) = (v.row(r).array() - mx).exp();
    v.row(r) /= v.row(r).sum();
  }
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, out](Graph& gg) {
    const Matrix& y = gg.val(out);
    const Matrix& go = gg.grd(out);
    Matrix& gx = gg.grd(x.id);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = go.row(r).dot(y.row(r));
      gx.row(r).array() += y.row(r).array() * (go.row(r).array() - dot);
    }
  });
}

Var concat_cols(Var a, Var b) {
  Graph& g = graph_of({a, b});
  if (g.val(a.id).rows() != g.val(b.id).rows())
    throw std::invalid_argument("concat_cols: row counts disagree");
  const Eigen::Index ca = g.val(a.id).cols(), cb = g.val(b.id).cols();
  Matrix v(g.val(a.id).rows(), ca + cb);
  v.leftCols(ca) = g.val(a.id);
  v.rightCols(cb) = g.val(b.id);
  if (!any_grad(g, {a, b})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [a, b, ca, cb, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    if (gg.requires_grad(a.id)) gg.grd(a.id) += go.leftCols(ca);
    if (gg.requires_grad(b.id)) gg.grd(b.id) += go.rightCols(cb);
  });
}

Var pick(Var x, int row, int col) {
  Graph& g = graph_of({x});
  Matrix v(1, 1);
  v(0, 0) = g.val(x.id)(row, col);
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, row, col, out](Graph& gg) {
    gg.grd(x.id)(row, col) += gg.grd(out)(0, 0);
  });
}

Var mean_all(Var x) {
  Graph& g = graph_of({x});
  const double n = static_cast<double>(g.val(x.id).size());
  Matrix v(1, 1);
  v(0, 0) = g.val(x.id).sum() / n;
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, n, out](Graph& gg) {
    gg.grd(x.id).array() += gg.grd(out)(0, 0) / n;
  });
}

Var sum_all(Var x) {
  Graph& g = graph_of({x});
  Matrix v(1, 1);
  v(0, 0) = g.val(x.id).sum();
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, out](Graph& gg) {
    gg.grd(x.id).array() += gg.grd(out)(0, 0);
  });
}

Var st_gate(Var p, double detached) {
  Graph& g = graph_of({p});
  if (g.val(p.id).size() != 1) throw std::invalid_argument("st_gate: p must be 1x1");
  Matrix v(1, 1);
  v(0, 0) = 1.0 + (g.val(p.id)(0, 0) - detached);
  if (!g.requires_grad(p.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [p, out](Graph& gg) {
    gg.grd(p.id)(0, 0) += gg.grd(out)(0, 0);
  });
}

Var tile_rows(Var x, int times) {
  Graph& g = graph_of({x});
  if (times <= 0) throw std::invalid_argument("tile_rows: times must be positive");
  const Matrix& xv = g.val(x.id);
  const Eigen::Index r = xv.rows();
  Matrix v(r * times, xv.cols());
  for (int i = 0; i < times; ++i) v.middleRows(static_cast<Eigen::Index>(i) * r, r) = xv;
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, times, r, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    for (int i = 0; i < times; ++i)
      gg.grd(x.id) += go.middleRows(static_cast<Eigen::Index>(i) * r, r);
  });
}

Var linear(Var x, Var w, Var bias) {
  Graph& g = graph_of({x, w, bias});
  const Matrix& xv = g.val(x.id);
  const Matrix& wv = g.val(w.id);
  if (xv.cols() != wv.rows())
    throw std::invalid_argument("linear: input dim " + std::to_string(xv.cols()) +
                                " does not match weight rows " + std::to_string(wv.rows()));
  require_shape(g.val(bias.id), 1, wv.cols(), "linear bias");
  Matrix v = xv * wv;
  v.rowwise() += g.val(bias.id).row(0);
  if (!any_grad(g, {x, w, bias})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, w, bias, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    if (gg.requires_grad(x.id)) gg.grd(x.id).noalias() += go * gg.val(w.id).transpose();
    if (gg.requires_grad(w.id)) gg.grd(w.id).noalias() += gg.val(x.id).transpose() * go;
    if (gg.requires_grad(bias.id)) gg.grd(bias.id) += go.colwise().sum();
  });
}

Var embedding(Var table, const std::vector<int>& ids) {
  Graph& g = graph_of({table});
  const Matrix& tv = g.val(table.id);
  Matrix v(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows())
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    v.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  if (!g.requires_grad(table.id)) return g.constant(std::move(v));
  const int out = g.size();
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  return g.make(std::move(v), true, [table, ids_copy, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    Matrix& gt = gg.grd(table.id);
    for (std::size_t i = 0; i < ids_copy->size(); ++i)
      gt.row((*ids_copy)[i]) += go.row(static_cast<Eigen::Index>(i));
  });
}

Var conv1d(Var x, Var w, Var bias, int batch, int seq_len, int kernel, int dilation) {
  Graph& g = graph_of({x, w, bias});
  if (kernel <= 0 || kernel % 2 == 0)
    throw std::invalid_argument("conv1d: kernel must be odd and positive, got " + std::to_string(kernel));
  if (dilation <= 0) throw std::invalid_argument("conv1d: dilation must be positive");
  const Matrix& xv = g.val(x.id);
  const Matrix& wv = g.val(w.id);
  const Eigen::Index cin = xv.cols();
  if (xv.rows() != static_cast<Eigen::Index>(batch) * seq_len)
    throw std::invalid_argument("conv1d: rows do not equal batch*seq_len");
  if (wv.rows() != static_cast<Eigen::Index>(kernel) * cin)
    throw std::invalid_argument("conv1d: weight rows must be kernel*Cin");
  const Eigen::Index cout = wv.cols();
  require_shape(g.val(bias.id), 1, cout, "conv1d bias");

  const int center = kernel / 2;
  Matrix v = Matrix::Zero(xv.rows(), cout);
  v.rowwise() += g.val(bias.id).row(0);
  for (int j = 0; j < kernel; ++j) {
    const int off = (j - center) * dilation;
    const int t0 = std::max(0, -off);
    const int t1 = std::min(seq_len, seq_len - off);
    if (t0 >= t1) continue;
    const Eigen::Index len = t1 - t0;
    const auto wj = wv.middleRows(static_cast<Eigen::Index>(j) * cin, cin);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index dst = static_cast<Eigen::Index>(b) * seq_len + t0;
      v.middleRows(dst, len).noalias() += xv.middleRows(dst + off, len) * wj;
    }
  }
  if (!any_grad(g, {x, w, bias})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, w, bias, batch, seq_len, kernel, dilation, cin, center,
                                     out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    const Matrix& xv2 = gg.val(x.id);
    const Matrix& wv2 = gg.val(w.id);
    const bool need_x = gg.requires_grad(x.id);
    const bool need_w = gg.requires_grad(w.id);
    for (int j = 0; j < kernel; ++j) {
      const int off = (j - center) * dilation;
      const int t0 = std::max(0, -off);
      const int t1 = std::min(seq_len, seq_len - off);
      if (t0 >= t1) continue;
      const Eigen::Index len = t1 - t0;
      const auto wj = wv2.middleRows(static_cast<Eigen::Index>(j) * cin, cin);
      for (int b = 0; b < batch; ++b) {
        const Eigen::Index dst = static_cast<Eigen::Index>(b) * seq_len + t0;
        if (need_x)
          gg.grd(x.id).middleRows(dst + off, len).noalias() += go.middleRows(dst, len) * wj.transpose();
        if (need_w)
          gg.grd(w.id).middleRows(static_cast<Eigen::Index>(j) * cin, cin).noalias() +=
              xv2.middleRows(dst + off, len).transpose() * go.middleRows(dst, len);
      }
    }
    if (gg.requires_grad(bias.id)) gg.grd(bias.id) += go.colwise().sum();
  });
}

Var avg_pool1d(Var x, int batch, int seq_len, int kernel) {
  Graph& g = graph_of({x});
  if (kernel <= 0 || kernel % 2 == 0)
    throw std::invalid_argument("avg_pool1d: kernel must be odd and positive");
  const Matrix& xv = g.val(x.id);
  const int center = kernel / 2;
  Matrix v = Matrix::Zero(xv.rows(), xv.cols());
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < seq_len; ++t) {
      const int lo = std::max(0, t - center);
      const int hi = std::min(seq_len - 1, t + center);
      const Eigen::Index row = static_cast<Eigen::Index>(b) * seq_len + t;
      const Eigen::Index base = static_cast<Eigen::Index>(b) * seq_len;
      v.row(row) = xv.middleRows(base + lo, hi - lo + 1).colwise().sum() /
                   static_cast<double>(hi - lo + 1);
    }
  }
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, batch, seq_len, center, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    Matrix& gx = gg.grd(x.id);
    for (int b = 0; b < batch; ++b) {
      for (int t = 0; t < seq_len; ++t) {
        const int lo = std::max(0, t - center);
        const int hi = std::min(seq_len - 1, t + center);
        const Eigen::Index row = static_cast<Eigen::Index>(b) * seq_len + t;
        const Eigen::Index base = static_cast<Eigen::Index>(b) * seq_len;
        const double inv = 1.0 / static_cast<double>(hi - lo + 1);
        for (int u = lo; u <= hi; ++u) gx.row(base + u) += go.row(row) * inv;
      }
    }
  });
}

Var max_pool1d(Var x, int batch, int seq_len, int kernel) {
  Graph& g = graph_of({x});
  if (kernel <= 0 || kernel % 2 == 0)
    throw std::invalid_argument("max_pool1d: kernel must be odd and positive");
  const Matrix& xv = g.val(x.id);
  const int center = kernel / 2;
  Matrix v(xv.rows(), xv.cols());
  auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(xv.size()));
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < seq_len; ++t) {
      const int lo = std::max(0, t - center);
      const int hi = std::min(seq_len - 1, t + center);
      const Eigen::Index row = static_cast<Eigen::Index>(b) * seq_len + t;
      const Eigen::Index base = static_cast<Eigen::Index>(b) * seq_len;
      for (Eigen::Index c = 0; c < xv.cols(); ++c) {
        double best = -std::numeric_limits<double>::infinity();
        int best_u = lo;
        for (int u = lo; u <= hi; ++u) {
          const double cand = xv(base + u, c);
          if (cand > best) {
            best = cand;
            best_u = u;
          }
        }
        v(row, c) = best;
        (*arg)[static_cast<std::size_t>(row * xv.cols() + c)] = best_u;
      }
    }
  }
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, batch, seq_len, arg, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    Matrix& gx = gg.grd(x.id);
    const Eigen::Index cols = go.cols();
    for (int b = 0; b < batch; ++b) {
      for (int t = 0; t < seq_len; ++t) {
        const Eigen::Index row = static_cast<Eigen::Index>(b) * seq_len + t;
        const Eigen::Index base = static_cast<Eigen::Index>(b) * seq_len;
        for (Eigen::Index c = 0; c < cols; ++c) {
          const int u = (*arg)[static_cast<std::size_t>(row * cols + c)];
          gx(base + u, c) += go(row, c);
        }
      }
    }
  });
}

namespace {

struct LstmWorkspace {
  // per time step, each [B x H]
  std::vector<Matrix> gi, gf, gg_, go_, tc, cell;
};

}  // namespace

Var lstm_seq(Var x, Var wx, Var wh, Var bias, int batch, int seq_len) {
  Graph& g = graph_of({x, wx, wh, bias});
  const Matrix& xv = g.val(x.id);
  const Matrix& wxv = g.val(wx.id);
  const Matrix& whv = g.val(wh.id);
  const Eigen::Index cin = xv.cols();
  if (wxv.rows() != cin) throw std::invalid_argument("lstm_seq: wx rows must equal input dim");
  if (wxv.cols() % 4 != 0) throw std::invalid_argument("lstm_seq: wx cols must be 4*hidden");
  const Eigen::Index hid = wxv.cols() / 4;
  require_shape(whv, hid, 4 * hid, "lstm_seq wh");
  require_shape(g.val(bias.id), 1, 4 * hid, "lstm_seq bias");
  if (xv.rows() != static_cast<Eigen::Index>(batch) * seq_len)
    throw std::invalid_argument("lstm_seq: rows do not equal batch*seq_len");

  auto ws = std::make_shared<LstmWorkspace>();
  ws->gi.resize(static_cast<std::size_t>(seq_len));
  ws->gf.resize(static_cast<std::size_t>(seq_len));
  ws->gg_.resize(static_cast<std::size_t>(seq_len));
  ws->go_.resize(static_cast<std::size_t>(seq_len));
  ws->tc.resize(static_cast<std::size_t>(seq_len));
  ws->cell.resize(static_cast<std::size_t>(seq_len));

  Matrix v(xv.rows(), hid);
  Matrix h = Matrix::Zero(batch, hid);
  Matrix c = Matrix::Zero(batch, hid);
  Matrix xt(batch, cin);
  for (int t = 0; t < seq_len; ++t) {
    for (int b = 0; b < batch; ++b) xt.row(b) = xv.row(static_cast<Eigen::Index>(b) * seq_len + t);
    Matrix z = xt * wxv + h * whv;
    z.rowwise() += g.val(bias.id).row(0);
    const auto su = static_cast<std::size_t>(t);
    ws->gi[su] = (1.0 / (1.0 + (-z.leftCols(hid).array()).exp())).matrix();
    ws->gf[su] = (1.0 / (1.0 + (-z.middleCols(hid, hid).array()).exp())).matrix();
    ws->gg_[su] = z.middleCols(2 * hid, hid).array().tanh().matrix();
    ws->go_[su] = (1.0 / (1.0 + (-z.rightCols(hid).array()).exp())).matrix();
    c = ws->gf[su].cwiseProduct(c) + ws->gi[su].cwiseProduct(ws->gg_[su]);
    ws->cell[su] = c;
    ws->tc[su] = c.array().tanh().matrix();
    h = ws->go_[su].cwiseProduct(ws->tc[su]);
    for (int b = 0; b < batch; ++b) v.row(static_cast<Eigen::Index>(b) * seq_len + t) = h.row(b);
  }

  if (!any_grad(g, {x, wx, wh, bias})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, wx, wh, bias, batch, seq_len, cin, hid, ws, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    const Matrix& xv2 = gg.val(x.id);
    const Matrix& wxv2 = gg.val(wx.id);
    const Matrix& whv2 = gg.val(wh.id);
    const Matrix& yv = gg.val(out);
    const bool need_x = gg.requires_grad(x.id);
    const bool need_wx = gg.requires_grad(wx.id);
    const bool need_wh = gg.requires_grad(wh.id);
    const bool need_b = gg.requires_grad(bias.id);

    Matrix dh_rec = Matrix::Zero(batch, hid);
    Matrix dc_next = Matrix::Zero(batch, hid);
    Matrix xt(batch, cin), hprev(batch, hid), dz(batch, 4 * hid);
    for (int t = seq_len - 1; t >= 0; --t) {
      const auto su = static_cast<std::size_t>(t);
      Matrix dh = dh_rec;
      for (int b = 0; b < batch; ++b)
        dh.row(b) += go.row(static_cast<Eigen::Index>(b) * seq_len + t);

      const Matrix& i = ws->gi[su];
      const Matrix& f = ws->gf[su];
      const Matrix& gc = ws->gg_[su];
      const Matrix& o = ws->go_[su];
      const Matrix& tc = ws->tc[su];

      Matrix do_ = dh.cwiseProduct(tc);
      Matrix dc = dc_next + dh.cwiseProduct(o).cwiseProduct(
                                (1.0 - tc.array().square()).matrix());
      Matrix di = dc.cwiseProduct(gc);
      Matrix cprev = t > 0 ? ws->cell[su - 1] : Matrix::Zero(batch, hid);
      Matrix df = dc.cwiseProduct(cprev);
      Matrix dg = dc.cwiseProduct(i);
      dc_next = dc.cwiseProduct(f);

      dz.leftCols(hid) = di.cwiseProduct(i).cwiseProduct((1.0 - i.array()).matrix());
      dz.middleCols(hid, hid) = df.cwiseProduct(f).cwiseProduct((1.0 - f.array()).matrix());
      dz.middleCols(2 * hid, hid) = dg.cwiseProduct((1.0 - gc.array().square()).matrix());
      dz.rightCols(hid) = do_.cwiseProduct(o).cwiseProduct((1.0 - o.array()).matrix());

      for (int b = 0; b < batch; ++b) {
        xt.row(b) = xv2.row(static_cast<Eigen::Index>(b) * seq_len + t);
        if (t > 0)
          hprev.row(b) = yv.row(static_cast<Eigen::Index>(b) * seq_len + t - 1);
        else
          hprev.row(b).setZero();
      }
      if (need_wx) gg.grd(wx.id).noalias() += xt.transpose() * dz;
      if (need_wh) gg.grd(wh.id).noalias() += hprev.transpose() * dz;
      if (need_b) gg.grd(bias.id) += dz.colwise().sum();
      if (need_x) {
        const Matrix dxt = dz * wxv2.transpose();
        for (int b = 0; b < batch; ++b)
          gg.grd(x.id).row(static_cast<Eigen::Index>(b) * seq_len + t) += dxt.row(b);
      }
      dh_rec.noalias() = dz * whv2.transpose();
    }
  });
}

namespace {

struct AttnWorkspace {
  Matrix q, k, vv, z;                // [B*T x d]
  std::vector<Matrix> attn;          // per (sample, head), [T x T]
};

}  // namespace

Var self_attention(Var x, Var wq, Var bq, Var wk, Var bk, Var wv, Var bv, Var wo, Var bo,
                   const Vector& key_mask, int batch, int seq_len, int heads) {
  Graph& g = graph_of({x, wq, bq, wk, bk, wv, bv, wo, bo});
  const Matrix& xv = g.val(x.id);
  const Eigen::Index d = xv.cols();
  if (heads <= 0 || d % heads != 0)
    throw std::invalid_argument("self_attention: model dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
  if (xv.rows() != static_cast<Eigen::Index>(batch) * seq_len)
    throw std::invalid_argument("self_attention: rows do not equal batch*seq_len");
  if (key_mask.size() != xv.rows())
    throw std::invalid_argument("self_attention: key_mask size mismatch");
  const Eigen::Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto ws = std::make_shared<AttnWorkspace>();
  ws->q = g.val(x.id) * g.val(wq.id);
  ws->q.rowwise() += g.val(bq.id).row(0);
  ws->k = g.val(x.id) * g.val(wk.id);
  ws->k.rowwise() += g.val(bk.id).row(0);
  ws->vv = g.val(x.id) * g.val(wv.id);
  ws->vv.rowwise() += g.val(bv.id).row(0);
  ws->z.resize(xv.rows(), d);
  ws->attn.resize(static_cast<std::size_t>(batch) * heads);

  for (int b = 0; b < batch; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * seq_len;
    for (int h = 0; h < heads; ++h) {
      const auto qh = ws->q.block(base, h * dh, seq_len, dh);
      const auto kh = ws->k.block(base, h * dh, seq_len, dh);
      const auto vh = ws->vv.block(base, h * dh, seq_len, dh);
      Matrix s = qh * kh.transpose() * inv_sqrt;
      for (int tk = 0; tk < seq_len; ++tk)
        if (key_mask(base + tk) == 0.0) s.col(tk).array() = -1e9;
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      ws->attn[static_cast<std::size_t>(b) * heads + h] = s;
      ws->z.block(base, h * dh, seq_len, dh).noalias() = s * vh;
    }
  }
  Matrix v = ws->z * g.val(wo.id);
  v.rowwise() += g.val(bo.id).row(0);

  if (!any_grad(g, {x, wq, bq, wk, bk, wv, bv, wo, bo})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, wq, bq, wk, bk, wv, bv, wo, bo, batch, seq_len, heads, d,
                                     dh, inv_sqrt, ws, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    // output projection
    if (gg.requires_grad(wo.id)) gg.grd(wo.id).noalias() += ws->z.transpose() * go;
    if (gg.requires_grad(bo.id)) gg.grd(bo.id) += go.colwise().sum();
    Matrix gz = go * gg.val(wo.id).transpose();

    Matrix gq = Matrix::Zero(gz.rows(), d);
    Matrix gk = Matrix::Zero(gz.rows(), d);
    Matrix gv = Matrix::Zero(gz.rows(), d);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index base = static_cast<Eigen::Index>(b) * seq_len;
      for (int h = 0; h < heads; ++h) {
        const Matrix& a = ws->attn[static_cast<std::size_t>(b) * heads + h];
        const auto gzh = gz.block(base, h * dh, seq_len, dh);
        const auto vh = ws->vv.block(base, h * dh, seq_len, dh);
        Matrix ga = gzh * vh.transpose();
        gv.block(base, h * dh, seq_len, dh).noalias() += a.transpose() * gzh;
        // softmax backward then score scaling
        Matrix gs(a.rows(), a.cols());
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
          const double dot = ga.row(r).dot(a.row(r));
          gs.row(r).array() = a.row(r).array() * (ga.row(r).array() - dot);
        }
        gs *= inv_sqrt;
        const auto qh = ws->q.block(base, h * dh, seq_len, dh);
        const auto kh = ws->k.block(base, h * dh, seq_len, dh);
        gq.block(base, h * dh, seq_len, dh).noalias() += gs * kh;
        gk.block(base, h * dh, seq_len, dh).noalias() += gs.transpose() * qh;
      }
    }
    const Matrix& xv2 = gg.val(x.id);
    if (gg.requires_grad(wq.id)) gg.grd(wq.id).noalias() += xv2.transpose() * gq;
    if (gg.requires_grad(bq.id)) gg.grd(bq.id) += gq.colwise().sum();
    if (gg.requires_grad(wk.id)) gg.grd(wk.id).noalias() += xv2.transpose() * gk;
    if (gg.requires_grad(bk.id)) gg.grd(bk.id) += gk.colwise().sum();
    if (gg.requires_grad(wv.id)) gg.grd(wv.id).noalias() += xv2.transpose() * gv;
    if (gg.requires_grad(bv.id)) gg.grd(bv.id) += gv.colwise().sum();
    if (gg.requires_grad(x.id))
      gg.grd(x.id).noalias() += gq * gg.val(wq.id).transpose() +
                                gk * gg.val(wk.id).transpose() +
                                gv * gg.val(wv.id).transpose();
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Graph& g = graph_of({x, gamma, beta});
  const Matrix& xv = g.val(x.id);
  const Eigen::Index d = xv.cols();
  require_shape(g.val(gamma.id), 1, d, "layer_norm gamma");
  require_shape(g.val(beta.id), 1, d, "layer_norm beta");
  auto xhat = std::make_shared<Matrix>(xv.rows(), d);
  auto inv_std = std::make_shared<Vector>(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(r) = is;
    xhat->row(r) = ((xv.row(r).array() - mu) * is).matrix();
  }
  Matrix v = xhat->array().rowwise() * g.val(gamma.id).row(0).array();
  v.rowwise() += g.val(beta.id).row(0);
  if (!any_grad(g, {x, gamma, beta})) return g.constant(std::move(v));
  const int out = g.size();
  return g.make(std::move(v), true, [x, gamma, beta, d, xhat, inv_std, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    if (gg.requires_grad(gamma.id))
      gg.grd(gamma.id) += go.cwiseProduct(*xhat).colwise().sum();
    if (gg.requires_grad(beta.id)) gg.grd(beta.id) += go.colwise().sum();
    if (gg.requires_grad(x.id)) {
      Matrix& gx = gg.grd(x.id);
      const auto gamma_row = gg.val(gamma.id).row(0);
      const double dn = static_cast<double>(d);
      for (Eigen::Index r = 0; r < go.rows(); ++r) {
        const Eigen::RowVectorXd gxhat = go.row(r).cwiseProduct(gamma_row);
        const double m1 = gxhat.mean();
        const double m2 = gxhat.cwiseProduct(xhat->row(r)).mean();
        gx.row(r).array() += (*inv_std)(r) * (gxhat.array() - m1 - xhat->row(r).array() * m2);
        (void)dn;
      }
    }
  });
}

Var masked_mean(Var x, const Vector& mask, int batch, int seq_len) {
  Graph& g = graph_of({x});
  const Matrix& xv = g.val(x.id);
  if (xv.rows() != static_cast<Eigen::Index>(batch) * seq_len)
    throw std::invalid_argument("masked_mean: rows do not equal batch*seq_len");
  if (mask.size() != xv.rows()) throw std::invalid_argument("masked_mean: mask size mismatch");
  auto counts = std::make_shared<Vector>(batch);
  Matrix v = Matrix::Zero(batch, xv.cols());
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * seq_len;
    double n = 0.0;
    for (int t = 0; t < seq_len; ++t) {
      const double m = mask(base + t);
      if (m != 0.0) {
        v.row(b) += m * xv.row(base + t);
        n += m;
      }
    }
    if (n <= 0.0) throw std::invalid_argument("masked_mean: sample " + std::to_string(b) +
                                              " has no unmasked positions");
    (*counts)(b) = n;
    v.row(b) /= n;
  }
  if (!g.requires_grad(x.id)) return g.constant(std::move(v));
  const int out = g.size();
  auto mask_copy = std::make_shared<Vector>(mask);
  return g.make(std::move(v), true, [x, batch, seq_len, counts, mask_copy, out](Graph& gg) {
    const Matrix& go = gg.grd(out);
    Matrix& gx = gg.grd(x.id);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index base = static_cast<Eigen::Index>(b) * seq_len;
      const double inv = 1.0 / (*counts)(b);
      for (int t = 0; t < seq_len; ++t) {
        const double m = (*mask_copy)(base + t);
        if (m != 0.0) gx.row(base + t) += go.row(b) * (m * inv);
      }
    }
  });
}

namespace {

Var bce_impl(Var probs, const Vector& targets, double eps, const char* what) {
  Graph& g = graph_of({probs});
  const Matrix& pv = g.val(probs.id);
  if (pv.cols() != 1 || pv.rows() != targets.size())
    throw std::invalid_argument(std::string(what) + ": probs must be [n x 1] matching targets");
  const Eigen::Index n = pv.rows();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = std::clamp(pv(i, 0), eps, 1.0 - eps);
    const double y = targets(i);
    loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  Matrix v(1, 1);
  v(0, 0) = loss / static_cast<double>(n);
  if (!g.requires_grad(probs.id)) return g.constant(std::move(v));
  const int out = g.size();
  auto t = std::make_shared<Vector>(targets);
  return g.make(std::move(v), true, [probs, t, eps, n, out](Graph& gg) {
    const double gscale = gg.grd(out)(0, 0) / static_cast<double>(n);
    const Matrix& pv2 = gg.val(probs.id);
    Matrix& gp = gg.grd(probs.id);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double p = pv2(i, 0);
      if (p <= eps || p >= 1.0 - eps) continue;  // clamped region: zero gradient
      const double y = (*t)(i);
      gp(i, 0) += gscale * (-y / p + (1.0 - y) / (1.0 - p));
    }
  });
}

}  // namespace

Var bce(Var probs, const Vector& labels, double eps) {
  return bce_impl(probs, labels, eps, "bce");
}

Var soft_bce(Var probs, const Vector& targets, double eps) {
  return bce_impl(probs, targets, eps, "soft_bce");
}

}  // namespace longtail::ad
