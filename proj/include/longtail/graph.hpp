#pragma once

// Reverse-mode autodiff tape over dense Eigen matrices. A Graph is built per
// forward pass; backward() walks the tape in reverse creation order. Sequence
// activations use the [batch*seq_len x channels] row layout with rows grouped
// per sample.

#include "longtail/common.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace longtail::ad {

class Graph;

struct Var {
  Graph* g = nullptr;
  int id = -1;

  bool valid() const { return g != nullptr && id >= 0; }
  const Matrix& value() const;
  const Matrix& grad() const;
};

class Graph {
 public:
  Graph() { nodes_.reserve(256); }

  Var constant(Matrix v) { return make(std::move(v), false, nullptr); }

  // Leaf with gradient tracking (parameters).
  Var leaf(Matrix v) { return make(std::move(v), true, nullptr); }

  Var make(Matrix value, bool requires_grad, std::function<void(Graph&)> back);

  Matrix& val(int id) { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Matrix& grd(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Matrix& grd(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  // Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be 1x1.
  void backward(Var loss);

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(Graph&)> backprop;  // null for leaves/constants
  };
  std::vector<Node> nodes_;
};

// ---- generic ops ----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);           // elementwise
Var matmul(Var a, Var b);
Var scale(Var x, double c);
Var mul_scalar(Var x, Var s);    // s is 1x1, broadcast multiply
Var relu(Var x);
Var tanh_op(Var x);
Var sigmoid_op(Var x);
Var softmax_rows(Var x);
Var concat_cols(Var a, Var b);
Var pick(Var x, int row, int col);   // 1x1 view with scatter backward
Var mean_all(Var x);
Var sum_all(Var x);

// Straight-through gate 1 - detached + p: d(out)/d(p) = 1. `detached` is the
// frozen copy of the sampled probability; when it equals p's current value
// the forward value is exactly 1.
Var st_gate(Var p, double detached);

// x stacked vertically `times` times.
Var tile_rows(Var x, int times);

// ---- neural ops -----------------------------------------------------------

// y = x * W + bias (bias broadcast over rows; bias is 1 x cols)
Var linear(Var x, Var w, Var bias);

// rows of `table` gathered by id; ids must lie in [0, table.rows())
Var embedding(Var table, const std::vector<int>& ids);

// 1-D convolution along time. x: [B*T x Cin], w: [k*Cin x Cout], bias 1xCout.
// Stride 1, SAME zero padding, odd kernel, configurable dilation.
Var conv1d(Var x, Var w, Var bias, int batch, int seq_len, int kernel, int dilation);

// Pooling along time, window clipped at sample boundaries (avg divides by the
// clipped window size).
Var avg_pool1d(Var x, int batch, int seq_len, int kernel);
Var max_pool1d(Var x, int batch, int seq_len, int kernel);

// LSTM over the whole sequence. x: [B*T x Cin] -> [B*T x H].
// wx: [Cin x 4H], wh: [H x 4H], bias: [1 x 4H], gate order i,f,g,o.
Var lstm_seq(Var x, Var wx, Var wh, Var bias, int batch, int seq_len);

// Multi-head self-attention, shape preserving [B*T x d] -> [B*T x d].
// `key_mask` has one entry per row; positions with 0 are never attended to.
Var self_attention(Var x, Var wq, Var bq, Var wk, Var bk, Var wv, Var bv,
                   Var wo, Var bo, const Vector& key_mask, int batch,
                   int seq_len, int heads);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// Mean over unmasked time positions, [B*T x d] -> [B x d].
Var masked_mean(Var x, const Vector& mask, int batch, int seq_len);

// ---- losses ---------------------------------------------------------------

// Mean binary cross-entropy against hard labels; probabilities are clamped to
// [eps, 1-eps] (gradient is zero in the clamped region).
Var bce(Var probs, const Vector& labels, double eps = 1e-7);

// Same form with a soft target distribution (teacher probabilities).
Var soft_bce(Var probs, const Vector& targets, double eps = 1e-7);

}  // namespace longtail::ad
