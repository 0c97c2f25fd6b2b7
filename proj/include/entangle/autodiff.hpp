#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "entangle/tensor.hpp"

namespace entangle {

enum class Op {
  input,
  add,
  mul,
  scale,
  matmul,
  transpose,
  reshape,
  relu,
  gelu,
  sigmoid,
  tanh_fn,
  softmax,
  layernorm,
  conv1d,
  conv2d,
  mean_pool_hw,
  mean_rows,
  cross_entropy,
};

enum class Pad { zero, circular };

// Define-by-run tape. Values are computed eagerly at node creation; backward
// walks the tape in reverse. A graph is rebuilt per forward pass and is
// confined to one thread for its lifetime.
class Graph {
 public:
  int input(Tensor t, bool requires_grad = false) {
    Node n;
    n.op = Op::input;
    n.requires_grad = requires_grad;
    n.value = std::move(t);
    return push(std::move(n), "input");
  }

  int constant(Tensor t) { return input(std::move(t), false); }

  int add(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    Node n = make_node(Op::add, {a, b});
    if (ta.same_shape(tb)) {
      n.value = ta;
      for (std::size_t i = 0; i < tb.size(); ++i) n.value[i] += tb[i];
    } else if (tb.rank() == 1 && tb.dim(0) == ta.dim(ta.rank() - 1)) {
      // vector broadcast over the last axis
      n.value = ta;
      const std::size_t d = tb.size();
      for (std::size_t i = 0; i < ta.size(); ++i) n.value[i] += tb[i % d];
    } else {
      throw std::invalid_argument("add: shape mismatch " +
                                  shape_string(ta.shape()) + " vs " +
                                  shape_string(tb.shape()));
    }
    return push(std::move(n), "add");
  }

  int mul(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw std::invalid_argument("mul: shape mismatch");
    Node n = make_node(Op::mul, {a, b});
    n.value = ta;
    for (std::size_t i = 0; i < tb.size(); ++i) n.value[i] *= tb[i];
    return push(std::move(n), "mul");
  }

  int scale(int a, double s) {
    Node n = make_node(Op::scale, {a});
    n.scalar = s;
    n.value = value(a);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= s;
    return push(std::move(n), "scale");
  }

  // a: (m x k) or rank-1 (k), b: (k x n); output rank follows a
  int matmul(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (tb.rank() != 2) throw std::invalid_argument("matmul: rhs must be rank-2");
    const int m = ta.rank() == 1 ? 1 : ta.dim(0);
    const int k = ta.rank() == 1 ? ta.dim(0) : ta.dim(1);
    if (ta.rank() > 2) throw std::invalid_argument("matmul: lhs must be rank-1/2");
    if (k != tb.dim(0))
      throw std::invalid_argument("matmul: inner dims mismatch");
    const int nn = tb.dim(1);
    Node n = make_node(Op::matmul, {a, b});
    n.value = ta.rank() == 1 ? Tensor({nn}) : Tensor({m, nn});
    const double* pa = ta.data();
    const double* pb = tb.data();
    double* pc = n.value.data();
    for (int i = 0; i < m; ++i) {
      const double* arow = pa + static_cast<std::size_t>(i) * k;
      double* crow = pc + static_cast<std::size_t>(i) * nn;
      for (int kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        const double* brow = pb + static_cast<std::size_t>(kk) * nn;
        for (int j = 0; j < nn; ++j) crow[j] += av * brow[j];
      }
    }
    return push(std::move(n), "matmul");
  }

  int transpose(int a) {
    const Tensor& ta = value(a);
    if (ta.rank() != 2) throw std::invalid_argument("transpose: rank-2 only");
    Node n = make_node(Op::transpose, {a});
    n.value = Tensor({ta.dim(1), ta.dim(0)});
    for (int i = 0; i < ta.dim(0); ++i)
      for (int j = 0; j < ta.dim(1); ++j) n.value.at(j, i) = ta.at(i, j);
    return push(std::move(n), "transpose");
  }

  int reshape(int a, std::vector<int> shape) {
    const Tensor& ta = value(a);
    Node n = make_node(Op::reshape, {a});
    n.value = Tensor(std::move(shape), ta.vec());
    return push(std::move(n), "reshape");
  }

  int relu(int a) {
    Node n = make_node(Op::relu, {a});
    n.value = value(a);
    for (auto& v : n.value.vec()) v = v > 0.0 ? v : 0.0;
    return push(std::move(n), "relu");
  }

  int gelu(int a) {
    Node n = make_node(Op::gelu, {a});
    n.value = value(a);
    for (auto& v : n.value.vec())
      v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    return push(std::move(n), "gelu");
  }

  int sigmoid(int a) {
    Node n = make_node(Op::sigmoid, {a});
    n.value = value(a);
    for (auto& v : n.value.vec()) v = 1.0 / (1.0 + std::exp(-v));
    return push(std::move(n), "sigmoid");
  }

  int tanh_fn(int a) {
    Node n = make_node(Op::tanh_fn, {a});
    n.value = value(a);
    for (auto& v : n.value.vec()) v = std::tanh(v);
    return push(std::move(n), "tanh");
  }

  // softmax over the last axis
  int softmax(int a) {
    const Tensor& ta = value(a);
    Node n = make_node(Op::softmax, {a});
    n.value = ta;
    const int d = ta.dim(ta.rank() - 1);
    const std::size_t rows = ta.size() / static_cast<std::size_t>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = n.value.data() + r * static_cast<std::size_t>(d);
      double mx = row[0];
      for (int i = 1; i < d; ++i) mx = std::max(mx, row[i]);
      double sum = 0.0;
      for (int i = 0; i < d; ++i) {
        row[i] = std::exp(row[i] - mx);
        sum += row[i];
      }
      for (int i = 0; i < d; ++i) row[i] /= sum;
    }
    return push(std::move(n), "softmax");
  }

  // per-position normalization over the last axis, then learnable gain/shift
  int layernorm(int x, int gain, int bias, double eps = 1e-5) {
    const Tensor& tx = value(x);
    const Tensor& tg = value(gain);
    const Tensor& tb = value(bias);
    const int d = tx.dim(tx.rank() - 1);
    if (tg.rank() != 1 || tg.dim(0) != d || tb.rank() != 1 || tb.dim(0) != d)
      throw std::invalid_argument("layernorm: gain/bias must be rank-1 of last-axis size");
    Node n = make_node(Op::layernorm, {x, gain, bias});
    n.scalar = eps;
    n.value = tx;
    const std::size_t rows = tx.size() / static_cast<std::size_t>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xi = tx.data() + r * static_cast<std::size_t>(d);
      double* yi = n.value.data() + r * static_cast<std::size_t>(d);
      double mean = 0.0;
      for (int i = 0; i < d; ++i) mean += xi[i];
      mean /= d;
      double var = 0.0;
      for (int i = 0; i < d; ++i) var += (xi[i] - mean) * (xi[i] - mean);
      var /= d;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int i = 0; i < d; ++i)
        yi[i] = (xi[i] - mean) * inv * tg[static_cast<std::size_t>(i)] +
                tb[static_cast<std::size_t>(i)];
    }
    return push(std::move(n), "layernorm");
  }

  // x: (L, C_in), kernel: (k, C_in, C_out); stride 1, SAME output length
  int conv1d(int x, int kernel, Pad pad = Pad::zero) {
    const Tensor& tx = value(x);
    const Tensor& tk = value(kernel);
    if (tx.rank() != 2 || tk.rank() != 3)
      throw std::invalid_argument("conv1d: expects rank-2 input, rank-3 kernel");
    if (tx.dim(1) != tk.dim(1))
      throw std::invalid_argument("conv1d: channel mismatch");
    const int L = tx.dim(0), cin = tk.dim(1), cout = tk.dim(2), ks = tk.dim(0);
    const int mid = ks / 2;
    Node n = make_node(Op::conv1d, {x, kernel});
    n.pad = pad;
    n.value = Tensor({L, cout});
    for (int l = 0; l < L; ++l) {
      double* out_px = n.value.data() + static_cast<std::size_t>(l) * cout;
      for (int dk = 0; dk < ks; ++dk) {
        int sl = l + dk - mid;
        if (pad == Pad::circular)
          sl = (sl % L + L) % L;
        else if (sl < 0 || sl >= L)
          continue;
        const double* in_px = tx.data() + static_cast<std::size_t>(sl) * cin;
        const double* kp =
            tk.data() + static_cast<std::size_t>(dk) * cin * cout;
        for (int ci = 0; ci < cin; ++ci) {
          const double v = in_px[ci];
          const double* krow = kp + static_cast<std::size_t>(ci) * cout;
          for (int co = 0; co < cout; ++co) out_px[co] += v * krow[co];
        }
      }
    }
    return push(std::move(n), "conv1d");
  }

  // x: (H, W, C_in), kernel: (kh, kw, C_in, C_out); stride 1, SAME
  int conv2d(int x, int kernel, Pad pad = Pad::zero) {
    const Tensor& tx = value(x);
    const Tensor& tk = value(kernel);
    if (tx.rank() != 3 || tk.rank() != 4)
      throw std::invalid_argument("conv2d: expects rank-3 input, rank-4 kernel");
    if (tx.dim(2) != tk.dim(2))
      throw std::invalid_argument("conv2d: channel mismatch");
    const int H = tx.dim(0), W = tx.dim(1);
    const int kh = tk.dim(0), kw = tk.dim(1), cin = tk.dim(2), cout = tk.dim(3);
    const int ch = kh / 2, cw = kw / 2;
    Node n = make_node(Op::conv2d, {x, kernel});
    n.pad = pad;
    n.value = Tensor({H, W, cout});
    for (int y = 0; y < H; ++y) {
      for (int xx = 0; xx < W; ++xx) {
        double* out_px =
            n.value.data() + (static_cast<std::size_t>(y) * W + xx) * cout;
        for (int dy = 0; dy < kh; ++dy) {
          int sy = y + dy - ch;
          if (pad == Pad::circular)
            sy = (sy % H + H) % H;
          else if (sy < 0 || sy >= H)
            continue;
          for (int dx = 0; dx < kw; ++dx) {
            int sx = xx + dx - cw;
            if (pad == Pad::circular)
              sx = (sx % W + W) % W;
            else if (sx < 0 || sx >= W)
              continue;
            const double* in_px =
                tx.data() + (static_cast<std::size_t>(sy) * W + sx) * cin;
            const double* kp =
                tk.data() +
                (static_cast<std::size_t>(dy) * kw + dx) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
              const double v = in_px[ci];
              const double* krow = kp + static_cast<std::size_t>(ci) * cout;
              for (int co = 0; co < cout; ++co) out_px[co] += v * krow[co];
            }
          }
        }
      }
    }
    return push(std::move(n), "conv2d");
  }

  // (H, W, C) -> (C), mean over spatial positions
  int mean_pool_hw(int x) {
    const Tensor& tx = value(x);
    if (tx.rank() != 3) throw std::invalid_argument("mean_pool_hw: rank-3 only");
    const int H = tx.dim(0), W = tx.dim(1), C = tx.dim(2);
    Node n = make_node(Op::mean_pool_hw, {x});
    n.value = Tensor({C});
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        for (int c = 0; c < C; ++c)
          n.value.at(c) += tx.at(y, xx, c);
    for (int c = 0; c < C; ++c) n.value.at(c) /= H * W;
    return push(std::move(n), "mean_pool_hw");
  }

  // (L, D) -> (D), mean over rows
  int mean_rows(int x) {
    const Tensor& tx = value(x);
    if (tx.rank() != 2) throw std::invalid_argument("mean_rows: rank-2 only");
    const int L = tx.dim(0), D = tx.dim(1);
    Node n = make_node(Op::mean_rows, {x});
    n.value = Tensor({D});
    for (int l = 0; l < L; ++l)
      for (int d = 0; d < D; ++d) n.value.at(d) += tx.at(l, d);
    for (int d = 0; d < D; ++d) n.value.at(d) /= L;
    return push(std::move(n), "mean_rows");
  }

  // logits: (R, K) or rank-1 (K); labels: one class id per row.
  // Output is the scalar mean of -log softmax(logits)[label].
  int cross_entropy_with_logits(int logits, std::vector<int> labels) {
    const Tensor& tl = value(logits);
    const int k = tl.dim(tl.rank() - 1);
    const std::size_t rows = tl.size() / static_cast<std::size_t>(k);
    if (labels.size() != rows)
      throw std::invalid_argument("cross_entropy: one label per row required");
    for (int lab : labels)
      if (lab < 0 || lab >= k)
        throw std::invalid_argument("cross_entropy: label out of range");
    Node n = make_node(Op::cross_entropy, {logits});
    n.labels = std::move(labels);
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = tl.data() + r * static_cast<std::size_t>(k);
      double mx = row[0];
      for (int i = 1; i < k; ++i) mx = std::max(mx, row[i]);
      double sum = 0.0;
      for (int i = 0; i < k; ++i) sum += std::exp(row[i] - mx);
      loss += std::log(sum) + mx - row[n.labels[r]];
    }
    n.value = Tensor::scalar(loss / static_cast<double>(rows));
    return push(std::move(n), "cross_entropy");
  }

  const Tensor& value(int id) const {
    return nodes_[static_cast<std::size_t>(id)].value;
  }

  const Tensor& grad(int id) const {
    return grads_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(int loss) {
    if (value(loss).size() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    grads_.assign(nodes_.size(), Tensor());
    grad_ref(loss) = Tensor::scalar(1.0);
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || grads_[static_cast<std::size_t>(id)].empty())
        continue;
      backprop_node(id, n);
    }
  }

 private:
  struct Node {
    Op op = Op::input;
    std::vector<int> in;
    Tensor value;
    bool requires_grad = false;
    double scalar = 0.0;
    Pad pad = Pad::zero;
    std::vector<int> labels;
  };

  Node make_node(Op op, std::vector<int> in) {
    Node n;
    n.op = op;
    for (int i : in)
      if (nodes_[static_cast<std::size_t>(i)].requires_grad)
        n.requires_grad = true;
    n.in = std::move(in);
    return n;
  }

  int push(Node n, const char* name) {
#ifndef ENTANGLE_NO_FINITE_CHECK
    if (!n.value.all_finite())
      throw std::runtime_error(std::string("non-finite value produced by ") +
                               name);
#else
    (void)name;
#endif
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tensor& grad_ref(int id) {
    Tensor& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g = Tensor(value(id).shape());
    return g;
  }

  bool wants_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }

  void backprop_node(int id, const Node& n) {
    const Tensor& g = grads_[static_cast<std::size_t>(id)];
    switch (n.op) {
      case Op::input:
        return;
      case Op::add: {
        const Tensor& ta = value(n.in[0]);
        const Tensor& tb = value(n.in[1]);
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (wants_grad(n.in[1])) {
          Tensor& gb = grad_ref(n.in[1]);
          if (ta.same_shape(tb)) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
          } else {
            const std::size_t d = tb.size();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
          }
        }
        return;
      }
      case Op::mul: {
        const Tensor& ta = value(n.in[0]);
        const Tensor& tb = value(n.in[1]);
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * tb[i];
        }
        if (wants_grad(n.in[1])) {
          Tensor& gb = grad_ref(n.in[1]);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ta[i];
        }
        return;
      }
      case Op::scale: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.scalar;
        }
        return;
      }
      case Op::matmul: {
        const Tensor& ta = value(n.in[0]);
        const Tensor& tb = value(n.in[1]);
        const int m = ta.rank() == 1 ? 1 : ta.dim(0);
        const int k = ta.rank() == 1 ? ta.dim(0) : ta.dim(1);
        const int nn = tb.dim(1);
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              const double* grow = g.data() + static_cast<std::size_t>(i) * nn;
              const double* brow = tb.data() + static_cast<std::size_t>(kk) * nn;
              for (int j = 0; j < nn; ++j) acc += grow[j] * brow[j];
              ga[static_cast<std::size_t>(i) * k + kk] += acc;
            }
        }
        if (wants_grad(n.in[1])) {
          Tensor& gb = grad_ref(n.in[1]);
          for (int i = 0; i < m; ++i) {
            const double* arow = ta.data() + static_cast<std::size_t>(i) * k;
            const double* grow = g.data() + static_cast<std::size_t>(i) * nn;
            for (int kk = 0; kk < k; ++kk) {
              const double av = arow[kk];
              double* gbrow = gb.data() + static_cast<std::size_t>(kk) * nn;
              for (int j = 0; j < nn; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
        return;
      }
      case Op::transpose: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          const int r = n.value.dim(0), c = n.value.dim(1);
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) ga.at(j, i) += g.at(i, j);
        }
        return;
      }
      case Op::reshape: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        return;
      }
      case Op::relu: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          const Tensor& x = value(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0) ga[i] += g[i];
        }
        return;
      }
      case Op::gelu: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          const Tensor& x = value(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
            const double pdf =
                std::exp(-0.5 * x[i] * x[i]) * 0.39894228040143267794;
            ga[i] += g[i] * (cdf + x[i] * pdf);
          }
        }
        return;
      }
      case Op::sigmoid: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = n.value[i];
            ga[i] += g[i] * s * (1.0 - s);
          }
        }
        return;
      }
      case Op::tanh_fn: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double t = n.value[i];
            ga[i] += g[i] * (1.0 - t * t);
          }
        }
        return;
      }
      case Op::softmax: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          const int d = n.value.dim(n.value.rank() - 1);
          const std::size_t rows = n.value.size() / static_cast<std::size_t>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* y = n.value.data() + r * static_cast<std::size_t>(d);
            const double* gy = g.data() + r * static_cast<std::size_t>(d);
            double dot = 0.0;
            for (int i = 0; i < d; ++i) dot += gy[i] * y[i];
            double* gx = ga.data() + r * static_cast<std::size_t>(d);
            for (int i = 0; i < d; ++i) gx[i] += y[i] * (gy[i] - dot);
          }
        }
        return;
      }
      case Op::layernorm:
        backprop_layernorm(n, g);
        return;
      case Op::conv1d:
        backprop_conv1d(n, g);
        return;
      case Op::conv2d:
        backprop_conv2d(n, g);
        return;
      case Op::mean_pool_hw: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          const Tensor& x = value(n.in[0]);
          const int H = x.dim(0), W = x.dim(1), C = x.dim(2);
          const double inv = 1.0 / (H * W);
          for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx)
              for (int c = 0; c < C; ++c) ga.at(y, xx, c) += g.at(c) * inv;
        }
        return;
      }
      case Op::mean_rows: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          const Tensor& x = value(n.in[0]);
          const int L = x.dim(0), D = x.dim(1);
          const double inv = 1.0 / L;
          for (int l = 0; l < L; ++l)
            for (int d = 0; d < D; ++d) ga.at(l, d) += g.at(d) * inv;
        }
        return;
      }
      case Op::cross_entropy: {
        if (wants_grad(n.in[0])) {
          Tensor& ga = grad_ref(n.in[0]);
          const Tensor& x = value(n.in[0]);
          const int k = x.dim(x.rank() - 1);
          const std::size_t rows = x.size() / static_cast<std::size_t>(k);
          const double gscale = g[0] / static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* row = x.data() + r * static_cast<std::size_t>(k);
            double mx = row[0];
            for (int i = 1; i < k; ++i) mx = std::max(mx, row[i]);
            double sum = 0.0;
            for (int i = 0; i < k; ++i) sum += std::exp(row[i] - mx);
            double* grow = ga.data() + r * static_cast<std::size_t>(k);
            for (int i = 0; i < k; ++i) {
              const double p = std::exp(row[i] - mx) / sum;
              grow[i] += gscale * (p - (i == n.labels[r] ? 1.0 : 0.0));
            }
          }
        }
        return;
      }
    }
  }

  void backprop_layernorm(const Node& n, const Tensor& g) {
    const Tensor& x = value(n.in[0]);
    const Tensor& gain = value(n.in[1]);
    const int d = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / static_cast<std::size_t>(d);
    const double eps = n.scalar;
    const bool gx = wants_grad(n.in[0]);
    const bool gg = wants_grad(n.in[1]);
    const bool gb = wants_grad(n.in[2]);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xi = x.data() + r * static_cast<std::size_t>(d);
      const double* gi = g.data() + r * static_cast<std::size_t>(d);
      double mean = 0.0;
      for (int i = 0; i < d; ++i) mean += xi[i];
      mean /= d;
      double var = 0.0;
      for (int i = 0; i < d; ++i) var += (xi[i] - mean) * (xi[i] - mean);
      var /= d;
      const double inv = 1.0 / std::sqrt(var + eps);
      if (gg) {
        Tensor& gt = grad_ref(n.in[1]);
        for (int i = 0; i < d; ++i)
          gt[static_cast<std::size_t>(i)] += gi[i] * (xi[i] - mean) * inv;
      }
      if (gb) {
        Tensor& bt = grad_ref(n.in[2]);
        for (int i = 0; i < d; ++i) bt[static_cast<std::size_t>(i)] += gi[i];
      }
      if (gx) {
        Tensor& xt = grad_ref(n.in[0]);
        double sum_dxhat = 0.0, sum_dxhat_xc = 0.0;
        for (int i = 0; i < d; ++i) {
          const double dxhat = gi[i] * gain[static_cast<std::size_t>(i)];
          sum_dxhat += dxhat;
          sum_dxhat_xc += dxhat * (xi[i] - mean);
        }
        double* xo = xt.data() + r * static_cast<std::size_t>(d);
        for (int i = 0; i < d; ++i) {
          const double dxhat = gi[i] * gain[static_cast<std::size_t>(i)];
          xo[i] += inv * (dxhat - sum_dxhat / d -
                          (xi[i] - mean) * inv * inv * sum_dxhat_xc / d);
        }
      }
    }
  }

  void backprop_conv1d(const Node& n, const Tensor& g) {
    const Tensor& x = value(n.in[0]);
    const Tensor& kk = value(n.in[1]);
    const int L = x.dim(0), cin = kk.dim(1), cout = kk.dim(2), ks = kk.dim(0);
    const int mid = ks / 2;
    const bool gx = wants_grad(n.in[0]);
    const bool gk = wants_grad(n.in[1]);
    if (!gx && !gk) return;
    Tensor* xg = gx ? &grad_ref(n.in[0]) : nullptr;
    Tensor* kg = gk ? &grad_ref(n.in[1]) : nullptr;
    for (int l = 0; l < L; ++l) {
      const double* gout = g.data() + static_cast<std::size_t>(l) * cout;
      for (int dk = 0; dk < ks; ++dk) {
        int sl = l + dk - mid;
        if (n.pad == Pad::circular)
          sl = (sl % L + L) % L;
        else if (sl < 0 || sl >= L)
          continue;
        const double* in_px = x.data() + static_cast<std::size_t>(sl) * cin;
        const double* kp = kk.data() + static_cast<std::size_t>(dk) * cin * cout;
        double* gin = gx ? xg->data() + static_cast<std::size_t>(sl) * cin : nullptr;
        double* gkp = gk ? kg->data() + static_cast<std::size_t>(dk) * cin * cout
                         : nullptr;
        for (int ci = 0; ci < cin; ++ci) {
          const double* krow = kp + static_cast<std::size_t>(ci) * cout;
          double acc = 0.0;
          if (gk) {
            double* gkrow = gkp + static_cast<std::size_t>(ci) * cout;
            const double v = in_px[ci];
            for (int co = 0; co < cout; ++co) {
              acc += krow[co] * gout[co];
              gkrow[co] += v * gout[co];
            }
          } else {
            for (int co = 0; co < cout; ++co) acc += krow[co] * gout[co];
          }
          if (gx) gin[ci] += acc;
        }
      }
    }
  }

  void backprop_conv2d(const Node& n, const Tensor& g) {
    const Tensor& x = value(n.in[0]);
    const Tensor& kk = value(n.in[1]);
    const int H = x.dim(0), W = x.dim(1);
    const int kh = kk.dim(0), kw = kk.dim(1), cin = kk.dim(2), cout = kk.dim(3);
    const int ch = kh / 2, cw = kw / 2;
    const bool gx = wants_grad(n.in[0]);
    const bool gk = wants_grad(n.in[1]);
    if (!gx && !gk) return;
    Tensor* xg = gx ? &grad_ref(n.in[0]) : nullptr;
    Tensor* kg = gk ? &grad_ref(n.in[1]) : nullptr;
    for (int y = 0; y < H; ++y) {
      for (int xx = 0; xx < W; ++xx) {
        const double* gout =
            g.data() + (static_cast<std::size_t>(y) * W + xx) * cout;
        for (int dy = 0; dy < kh; ++dy) {
          int sy = y + dy - ch;
          if (n.pad == Pad::circular)
            sy = (sy % H + H) % H;
          else if (sy < 0 || sy >= H)
            continue;
          for (int dx = 0; dx < kw; ++dx) {
            int sx = xx + dx - cw;
            if (n.pad == Pad::circular)
              sx = (sx % W + W) % W;
            else if (sx < 0 || sx >= W)
              continue;
            const double* in_px =
                x.data() + (static_cast<std::size_t>(sy) * W + sx) * cin;
            const double* kp =
                kk.data() + (static_cast<std::size_t>(dy) * kw + dx) * cin * cout;
            double* gin =
                gx ? xg->data() + (static_cast<std::size_t>(sy) * W + sx) * cin
                   : nullptr;
            double* gkp =
                gk ? kg->data() +
                         (static_cast<std::size_t>(dy) * kw + dx) * cin * cout
                   : nullptr;
            for (int ci = 0; ci < cin; ++ci) {
              const double* krow = kp + static_cast<std::size_t>(ci) * cout;
              double acc = 0.0;
              if (gk) {
                double* gkrow = gkp + static_cast<std::size_t>(ci) * cout;
                const double v = in_px[ci];
                for (int co = 0; co < cout; ++co) {
                  acc += krow[co] * gout[co];
                  gkrow[co] += v * gout[co];
                }
              } else {
                for (int co = 0; co < cout; ++co) acc += krow[co] * gout[co];
              }
              if (gx) gin[ci] += acc;
            }
          }
        }
      }
    }
  }

  static constexpr double inv_sqrt2 = 0.70710678118654752440;

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Single-head scaled dot-product attention with output projection. The
// attention-matrix node is exposed so its row-stochastic property can be
// inspected.
struct AttentionOut {
  int out;
  int weights;
};

inline AttentionOut attention(Graph& g, int x, int wq, int wk, int wv, int wo) {
  const Tensor& tx = g.value(x);
  if (tx.rank() != 2) throw std::invalid_argument("attention: x must be (L, D)");
  const int d = tx.dim(1);
  for (int w : {wq, wk, wv, wo}) {
    const Tensor& tw = g.value(w);
    if (tw.rank() != 2 || tw.dim(0) != d || tw.dim(1) != d)
      throw std::invalid_argument("attention: projections must be (D, D)");
  }
  const int q = g.matmul(x, wq);
  const int k = g.matmul(x, wk);
  const int v = g.matmul(x, wv);
  const int scores = g.scale(g.matmul(q, g.transpose(k)),
                             1.0 / std::sqrt(static_cast<double>(d)));
  const int weights = g.softmax(scores);
  const int mixed = g.matmul(weights, v);
  return {g.matmul(mixed, wo), weights};
}

// Max over all coordinates of |analytic - numeric| / max(1e-8, |a| + |n|),
// with numeric gradients from central differences.
template <typename BuildFn>
double grad_check(BuildFn&& build, const std::vector<Tensor>& inputs,
                  double epsilon = 1e-5) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3))
    throw std::invalid_argument("grad_check: epsilon must be in [1e-7, 1e-3]");

  Graph g;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const auto& t : inputs) ids.push_back(g.input(t, true));
  const int loss = build(g, ids);
  if (g.value(loss).size() != 1)
    throw std::invalid_argument("grad_check: loss must be scalar");
  g.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(ids.size());
  for (int id : ids) {
    const Tensor& gr = g.grad(id);
    analytic.push_back(gr.empty() ? Tensor(g.value(id).shape()) : gr);
  }

  auto eval = [&](const std::vector<Tensor>& in) {
    Graph ge;
    std::vector<int> eids;
    eids.reserve(in.size());
    for (const auto& t : in) eids.push_back(ge.input(t, false));
    return ge.value(build(ge, eids))[0];
  };

  double max_rel = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t c = 0; c < inputs[i].size(); ++c) {
      const double orig = probe[i][c];
      probe[i][c] = orig + epsilon;
      const double lp = eval(probe);
      probe[i][c] = orig - epsilon;
      const double lm = eval(probe);
      probe[i][c] = orig;
      const double numeric = (lp - lm) / (2.0 * epsilon);
      const double a = analytic[i][c];
      const double rel = std::fabs(a - numeric) /
                         std::max(1e-8, std::fabs(a) + std::fabs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace entangle
