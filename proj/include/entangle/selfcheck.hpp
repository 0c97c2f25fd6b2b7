#pragma once

#include <chrono>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "entangle/blocks.hpp"
#include "entangle/kernels.hpp"
#include "entangle/linalg.hpp"
#include "entangle/refine.hpp"

namespace entangle {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct CheckOptions {
  // self-test hook: adds perturb_eps to one entry of every operator the
  // kernel checks construct, which must flip the suite to failing
  bool perturb_kernel = false;
  double perturb_eps = 1e-6;
};

namespace selfcheck_detail {

inline double ortho_deviation(const DenseMatrix& q) {
  const DenseMatrix gram = matmul(transpose(q), q);
  double acc = 0.0;
  for (int i = 0; i < q.rows(); ++i)
    for (int j = 0; j < q.cols(); ++j) {
      const double d = gram.at(i, j) - (i == j ? 1.0 : 0.0);
      acc += d * d;
    }
  return std::sqrt(acc);
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.normal() * scale;
  return t;
}

inline bool leq_with_slack(double lhs, double rhs) {
  return lhs <= rhs + 1e-12 * std::max(1.0, rhs);
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  }
};

inline std::string describe(bool pass, double worst, double limit_s,
                            const Timer& timer, const std::string& extra = "") {
  std::ostringstream os;
  os << (pass ? "ok" : "VIOLATION") << ", worst deviation " << worst
     << ", elapsed " << timer.seconds() << "s (limit " << limit_s << "s)";
  if (!extra.empty()) os << "; " << extra;
  return os.str();
}

}  // namespace selfcheck_detail

// criterion 1: eigenvalues of the interpolated skip matrix are one 1 and
// (n-1) copies of (1-gamma)
inline CheckResult check_dense_spectrum(const CheckOptions& opts) {
  using namespace selfcheck_detail;
  Timer timer;
  double worst = 0.0;
  for (int n : {2, 8, 64}) {
    for (double gamma : {0.0, 0.1, 0.5, 0.9, 1.0}) {
      DenseMatrix g = make_dense_gamma(n, gamma);
      // the perturbed entry is on the diagonal, so symmetry is preserved
      if (opts.perturb_kernel) g.vec()[0] += opts.perturb_eps;
      const auto eig = eig_symmetric(g);
      worst = std::max(worst, std::fabs(eig[0] - 1.0));
      for (int i = 1; i < n; ++i)
        worst = std::max(
            worst, std::fabs(eig[static_cast<std::size_t>(i)] - (1.0 - gamma)));
    }
  }
  const bool pass = worst <= 1e-9 && timer.seconds() < 5.0;
  return {"criterion 1: dense gamma eigenvalue spectrum", pass,
          describe(pass, worst, 5.0, timer)};
}

// criterion 2: seeded orthogonal operators satisfy Q^T Q = I and have unit
// singular values
inline CheckResult check_orthogonality(const CheckOptions& opts) {
  using namespace selfcheck_detail;
  Timer timer;
  double worst_gram = 0.0;
  double worst_sv = 0.0;
  for (int n : {4, 64, 256}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      DenseMatrix q = make_orthogonal_gamma(n, seed);
      if (opts.perturb_kernel) q.vec()[0] += opts.perturb_eps;
      worst_gram = std::max(worst_gram, ortho_deviation(q));
      for (double sv : singular_values(q))
        worst_sv = std::max(worst_sv, std::fabs(sv - 1.0));
    }
  }
  const bool pass =
      worst_gram <= 1e-10 && worst_sv <= 1e-9 && timer.seconds() < 30.0;
  std::ostringstream os;
  os << (pass ? "ok" : "VIOLATION") << ", worst |Q^T Q - I|_F " << worst_gram
     << ", worst |sv - 1| " << worst_sv << ", elapsed " << timer.seconds()
     << "s (limit 30s)";
  return {"criterion 2: orthogonal operator unitarity", pass, os.str()};
}

namespace selfcheck_detail {

// vanilla (identity-skip) counterparts assembled from the same primitives

inline int vanilla_residual(Graph& g, int x, const BoundBlock& b) {
  const BlockParams& p = *b.block;
  int f;
  if (p.kind == BlockKind::mlp_residual) {
    const int h = g.relu(g.add(g.matmul(x, b.pid("w1")), b.pid("b1")));
    f = g.add(g.matmul(h, b.pid("w2")), b.pid("b2"));
  } else {
    const int h = g.relu(g.add(g.conv2d(x, b.pid("k1")), b.pid("b1")));
    f = g.add(g.conv2d(h, b.pid("k2")), b.pid("b2"));
  }
  return g.add(f, x);
}

inline int vanilla_transformer(Graph& g, int x, const BoundBlock& b) {
  const auto att = attention(g, x, b.pid("wq"), b.pid("wk"), b.pid("wv"),
                             b.pid("wo"));
  const int out1 = g.layernorm(g.add(att.out, x), b.pid("ln1_g"), b.pid("ln1_b"));
  const int hidden =
      g.gelu(g.add(g.matmul(out1, b.pid("ffn_w1")), b.pid("ffn_b1")));
  const int ffn = g.add(g.matmul(hidden, b.pid("ffn_w2")), b.pid("ffn_b2"));
  return g.layernorm(g.add(ffn, out1), b.pid("ln2_g"), b.pid("ln2_b"));
}

inline LstmNodes vanilla_lstm_step(Graph& g, LstmNodes state, int x_t,
                                   const BoundBlock& b) {
  auto gate = [&](const char* name) {
    return g.add(g.add(g.matmul(x_t, b.pid(std::string("wx_") + name)),
                       g.matmul(state.h, b.pid(std::string("wh_") + name))),
                 b.pid(std::string("b_") + name));
  };
  const int i_t = g.sigmoid(gate("i"));
  const int f_t = g.sigmoid(gate("f"));
  const int o_t = g.sigmoid(gate("o"));
  const int z_t = g.tanh_fn(gate("z"));
  const int c_next = g.add(g.mul(f_t, state.c), g.mul(i_t, z_t));
  return {c_next, g.mul(o_t, g.tanh_fn(c_next))};
}

struct ReductionPair {
  double forward_dev = 0.0;
  double grad_dev = 0.0;
};

// runs one entangled-vs-vanilla comparison with a shared cotangent
template <typename EntangledFwd, typename VanillaFwd>
ReductionPair compare_reduction(const BlockParams& p, const Tensor& x,
                                const Tensor& cotangent, EntangledFwd&& ent_fwd,
                                VanillaFwd&& van_fwd) {
  ReductionPair out;
  Graph ge, gv;
  const int xe = ge.input(x, true);
  const int xv = gv.input(x, true);
  const BoundBlock be = bind_block(ge, p, true);
  const BoundBlock bv = bind_block(gv, p, true);
  const int ye = ent_fwd(ge, xe, be);
  const int yv = van_fwd(gv, xv, bv);
  out.forward_dev = max_abs_diff(ge.value(ye), gv.value(yv));
  Tensor w({static_cast<int>(ge.value(ye).size()), 1}, cotangent.vec());
  ge.backward(ge.matmul(ge.reshape(ye, {static_cast<int>(ge.value(ye).size())}),
                        ge.constant(w)));
  gv.backward(gv.matmul(gv.reshape(yv, {static_cast<int>(gv.value(yv).size())}),
                        gv.constant(w)));
  out.grad_dev = max_abs_diff(ge.grad(xe), gv.grad(xv));
  for (std::size_t i = 0; i < be.param_ids.size(); ++i) {
    const Tensor& a = ge.grad(be.param_ids[i]);
    const Tensor& b = gv.grad(bv.param_ids[i]);
    if (a.empty() && b.empty()) continue;
    const Tensor za = a.empty() ? Tensor(p.params[i].second.shape()) : a;
    const Tensor zb = b.empty() ? Tensor(p.params[i].second.shape()) : b;
    out.grad_dev = std::max(out.grad_dev, max_abs_diff(za, zb));
  }
  return out;
}

}  // namespace selfcheck_detail

// criterion 3: gamma=0 / identity entanglement reproduces the vanilla block,
// outputs within 1e-15 and gradients within 1e-12, 50 random inputs per kind
inline CheckResult check_identity_reduction(const CheckOptions&) {
  using namespace selfcheck_detail;
  Timer timer;
  Rng rng(301);
  double worst_fwd = 0.0, worst_grad = 0.0;

  EntanglementSpec identity;
  EntanglementSpec dense0;
  dense0.kind = EntangleKind::dense;
  EntanglementSpec spatial0;
  spatial0.kind = EntangleKind::spatial;
  EntanglementSpec channel0;
  channel0.kind = EntangleKind::channel;

  for (const auto& spec : {identity, dense0}) {
    BlockParams p = make_mlp_block(6, spec, rng);
    for (int rep = 0; rep < 50; ++rep) {
      const Tensor x = random_tensor({6}, rng);
      const Tensor cot = random_tensor({6}, rng);
      const auto dev = compare_reduction(
          p, x, cot,
          [](Graph& g, int xi, const BoundBlock& b) {
            return residual_forward(g, xi, b).y;
          },
          [](Graph& g, int xi, const BoundBlock& b) {
            return vanilla_residual(g, xi, b);
          });
      worst_fwd = std::max(worst_fwd, dev.forward_dev);
      worst_grad = std::max(worst_grad, dev.grad_dev);
    }
  }

  for (const auto& spec : {identity, spatial0, channel0}) {
    BlockParams p = make_conv_block(3, spec, rng);
    for (int rep = 0; rep < 50; ++rep) {
      const Tensor x = random_tensor({4, 5, 3}, rng);
      const Tensor cot = random_tensor({4 * 5 * 3}, rng);
      const auto dev = compare_reduction(
          p, x, cot,
          [](Graph& g, int xi, const BoundBlock& b) {
            return residual_forward(g, xi, b).y;
          },
          [](Graph& g, int xi, const BoundBlock& b) {
            return vanilla_residual(g, xi, b);
          });
      worst_fwd = std::max(worst_fwd, dev.forward_dev);
      worst_grad = std::max(worst_grad, dev.grad_dev);
    }
  }

  for (const auto& spec : {identity, channel0}) {
    BlockParams p = make_transformer_block(4, spec, rng);
    for (int rep = 0; rep < 50; ++rep) {
      const Tensor x = random_tensor({3, 4}, rng);
      const Tensor cot = random_tensor({12}, rng);
      const auto dev = compare_reduction(
          p, x, cot,
          [](Graph& g, int xi, const BoundBlock& b) {
            return transformer_encoder_forward(g, xi, b);
          },
          [](Graph& g, int xi, const BoundBlock& b) {
            return vanilla_transformer(g, xi, b);
          });
      worst_fwd = std::max(worst_fwd, dev.forward_dev);
      worst_grad = std::max(worst_grad, dev.grad_dev);
    }
  }

  {
    BlockParams p = make_lstm_block(3, 5, dense0, rng);
    for (int rep = 0; rep < 50; ++rep) {
      const Tensor x = random_tensor({3}, rng);
      const Tensor c0 = random_tensor({5}, rng);
      const Tensor h0 = random_tensor({5}, rng);
      const Tensor cot = random_tensor({10}, rng);
      Graph ge, gv;
      const int xe = ge.input(x, true), xv = gv.input(x, true);
      const int ce = ge.input(c0, true), cv = gv.input(c0, true);
      const int he = ge.input(h0, true), hv = gv.input(h0, true);
      const BoundBlock be = bind_block(ge, p, true);
      const BoundBlock bv = bind_block(gv, p, true);
      const LstmNodes ne = lstm_step(ge, {ce, he}, xe, be);
      const LstmNodes nv = vanilla_lstm_step(gv, {cv, hv}, xv, bv);
      worst_fwd = std::max(worst_fwd, max_abs_diff(ge.value(ne.c), gv.value(nv.c)));
      worst_fwd = std::max(worst_fwd, max_abs_diff(ge.value(ne.h), gv.value(nv.h)));
      Tensor w({10, 1}, cot.vec());
      auto loss = [&](Graph& g, const LstmNodes& n) {
        Tensor half_w1({5, 1}), half_w2({5, 1});
        for (int i = 0; i < 5; ++i) {
          half_w1.at(i, 0) = w.at(i, 0);
          half_w2.at(i, 0) = w.at(i + 5, 0);
        }
        return g.add(g.matmul(n.c, g.constant(half_w1)),
                     g.matmul(n.h, g.constant(half_w2)));
      };
      ge.backward(loss(ge, ne));
      gv.backward(loss(gv, nv));
      for (auto [a, b] : {std::pair{xe, xv}, {ce, cv}, {he, hv}})
        worst_grad = std::max(worst_grad, max_abs_diff(ge.grad(a), gv.grad(b)));
      for (std::size_t i = 0; i < be.param_ids.size(); ++i) {
        const Tensor& a = ge.grad(be.param_ids[i]);
        const Tensor& b = gv.grad(bv.param_ids[i]);
        if (a.empty() || b.empty()) continue;
        worst_grad = std::max(worst_grad, max_abs_diff(a, b));
      }
    }
  }

  const bool pass = worst_fwd <= 1e-15 && worst_grad <= 1e-12 &&
                    timer.seconds() < 60.0;
  std::ostringstream os;
  os << (pass ? "ok" : "VIOLATION") << ", worst forward dev " << worst_fwd
     << ", worst grad dev " << worst_grad << ", elapsed " << timer.seconds()
     << "s (limit 60s)";
  return {"criterion 3: identity entanglement reduces to vanilla blocks", pass,
          os.str()};
}

// criterion 4: with the trainable branch frozen at zero, the block's input
// Jacobian is exactly Gamma^T
inline CheckResult check_jacobian_decomposition(const CheckOptions&) {
  using namespace selfcheck_detail;
  Timer timer;
  Rng rng(401);
  double worst = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 2 + rng.uniform_int(15);
    const double gamma = rng.uniform(0.0, 1.0);
    EntanglementSpec spec;
    spec.kind = EntangleKind::dense;
    spec.gamma = gamma;
    BlockParams p = make_mlp_block(n, spec, rng);
    for (auto& [name, t] : p.params)
      for (auto& v : t.vec()) v = 0.0;
    const Tensor x = random_tensor({n}, rng);
    const DenseMatrix gm = make_dense_gamma(n, gamma);
    for (int k = 0; k < n; ++k) {
      Graph g;
      const int xi = g.input(x, true);
      const BoundBlock b = bind_block(g, p, false);
      const BlockOut out = residual_forward(g, xi, b);
      Tensor e({n, 1});
      e.at(k, 0) = 1.0;
      g.backward(g.matmul(out.y, g.constant(e)));
      for (int i = 0; i < n; ++i)
        worst = std::max(worst, std::fabs(g.grad(xi)[static_cast<std::size_t>(i)] -
                                          gm.at(i, k)));
    }
  }
  const bool pass = worst <= 1e-12;
  return {"criterion 4: input Jacobian equals Gamma transpose", pass,
          describe(pass, worst, 60.0, timer)};
}

// criterion 5: central-difference checks for every differentiable op and all
// block kinds, 20 instances each, max relative error <= 1e-4 at eps = 1e-5
inline CheckResult check_gradients(const CheckOptions&) {
  using namespace selfcheck_detail;
  Timer timer;
  Rng rng(501);
  double worst = 0.0;
  const double eps = 1e-5;

  auto head = [&](std::size_t n) {
    Tensor w({static_cast<int>(n), 1});
    for (auto& v : w.vec()) v = rng.normal();
    return w;
  };
  auto scalarized = [](Graph& g, int x, const Tensor& w) {
    return g.matmul(g.reshape(x, {static_cast<int>(g.value(x).size())}),
                    g.constant(w));
  };
  auto away_from_kinks = [&](Tensor t) {
    for (auto& v : t.vec())
      if (std::fabs(v) < 1e-2) v += v >= 0.0 ? 1e-2 : -1e-2;
    return t;
  };

  for (int rep = 0; rep < 20; ++rep) {
    {  // matmul, rank-2 and rank-1 lhs, and transpose
      const Tensor a = random_tensor({3, 4}, rng);
      const Tensor b = random_tensor({4, 5}, rng);
      const Tensor v = random_tensor({4}, rng);
      const Tensor w = head(15), w2 = head(5), w3 = head(12);
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.matmul(in[0], in[1]), w);
          },
          {a, b}, eps));
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.matmul(in[0], in[1]), w2);
          },
          {v, b}, eps));
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.transpose(in[0]), w3);
          },
          {a}, eps));
    }
    {  // elementwise and broadcast
      const Tensor a = random_tensor({3, 4}, rng);
      const Tensor b = random_tensor({3, 4}, rng);
      const Tensor v = random_tensor({4}, rng);
      const Tensor w = head(12);
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.add(in[0], in[1]), w);
          },
          {a, b}, eps));
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.add(in[0], in[1]), w);
          },
          {a, v}, eps));
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.mul(in[0], in[1]), w);
          },
          {a, b}, eps));
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.scale(in[0], -1.7), w);
          },
          {a}, eps));
    }
    {  // nonlinearities (relu kept away from its kink)
      const Tensor a = away_from_kinks(random_tensor({3, 4}, rng));
      const Tensor w = head(12);
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.relu(in[0]), w);
          },
          {a}, eps));
      for (auto unary : {&Graph::gelu, &Graph::sigmoid, &Graph::tanh_fn}) {
        worst = std::max(worst, grad_check(
            [&](Graph& g, const std::vector<int>& in) {
              return scalarized(g, (g.*unary)(in[0]), w);
            },
            {a}, eps));
      }
    }
    {  // softmax / layernorm / cross entropy
      const Tensor a = random_tensor({3, 5}, rng);
      const Tensor gain = random_tensor({5}, rng);
      const Tensor bias = random_tensor({5}, rng);
      const Tensor w = head(15);
      const std::vector<int> labels{rng.uniform_int(5), rng.uniform_int(5),
                                    rng.uniform_int(5)};
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.softmax(in[0]), w);
          },
          {a}, eps));
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.layernorm(in[0], in[1], in[2]), w);
          },
          {a, gain, bias}, eps));
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return g.cross_entropy_with_logits(in[0], labels);
          },
          {a}, eps));
    }
    {  // convolutions and pooling
      const Tensor x2 = random_tensor({4, 4, 2}, rng);
      const Tensor k2 = random_tensor({3, 3, 2, 2}, rng, 0.6);
      const Tensor x1 = random_tensor({6, 2}, rng);
      const Tensor k1 = random_tensor({3, 2, 3}, rng, 0.6);
      const Tensor w32 = head(32), w18 = head(18), w2t = head(2), w2r = head(2);
      for (Pad pad : {Pad::zero, Pad::circular}) {
        worst = std::max(worst, grad_check(
            [&](Graph& g, const std::vector<int>& in) {
              return scalarized(g, g.conv2d(in[0], in[1], pad), w32);
            },
            {x2, k2}, eps));
      }
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.conv1d(in[0], in[1]), w18);
          },
          {x1, k1}, eps));
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.mean_pool_hw(in[0]), w2t);
          },
          {x2}, eps));
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, g.mean_rows(in[0]), w2r);
          },
          {x1}, eps));
    }
    {  // attention composite
      const Tensor x = random_tensor({3, 4}, rng);
      std::vector<Tensor> inputs{x};
      for (int i = 0; i < 4; ++i) inputs.push_back(random_tensor({4, 4}, rng, 0.7));
      const Tensor w = head(12);
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            return scalarized(g, attention(g, in[0], in[1], in[2], in[3], in[4]).out, w);
          },
          inputs, eps));
    }
  }

  // block kinds under rotating entanglement kinds
  const auto spec_cycle = [&](int rep, bool conv_ctx) {
    EntanglementSpec s;
    switch (rep % 4) {
      case 0: s.kind = EntangleKind::identity; break;
      case 1: s.kind = EntangleKind::none; break;
      case 2:
        s.kind = conv_ctx ? EntangleKind::spatial : EntangleKind::dense;
        s.gamma = 0.4;
        break;
      default:
        s.kind = conv_ctx ? EntangleKind::orthogonal_channel
                          : EntangleKind::orthogonal;
        s.seed = static_cast<std::uint64_t>(rep);
        break;
    }
    return s;
  };

  for (int rep = 0; rep < 20; ++rep) {
    {  // mlp residual
      BlockParams p = make_mlp_block(4, spec_cycle(rep, false), rng);
      std::vector<Tensor> inputs{away_from_kinks(random_tensor({4}, rng))};
      for (const auto& [name, t] : p.params) inputs.push_back(t);
      const Tensor w = head(4);
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            BoundBlock b;
            b.block = &p;
            b.param_ids.assign(in.begin() + 1, in.end());
            if (p.ent.form == EntangleOperator::Form::matrix)
              b.ent_id = g.constant(Tensor(
                  {p.ent.matrix.rows(), p.ent.matrix.cols()}, p.ent.matrix.vec()));
            return scalarized(g, residual_forward(g, in[0], b).y, w);
          },
          inputs, eps));
    }
    {  // conv residual
      EntanglementSpec s = spec_cycle(rep, true);
      BlockParams p = make_conv_block(2, s, rng);
      std::vector<Tensor> inputs{random_tensor({3, 3, 2}, rng)};
      for (const auto& [name, t] : p.params) inputs.push_back(t);
      const Tensor w = head(18);
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            BoundBlock b;
            b.block = &p;
            b.param_ids.assign(in.begin() + 1, in.end());
            if (p.ent.form == EntangleOperator::Form::kernel2d)
              b.ent_id = g.constant(p.ent.kernel.data);
            return scalarized(g, residual_forward(g, in[0], b).y, w);
          },
          inputs, eps));
    }
    {  // transformer encoder
      EntanglementSpec s = spec_cycle(rep, true);
      if (s.kind == EntangleKind::spatial) s.kernel_size = 3;
      BlockParams p = make_transformer_block(4, s, rng);
      std::vector<Tensor> inputs{random_tensor({3, 4}, rng)};
      for (const auto& [name, t] : p.params) inputs.push_back(t);
      const Tensor w = head(12);
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            BoundBlock b;
            b.block = &p;
            b.param_ids.assign(in.begin() + 1, in.end());
            if (p.ent.form == EntangleOperator::Form::kernel1d)
              b.ent_id = g.constant(p.ent.kernel.data);
            return scalarized(g, transformer_encoder_forward(g, in[0], b), w);
          },
          inputs, eps));
    }
    {  // lstm cell (both update modes)
      BlockParams p =
          make_lstm_block(3, 4, spec_cycle(rep, false), rng, rep % 2 == 1);
      std::vector<Tensor> inputs{random_tensor({3}, rng),
                                 random_tensor({4}, rng),
                                 random_tensor({4}, rng)};
      for (const auto& [name, t] : p.params) inputs.push_back(t);
      const Tensor w = head(8);
      worst = std::max(worst, grad_check(
          [&](Graph& g, const std::vector<int>& in) {
            BoundBlock b;
            b.block = &p;
            b.param_ids.assign(in.begin() + 3, in.end());
            if (p.ent.form == EntangleOperator::Form::matrix)
              b.ent_id = g.constant(Tensor(
                  {p.ent.matrix.rows(), p.ent.matrix.cols()}, p.ent.matrix.vec()));
            const LstmNodes n = lstm_step(g, {in[1], in[2]}, in[0], b);
            Tensor w1({4, 1}), w2({4, 1});
            for (int i = 0; i < 4; ++i) {
              w1.at(i, 0) = w.at(i, 0);
              w2.at(i, 0) = w.at(i + 4, 0);
            }
            return g.add(g.matmul(n.c, g.constant(w1)),
                         g.matmul(n.h, g.constant(w2)));
          },
          inputs, eps));
    }
  }

  const bool pass = worst <= 1e-4 && timer.seconds() < 300.0;
  return {"criterion 5: central-difference gradient checks", pass,
          describe(pass, worst, 300.0, timer)};
}

// criterion 6: the refinement-ratio sandwich and both proof inequalities hold
// on 1000 random draws
inline CheckResult check_lemma_sandwich(const CheckOptions&) {
  using namespace selfcheck_detail;
  Timer timer;
  Rng rng(601);
  double worst = 0.0;
  bool pass = true;
  for (int draw = 0; draw < 1000; ++draw) {
    const int n = 2 + rng.uniform_int(63);
    const double gamma = rng.uniform(0.0, 0.99);
    const DenseMatrix gm = make_dense_gamma(n, gamma);
    const double snorm = spectral_norm(gm, 5000, 1e-14);
    Tensor x = random_tensor({n}, rng);
    const double mag = std::pow(10.0, rng.uniform(-1.0, 1.0));
    for (auto& v : x.vec()) v *= mag;
    const double x_norm = l2_norm(x);
    const double f_norm = std::fabs(rng.normal()) * x_norm * 0.5 + 1e-9;
    const double gx_norm = l2_norm(Tensor({n}, vec_mat(x.vec(), gm)));

    const bool ineq1 = leq_with_slack(gx_norm, snorm * x_norm);
    const bool ineq2 = leq_with_slack((1.0 - gamma) * x_norm, gx_norm);
    const auto [lo, hi] = lemma1_bounds(f_norm, x_norm, gamma, snorm);
    const double ratio2 = (f_norm / gx_norm) * (f_norm / gx_norm);
    const bool sandwich = leq_with_slack(lo, ratio2) && leq_with_slack(ratio2, hi);
    if (!(ineq1 && ineq2 && sandwich)) pass = false;
    worst = std::max(worst, gx_norm - snorm * x_norm);
    worst = std::max(worst, (1.0 - gamma) * x_norm - gx_norm);
    worst = std::max(worst, lo - ratio2);
    worst = std::max(worst, ratio2 - hi);
  }
  pass = pass && timer.seconds() < 30.0;
  return {"criterion 6: refinement bound sandwich", pass,
          describe(pass, worst, 30.0, timer)};
}

// criterion 7: constant-kernel mass conservation. The interpolating kinds
// carry unit mass per output channel; the orthogonal kind conserves l2 norm
// instead (its tap sums are not 1 by construction), checked via Q^T Q = I.
inline CheckResult check_kernel_mass(const CheckOptions& opts) {
  using namespace selfcheck_detail;
  Timer timer;
  double worst = 0.0;
  auto maybe_perturb = [&](ConvKernel& k) {
    if (opts.perturb_kernel) k.data[0] += opts.perturb_eps;
  };
  auto mass = [](const ConvKernel& k, int co) {
    double acc = 0.0;
    for (int dy = 0; dy < k.data.dim(0); ++dy)
      for (int dx = 0; dx < k.data.dim(1); ++dx)
        for (int ci = 0; ci < k.data.dim(2); ++ci)
          acc += k.data.at(dy, dx, ci, co);
    return acc;
  };

  for (int ks : {1, 3, 5}) {
    for (int c : {1, 4, 16}) {
      for (double gamma : {0.0, 0.3, 1.0}) {
        ConvKernel sp = make_spatial_kernel(ks, c, gamma);
        maybe_perturb(sp);
        ConvKernel ch = make_channel_kernel(ks, c, gamma);
        maybe_perturb(ch);
        for (int co = 0; co < c; ++co) {
          worst = std::max(worst, std::fabs(mass(sp, co) - 1.0));
          worst = std::max(worst, std::fabs(mass(ch, co) - 1.0));
        }
        // constant input preserved exactly under circular padding
        Tensor x({4, 5, c});
        for (int y = 0; y < 4; ++y)
          for (int xx = 0; xx < 5; ++xx)
            for (int cc = 0; cc < c; ++cc) x.at(y, xx, cc) = 0.731;
        Graph g;
        const int sp_out = g.conv2d(g.input(x), g.constant(sp.data), Pad::circular);
        const int ch_out = g.conv2d(g.input(x), g.constant(ch.data), Pad::circular);
        for (std::size_t i = 0; i < x.size(); ++i) {
          worst = std::max(worst, std::fabs(g.value(sp_out)[i] - 0.731));
          worst = std::max(worst, std::fabs(g.value(ch_out)[i] - 0.731));
        }
      }
    }
  }
  double worst_ortho = 0.0;
  for (int c : {1, 4, 16}) {
    ConvKernel oc = make_orthogonal_channel_kernel(c, 17);
    maybe_perturb(oc);
    worst_ortho =
        std::max(worst_ortho, ortho_deviation(DenseMatrix(c, c, oc.data.vec())));
  }

  const bool pass = worst <= 1e-12 && worst_ortho <= 1e-10;
  return {"criterion 7: kernel mass conservation", pass,
          describe(pass, worst, 60.0, timer,
                   "orthogonal kind checked via Q^T Q = I (tap sums are not 1 "
                   "for a rotation)")};
}

// criteria 1-7, the invariant suite behind the `check` subcommand
inline std::vector<CheckResult> run_selfcheck(const CheckOptions& opts = {}) {
  return {check_dense_spectrum(opts), check_orthogonality(opts),
          check_identity_reduction(opts), check_jacobian_decomposition(opts),
          check_gradients(opts), check_lemma_sandwich(opts),
          check_kernel_mass(opts)};
}

}  // namespace entangle
