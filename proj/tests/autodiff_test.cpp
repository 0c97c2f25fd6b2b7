#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "entangle/autodiff.hpp"
#include "entangle/kernels.hpp"
#include "entangle/linalg.hpp"
#include "entangle/rng.hpp"

using namespace entangle;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.normal() * scale;
  return t;
}

// fixed random linear head so any op output becomes a scalar loss
struct Scalarizer {
  Tensor weights;
  explicit Scalarizer(std::size_t n, std::uint64_t seed) : weights({static_cast<int>(n), 1}) {
    Rng rng(seed);
    for (auto& v : weights.vec()) v = rng.normal();
  }
  int operator()(Graph& g, int x) const {
    const int flat = g.reshape(x, {static_cast<int>(g.value(x).size())});
    return g.matmul(flat, g.constant(weights));
  }
};

}  // namespace

TEST(Conv2d, IdentityKernelIsExact) {
  Rng rng(1);
  const Tensor x = random_tensor({5, 4, 3}, rng);
  Graph g;
  const int xi = g.input(x);
  const int k = g.constant(make_identity_kernel_2d(3).data);
  const int y = g.conv2d(xi, k);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(g.value(y)[i], x[i]);
}

TEST(Conv2d, MassOneKernelPreservesConstantInputWithCircularPadding) {
  Tensor x({6, 5, 2});
  for (int y = 0; y < 6; ++y)
    for (int xx = 0; xx < 5; ++xx) {
      x.at(y, xx, 0) = 1.7;
      x.at(y, xx, 1) = -0.3;
    }
  Graph g;
  const int xi = g.input(x);
  const int k = g.constant(make_spatial_kernel(3, 2, 0.6).data);
  const int out = g.conv2d(xi, k, Pad::circular);
  for (int y = 0; y < 6; ++y)
    for (int xx = 0; xx < 5; ++xx) {
      EXPECT_NEAR(g.value(out).at(y, xx, 0), 1.7, 1e-12);
      EXPECT_NEAR(g.value(out).at(y, xx, 1), -0.3, 1e-12);
    }
}

TEST(Conv2d, OneHotCenterSpreadsKernelTaps) {
  Tensor x({5, 5, 1});
  x.at(2, 2, 0) = 1.0;
  Graph g;
  const int out = g.conv2d(g.input(x), g.constant(make_spatial_kernel(3, 1, 0.9).data));
  for (int y = 0; y < 5; ++y)
    for (int xx = 0; xx < 5; ++xx) {
      double expected = 0.0;
      if (std::abs(y - 2) <= 1 && std::abs(xx - 2) <= 1)
        expected = (y == 2 && xx == 2) ? 0.2 : 0.1;
      EXPECT_NEAR(g.value(out).at(y, xx, 0), expected, 1e-15);
    }
}

TEST(Conv2d, ChannelMismatchRejected) {
  Graph g;
  const int x = g.input(Tensor({4, 4, 2}));
  const int k = g.constant(make_identity_kernel_2d(3).data);
  EXPECT_THROW(g.conv2d(x, k), std::invalid_argument);
}

TEST(Conv2d, GradCheckBothPaddings) {
  Rng rng(7);
  for (Pad pad : {Pad::zero, Pad::circular}) {
    const Tensor x = random_tensor({4, 5, 2}, rng);
    const Tensor k = random_tensor({3, 3, 2, 3}, rng, 0.5);
    const Scalarizer head(4 * 5 * 3, 77);
    const double err = grad_check(
        [&](Graph& g, const std::vector<int>& in) {
          return head(g, g.conv2d(in[0], in[1], pad));
        },
        {x, k}, 1e-5);
    EXPECT_LE(err, 1e-4);
  }
}

TEST(Conv1d, GradCheckAndShape) {
  Rng rng(8);
  const Tensor x = random_tensor({7, 3}, rng);
  const Tensor k = random_tensor({3, 3, 2}, rng, 0.5);
  const Scalarizer head(7 * 2, 78);
  const double err = grad_check(
      [&](Graph& g, const std::vector<int>& in) {
        return head(g, g.conv1d(in[0], in[1]));
      },
      {x, k}, 1e-5);
  EXPECT_LE(err, 1e-4);
}

TEST(Attention, SingleTokenIsIdentityWeights) {
  Rng rng(3);
  const Tensor x = random_tensor({1, 4}, rng);
  Graph g;
  const int xi = g.input(x);
  std::vector<int> w;
  for (int i = 0; i < 4; ++i) w.push_back(g.constant(random_tensor({4, 4}, rng)));
  const auto out = attention(g, xi, w[0], w[1], w[2], w[3]);
  EXPECT_EQ(g.value(out.weights).size(), 1u);
  EXPECT_DOUBLE_EQ(g.value(out.weights)[0], 1.0);
}

TEST(Attention, EqualTokensGiveUniformWeights) {
  Rng rng(4);
  Tensor x({3, 4});
  for (int l = 0; l < 3; ++l)
    for (int d = 0; d < 4; ++d) x.at(l, d) = 0.5 * (d + 1);
  Graph g;
  const int xi = g.input(x);
  std::vector<int> w;
  for (int i = 0; i < 4; ++i) w.push_back(g.constant(random_tensor({4, 4}, rng)));
  const auto out = attention(g, xi, w[0], w[1], w[2], w[3]);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      EXPECT_NEAR(g.value(out.weights).at(i, j), 1.0 / 3.0, 1e-12);
}

TEST(Attention, RowsSumToOne) {
  Rng rng(5);
  const Tensor x = random_tensor({6, 4}, rng);
  Graph g;
  const int xi = g.input(x);
  std::vector<int> w;
  for (int i = 0; i < 4; ++i) w.push_back(g.constant(random_tensor({4, 4}, rng)));
  const auto out = attention(g, xi, w[0], w[1], w[2], w[3]);
  for (int i = 0; i < 6; ++i) {
    double s = 0.0;
    for (int j = 0; j < 6; ++j) s += g.value(out.weights).at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Attention, GradCheckAgainstFiniteDifferences) {
  Rng rng(6);
  const Tensor x = random_tensor({3, 4}, rng);
  std::vector<Tensor> inputs{x};
  for (int i = 0; i < 4; ++i) inputs.push_back(random_tensor({4, 4}, rng, 0.7));
  const Scalarizer head(3 * 4, 79);
  const double err = grad_check(
      [&](Graph& g, const std::vector<int>& in) {
        return head(g, attention(g, in[0], in[1], in[2], in[3], in[4]).out);
      },
      inputs, 1e-5);
  EXPECT_LE(err, 1e-4);
}

TEST(LayerNorm, ConstantInputNormalizesToZero) {
  Graph g;
  const int x = g.input(Tensor::full({6}, 3.25));
  const int y = g.layernorm(x, g.constant(Tensor::full({6}, 1.0)),
                            g.constant(Tensor({6})));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(g.value(y)[i], 0.0, 1e-12);
}

TEST(LayerNorm, AlreadyNormalizedPassesThrough) {
  Graph g;
  const int x = g.input(Tensor({2}, {1.0, -1.0}));
  const int y = g.layernorm(x, g.constant(Tensor::full({2}, 1.0)),
                            g.constant(Tensor({2})));
  EXPECT_NEAR(g.value(y)[0], 1.0, 1e-5);
  EXPECT_NEAR(g.value(y)[1], -1.0, 1e-5);
}

TEST(LayerNorm, GradCheck) {
  Rng rng(9);
  const Tensor x = random_tensor({2, 6}, rng);
  const Tensor gain = random_tensor({6}, rng);
  const Tensor bias = random_tensor({6}, rng);
  const Scalarizer head(12, 80);
  const double err = grad_check(
      [&](Graph& g, const std::vector<int>& in) {
        return head(g, g.layernorm(in[0], in[1], in[2]));
      },
      {x, gain, bias}, 1e-5);
  EXPECT_LE(err, 1e-4);
}

TEST(Softmax, RowsSumToOneAndGradCheck) {
  Rng rng(10);
  const Tensor x = random_tensor({4, 5}, rng, 2.0);
  Graph g;
  const int y = g.softmax(g.input(x));
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int c = 0; c < 5; ++c) s += g.value(y).at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const Scalarizer head(20, 81);
  const double err = grad_check(
      [&](Graph& gg, const std::vector<int>& in) {
        return head(gg, gg.softmax(in[0]));
      },
      {x}, 1e-5);
  EXPECT_LE(err, 1e-4);
}

TEST(CrossEntropy, NonNegativeAndGradCheck) {
  Rng rng(11);
  const Tensor logits = random_tensor({4, 3}, rng, 2.0);
  const std::vector<int> labels{0, 2, 1, 1};
  Graph g;
  const int loss = g.cross_entropy_with_logits(g.input(logits), labels);
  EXPECT_GE(g.value(loss)[0], 0.0);
  const double err = grad_check(
      [&](Graph& gg, const std::vector<int>& in) {
        return gg.cross_entropy_with_logits(in[0], labels);
      },
      {logits}, 1e-5);
  EXPECT_LE(err, 1e-4);
}

TEST(ElementwiseOps, GradChecks) {
  Rng rng(12);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({3, 4}, rng);
  const Tensor v = random_tensor({4}, rng);
  const Scalarizer head(12, 82);

  EXPECT_LE(grad_check(
                [&](Graph& g, const std::vector<int>& in) {
                  return head(g, g.add(in[0], in[1]));
                },
                {a, b}, 1e-5),
            1e-4);
  EXPECT_LE(grad_check(
                [&](Graph& g, const std::vector<int>& in) {
                  return head(g, g.add(in[0], in[1]));  // broadcast
                },
                {a, v}, 1e-5),
            1e-4);
  EXPECT_LE(grad_check(
                [&](Graph& g, const std::vector<int>& in) {
                  return head(g, g.mul(in[0], in[1]));
                },
                {a, b}, 1e-5),
            1e-4);
  for (auto unary : {&Graph::gelu, &Graph::sigmoid, &Graph::tanh_fn}) {
    EXPECT_LE(grad_check(
                  [&](Graph& g, const std::vector<int>& in) {
                    return head(g, (g.*unary)(in[0]));
                  },
                  {a}, 1e-5),
              1e-4);
  }
}

TEST(MatmulOps, GradChecks) {
  Rng rng(13);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 5}, rng);
  const Tensor x1 = random_tensor({4}, rng);
  const Scalarizer head15(15, 83);
  const Scalarizer head5(5, 84);
  EXPECT_LE(grad_check(
                [&](Graph& g, const std::vector<int>& in) {
                  return head15(g, g.matmul(in[0], in[1]));
                },
                {a, b}, 1e-5),
            1e-4);
  EXPECT_LE(grad_check(
                [&](Graph& g, const std::vector<int>& in) {
                  return head5(g, g.matmul(in[0], in[1]));
                },
                {x1, b}, 1e-5),
            1e-4);
  const Scalarizer head12(12, 85);
  EXPECT_LE(grad_check(
                [&](Graph& g, const std::vector<int>& in) {
                  return head12(g, g.transpose(in[0]));
                },
                {a}, 1e-5),
            1e-4);
}

TEST(PoolOps, GradChecks) {
  Rng rng(14);
  const Tensor x3 = random_tensor({4, 5, 3}, rng);
  const Tensor x2 = random_tensor({6, 3}, rng);
  const Scalarizer head(3, 86);
  EXPECT_LE(grad_check(
                [&](Graph& g, const std::vector<int>& in) {
                  return head(g, g.mean_pool_hw(in[0]));
                },
                {x3}, 1e-5),
            1e-4);
  EXPECT_LE(grad_check(
                [&](Graph& g, const std::vector<int>& in) {
                  return head(g, g.mean_rows(in[0]));
                },
                {x2}, 1e-5),
            1e-4);
}

TEST(GradCheck, QuadraticIsExact) {
  // f(x) = x^2 at x = 3: central differences are exact for quadratics
  const double err = grad_check(
      [](Graph& g, const std::vector<int>& in) { return g.mul(in[0], in[0]); },
      {Tensor::scalar(3.0)}, 1e-5);
  EXPECT_LE(err, 1e-10);
}

TEST(GradCheck, SquaredNormIsExact) {
  Rng rng(15);
  const Tensor x = random_tensor({8}, rng);
  const Tensor ones({8, 1}, std::vector<double>(8, 1.0));
  const double err = grad_check(
      [&](Graph& g, const std::vector<int>& in) {
        return g.matmul(g.mul(in[0], in[0]), g.constant(ones));
      },
      {x}, 1e-5);
  EXPECT_LE(err, 1e-10);
}

TEST(GradCheck, EpsilonRangeEnforced) {
  EXPECT_THROW(grad_check([](Graph& g, const std::vector<int>& in) { return in[0]; },
                          {Tensor::scalar(1.0)}, 1e-8),
               std::invalid_argument);
}

TEST(Backward, EntangledSkipWithZeroBranchGivesGammaTranspose) {
  const int n = 5;
  const DenseMatrix gamma = make_dense_gamma(n, 0.35);
  Rng rng(16);
  const Tensor x = random_tensor({n}, rng);
  Tensor upstream = random_tensor({n}, rng);

  Graph g;
  const int xi = g.input(x, true);
  const int y = g.matmul(xi, g.constant(Tensor({n, n}, gamma.vec())));
  // weight the output by the upstream vector to impose that cotangent
  Tensor u({n, 1}, upstream.vec());
  const int loss = g.matmul(y, g.constant(u));
  g.backward(loss);

  const std::vector<double> expected = vec_mat(upstream.vec(), transpose(gamma));
  for (int i = 0; i < n; ++i)
    EXPECT_NEAR(g.grad(xi)[static_cast<std::size_t>(i)],
                expected[static_cast<std::size_t>(i)], 1e-12);
}

TEST(Backward, IdentityGammaPassesUpstreamThrough) {
  Rng rng(17);
  const Tensor x = random_tensor({4}, rng);
  Tensor upstream = random_tensor({4}, rng);
  Graph g;
  const int xi = g.input(x, true);
  const int y = g.matmul(xi, g.constant(Tensor({4, 4}, make_dense_gamma(4, 0.0).vec())));
  const int loss = g.matmul(y, g.constant(Tensor({4, 1}, upstream.vec())));
  g.backward(loss);
  for (int i = 0; i < 4; ++i)
    EXPECT_DOUBLE_EQ(g.grad(xi)[static_cast<std::size_t>(i)],
                     upstream[static_cast<std::size_t>(i)]);
}

TEST(Backward, NonScalarLossRejected) {
  Graph g;
  const int x = g.input(Tensor({3}), true);
  EXPECT_THROW(g.backward(x), std::invalid_argument);
}

TEST(Graph, NonFiniteValuesRejected) {
  Graph g;
  Tensor bad({2});
  bad[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(g.input(bad), std::runtime_error);
  const int x = g.input(Tensor::full({2}, 1e308));
  EXPECT_THROW(g.add(x, x), std::runtime_error);
}
