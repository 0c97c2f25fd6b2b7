#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "entangle/kernels.hpp"
#include "entangle/refine.hpp"

using namespace entangle;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.normal() * scale;
  return t;
}

EntanglementSpec spec_of(EntangleKind kind, double gamma = 0.0,
                         std::uint64_t seed = 0) {
  EntanglementSpec s;
  s.kind = kind;
  s.gamma = gamma;
  s.seed = seed;
  return s;
}

bool leq_with_slack(double lhs, double rhs) {
  return lhs <= rhs + 1e-12 * std::max(1.0, rhs);
}

// dense operator matrix of the circular conv, one basis vector at a time
DenseMatrix materialize_conv_operator(const ConvKernel& k, int h, int w) {
  const int c = k.channels_in();
  const int n = h * w * c;
  DenseMatrix m(n, n);
  for (int j = 0; j < n; ++j) {
    Tensor e({h, w, c});
    e[static_cast<std::size_t>(j)] = 1.0;
    Graph g;
    const int out = g.conv2d(g.input(e), g.constant(k.data), Pad::circular);
    for (int i = 0; i < n; ++i) m.at(i, j) = g.value(out)[static_cast<std::size_t>(i)];
  }
  return m;
}

}  // namespace

TEST(Lemma1Bounds, WorkedExample) {
  const auto [lo, hi] = lemma1_bounds(0.2, 2.0, 0.1, 1.0);
  EXPECT_NEAR(lo, 0.01, 1e-15);
  EXPECT_NEAR(hi, 0.04 / (0.81 * 4.0), 1e-12);
  EXPECT_NEAR(hi, 0.012345679012345678, 1e-12);
  EXPECT_LE(lo, hi);
}

TEST(Lemma1Bounds, GammaZeroCollapsesTheSandwich) {
  const auto [lo, hi] = lemma1_bounds(0.3, 1.5, 0.0, 1.0);
  const double ratio2 = (0.3 / 1.5) * (0.3 / 1.5);
  EXPECT_DOUBLE_EQ(lo, ratio2);
  EXPECT_DOUBLE_EQ(hi, ratio2);
}

TEST(Lemma1Bounds, ZeroRefinementStep) {
  const auto [lo, hi] = lemma1_bounds(0.0, 2.0, 0.4, 1.0);
  EXPECT_EQ(lo, 0.0);
  EXPECT_EQ(hi, 0.0);
}

TEST(Lemma1Bounds, GammaOneGivesInfiniteUpperBound) {
  const auto [lo, hi] = lemma1_bounds(0.2, 1.0, 1.0, 1.0);
  EXPECT_TRUE(std::isinf(hi));
  EXPECT_NEAR(lo, 0.04, 1e-15);
}

TEST(Lemma1Bounds, InvalidInputsRejected) {
  EXPECT_THROW(lemma1_bounds(0.1, 0.0, 0.2, 1.0), std::invalid_argument);
  EXPECT_THROW(lemma1_bounds(0.1, 1.0, -0.1, 1.0), std::invalid_argument);
  EXPECT_THROW(lemma1_bounds(0.1, 1.0, 0.5, 0.0), std::invalid_argument);
}

TEST(Lemma1Bounds, UpperBoundStrictlyIncreasingInGamma) {
  double prev = -1.0;
  for (double gamma : {0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99}) {
    const auto [lo, hi] = lemma1_bounds(0.4, 2.0, gamma, 1.0);
    EXPECT_GT(hi, prev);
    prev = hi;
    (void)lo;
  }
}

TEST(Lemma1Sandwich, HoldsOnRandomDrawsWithDenseGamma) {
  Rng rng(404);
  for (int draw = 0; draw < 200; ++draw) {
    const int n = 2 + rng.uniform_int(63);
    const double gamma = rng.uniform(0.0, 0.99);
    const DenseMatrix gm = make_dense_gamma(n, gamma);
    const double snorm = spectral_norm(gm, 5000, 1e-14);

    Tensor x = random_tensor({n}, rng);
    const double mag = std::pow(10.0, rng.uniform(-1.0, 1.0));
    for (auto& v : x.vec()) v *= mag;
    const double x_norm = l2_norm(x);
    const double f_norm = std::fabs(rng.normal()) * x_norm * 0.5 + 1e-6;

    const auto gx = vec_mat(x.vec(), gm);
    const double gx_norm = l2_norm(gx);

    // the two inequalities used by the bound proof
    EXPECT_TRUE(leq_with_slack(gx_norm, snorm * x_norm)) << "draw " << draw;
    EXPECT_TRUE(leq_with_slack((1.0 - gamma) * x_norm, gx_norm)) << "draw " << draw;

    const auto [lo, hi] = lemma1_bounds(f_norm, x_norm, gamma, snorm);
    const double ratio2 = (f_norm / gx_norm) * (f_norm / gx_norm);
    EXPECT_TRUE(leq_with_slack(lo, ratio2)) << "draw " << draw;
    EXPECT_TRUE(leq_with_slack(ratio2, hi)) << "draw " << draw;
  }
}

TEST(TraceRefinement, ZeroBranchGivesZeroPlainRatios) {
  Rng rng(41);
  std::vector<BlockParams> model;
  for (int i = 0; i < 3; ++i) {
    BlockParams p = make_mlp_block(5, spec_of(EntangleKind::dense, 0.2), rng);
    for (auto& [name, t] : p.params)
      for (auto& v : t.vec()) v = 0.0;
    model.push_back(std::move(p));
  }
  const Tensor batch = random_tensor({4, 5}, rng);
  const RefinementTrace trace = trace_refinement(model, batch);
  ASSERT_EQ(trace.size(), 3u);
  for (const auto& row : trace) {
    EXPECT_TRUE(row.plain_valid);
    EXPECT_EQ(row.plain_ratio, 0.0);
    EXPECT_EQ(row.f_norm, 0.0);
  }
}

TEST(TraceRefinement, GammaZeroMakesEntangledEqualPlain) {
  Rng rng(42);
  std::vector<BlockParams> model;
  for (int i = 0; i < 2; ++i)
    model.push_back(make_mlp_block(6, spec_of(EntangleKind::dense, 0.0), rng));
  const Tensor batch = random_tensor({3, 6}, rng);
  const RefinementTrace trace = trace_refinement(model, batch);
  for (const auto& row : trace) {
    EXPECT_TRUE(row.plain_valid && row.entangled_valid);
    EXPECT_EQ(row.entangled_ratio, row.plain_ratio);
  }
}

TEST(TraceRefinement, SandwichHoldsOnRandomModel) {
  Rng rng(43);
  std::vector<BlockParams> model;
  for (int i = 0; i < 4; ++i)
    model.push_back(make_mlp_block(8, spec_of(EntangleKind::dense, 0.1), rng));
  const Tensor batch = random_tensor({5, 8}, rng);
  const RefinementTrace trace = trace_refinement(model, batch);
  ASSERT_EQ(trace.size(), 4u);
  for (const auto& row : trace) {
    ASSERT_TRUE(row.bounds_valid && row.entangled_valid);
    const double r2 = row.entangled_ratio * row.entangled_ratio;
    EXPECT_TRUE(leq_with_slack(row.lower_bound, r2));
    EXPECT_TRUE(leq_with_slack(r2, row.upper_bound));
  }
}

TEST(TraceRefinement, NoneKindFlagsEntangledRatio) {
  Rng rng(44);
  std::vector<BlockParams> model;
  model.push_back(make_mlp_block(4, spec_of(EntangleKind::none), rng));
  const Tensor batch = random_tensor({2, 4}, rng);
  const RefinementTrace trace = trace_refinement(model, batch);
  EXPECT_FALSE(trace[0].entangled_valid);
  EXPECT_TRUE(std::isnan(trace[0].entangled_ratio));
  EXPECT_FALSE(trace[0].bounds_valid);
}

TEST(TraceRefinement, ConvChainUsesOperatorNorm) {
  Rng rng(45);
  std::vector<BlockParams> model;
  EntanglementSpec s = spec_of(EntangleKind::spatial, 0.3);
  s.kernel_size = 3;
  model.push_back(make_conv_block(2, s, rng));
  const Tensor batch = random_tensor({2, 5, 5, 2}, rng);
  const RefinementTrace trace = trace_refinement(model, batch);
  ASSERT_EQ(trace.size(), 1u);
  // mass-one spatial kernel: operator norm is exactly 1 (constant eigenvector)
  EXPECT_NEAR(trace[0].spectral_norm_gamma, 1.0, 1e-9);
}

TEST(TraceRefinement, WrongBatchRankRejected) {
  Rng rng(46);
  std::vector<BlockParams> model;
  model.push_back(make_mlp_block(4, spec_of(EntangleKind::identity), rng));
  EXPECT_THROW(trace_refinement(model, Tensor({2, 3, 3, 4})), std::invalid_argument);
}

TEST(ConvOperator, AdjointIsTrueAdjoint) {
  Rng rng(47);
  const ConvKernel k = {random_tensor({3, 3, 2, 4}, rng)};
  const ConvKernel adj = adjoint_kernel(k);
  const Tensor u = random_tensor({4, 5, 2}, rng);
  const Tensor v = random_tensor({4, 5, 4}, rng);
  Graph g;
  const int cu = g.conv2d(g.input(u), g.constant(k.data), Pad::circular);
  const int av = g.conv2d(g.input(v), g.constant(adj.data), Pad::circular);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) lhs += g.value(cu)[i] * v[i];
  for (std::size_t i = 0; i < u.size(); ++i) rhs += g.value(av)[i] * u[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(ConvOperator, SpectralNormMatchesMaterializedOperator) {
  Rng rng(48);
  const ConvKernel k = {random_tensor({3, 3, 2, 2}, rng, 0.5)};
  const double implicit = conv_operator_spectral_norm(k, 4, 4, 20000, 1e-15);
  const DenseMatrix m = materialize_conv_operator(k, 4, 4);
  EXPECT_NEAR(implicit, singular_values(m)[0], 1e-6);
}

TEST(ConvOperator, MassOneSpatialKernelHasUnitNorm) {
  const ConvKernel k = make_spatial_kernel(3, 2, 0.5);
  const double implicit = conv_operator_spectral_norm(k, 5, 5, 2000, 1e-14);
  const DenseMatrix m = materialize_conv_operator(k, 5, 5);
  EXPECT_NEAR(implicit, singular_values(m)[0], 1e-8);
  EXPECT_NEAR(implicit, 1.0, 1e-9);
}

TEST(TraceCsv, StableHeaderAndBytes) {
  Rng rng(49);
  std::vector<BlockParams> model;
  model.push_back(make_mlp_block(4, spec_of(EntangleKind::dense, 0.5), rng));
  const Tensor batch = random_tensor({2, 4}, rng);
  const RefinementTrace trace = trace_refinement(model, batch);
  std::ostringstream a, b;
  write_trace_csv(a, trace);
  write_trace_csv(b, trace);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().rfind("block_index,x_norm,f_norm,gamma_x_norm,plain_ratio,"
                          "entangled_ratio,lower_bound,upper_bound,gamma\n",
                          0),
            0u);
}

TEST(RefinementReport, AggregatesAcrossCheckpoints) {
  Rng rng(50);
  std::vector<BlockParams> model;
  model.push_back(make_mlp_block(4, spec_of(EntangleKind::dense, 0.2), rng));
  const Tensor batch = random_tensor({2, 4}, rng);
  const RefinementTrace t1 = trace_refinement(model, batch);
  const RefinementTrace t2 = trace_refinement(model, batch);
  const RefinementReport rep =
      build_refinement_report({{"epoch0", t1}, {"epoch1", t2}});
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_EQ(rep.rows[0].checkpoint, "epoch0");
  EXPECT_EQ(rep.rows[1].checkpoint, "epoch1");
  std::ostringstream os;
  write_report_csv(os, rep);
  EXPECT_NE(os.str().find("checkpoint,block_index"), std::string::npos);
}
