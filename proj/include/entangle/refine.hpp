#pragma once

#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "entangle/blocks.hpp"
#include "entangle/linalg.hpp"

namespace entangle {

// Bounds on the squared entangled refinement ratio (f/|Gamma x|)^2:
//   lower = f^2 / (|Gamma|_2^2 x^2),  upper = f^2 / ((1-gamma)^2 x^2).
// gamma = 1 degenerates the upper bound to +inf.
inline std::pair<double, double> lemma1_bounds(double f_norm, double x_norm,
                                               double gamma,
                                               double spectral_norm_gamma) {
  if (!(x_norm > 0.0))
    throw std::invalid_argument("lemma1_bounds: x_norm must be positive");
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw std::invalid_argument("lemma1_bounds: gamma must be in [0,1]");
  if (!(spectral_norm_gamma > 0.0))
    throw std::invalid_argument("lemma1_bounds: spectral norm must be positive");
  const double x2 = x_norm * x_norm;
  const double f2 = f_norm * f_norm;
  const double lower = f2 / (spectral_norm_gamma * spectral_norm_gamma * x2);
  const double upper =
      gamma < 1.0 ? f2 / ((1.0 - gamma) * (1.0 - gamma) * x2)
                  : std::numeric_limits<double>::infinity();
  return {lower, upper};
}

// Spatially-flipped, channel-transposed kernel: the adjoint of circular
// cross-correlation.
inline ConvKernel adjoint_kernel(const ConvKernel& k) {
  if (k.is_2d()) {
    const int kh = k.data.dim(0), kw = k.data.dim(1);
    const int ci = k.data.dim(2), co = k.data.dim(3);
    Tensor adj({kh, kw, co, ci});
    for (int dy = 0; dy < kh; ++dy)
      for (int dx = 0; dx < kw; ++dx)
        for (int a = 0; a < ci; ++a)
          for (int b = 0; b < co; ++b)
            adj.at(kh - 1 - dy, kw - 1 - dx, b, a) = k.data.at(dy, dx, a, b);
    return {std::move(adj)};
  }
  const int ks = k.data.dim(0), ci = k.data.dim(1), co = k.data.dim(2);
  Tensor adj({ks, co, ci});
  for (int d = 0; d < ks; ++d)
    for (int a = 0; a < ci; ++a)
      for (int b = 0; b < co; ++b) adj.at(ks - 1 - d, b, a) = k.data.at(d, a, b);
  return {std::move(adj)};
}

// Largest singular value of the circular convolution operator, by power
// iteration on C^T C over feature maps of the given spatial size.
inline double conv_operator_spectral_norm(const ConvKernel& k, int h, int w,
                                          int iters = 500, double tol = 1e-13) {
  const ConvKernel adj = adjoint_kernel(k);
  const bool two_d = k.is_2d();
  Tensor v = two_d ? Tensor({h, w, k.channels_in()})
                   : Tensor({h, k.channels_in()});
  // circular convolution is block-diagonal over Fourier modes; the start must
  // overlap every mode, so it is drawn from a fixed-seed generator
  {
    Rng start_rng(0x5eedbeefULL);
    for (auto& x : v.vec()) x = start_rng.normal();
    const double nv = l2_norm(v);
    for (auto& x : v.vec()) x /= nv;
  }
  auto apply_gram = [&](const Tensor& in) {
    Graph g;
    const int xi = g.input(in);
    const int mid = two_d ? g.conv2d(xi, g.constant(k.data), Pad::circular)
                          : g.conv1d(xi, g.constant(k.data), Pad::circular);
    const int out = two_d ? g.conv2d(mid, g.constant(adj.data), Pad::circular)
                          : g.conv1d(mid, g.constant(adj.data), Pad::circular);
    return g.value(out);
  };

  double lambda_prev = 0.0;
  bool reseeded = false;
  for (int it = 0; it < iters; ++it) {
    const Tensor w_t = apply_gram(v);
    double lambda = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) lambda += v[i] * w_t[i];
    const double wn = l2_norm(w_t);
    if (wn <= 1e-300 || lambda <= 0.0) {
      if (!reseeded) {
        reseeded = true;
        const double nv = 1.0 / std::sqrt(static_cast<double>(v.size()));
        for (auto& x : v.vec()) x = nv;
        lambda_prev = 0.0;
        continue;
      }
      return 0.0;
    }
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = w_t[i] / wn;
    if (it > 0 &&
        std::fabs(lambda - lambda_prev) <= tol * std::max(lambda, 1e-300))
      return std::sqrt(lambda);
    lambda_prev = lambda;
  }
  return std::sqrt(std::max(0.0, lambda_prev));
}

// Spectral norm of a block's skip operator, as used by the trace: the channel
// mixing matrix when one exists, otherwise a power-iteration estimate of the
// full circular conv operator at the given feature size.
inline double entanglement_spectral_norm(const BlockParams& blk, int h, int w) {
  switch (blk.ent.form) {
    case EntangleOperator::Form::passthrough:
      return 1.0;
    case EntangleOperator::Form::zero:
      return 0.0;
    case EntangleOperator::Form::matrix:
      return spectral_norm(blk.ent.matrix, 5000, 1e-14);
    case EntangleOperator::Form::kernel2d: {
      const ConvKernel& k = blk.ent.kernel;
      if (k.kernel_h() == 1 && k.kernel_w() == 1)
        return spectral_norm(
            DenseMatrix(k.channels_in(), k.channels_out(), k.data.vec()), 5000,
            1e-14);
      return conv_operator_spectral_norm(k, h, w);
    }
    case EntangleOperator::Form::kernel1d: {
      const ConvKernel& k = blk.ent.kernel;
      if (k.kernel_h() == 1)
        return spectral_norm(
            DenseMatrix(k.channels_in(), k.channels_out(), k.data.vec()), 5000,
            1e-14);
      return conv_operator_spectral_norm(k, h, /*w unused*/ 1);
    }
  }
  return 0.0;
}

constexpr double kRatioDenominatorFloor = 1e-12;

// Per-block record of one traced forward pass. Ratios form from norms that
// were averaged over the batch first; per-sample ratios are kept alongside.
struct RefinementRow {
  int block_index = 0;
  double x_norm = 0.0;
  double f_norm = 0.0;
  double gamma_x_norm = 0.0;
  double plain_ratio = std::numeric_limits<double>::quiet_NaN();
  double entangled_ratio = std::numeric_limits<double>::quiet_NaN();
  bool plain_valid = false;
  bool entangled_valid = false;
  double lower_bound = std::numeric_limits<double>::quiet_NaN();
  double upper_bound = std::numeric_limits<double>::quiet_NaN();
  bool bounds_valid = false;
  double gamma = 0.0;
  double spectral_norm_gamma = 0.0;
  std::vector<double> per_sample_plain;
  std::vector<double> per_sample_entangled;
};

using RefinementTrace = std::vector<RefinementRow>;

// Runs the residual chain once over the batch, capturing x_i, f_i(x_i) and
// Gamma x_i at every block. batch: (B, d) for mlp chains, (B, H, W, C) for
// conv chains.
inline RefinementTrace trace_refinement(const std::vector<BlockParams>& model,
                                        const Tensor& batch) {
  if (model.empty()) return {};
  for (const auto& blk : model)
    if (blk.kind != BlockKind::mlp_residual &&
        blk.kind != BlockKind::conv_residual)
      throw std::invalid_argument(
          "trace_refinement: only residual chains are traceable");
  const bool conv = model.front().kind == BlockKind::conv_residual;
  if ((conv && batch.rank() != 4) || (!conv && batch.rank() != 2))
    throw std::invalid_argument("trace_refinement: batch rank does not match model");

  const int b_count = batch.dim(0);
  const std::size_t sample_size = batch.size() / static_cast<std::size_t>(b_count);
  const int nblocks = static_cast<int>(model.size());

  RefinementTrace trace(static_cast<std::size_t>(nblocks));
  for (int i = 0; i < nblocks; ++i) {
    auto& row = trace[static_cast<std::size_t>(i)];
    row.block_index = i;
    row.gamma = model[static_cast<std::size_t>(i)].spec.gamma;
    row.spectral_norm_gamma = entanglement_spectral_norm(
        model[static_cast<std::size_t>(i)], conv ? batch.dim(1) : 0,
        conv ? batch.dim(2) : 0);
  }

  for (int s = 0; s < b_count; ++s) {
    Tensor x = conv ? Tensor({batch.dim(1), batch.dim(2), batch.dim(3)})
                    : Tensor({batch.dim(1)});
    for (std::size_t j = 0; j < sample_size; ++j)
      x[j] = batch[static_cast<std::size_t>(s) * sample_size + j];

    Graph g;
    int xi = g.input(x);
    for (int i = 0; i < nblocks; ++i) {
      const auto& blk = model[static_cast<std::size_t>(i)];
      const BoundBlock bb = bind_block(g, blk, false);
      const int ent = apply_entanglement(g, bb, xi);
      const BlockOut out = residual_forward(g, xi, bb);
      auto& row = trace[static_cast<std::size_t>(i)];
      const double xn = l2_norm(g.value(xi));
      const double fn = l2_norm(g.value(out.f_out));
      const double en = l2_norm(g.value(ent));
      row.x_norm += xn;
      row.f_norm += fn;
      row.gamma_x_norm += en;
      row.per_sample_plain.push_back(
          xn >= kRatioDenominatorFloor ? fn / xn
                                       : std::numeric_limits<double>::quiet_NaN());
      row.per_sample_entangled.push_back(
          en >= kRatioDenominatorFloor ? fn / en
                                       : std::numeric_limits<double>::quiet_NaN());
      xi = out.y;
    }
  }

  for (auto& row : trace) {
    row.x_norm /= b_count;
    row.f_norm /= b_count;
    row.gamma_x_norm /= b_count;
    if (row.x_norm >= kRatioDenominatorFloor) {
      row.plain_ratio = row.f_norm / row.x_norm;
      row.plain_valid = true;
    }
    if (row.gamma_x_norm >= kRatioDenominatorFloor) {
      row.entangled_ratio = row.f_norm / row.gamma_x_norm;
      row.entangled_valid = true;
    }
    if (row.x_norm >= kRatioDenominatorFloor &&
        row.spectral_norm_gamma > 0.0 && row.gamma >= 0.0 && row.gamma <= 1.0) {
      const auto [lo, hi] =
          lemma1_bounds(row.f_norm, row.x_norm, row.gamma, row.spectral_norm_gamma);
      row.lower_bound = lo;
      row.upper_bound = hi;
      row.bounds_valid = true;
    }
  }
  return trace;
}

inline void write_trace_csv(std::ostream& os, const RefinementTrace& trace) {
  os << "block_index,x_norm,f_norm,gamma_x_norm,plain_ratio,entangled_ratio,"
        "lower_bound,upper_bound,gamma\n";
  for (const auto& r : trace) {
    os << r.block_index << ',' << format_g17(r.x_norm) << ','
       << format_g17(r.f_norm) << ',' << format_g17(r.gamma_x_norm) << ','
       << format_g17(r.plain_ratio) << ',' << format_g17(r.entangled_ratio)
       << ',' << format_g17(r.lower_bound) << ',' << format_g17(r.upper_bound)
       << ',' << format_g17(r.gamma) << '\n';
  }
}

// Aggregation of traces taken at successive checkpoints into one table.
struct RefinementReport {
  struct Row {
    std::string checkpoint;
    RefinementRow data;
  };
  std::vector<Row> rows;
};

inline RefinementReport build_refinement_report(
    const std::vector<std::pair<std::string, RefinementTrace>>& traces) {
  RefinementReport rep;
  for (const auto& [label, trace] : traces)
    for (const auto& row : trace) rep.rows.push_back({label, row});
  return rep;
}

inline void write_report_csv(std::ostream& os, const RefinementReport& rep) {
  os << "checkpoint,block_index,x_norm,f_norm,gamma_x_norm,plain_ratio,"
        "entangled_ratio,lower_bound,upper_bound,gamma\n";
  for (const auto& r : rep.rows) {
    os << r.checkpoint << ',' << r.data.block_index << ','
       << format_g17(r.data.x_norm) << ',' << format_g17(r.data.f_norm) << ','
       << format_g17(r.data.gamma_x_norm) << ','
       << format_g17(r.data.plain_ratio) << ','
       << format_g17(r.data.entangled_ratio) << ','
       << format_g17(r.data.lower_bound) << ','
       << format_g17(r.data.upper_bound) << ',' << format_g17(r.data.gamma)
       << '\n';
  }
}

}  // namespace entangle
