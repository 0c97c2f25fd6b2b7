#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "entangle/linalg.hpp"
#include "entangle/spec.hpp"
#include "entangle/tensor.hpp"

namespace entangle {

// Constant convolution kernel. 2D kernels are rank-4 (kh, kw, c_in, c_out),
// 1D kernels rank-3 (k, c_in, c_out), both row-major.
struct ConvKernel {
  Tensor data;

  bool is_2d() const { return data.rank() == 4; }
  int kernel_h() const { return data.dim(0); }
  int kernel_w() const { return is_2d() ? data.dim(1) : 1; }
  int channels_in() const { return data.dim(data.rank() - 2); }
  int channels_out() const { return data.dim(data.rank() - 1); }
};

// gamma/n everywhere plus (1-gamma) on the diagonal: interpolates between the
// identity (gamma=0) and uniform mass spreading (gamma=1). Symmetric, rows
// sum to 1.
inline DenseMatrix make_dense_gamma(int n, double gamma) {
  if (n < 1) throw std::invalid_argument("make_dense_gamma: n must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw std::invalid_argument("make_dense_gamma: gamma must be in [0,1]");
  DenseMatrix m(n, n);
  const double off = gamma / static_cast<double>(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      m.at(i, j) = off + (i == j ? 1.0 - gamma : 0.0);
  return m;
}

// Q factor of a seeded standard-normal sample; deterministic per (n, seed).
// Columns carrying a negative diagonal entry are flipped (orthogonality is
// unaffected); this pins the 1x1 case to [[1]] for every seed.
inline DenseMatrix make_orthogonal_gamma(int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("make_orthogonal_gamma: n must be >= 1");
  DenseMatrix q = qr_decompose(random_normal_matrix(n, seed)).q;
  for (int j = 0; j < n; ++j)
    if (q.at(j, j) < 0.0)
      for (int i = 0; i < n; ++i) q.at(i, j) = -q.at(i, j);
  return q;
}

// Per-channel averaging over the spatial window, identity-weighted at the
// center tap. Cross-channel entries stay exactly zero.
inline ConvKernel make_spatial_kernel(int kernel_size, int channels,
                                      double gamma) {
  if (kernel_size < 1 || kernel_size % 2 == 0)
    throw std::invalid_argument("make_spatial_kernel: kernel_size must be odd");
  if (channels < 1)
    throw std::invalid_argument("make_spatial_kernel: channels must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw std::invalid_argument("make_spatial_kernel: gamma must be in [0,1]");
  Tensor k({kernel_size, kernel_size, channels, channels});
  const double tap = gamma / (static_cast<double>(kernel_size) * kernel_size);
  const int c = kernel_size / 2;
  for (int i = 0; i < channels; ++i) {
    for (int dy = 0; dy < kernel_size; ++dy)
      for (int dx = 0; dx < kernel_size; ++dx) k.at(dy, dx, i, i) += tap;
    k.at(c, c, i, i) += 1.0 - gamma;
  }
  return {std::move(k)};
}

// Uniform mass over the whole window and all input channels, identity-weighted
// at the center diagonal. kernel_size 1 mixes channels only; larger sizes mix
// channels and space.
inline ConvKernel make_channel_kernel(int kernel_size, int channels,
                                      double gamma) {
  if (kernel_size < 1 || kernel_size % 2 == 0)
    throw std::invalid_argument("make_channel_kernel: kernel_size must be odd");
  if (channels < 1)
    throw std::invalid_argument("make_channel_kernel: channels must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw std::invalid_argument("make_channel_kernel: gamma must be in [0,1]");
  const double base =
      gamma / (static_cast<double>(kernel_size) * kernel_size * channels);
  Tensor k = Tensor::full({kernel_size, kernel_size, channels, channels}, base);
  const int c = kernel_size / 2;
  for (int i = 0; i < channels; ++i) k.at(c, c, i, i) += 1.0 - gamma;
  return {std::move(k)};
}

// 1x1 kernel whose channel mixing matrix is a seeded orthogonal rotation.
inline ConvKernel make_orthogonal_channel_kernel(int channels,
                                                 std::uint64_t seed) {
  if (channels < 1)
    throw std::invalid_argument(
        "make_orthogonal_channel_kernel: channels must be >= 1");
  const DenseMatrix q = make_orthogonal_gamma(channels, seed);
  Tensor k({1, 1, channels, channels}, q.vec());
  return {std::move(k)};
}

inline ConvKernel make_identity_kernel_2d(int channels) {
  Tensor k({1, 1, channels, channels});
  for (int i = 0; i < channels; ++i) k.at(0, 0, i, i) = 1.0;
  return {std::move(k)};
}

inline ConvKernel make_zero_kernel_2d(int channels) {
  return {Tensor({1, 1, channels, channels})};
}

// 1D analogue of the 2D constructors: taps indexed by sequence offset,
// normalizers use kernel_size instead of kernel_size^2.
inline ConvKernel make_seq_kernel(const EntanglementSpec& spec) {
  spec.validate();
  const int c = spec.channels;
  if (c < 1) throw std::invalid_argument("make_seq_kernel: channels must be >= 1");
  const int ks = spec.resolved_kernel_size();
  const int mid = ks / 2;

  switch (spec.kind) {
    case EntangleKind::identity: {
      Tensor k({1, c, c});
      for (int i = 0; i < c; ++i) k.at(0, i, i) = 1.0;
      return {std::move(k)};
    }
    case EntangleKind::none:
      return {Tensor({1, c, c})};
    case EntangleKind::spatial: {
      Tensor k({ks, c, c});
      const double tap = spec.gamma / static_cast<double>(ks);
      for (int i = 0; i < c; ++i) {
        for (int d = 0; d < ks; ++d) k.at(d, i, i) += tap;
        k.at(mid, i, i) += 1.0 - spec.gamma;
      }
      return {std::move(k)};
    }
    case EntangleKind::channel:
    case EntangleKind::channel_spatial: {
      const double base = spec.gamma / (static_cast<double>(ks) * c);
      Tensor k = Tensor::full({ks, c, c}, base);
      for (int i = 0; i < c; ++i) k.at(mid, i, i) += 1.0 - spec.gamma;
      return {std::move(k)};
    }
    case EntangleKind::orthogonal_channel: {
      const DenseMatrix q = make_orthogonal_gamma(c, spec.seed);
      Tensor k({1, c, c}, q.vec());
      return {std::move(k)};
    }
    default:
      throw std::invalid_argument(
          "make_seq_kernel: kind has no 1D kernel form");
  }
}

// Builds the 2D kernel for a conv-shaped spec.
inline ConvKernel make_kernel_2d(const EntanglementSpec& spec) {
  spec.validate();
  const int c = spec.channels;
  if (c < 1) throw std::invalid_argument("make_kernel_2d: channels must be >= 1");
  switch (spec.kind) {
    case EntangleKind::identity: return make_identity_kernel_2d(c);
    case EntangleKind::none: return make_zero_kernel_2d(c);
    case EntangleKind::spatial:
      return make_spatial_kernel(spec.resolved_kernel_size(), c, spec.gamma);
    case EntangleKind::channel:
      return make_channel_kernel(1, c, spec.gamma);
    case EntangleKind::channel_spatial:
      return make_channel_kernel(spec.resolved_kernel_size(), c, spec.gamma);
    case EntangleKind::orthogonal_channel:
      return make_orthogonal_channel_kernel(c, spec.seed);
    default:
      throw std::invalid_argument("make_kernel_2d: kind has no 2D kernel form");
  }
}

// Resolves a spec to its square channel-mixing matrix, when it has one.
inline std::optional<DenseMatrix> channel_mixing_matrix(
    const EntanglementSpec& spec) {
  spec.validate();
  const int n = spec.dim > 0 ? spec.dim : spec.channels;
  switch (spec.kind) {
    case EntangleKind::dense:
      if (n < 1) throw std::invalid_argument("spec: dense kind needs n");
      return make_dense_gamma(n, spec.gamma);
    case EntangleKind::orthogonal:
      if (n < 1) throw std::invalid_argument("spec: orthogonal kind needs n");
      return make_orthogonal_gamma(n, spec.seed);
    case EntangleKind::identity:
      if (n < 1) throw std::invalid_argument("spec: identity kind needs n or c");
      return DenseMatrix::identity(n);
    case EntangleKind::none:
      if (n < 1) throw std::invalid_argument("spec: none kind needs n or c");
      return DenseMatrix(n, n);
    case EntangleKind::channel: {
      const ConvKernel k = make_channel_kernel(1, spec.channels, spec.gamma);
      return DenseMatrix(spec.channels, spec.channels, k.data.vec());
    }
    case EntangleKind::orthogonal_channel:
      return make_orthogonal_gamma(spec.channels, spec.seed);
    case EntangleKind::channel_spatial:
      if (spec.resolved_kernel_size() == 1) {
        const ConvKernel k = make_channel_kernel(1, spec.channels, spec.gamma);
        return DenseMatrix(spec.channels, spec.channels, k.data.vec());
      }
      return std::nullopt;
    case EntangleKind::spatial:
      return std::nullopt;
  }
  return std::nullopt;
}

struct SpectrumReport {
  bool has_matrix = false;
  std::vector<double> eigenvalues;      // symmetric matrices only
  std::vector<double> singular_values;  // matrix kinds
  double spectral_norm = 0.0;
  bool is_orthogonal = false;
  // spatial kinds: norms of the per-channel tap vector instead of a spectrum
  double tap_l1 = 0.0;
  double tap_l2 = 0.0;
};

inline SpectrumReport spectrum_report(const EntanglementSpec& spec) {
  SpectrumReport rep;
  const auto mat = channel_mixing_matrix(spec);
  if (mat) {
    rep.has_matrix = true;
    const DenseMatrix& g = *mat;
    const int n = g.rows();
    double asym = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        const double d = g.at(i, j) - g.at(j, i);
        asym += 2.0 * d * d;
      }
    if (std::sqrt(asym) <= 1e-12 * std::max(frobenius_norm(g), 1e-300))
      rep.eigenvalues = eig_symmetric(g);
    rep.singular_values = singular_values(g);
    rep.spectral_norm = spectral_norm(g, 5000, 1e-14);
    const DenseMatrix gram = matmul(transpose(g), g);
    double dev = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double d = gram.at(i, j) - (i == j ? 1.0 : 0.0);
        dev += d * d;
      }
    rep.is_orthogonal = std::sqrt(dev) <= 1e-8;
    return rep;
  }

  // spatial mixing: report the tap vector seen by one output channel
  const ConvKernel k = make_kernel_2d(spec);
  const int co = 0;
  double l1 = 0.0, l2 = 0.0;
  for (int dy = 0; dy < k.kernel_h(); ++dy)
    for (int dx = 0; dx < k.kernel_w(); ++dx)
      for (int ci = 0; ci < k.channels_in(); ++ci) {
        const double v = k.data.at(dy, dx, ci, co);
        l1 += std::fabs(v);
        l2 += v * v;
      }
  rep.tap_l1 = l1;
  rep.tap_l2 = std::sqrt(l2);
  return rep;
}

}  // namespace entangle
