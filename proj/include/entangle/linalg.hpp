#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "entangle/rng.hpp"
#include "entangle/tensor.hpp"

namespace entangle {

// Row-major dense matrix of doubles. Entries must be finite; construction
// from data validates this once, after which values are treated as immutable.
class DenseMatrix {
 public:
  DenseMatrix() = default;

  DenseMatrix(int rows, int cols)
      : rows_(rows), cols_(cols),
        data_(static_cast<std::size_t>(rows) * cols, 0.0) {
    if (rows <= 0 || cols <= 0)
      throw std::invalid_argument("matrix: dims must be positive");
  }

  DenseMatrix(int rows, int cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows <= 0 || cols <= 0)
      throw std::invalid_argument("matrix: dims must be positive");
    if (data_.size() != static_cast<std::size_t>(rows) * cols)
      throw std::invalid_argument("matrix: data length does not match dims");
    for (double v : data_)
      if (!std::isfinite(v))
        throw std::invalid_argument("matrix: non-finite entry");
  }

  static DenseMatrix identity(int n) {
    DenseMatrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool square() const { return rows_ == cols_; }
  std::size_t size() const { return data_.size(); }

  double& at(int i, int j) {
    return data_[static_cast<std::size_t>(i) * cols_ + j];
  }
  double at(int i, int j) const {
    return data_[static_cast<std::size_t>(i) * cols_ + j];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

inline double frobenius_norm(const DenseMatrix& a) {
  double acc = 0.0;
  for (double v : a.vec()) acc += v * v;
  return std::sqrt(acc);
}

inline double l2_norm(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

inline DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix t(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dims mismatch");
  DenseMatrix c(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int k = 0; k < a.cols(); ++k) {
      const double aik = a.at(i, k);
      if (aik == 0.0) continue;
      for (int j = 0; j < b.cols(); ++j) c.at(i, j) += aik * b.at(k, j);
    }
  }
  return c;
}

// Row-vector convention: y = x A.
inline std::vector<double> vec_mat(const std::vector<double>& x,
                                   const DenseMatrix& a) {
  if (static_cast<int>(x.size()) != a.rows())
    throw std::invalid_argument("vec_mat: dim mismatch");
  std::vector<double> y(static_cast<std::size_t>(a.cols()), 0.0);
  for (int i = 0; i < a.rows(); ++i) {
    const double xi = x[static_cast<std::size_t>(i)];
    for (int j = 0; j < a.cols(); ++j)
      y[static_cast<std::size_t>(j)] += xi * a.at(i, j);
  }
  return y;
}

inline DenseMatrix random_normal_matrix(int n, std::uint64_t seed) {
  Rng rng(seed);
  DenseMatrix m(n, n);
  for (auto& v : m.vec()) v = rng.normal();
  return m;
}

struct QrResult {
  DenseMatrix q;
  DenseMatrix r;
};

// Householder QR of a square matrix, sign-normalized so that diag(R) >= 0.
// Rank deficiency is fine; only non-square input is rejected.
inline QrResult qr_decompose(const DenseMatrix& a) {
  if (!a.square()) throw std::invalid_argument("qr_decompose: matrix not square");
  const int n = a.rows();
  DenseMatrix r = a;
  DenseMatrix q = DenseMatrix::identity(n);
  std::vector<double> v(static_cast<std::size_t>(n), 0.0);

  for (int k = 0; k < n - 1; ++k) {
    double norm_x = 0.0;
    for (int i = k; i < n; ++i) norm_x += r.at(i, k) * r.at(i, k);
    norm_x = std::sqrt(norm_x);
    if (norm_x == 0.0) continue;

    const double x0 = r.at(k, k);
    const double alpha = x0 >= 0.0 ? -norm_x : norm_x;
    double vnorm2 = 0.0;
    for (int i = k; i < n; ++i) {
      v[static_cast<std::size_t>(i)] = r.at(i, k);
      if (i == k) v[static_cast<std::size_t>(i)] -= alpha;
      vnorm2 += v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
    }
    if (vnorm2 == 0.0) continue;
    const double beta = 2.0 / vnorm2;

    // R <- (I - beta v v^T) R
    for (int j = k; j < n; ++j) {
      double dot = 0.0;
      for (int i = k; i < n; ++i) dot += v[static_cast<std::size_t>(i)] * r.at(i, j);
      const double f = beta * dot;
      for (int i = k; i < n; ++i) r.at(i, j) -= f * v[static_cast<std::size_t>(i)];
    }
    // Q <- Q (I - beta v v^T)
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = k; j < n; ++j) dot += q.at(i, j) * v[static_cast<std::size_t>(j)];
      const double f = beta * dot;
      for (int j = k; j < n; ++j) q.at(i, j) -= f * v[static_cast<std::size_t>(j)];
    }
  }

  // exact zeros below the diagonal, nonnegative diagonal
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < i; ++j) r.at(i, j) = 0.0;
  for (int i = 0; i < n; ++i) {
    if (r.at(i, i) < 0.0) {
      for (int j = i; j < n; ++j) r.at(i, j) = -r.at(i, j);
      for (int k = 0; k < n; ++k) q.at(k, i) = -q.at(k, i);
    }
  }
  return {std::move(q), std::move(r)};
}

// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations, sorted
// descending. Off-diagonal Frobenius threshold 1e-12 (relative), sweep cap 100.
inline std::vector<double> eig_symmetric(const DenseMatrix& a) {
  if (!a.square())
    throw std::invalid_argument("eig_symmetric: matrix not square");
  const int n = a.rows();
  const double scale = frobenius_norm(a);
  double asym = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double d = a.at(i, j) - a.at(j, i);
      asym += 2.0 * d * d;
    }
  if (std::sqrt(asym) > 1e-12 * std::max(scale, 1e-300))
    throw std::invalid_argument("eig_symmetric: symmetry violation");

  DenseMatrix m = a;
  const double tol = 1e-12 * std::max(1.0, scale);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += 2.0 * m.at(p, q) * m.at(p, q);
    if (std::sqrt(off) <= tol) break;

    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = m.at(p, q);
        if (apq == 0.0) continue;
        const double app = m.at(p, p);
        const double aqq = m.at(q, q);
        if (std::fabs(apq) <= 1e-300) {
          m.at(p, q) = m.at(q, p) = 0.0;
          continue;
        }
        const double tau = (aqq - app) / (2.0 * apq);
        double t;
        if (tau >= 0.0)
          t = 1.0 / (tau + std::sqrt(1.0 + tau * tau));
        else
          t = -1.0 / (-tau + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;

        for (int k = 0; k < n; ++k) {
          const double mkp = m.at(k, p);
          const double mkq = m.at(k, q);
          m.at(k, p) = c * mkp - s * mkq;
          m.at(k, q) = s * mkp + c * mkq;
        }
        for (int k = 0; k < n; ++k) {
          const double mpk = m.at(p, k);
          const double mqk = m.at(q, k);
          m.at(p, k) = c * mpk - s * mqk;
          m.at(q, k) = s * mpk + c * mqk;
        }
        m.at(p, q) = m.at(q, p) = 0.0;
      }
    }
  }

  std::vector<double> eig(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) eig[static_cast<std::size_t>(i)] = m.at(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<double>());
  return eig;
}

// Singular values, sorted descending, via the symmetric eigenproblem of the
// smaller Gram matrix. Adequate at this module's scale and tolerances.
inline std::vector<double> singular_values(const DenseMatrix& a) {
  const bool tall = a.rows() >= a.cols();
  const int k = tall ? a.cols() : a.rows();
  DenseMatrix g(k, k);
  if (tall) {
    for (int i = 0; i < k; ++i)
      for (int j = i; j < k; ++j) {
        double acc = 0.0;
        for (int r = 0; r < a.rows(); ++r) acc += a.at(r, i) * a.at(r, j);
        g.at(i, j) = g.at(j, i) = acc;
      }
  } else {
    for (int i = 0; i < k; ++i)
      for (int j = i; j < k; ++j) {
        double acc = 0.0;
        for (int c = 0; c < a.cols(); ++c) acc += a.at(i, c) * a.at(j, c);
        g.at(i, j) = g.at(j, i) = acc;
      }
  }
  std::vector<double> eig = eig_symmetric(g);
  for (auto& v : eig) v = std::sqrt(std::max(0.0, v));
  return eig;
}

// Largest singular value via power iteration on A^T A. Deterministic start
// (normalized all-ones); reseeds once with an index-weighted vector if the
// first Rayleigh quotient stagnates at zero.
inline double spectral_norm(const DenseMatrix& a, int iters = 1000,
                            double tol = 1e-12) {
  if (iters < 1) throw std::invalid_argument("spectral_norm: iters must be >= 1");
  const int n = a.cols();
  DenseMatrix g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      double acc = 0.0;
      for (int r = 0; r < a.rows(); ++r) acc += a.at(r, i) * a.at(r, j);
      g.at(i, j) = g.at(j, i) = acc;
    }

  std::vector<double> v(static_cast<std::size_t>(n),
                        1.0 / std::sqrt(static_cast<double>(n)));
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  double lambda_prev = 0.0;
  bool reseeded = false;

  for (int it = 0; it < iters; ++it) {
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int j = 0; j < n; ++j)
        acc += g.at(i, j) * v[static_cast<std::size_t>(j)];
      w[static_cast<std::size_t>(i)] = acc;
    }
    double lambda = 0.0;
    for (int i = 0; i < n; ++i)
      lambda += v[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i)];
    const double wn = l2_norm(w);

    if (wn <= 1e-300 || lambda <= 0.0) {
      if (!reseeded) {
        reseeded = true;
        double norm = 0.0;
        for (int i = 0; i < n; ++i) {
          v[static_cast<std::size_t>(i)] = static_cast<double>(i + 1);
          norm += v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
        }
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;
        lambda_prev = 0.0;
        continue;
      }
      return 0.0;
    }

    for (int i = 0; i < n; ++i)
      v[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(i)] / wn;
    if (it > 0 && std::fabs(lambda - lambda_prev) <=
                      tol * std::max(std::fabs(lambda), 1e-300))
      return std::sqrt(std::max(0.0, lambda));
    lambda_prev = lambda;
  }
  return std::sqrt(std::max(0.0, lambda_prev));
}

}  // namespace entangle
