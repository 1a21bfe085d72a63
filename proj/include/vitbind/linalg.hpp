#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vitbind/errors.hpp"
#include "vitbind/tensor.hpp"

namespace vitbind {

// Square double matrix used for the small dense solves (covariances, Gram
// matrices). Row-major.
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> a;

  SquareMatrix() = default;
  explicit SquareMatrix(std::size_t size) : n(size), a(size * size, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }

  static SquareMatrix identity(std::size_t size) {
    SquareMatrix m(size);
    for (std::size_t i = 0; i < size; ++i) m(i, i) = 1.0;
    return m;
  }
};

// Eigenpairs of a symmetric matrix. vectors(i, j) is entry i of eigenvector j.
struct SymmetricEigen {
  std::vector<double> values;
  SquareMatrix vectors;
};

// Cyclic Jacobi rotations. Eigenvalues are returned in descending order.
inline SymmetricEigen jacobi_eigen(SquareMatrix m, int max_sweeps = 100) {
  const std::size_t n = m.n;
  SquareMatrix v = SquareMatrix::identity(n);

  auto off_diagonal = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += m(i, j) * m(i, j);
    return s;
  };
  double scale = 0.0;
  for (double x : m.a) scale += x * x;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    const double off = off_diagonal();
    if (off == 0.0 || off <= 1e-30 * scale) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = m(p, q);
        if (apq == 0.0) continue;
        const double app = m(p, p), aqq = m(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double mkp = m(k, p), mkq = m(k, q);
          m(k, p) = c * mkp - s * mkq;
          m(k, q) = s * mkp + c * mkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double mpk = m(p, k), mqk = m(q, k);
          m(p, k) = c * mpk - s * mqk;
          m(q, k) = s * mpk + c * mqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return m(x, x) > m(y, y); });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors = SquareMatrix(n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = m(order[j], order[j]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
  }
  return out;
}

// Sample covariance (divisor n-1) of the rows of `samples`, plus column means.
inline SquareMatrix covariance(const Tensor& samples, std::vector<double>* means_out = nullptr) {
  const std::size_t n = samples.rows(), d = samples.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += samples(i, j);
  for (double& m : mean) m /= static_cast<double>(n);
  SquareMatrix cov(d);
  std::vector<double> centered(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) centered[j] = samples(i, j) - mean[j];
    for (std::size_t a = 0; a < d; ++a) {
      if (centered[a] == 0.0) continue;
      for (std::size_t b = a; b < d; ++b) cov(a, b) += centered[a] * centered[b];
    }
  }
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov(a, b) /= denom;
      cov(b, a) = cov(a, b);
    }
  if (means_out) *means_out = std::move(mean);
  return cov;
}

struct EigenResult {
  Tensor components;  // k x d, orthonormal rows
  std::vector<double> explained_variance;
  std::vector<double> explained_ratio;
  std::vector<double> mean;  // column means used for centering

  // Coordinates of `samples` (n x d) in the component basis (n x k).
  Tensor project(const Tensor& samples) const {
    const std::size_t k = components.rows(), d = components.cols();
    Tensor out = Tensor::matrix(samples.rows(), k);
    for (std::size_t i = 0; i < samples.rows(); ++i)
      for (std::size_t c = 0; c < k; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += (samples(i, j) - mean[j]) * components(c, j);
        out(i, c) = static_cast<float>(acc);
      }
    return out;
  }
};

// Top-k principal components of the mean-centred rows. Each component is
// sign-normalised so that its largest-magnitude entry is positive.
inline EigenResult pca_topk(const Tensor& samples, std::size_t k) {
  const std::size_t n = samples.rows(), d = samples.cols();
  if (samples.rank() != 2 || n < 2) throw DataError("pca_topk needs a matrix with at least 2 rows");
  if (k < 1 || k > std::min(n, d)) {
    throw DataError("pca_topk: k=" + std::to_string(k) + " outside [1, " +
                    std::to_string(std::min(n, d)) + "]");
  }
  EigenResult out;
  const SymmetricEigen eig = jacobi_eigen(covariance(samples, &out.mean));
  double total = 0.0;
  for (double v : eig.values) total += std::max(v, 0.0);

  out.components = Tensor::matrix(k, d);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (std::abs(eig.vectors(i, c)) > std::abs(eig.vectors(arg, c))) arg = i;
    const double sign = eig.vectors(arg, c) < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < d; ++i) out.components(c, i) = static_cast<float>(sign * eig.vectors(i, c));
    const double var = std::max(eig.values[c], 0.0);
    out.explained_variance.push_back(var);
    out.explained_ratio.push_back(total > 0.0 ? var / total : 0.0);
  }
  return out;
}

// In-place Cholesky factor (lower triangle) of an SPD matrix.
inline SquareMatrix cholesky(const SquareMatrix& m) {
  const std::size_t n = m.n;
  SquareMatrix l(n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = m(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) throw NumericError("cholesky: matrix is not positive definite at pivot " + std::to_string(j));
    l(j, j) = std::sqrt(diag);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

// Solves L L^T x = b.
inline std::vector<double> cholesky_solve(const SquareMatrix& l, std::span<const double> b) {
  const std::size_t n = l.n;
  std::vector<double> y(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) y[i] -= l(i, k) * y[k];
    y[i] /= l(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) y[i] -= l(k, i) * y[k];
    y[i] /= l(i, i);
  }
  return y;
}

inline SquareMatrix gram_rows(const Tensor& w) {
  const std::size_t k = w.rows();
  SquareMatrix g(k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j) g(i, j) = g(j, i) = dot(w.row(i), w.row(j));
  return g;
}

// Minimum-norm lift from the row space of W (k x d) back to R^d:
// x = W^T (W W^T)^{-1} v. The factorisation is computed once and reused.
class PseudoInverseLift {
 public:
  static constexpr double min_singular_value = 1e-8;

  explicit PseudoInverseLift(const Tensor& w) : w_(w) {
    if (w.rank() != 2 || w.rows() == 0) throw DataError("pinv_lift: W must be a non-empty matrix");
    if (w.rows() > w.cols()) {
      throw DataError("pinv_lift: W has more rows (" + std::to_string(w.rows()) + ") than columns (" +
                      std::to_string(w.cols()) + "), cannot have full row rank");
    }
    const SquareMatrix g = gram_rows(w);
    const SymmetricEigen eig = jacobi_eigen(g);
    const double smallest = eig.values.back();
    if (!(smallest > min_singular_value)) {
      throw NumericError("pinv_lift: W is rank deficient, smallest singular value of W W^T is " +
                         std::to_string(smallest));
    }
    factor_ = cholesky(g);
  }

  std::size_t rank() const { return w_.rows(); }
  std::size_t dim() const { return w_.cols(); }
  const Tensor& weights() const { return w_; }

  std::vector<float> lift(std::span<const float> delta) const {
    if (delta.size() != w_.rows()) {
      throw DataError("pinv_lift: delta has " + std::to_string(delta.size()) + " entries, expected " +
                      std::to_string(w_.rows()));
    }
    std::vector<double> rhs(delta.begin(), delta.end());
    const std::vector<double> y = cholesky_solve(factor_, rhs);
    std::vector<float> out(w_.cols());
    for (std::size_t j = 0; j < w_.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < w_.rows(); ++r) acc += y[r] * w_(r, j);
      out[j] = static_cast<float>(acc);
    }
    return out;
  }

  // Orthogonal projection of x onto span(W^T).
  std::vector<float> project(std::span<const float> x) const { return lift(matvec(w_, x)); }

 private:
  Tensor w_;
  SquareMatrix factor_;
};

inline std::vector<float> pinv_lift(const Tensor& w, std::span<const float> delta) {
  return PseudoInverseLift(w).lift(delta);
}

// Orthonormal basis (as rows) of the row space of `a`, via modified Gram-Schmidt.
inline std::vector<std::vector<double>> orthonormal_rows(const Tensor& a, double tol = 1e-10) {
  std::vector<std::vector<double>> basis;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::vector<double> v(a.row(r).begin(), a.row(r).end());
    for (const auto& q : basis) {
      double proj = 0.0;
      for (std::size_t j = 0; j < v.size(); ++j) proj += v[j] * q[j];
      for (std::size_t j = 0; j < v.size(); ++j) v[j] -= proj * q[j];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm <= tol) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

// Principal angles (degrees, ascending) between the row spaces of a and b.
inline std::vector<double> principal_angles_deg(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw DataError("principal_angles: ambient dimensions differ");
  const auto qa = orthonormal_rows(a);
  const auto qb = orthonormal_rows(b);
  const std::size_t ka = qa.size(), kb = qb.size();
  if (ka == 0 || kb == 0) return {};
  // Cross Gram C = Qa Qb^T; singular values of C are the cosines.
  std::vector<double> c(ka * kb, 0.0);
  for (std::size_t i = 0; i < ka; ++i)
    for (std::size_t j = 0; j < kb; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < qa[i].size(); ++t) s += qa[i][t] * qb[j][t];
      c[i * kb + j] = s;
    }
  const std::size_t m = std::min(ka, kb);
  SquareMatrix ccT(ka);
  for (std::size_t i = 0; i < ka; ++i)
    for (std::size_t j = 0; j < ka; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < kb; ++t) s += c[i * kb + t] * c[j * kb + t];
      ccT(i, j) = s;
    }
  const SymmetricEigen eig = jacobi_eigen(ccT);
  std::vector<double> angles;
  for (std::size_t i = 0; i < m; ++i) {
    const double cosine = std::sqrt(std::clamp(eig.values[i], 0.0, 1.0));
    angles.push_back(std::acos(std::min(1.0, cosine)) * 180.0 / 3.14159265358979323846);
  }
  std::sort(angles.begin(), angles.end());
  return angles;
}

}  // namespace vitbind
