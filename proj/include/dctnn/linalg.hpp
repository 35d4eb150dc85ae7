#pragma once

// Small dense linear algebra on top of Eigen: symmetric eigensolver, thin QR,
// SPD solves and subspace comparisons. Sizes here are mode dimensions and
// ranks, i.e. at most a few dozen.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include "dctnn/error.hpp"
#include "dctnn/tensor.hpp"

namespace dctnn::linalg {

struct SymEigen {
  std::vector<double> values;  // descending
  Matrix vectors;              // column k pairs with values[k]
};

// Eigen's self-adjoint solver, reordered to descending eigenvalues. The input
// is symmetrized first.
inline SymEigen sym_eigen(const Matrix& input) {
  if (input.rows() != input.cols()) throw ShapeError("sym_eigen: matrix must be square");
  const std::size_t n = input.rows();
  const Eigen::MatrixXd a = input.eigen();
  const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericalError("sym_eigen: eigensolver did not converge");
  SymEigen out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const auto src = Eigen::Index(n - 1 - k);  // ascending -> descending
    out.values[k] = es.eigenvalues()[src];
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, k) = es.eigenvectors()(Eigen::Index(r), src);
  }
  return out;
}

// Flip each column so that its largest-magnitude entry is positive.
inline void fix_column_signs(Matrix& m) {
  for (std::size_t c = 0; c < m.cols(); ++c) {
    std::size_t best = 0;
    for (std::size_t r = 1; r < m.rows(); ++r)
      if (std::abs(m(r, c)) > std::abs(m(best, c)) + 1e-14) best = r;
    if (m(best, c) < 0)
      for (std::size_t r = 0; r < m.rows(); ++r) m(r, c) = -m(r, c);
  }
}

inline Matrix leading_columns(const Matrix& m, std::size_t k) {
  Matrix out(m.rows(), k);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < k; ++c) out(r, c) = m(r, c);
  return out;
}

// Householder thin QR; returns the D x r orthonormal factor of a D x r
// matrix (r <= D).
inline Matrix thin_q(const Matrix& input) {
  const std::size_t m = input.rows(), n = input.cols();
  if (n > m) throw ShapeError("thin_q: more columns than rows");
  Eigen::MatrixXd a = input.eigen();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(Eigen::Index(m), Eigen::Index(n));
  Matrix out(m, n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = q(Eigen::Index(r), Eigen::Index(c));
  return out;
}

inline Matrix gram(const Matrix& a) { return a.transpose() * a; }

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("hadamard: shape mismatch");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

// Cholesky factor of an SPD matrix, kept for repeated solves.
class Cholesky {
 public:
  Cholesky() = default;
  explicit Cholesky(const Matrix& spd) : n_(spd.rows()), l_(spd.rows(), spd.cols()) {
    if (spd.rows() != spd.cols()) throw ShapeError("Cholesky: matrix must be square");
    for (std::size_t j = 0; j < n_; ++j) {
      double d = spd(j, j);
      for (std::size_t k = 0; k < j; ++k) d -= l_(j, k) * l_(j, k);
      if (!(d > 0.0)) throw NumericalError("Cholesky: matrix is not positive definite");
      l_(j, j) = std::sqrt(d);
      for (std::size_t i = j + 1; i < n_; ++i) {
        double s = spd(i, j);
        for (std::size_t k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
        l_(i, j) = s / l_(j, j);
      }
    }
  }

  std::vector<double> solve(std::span<const double> b) const {
    if (b.size() != n_) throw ShapeError("Cholesky::solve: rhs length mismatch");
    std::vector<double> y(b.begin(), b.end());
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t k = 0; k < i; ++k) y[i] -= l_(i, k) * y[k];
      y[i] /= l_(i, i);
    }
    for (std::size_t i = n_; i-- > 0;) {
      for (std::size_t k = i + 1; k < n_; ++k) y[i] -= l_(k, i) * y[k];
      y[i] /= l_(i, i);
    }
    return y;
  }

  const Matrix& factor() const { return l_; }

 private:
  std::size_t n_ = 0;
  Matrix l_;
};

// Solves a X = b for symmetric PSD a via its eigendecomposition, dropping
// eigenvalues below rel_cutoff * max (pseudo-inverse). Used inside ALS where
// the normal equations may be rank deficient.
inline Matrix sym_pinv(const Matrix& a, double rel_cutoff = 1e-13) {
  const auto eig = sym_eigen(a);
  const std::size_t n = a.rows();
  const double cutoff = rel_cutoff * std::max(eig.values.empty() ? 0.0 : eig.values[0], 0.0);
  Matrix out(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    if (eig.values[k] <= cutoff) continue;
    const double inv = 1.0 / eig.values[k];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out(i, j) += inv * eig.vectors(i, k) * eig.vectors(j, k);
  }
  return out;
}

// Sines of the principal angles between span(a) and the subspace spanned by
// the orthonormal columns of q_basis: singular values of (I - Q Q^T) A_orth,
// sorted ascending. Accurate for tiny angles, unlike an arccos of cosines.
inline std::vector<double> principal_angle_sines(const Matrix& a, const Matrix& q_basis) {
  if (a.rows() != q_basis.rows()) throw ShapeError("principal_angle_sines: row mismatch");
  const Matrix qa = thin_q(a);
  Matrix resid = qa;
  const Matrix coeff = q_basis.transpose() * qa;
  const Matrix proj = q_basis * coeff;
  for (std::size_t i = 0; i < resid.data().size(); ++i) resid.data()[i] -= proj.data()[i];
  const auto eig = sym_eigen(gram(resid));
  std::vector<double> sines;
  for (double v : eig.values) sines.push_back(std::sqrt(std::max(v, 0.0)));
  std::sort(sines.begin(), sines.end());
  return sines;
}

inline std::vector<double> singular_values(const Matrix& a) {
  const auto eig = sym_eigen(a.rows() >= a.cols() ? gram(a) : gram(a.transpose()));
  std::vector<double> s;
  for (double v : eig.values) s.push_back(std::sqrt(std::max(v, 0.0)));
  return s;
}

}  // namespace dctnn::linalg
