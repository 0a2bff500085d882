#include "stn/numerics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "stn/error.hpp"

namespace stn {

namespace {

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_square(const Matrix& m, const char* what) {
  if (!m.is_square() || m.empty())
    fail(ErrorKind::DimensionMismatch, std::string(what) + " needs a square matrix, got " + shape(m));
}

void require_symmetric(const Matrix& m, const char* what) {
  require_square(m, what);
  double scale = 1.0;
  for (double v : m.data()) scale = std::max(scale, std::abs(v));
  const double tol = 1e-8 * scale;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j)
      if (!(std::abs(m(i, j) - m(j, i)) <= tol))
        fail(ErrorKind::DimensionMismatch, std::string(what) + " needs a symmetric matrix");
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_)
    fail(ErrorKind::DimensionMismatch, "matrix data length " + std::to_string(data_.size()) +
                                           " does not match " + std::to_string(rows_) + "x" +
                                           std::to_string(cols_));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    fail(ErrorKind::DimensionMismatch, "matmul " + shape(a) + " by " + shape(b));
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* crow = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size())
    fail(ErrorKind::DimensionMismatch, "matvec " + shape(a) + " by length " + std::to_string(x.size()));
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
  return y;
}

double trace(const Matrix& m) {
  require_square(m, "trace");
  double t = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) t += m(i, i);
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    fail(ErrorKind::DimensionMismatch,
         "dot of lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

double max_relative_error(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(ErrorKind::DimensionMismatch, "compare " + shape(a) + " with " + shape(b));
  double scale = 1.0;
  for (double v : b.data()) scale = std::max(scale, std::abs(v));
  double err = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) err = std::max(err, std::abs(a.data()[i] - b.data()[i]));
  return err / scale;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

Matrix cholesky(const Matrix& m) {
  require_symmetric(m, "cholesky");
  const std::size_t n = m.rows();
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = m(i, j);
      const double* li = l.row(i).data();
      const double* lj = l.row(j).data();
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      if (i == j) {
        if (!(s > 0.0))
          fail(ErrorKind::NotPositiveDefinite,
               "pivot " + std::to_string(i) + " is " + std::to_string(s) +
                   "; increase covariance regularization");
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return l;
}

Matrix solve_lower(const Matrix& lower, const Matrix& b) {
  const std::size_t n = lower.rows();
  if (b.rows() != n) fail(ErrorKind::DimensionMismatch, "solve " + shape(lower) + " against " + shape(b));
  Matrix x = b;
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* xi = x.row(i).data();
    for (std::size_t k = 0; k < i; ++k) {
      const double lik = lower(i, k);
      const double* xk = x.row(k).data();
      for (std::size_t j = 0; j < m; ++j) xi[j] -= lik * xk[j];
    }
    const double inv = 1.0 / lower(i, i);
    for (std::size_t j = 0; j < m; ++j) xi[j] *= inv;
  }
  return x;
}

Matrix solve_lower_transposed(const Matrix& lower, const Matrix& b) {
  const std::size_t n = lower.rows();
  if (b.rows() != n) fail(ErrorKind::DimensionMismatch, "solve " + shape(lower) + " against " + shape(b));
  Matrix x = b;
  const std::size_t m = b.cols();
  for (std::size_t ii = n; ii-- > 0;) {
    double* xi = x.row(ii).data();
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double lki = lower(k, ii);
      const double* xk = x.row(k).data();
      for (std::size_t j = 0; j < m; ++j) xi[j] -= lki * xk[j];
    }
    const double inv = 1.0 / lower(ii, ii);
    for (std::size_t j = 0; j < m; ++j) xi[j] *= inv;
  }
  return x;
}

Vector solve_lower(const Matrix& lower, std::span<const double> b) {
  Matrix x = solve_lower(lower, Matrix(b.size(), 1, Vector(b.begin(), b.end())));
  return std::move(x.storage());
}

Vector solve_lower_transposed(const Matrix& lower, std::span<const double> b) {
  Matrix x = solve_lower_transposed(lower, Matrix(b.size(), 1, Vector(b.begin(), b.end())));
  return std::move(x.storage());
}

double log_det_from_cholesky(const Matrix& lower) {
  double s = 0.0;
  for (std::size_t i = 0; i < lower.rows(); ++i) s += std::log(lower(i, i));
  return 2.0 * s;
}

double log_det_spd(const Matrix& m) { return log_det_from_cholesky(cholesky(m)); }

Matrix spd_solve_factored(const Matrix& lower, const Matrix& b) {
  return solve_lower_transposed(lower, solve_lower(lower, b));
}

Matrix spd_solve(const Matrix& m, const Matrix& b) {
  const Matrix l = cholesky(m);
  return spd_solve_factored(l, b);
}

SymmetricEigen symmetric_eigen(const Matrix& m) {
  require_symmetric(m, "symmetric_eigen");
  const auto n = static_cast<Eigen::Index>(m.rows());
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = 0.5 * (m(i, j) + m(j, i));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(a);
  SymmetricEigen out;
  out.values.assign(solver.eigenvalues().data(), solver.eigenvalues().data() + n);
  out.vectors = Matrix(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) out.vectors(i, j) = solver.eigenvectors()(i, j);
  return out;
}

Matrix spd_sqrt(const Matrix& m) {
  cholesky(m);  // SPD check with the same diagnostics as every other solver
  const SymmetricEigen eig = symmetric_eigen(m);
  const std::size_t n = m.rows();
  Vector root(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (!(eig.values[k] > 0.0))
      fail(ErrorKind::NotPositiveDefinite, "eigenvalue " + std::to_string(eig.values[k]));
    root[k] = std::sqrt(eig.values[k]);
  }
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += eig.vectors(i, k) * root[k] * eig.vectors(j, k);
      out(i, j) = s;
      out(j, i) = s;
    }
  return out;
}

GaussianStats fit_gaussian(const Matrix& samples, double epsilon_scale) {
  const std::size_t count = samples.rows();
  const std::size_t c = samples.cols();
  if (count == 0 || c == 0) fail(ErrorKind::DimensionMismatch, "fit_gaussian needs at least one sample");
  if (!(epsilon_scale >= 0.0)) fail(ErrorKind::InvalidConfig, "epsilon_scale must be non-negative");

  GaussianStats g;
  g.mu.assign(c, 0.0);
  for (std::size_t i = 0; i < count; ++i) {
    const auto r = samples.row(i);
    for (std::size_t j = 0; j < c; ++j) g.mu[j] += r[j];
  }
  for (double& v : g.mu) v /= static_cast<double>(count);

  Matrix centered(count, c);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < c; ++j) centered(i, j) = samples(i, j) - g.mu[j];

  g.sigma = Matrix(c, c);
  for (std::size_t i = 0; i < count; ++i) {
    const double* x = centered.row(i).data();
    for (std::size_t a = 0; a < c; ++a) {
      double* srow = g.sigma.row(a).data();
      const double xa = x[a];
      for (std::size_t b = a; b < c; ++b) srow[b] += xa * x[b];
    }
  }
  const double inv_m = 1.0 / static_cast<double>(count);
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = a; b < c; ++b) {
      const double v = g.sigma(a, b) * inv_m;
      g.sigma(a, b) = v;
      g.sigma(b, a) = v;
    }

  const double mean_eig = trace(g.sigma) / static_cast<double>(c);
  g.epsilon = epsilon_scale * std::max(mean_eig, kShrinkageFloor);
  for (std::size_t a = 0; a < c; ++a) g.sigma(a, a) += g.epsilon;
  return g;
}

GaussianStats fit_gaussian(std::span<const Vector> samples, double epsilon_scale) {
  if (samples.empty()) fail(ErrorKind::DimensionMismatch, "fit_gaussian needs at least one sample");
  const std::size_t c = samples.front().size();
  Matrix m(samples.size(), c);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].size() != c)
      fail(ErrorKind::DimensionMismatch, "sample " + std::to_string(i) + " has dim " +
                                             std::to_string(samples[i].size()) + ", expected " +
                                             std::to_string(c));
    std::copy(samples[i].begin(), samples[i].end(), m.row(i).begin());
  }
  return fit_gaussian(m, epsilon_scale);
}

Matrix fit_gaussian_backward(const Matrix& samples, const GaussianStats& stats,
                             double epsilon_scale, const Matrix& grad_sigma,
                             std::span<const double> grad_mu) {
  const std::size_t count = samples.rows();
  const std::size_t c = samples.cols();
  if (grad_sigma.rows() != c || grad_sigma.cols() != c || grad_mu.size() != c || stats.dim() != c)
    fail(ErrorKind::DimensionMismatch, "fit_gaussian_backward shapes");

  // Symmetrized adjoint of the raw covariance, including the shrinkage path
  // ε = s·trace(Σ_raw)/c when the floor is inactive.
  Matrix g(c, c);
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = 0; b < c; ++b) g(a, b) = grad_sigma(a, b) + grad_sigma(b, a);
  const double raw_mean_eig = (trace(stats.sigma) - static_cast<double>(c) * stats.epsilon) /
                              static_cast<double>(c);
  if (raw_mean_eig > kShrinkageFloor) {
    const double shift = 2.0 * epsilon_scale / static_cast<double>(c) * trace(grad_sigma);
    for (std::size_t a = 0; a < c; ++a) g(a, a) += shift;
  }

  const double inv_m = 1.0 / static_cast<double>(count);
  Matrix out(count, c);
  Vector centered(c);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < c; ++j) centered[j] = samples(i, j) - stats.mu[j];
    double* o = out.row(i).data();
    for (std::size_t a = 0; a < c; ++a) o[a] = grad_mu[a] * inv_m;
    for (std::size_t b = 0; b < c; ++b) {
      const double xb = centered[b] * inv_m;
      const double* grow = g.row(b).data();
      for (std::size_t a = 0; a < c; ++a) o[a] += grow[a] * xb;
    }
  }
  return out;
}

}  // namespace stn
