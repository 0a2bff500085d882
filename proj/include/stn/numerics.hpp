#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace stn {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  void fill(double v);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix transpose(const Matrix& m);
Matrix matmul(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
double trace(const Matrix& m);
double dot(std::span<const double> a, std::span<const double> b);
double frobenius_norm(const Matrix& m);
/// max |a - b| / max(1, max |b|)
double max_relative_error(const Matrix& a, const Matrix& b);
bool all_finite(std::span<const double> v);

/// Lower Cholesky factor L with L·Lᵀ = m. Throws NotPositiveDefinite on a
/// non-positive pivot; the usual remedy is more covariance shrinkage.
Matrix cholesky(const Matrix& m);

/// Solves L·X = B for lower-triangular L.
Matrix solve_lower(const Matrix& lower, const Matrix& b);
/// Solves Lᵀ·X = B for lower-triangular L.
Matrix solve_lower_transposed(const Matrix& lower, const Matrix& b);
Vector solve_lower(const Matrix& lower, std::span<const double> b);
Vector solve_lower_transposed(const Matrix& lower, std::span<const double> b);

double log_det_from_cholesky(const Matrix& lower);
double log_det_spd(const Matrix& m);

/// X with m·X = B, via two triangular solves against the Cholesky factor.
Matrix spd_solve(const Matrix& m, const Matrix& b);
Matrix spd_solve_factored(const Matrix& lower, const Matrix& b);

struct SymmetricEigen {
  Vector values;   // ascending
  Matrix vectors;  // columns are eigenvectors
};
SymmetricEigen symmetric_eigen(const Matrix& m);

/// Principal square root of an SPD matrix (symmetric, squares back to m).
Matrix spd_sqrt(const Matrix& m);

/// Mean and regularized maximum-likelihood covariance of a sample set.
struct GaussianStats {
  Vector mu;
  Matrix sigma;
  /// Shrinkage added to the diagonal.
  double epsilon = 0.0;

  std::size_t dim() const noexcept { return mu.size(); }
};

/// Samples are the rows of `samples`. Σ = (1/M)Σ(x−μ)(x−μ)ᵀ + εI with
/// ε = epsilon_scale · max(trace(Σ_raw)/c, 1e-8).
GaussianStats fit_gaussian(const Matrix& samples, double epsilon_scale);
GaussianStats fit_gaussian(std::span<const Vector> samples, double epsilon_scale);

inline constexpr double kShrinkageFloor = 1e-8;

/// Adjoint of fit_gaussian: maps dL/dΣ (need not be symmetric) and dL/dμ onto
/// dL/dsamples.
Matrix fit_gaussian_backward(const Matrix& samples, const GaussianStats& stats,
                             double epsilon_scale, const Matrix& grad_sigma,
                             std::span<const double> grad_mu);

}  // namespace stn
