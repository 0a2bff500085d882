#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

#include "stn/error.hpp"
#include "stn/numerics.hpp"
#include "test_util.hpp"

using namespace stn;
using stn::test::random_spd;

namespace {

double reconstruction_error(const Matrix& l, const Matrix& m) {
  return max_relative_error(matmul(l, transpose(l)), m);
}

double eigen_log_det(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(e);
  double s = 0.0;
  for (double v : solver.eigenvalues()) s += std::log(v);
  return s;
}

}  // namespace

TEST(Cholesky, IdentityAndDiagonal) {
  EXPECT_EQ(cholesky(Matrix::identity(3)), Matrix::identity(3));
  const Matrix l = cholesky(Matrix::diagonal(std::vector<double>{4.0, 9.0}));
  EXPECT_EQ(l, Matrix::diagonal(std::vector<double>{2.0, 3.0}));
}

TEST(Cholesky, ReconstructsRandomSpd) {
  std::mt19937_64 rng(1);
  for (std::size_t n : {1u, 2u, 5u, 8u, 20u, 64u}) {
    const Matrix a = random_spd(n, rng);
    const Matrix l = cholesky(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) EXPECT_EQ(l(i, j), 0.0);
    EXPECT_LT(reconstruction_error(l, a), 1e-10) << "n=" << n;
  }
}

TEST(Cholesky, RejectsIndefiniteAndAsymmetric) {
  Matrix m = Matrix::diagonal(std::vector<double>{1.0, -1.0});
  try {
    cholesky(m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotPositiveDefinite);
  }
  Matrix zero(2, 2);
  EXPECT_THROW(cholesky(zero), Error);
  Matrix asym = Matrix::identity(2);
  asym(0, 1) = 0.5;
  EXPECT_THROW(cholesky(asym), Error);
  EXPECT_THROW(cholesky(Matrix(2, 3)), Error);
}

TEST(LogDet, Examples) {
  EXPECT_EQ(log_det_spd(Matrix::identity(5)), 0.0);
  EXPECT_NEAR(log_det_spd(Matrix::diagonal(std::vector<double>{2.0, 3.0})), std::log(6.0), 1e-14);
}

TEST(LogDet, MatchesEigenvalueOracle) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix a = random_spd(6, rng);
    EXPECT_NEAR(log_det_spd(a), eigen_log_det(a), 1e-10 * std::max(1.0, std::abs(eigen_log_det(a))));
  }
}

TEST(LogDet, InversePairSumsToZero) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix a = random_spd(7, rng);
    Matrix inv = spd_solve(a, Matrix::identity(7));
    // Symmetrize away solve round-off before the symmetry check.
    const Matrix sym = [&] {
      Matrix s(7, 7);
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 7; ++j) s(i, j) = 0.5 * (inv(i, j) + inv(j, i));
      return s;
    }();
    EXPECT_NEAR(log_det_spd(a) + log_det_spd(sym), 0.0, 1e-8);
  }
}

TEST(SpdSolve, Examples) {
  std::mt19937_64 rng(4);
  const Matrix b = stn::test::random_matrix(4, 3, rng);
  EXPECT_LT(max_relative_error(spd_solve(Matrix::identity(4), b), b), 1e-15);
  const Matrix x = spd_solve(Matrix::diagonal(std::vector<double>{2.0, 4.0}), Matrix(2, 1, {2.0, 4.0}));
  EXPECT_DOUBLE_EQ(x(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(x(1, 0), 1.0);
}

TEST(SpdSolve, ResidualSmall) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix a = random_spd(10, rng);
    const Matrix b = stn::test::random_matrix(10, 4, rng);
    const Matrix x = spd_solve(a, b);
    EXPECT_LT(max_relative_error(matmul(a, x), b), 1e-8);
    const Vector v = stn::test::random_vector(10, rng);
    const Matrix l = cholesky(a);
    const Vector y = solve_lower_transposed(l, solve_lower(l, v));
    const Vector back = matvec(a, y);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(back[i], v[i], 1e-8 * (1.0 + std::abs(v[i])));
  }
  EXPECT_THROW(spd_solve(Matrix::identity(3), Matrix(2, 1)), Error);
}

TEST(SpdSqrt, Examples) {
  EXPECT_LT(max_relative_error(spd_sqrt(Matrix::identity(4)), Matrix::identity(4)), 1e-14);
  const Matrix r = spd_sqrt(Matrix::diagonal(std::vector<double>{4.0, 16.0}));
  EXPECT_NEAR(r(0, 0), 2.0, 1e-14);
  EXPECT_NEAR(r(1, 1), 4.0, 1e-14);
  EXPECT_NEAR(r(0, 1), 0.0, 1e-14);
}

TEST(SpdSqrt, SymmetricAndReconstructs) {
  std::mt19937_64 rng(6);
  for (std::size_t n : {1u, 3u, 5u, 16u}) {
    const Matrix a = random_spd(n, rng);
    const Matrix r = spd_sqrt(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(r(i, j), r(j, i));
    EXPECT_LT(max_relative_error(matmul(r, r), a), 1e-8);
  }
  EXPECT_THROW(spd_sqrt(Matrix::diagonal(std::vector<double>{1.0, -2.0})), Error);
}

TEST(SymmetricEigen, AscendingAndOrthonormal) {
  std::mt19937_64 rng(7);
  const Matrix a = random_spd(6, rng);
  const SymmetricEigen e = symmetric_eigen(a);
  EXPECT_TRUE(std::is_sorted(e.values.begin(), e.values.end()));
  const Matrix vtv = matmul(transpose(e.vectors), e.vectors);
  EXPECT_LT(max_relative_error(vtv, Matrix::identity(6)), 1e-12);
}

TEST(FitGaussian, ZeroVarianceEngagesFloor) {
  const std::vector<Vector> pts(5, Vector{1.0, -2.0, 3.0});
  const GaussianStats g = fit_gaussian(pts, 1e-3);
  EXPECT_EQ(g.mu, (Vector{1.0, -2.0, 3.0}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(g.sigma(i, j), i == j ? 1e-11 : 0.0, 1e-25);
  EXPECT_NO_THROW(cholesky(g.sigma));
}

TEST(FitGaussian, TwoPointVariance) {
  const GaussianStats g = fit_gaussian(std::vector<Vector>{{0.0}, {2.0}}, 0.0);
  EXPECT_DOUBLE_EQ(g.mu[0], 1.0);
  EXPECT_DOUBLE_EQ(g.sigma(0, 0), 1.0);
}

TEST(FitGaussian, SamplingOracle) {
  std::mt19937_64 rng(8);
  const Matrix truth(3, 3, {2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 0.5});
  const Matrix l = cholesky(truth);
  const std::size_t n = 100000;
  Matrix samples(n, 3);
  std::normal_distribution<double> z(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double e[3] = {z(rng), z(rng), z(rng)};
    for (std::size_t a = 0; a < 3; ++a) {
      double s = 1.0 * a;
      for (std::size_t b = 0; b <= a; ++b) s += l(a, b) * e[b];
      samples(i, a) = s;
    }
  }
  const GaussianStats g = fit_gaussian(samples, 1e-6);
  Matrix diff = g.sigma;
  for (std::size_t k = 0; k < 9; ++k) diff.data()[k] -= truth.data()[k];
  EXPECT_LT(frobenius_norm(diff) / frobenius_norm(truth), 0.05);
  for (std::size_t a = 0; a < 3; ++a) EXPECT_NEAR(g.mu[a], 1.0 * a, 0.02);
}

TEST(FitGaussian, ShrinkageFollowsMeanEigenvalue) {
  std::mt19937_64 rng(9);
  const Matrix x = stn::test::random_matrix(4, 10, rng);
  const GaussianStats raw = fit_gaussian(x, 0.0);
  const GaussianStats reg = fit_gaussian(x, 0.5);
  const double expected = 0.5 * trace(raw.sigma) / 10.0;
  EXPECT_NEAR(reg.epsilon, expected, 1e-15);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(reg.sigma(i, i) - raw.sigma(i, i), expected, 1e-14);
}

TEST(FitGaussian, AlwaysFactorsAndIsPermutationInvariant) {
  std::mt19937_64 rng(10);
  for (std::size_t m : {1u, 2u, 5u, 16u, 40u}) {
    std::vector<Vector> pts;
    for (std::size_t i = 0; i < m; ++i) pts.push_back(stn::test::random_vector(12, rng));
    const GaussianStats g = fit_gaussian(pts, 1e-2);
    EXPECT_NO_THROW(cholesky(g.sigma)) << "M=" << m;
    std::vector<Vector> shuffled = pts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const GaussianStats h = fit_gaussian(shuffled, 1e-2);
    EXPECT_LT(max_relative_error(g.sigma, h.sigma), 1e-13);
    for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(g.mu[j], h.mu[j], 1e-14);
  }
}

TEST(FitGaussian, Errors) {
  EXPECT_THROW(fit_gaussian(std::vector<Vector>{{1.0, 2.0}, {1.0}}, 1e-2), Error);
  EXPECT_THROW(fit_gaussian(std::vector<Vector>{}, 1e-2), Error);
  EXPECT_THROW(fit_gaussian(std::vector<Vector>{{1.0}}, -1.0), Error);
}

TEST(FitGaussian, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const std::size_t m = 6, c = 4;
  Matrix x = stn::test::random_matrix(m, c, rng);
  const Matrix w = stn::test::random_matrix(c, c, rng);
  const Vector u = stn::test::random_vector(c, rng);
  // L = <W, Σ> + <u, μ>
  auto loss = [&](const Matrix& s) {
    const GaussianStats g = fit_gaussian(s, 0.1);
    double v = 0.0;
    for (std::size_t k = 0; k < c * c; ++k) v += w.data()[k] * g.sigma.data()[k];
    for (std::size_t k = 0; k < c; ++k) v += u[k] * g.mu[k];
    return v;
  };
  const GaussianStats g = fit_gaussian(x, 0.1);
  const Matrix dx = fit_gaussian_backward(x, g, 0.1, w, u);
  const double h = 1e-6;
  for (std::size_t k = 0; k < m * c; ++k) {
    const double x0 = x.data()[k];
    x.data()[k] = x0 + h;
    const double fp = loss(x);
    x.data()[k] = x0 - h;
    const double fm = loss(x);
    x.data()[k] = x0;
    EXPECT_LT(stn::test::rel_err((fp - fm) / (2 * h), dx.data()[k], 1e-6), 1e-6) << k;
  }
}
