#include <gtest/gtest.h>

#include <random>

#include "stn/kernels.hpp"

namespace k = stn::kernels;

namespace {

std::vector<double> random_buffer(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

}  // namespace

// Large enough shapes cross the parallel threshold.
class GemmShapes : public ::testing::TestWithParam<std::tuple<int, int, int>> {};

TEST_P(GemmShapes, FastMatchesReferenceBitwise) {
  const auto [m, kk, n] = GetParam();
  std::mt19937_64 rng(m * 131 + kk * 7 + n);
  const auto a = random_buffer(m * kk, rng), b = random_buffer(kk * n, rng), bt = random_buffer(n * kk, rng);
  const auto at = random_buffer(kk * m, rng), seed = random_buffer(m * n, rng);

  std::vector<double> fast(seed), ref(seed);
  k::gemm(a.data(), b.data(), fast.data(), m, kk, n, false);
  k::reference::gemm(a.data(), b.data(), ref.data(), m, kk, n, false);
  EXPECT_EQ(fast, ref);

  fast = seed;
  ref = seed;
  k::gemm(a.data(), b.data(), fast.data(), m, kk, n, true);
  k::reference::gemm(a.data(), b.data(), ref.data(), m, kk, n, true);
  EXPECT_EQ(fast, ref);

  fast = seed;
  ref = seed;
  k::gemm_tn_acc(at.data(), b.data(), fast.data(), m, kk, n);
  k::reference::gemm_tn_acc(at.data(), b.data(), ref.data(), m, kk, n);
  EXPECT_EQ(fast, ref);

  fast = seed;
  ref = seed;
  k::gemm_nt(a.data(), bt.data(), fast.data(), m, kk, n, true);
  k::reference::gemm_nt(a.data(), bt.data(), ref.data(), m, kk, n, true);
  EXPECT_EQ(fast, ref);
}

INSTANTIATE_TEST_SUITE_P(Shapes, GemmShapes,
                         ::testing::Values(std::make_tuple(1, 1, 1), std::make_tuple(3, 5, 7),
                                           std::make_tuple(17, 64, 192), std::make_tuple(128, 128, 128)));

TEST(Gemm, ReferenceIsATripleLoop) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6};  // 2×3
  const std::vector<double> b{7, 8, 9, 10, 11, 12};  // 3×2
  std::vector<double> c(4);
  k::reference::gemm(a.data(), b.data(), c.data(), 2, 3, 2);
  EXPECT_EQ(c, (std::vector<double>{58, 64, 139, 154}));
}
