#pragma once

#include <cstddef>

// Dense kernels behind the encoder. All operands are row-major and
// contiguous. The `reference` namespace keeps the plain triple-loop versions
// that tests and the benchmark compare against.
namespace stn::kernels {

/// C (m×n) = A (m×k) · B (k×n), or C += A·B when accumulate is set.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate = false);

/// C (m×n) += Aᵀ · B with A (k×m) and B (k×n).
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);

/// C (m×n) = A (m×k) · Bᵀ with B (n×k), or C += A·Bᵀ when accumulate is set.
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false);

/// Maximum number of worker threads the kernels may use (0 = runtime default).
/// Honors the STN_THREADS environment variable on first use.
int max_threads();
void set_max_threads(int threads);

namespace reference {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate = false);
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false);

}  // namespace reference

}  // namespace stn::kernels
