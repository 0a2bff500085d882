#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "stn/dataset.hpp"
#include "stn/encoder.hpp"
#include "stn/kernels.hpp"

using namespace stn;

namespace {

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

template <auto Gemm>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_buffer(n * n, 1), b = random_buffer(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Gemm(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n * n * n));
}

constexpr auto fast_gemm = [](const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                              std::size_t n, bool acc) { kernels::gemm(a, b, c, m, k, n, acc); };
constexpr auto reference_gemm = [](const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                                   std::size_t n, bool acc) { kernels::reference::gemm(a, b, c, m, k, n, acc); };

const std::vector<Image>& batch() {
  static const std::vector<Image> images = [] {
    const Dataset ds = gen_synthetic({10, 8, 32, 1}).dataset;
    std::vector<Image> out;
    for (const ClassData& c : ds.classes) out.insert(out.end(), c.images.begin(), c.images.end());
    return out;
  }();
  return images;
}

void BM_encode_batch(benchmark::State& state) {
  const EncoderParams p = init_params({}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(encode_batch(p, batch()));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch().size()));
}

void BM_encode_batch_serial(benchmark::State& state) {
  const EncoderParams p = init_params({}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(encode_batch_serial(p, batch()));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch().size()));
}

}  // namespace

BENCHMARK(BM_gemm<fast_gemm>)->Name("gemm/openmp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm<reference_gemm>)->Name("gemm/serial_reference")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_encode_batch)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_encode_batch_serial)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
