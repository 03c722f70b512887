// SPDX-License-Identifier: Apache-2.0
// Parallel kernels against their serial references.

#include <benchmark/benchmark.h>

#include <vector>

#include "vaguide/kernels.hpp"
#include "vaguide/phantom.hpp"
#include "vaguide/rng.hpp"

namespace {

std::vector<float> random_matrix(std::size_t n, std::uint64_t seed) {
  vaguide::SplitMix64 rng(seed);
  std::vector<float> v(n);
  for (auto &x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State &state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n * n, 1), b = random_matrix(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      vaguide::kernels::gemm(n, n, n, a.data(), b.data(), c.data(), false);
    else
      vaguide::kernels::serial::gemm(n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n * n * n));
}

template <bool Parallel>
void BM_RenderSlice(benchmark::State &state) {
  const auto ph = vaguide::make_phantom(1);
  const auto pose = vaguide::standard_planes(ph)[4].pose;
  const int size = static_cast<int>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) {
    auto img = Parallel ? vaguide::render_slice(ph, pose, 0.3, size, size, ++seed)
                        : vaguide::render_slice_serial(ph, pose, 0.3, size, size, ++seed);
    benchmark::DoNotOptimize(img.data.data());
  }
  state.SetItemsProcessed(state.iterations() * size * size);
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/openmp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_RenderSlice<false>)->Name("render_slice/serial")->Arg(64)->Arg(128);
BENCHMARK(BM_RenderSlice<true>)->Name("render_slice/openmp")->Arg(64)->Arg(128);

BENCHMARK_MAIN();
