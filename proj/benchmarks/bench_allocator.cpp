#include <benchmark/benchmark.h>

#include <cmath>
#include <random>
#include <vector>

#include "rdkv/allocator.hpp"

namespace {

using namespace rdkv;

DistortionTable bench_eps() {
    DistortionTable t;
    t.eps = {{0, 1.0}, {2, 0.313}, {4, 0.014}, {8, 4.9e-5}, {16, 0.0}};
    return t;
}

std::vector<float> bench_weights(int n) {
    std::mt19937_64 eng(12345);
    std::vector<float> w(n);
    for (auto& x : w) {
        const double u = (static_cast<double>(eng() >> 11) + 0.5) * 0x1p-53;
        x = static_cast<float>(std::pow(10.0, 4.0 * u - 2.0));
    }
    return w;
}

void BM_mckp_bisect(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const auto weights = bench_weights(n);
    const auto eps = bench_eps();
    for (auto _ : state) {
        auto alloc = mckp_bisect(weights, eps, 4.0);
        benchmark::DoNotOptimize(alloc.objective);
    }
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_mckp_bisect)->Arg(1 << 10)->Arg(1 << 14)->Arg(1 << 17);

void BM_waterfill(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const auto wf = bench_weights(n);
    std::vector<double> coeffs(wf.begin(), wf.end());
    for (auto _ : state) {
        auto alloc = waterfill_continuous(coeffs, 4.0 * n);
        benchmark::DoNotOptimize(alloc.lambda);
    }
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_waterfill)->Arg(1 << 10)->Arg(1 << 14);

void BM_per_unit_argmin(benchmark::State& state) {
    const auto eps = bench_eps();
    const BitSet bits;
    double lambda = 1e-3;
    for (auto _ : state) {
        benchmark::DoNotOptimize(per_unit_argmin(1.7, eps, lambda, bits));
        lambda *= 1.0000001;
    }
}
BENCHMARK(BM_per_unit_argmin);

}  // namespace

BENCHMARK_MAIN();
