#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "rdkv/cache.hpp"
#include "rdkv/trizone.hpp"

namespace {

using namespace rdkv;

struct BenchHead {
    Tensor3 k{1, 1, 1};
    Tensor3 v{1, 1, 1};
    HeadAllocation alloc;
    TriZoneCache cache;
    std::vector<float> q;
};

BenchHead make_head(int t_len, int d) {
    std::mt19937_64 eng(777);
    auto uniform = [&] { return (static_cast<double>(eng() >> 11) + 0.5) * 0x1p-53; };
    BenchHead h;
    h.k = Tensor3(1, t_len, d);
    h.v = Tensor3(1, t_len, d);
    for (auto& x : h.k.data()) x = static_cast<float>(uniform() * 2.0 - 1.0);
    for (auto& x : h.v.data()) x = static_cast<float>(uniform() * 2.0 - 1.0);
    const int choices[5] = {0, 2, 4, 8, 16};
    h.alloc.v_bits.resize(t_len);
    h.alloc.k_bits.resize(d);
    for (auto& b : h.alloc.v_bits) b = choices[eng() % 5];
    h.alloc.v_bits[0] = 8;
    for (auto& b : h.alloc.k_bits) b = choices[eng() % 5];
    for (int t = 0; t < t_len; ++t) {
        if (h.alloc.v_bits[t] > 0) {
            h.alloc.kept.kept.push_back(t);
            if (h.alloc.v_bits[t] == 16) h.alloc.kept.v16.push_back(t);
        } else {
            h.alloc.kept.evicted.push_back(t);
        }
    }
    h.cache = build_trizone(h.k.slice(0), h.v.slice(0), h.alloc);
    h.q.resize(d);
    for (auto& x : h.q) x = static_cast<float>(uniform() * 2.0 - 1.0);
    return h;
}

void BM_build_trizone(benchmark::State& state) {
    auto h = make_head(static_cast<int>(state.range(0)), 128);
    for (auto _ : state) {
        auto cache = build_trizone(h.k.slice(0), h.v.slice(0), h.alloc);
        benchmark::DoNotOptimize(cache.kept.size());
    }
}
BENCHMARK(BM_build_trizone)->Arg(1024)->Arg(4096);

void BM_packed_decode(benchmark::State& state) {
    auto h = make_head(static_cast<int>(state.range(0)), 128);
    for (auto _ : state) {
        auto out = packed_decode_step(h.q, h.cache);
        benchmark::DoNotOptimize(out[0]);
    }
    state.SetItemsProcessed(state.iterations() * h.cache.kept.size());
}
BENCHMARK(BM_packed_decode)->Arg(1024)->Arg(4096);

void BM_dense_reference_decode(benchmark::State& state) {
    auto h = make_head(static_cast<int>(state.range(0)), 128);
    for (auto _ : state) {
        auto dense = materialize(h.cache);
        auto out = dense_decode_reference(h.q, dense, {}, {}, 0);
        benchmark::DoNotOptimize(out[0]);
    }
    state.SetItemsProcessed(state.iterations() * h.cache.kept.size());
}
BENCHMARK(BM_dense_reference_decode)->Arg(1024)->Arg(4096);

void BM_fused_k_logits(benchmark::State& state) {
    auto h = make_head(static_cast<int>(state.range(0)), 128);
    for (auto _ : state) {
        auto logits = fused_k_logits(h.q, h.cache);
        benchmark::DoNotOptimize(logits.data());
    }
    state.SetItemsProcessed(state.iterations() * h.cache.kept.size());
}
BENCHMARK(BM_fused_k_logits)->Arg(1024)->Arg(4096);

void BM_pack_bits(benchmark::State& state) {
    std::vector<std::uint8_t> codes(static_cast<std::size_t>(state.range(0)));
    std::mt19937_64 eng(3);
    for (auto& c : codes) c = static_cast<std::uint8_t>(eng() & 0x3);
    for (auto _ : state) {
        auto packed = pack_bits(codes, 2);
        benchmark::DoNotOptimize(packed.data());
    }
    state.SetBytesProcessed(state.iterations() * static_cast<int64_t>(codes.size()));
}
BENCHMARK(BM_pack_bits)->Arg(1 << 12)->Arg(1 << 16);

}  // namespace
