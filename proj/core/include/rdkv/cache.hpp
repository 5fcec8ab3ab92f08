#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "rdkv/errors.hpp"

namespace rdkv {

/// Static geometry of a KV cache. Query heads are grouped onto KV heads
/// (GQA); group() is the number of query heads sharing one KV head.
struct CacheShape {
    int layers = 1;
    int q_heads = 1;
    int kv_heads = 1;
    int head_dim = 1;
    int seq_len = 1;

    int group() const { return q_heads / kv_heads; }
    void validate() const;  // throws std::invalid_argument
};

/// Observation-window geometry: the trailing `window` prefill queries are
/// kept as the probe; raw token scores are smoothed with a centered
/// moving average of odd width `pool_kernel`.
struct ProbeConfig {
    int window = 32;
    int pool_kernel = 5;

    void validate() const;
};

/// Non-owning [rows x cols] view over contiguous row-major floats.
struct MatrixView {
    const float* data = nullptr;
    int rows = 0;
    int cols = 0;

    std::span<const float> row(int r) const {
        return {data + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }
    float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

/// Dense row-major [d0 x d1 x d2] float tensor.
class Tensor3 {
public:
    Tensor3() = default;
    Tensor3(int d0, int d1, int d2)
        : d0_(d0), d1_(d1), d2_(d2),
          data_(static_cast<std::size_t>(d0) * d1 * d2, 0.0f) {}

    int dim0() const { return d0_; }
    int dim1() const { return d1_; }
    int dim2() const { return d2_; }

    float& at(int i, int j, int k) { return data_[idx(i, j, k)]; }
    float at(int i, int j, int k) const { return data_[idx(i, j, k)]; }

    std::span<float> row(int i, int j) {
        return {data_.data() + idx(i, j, 0), static_cast<std::size_t>(d2_)};
    }
    std::span<const float> row(int i, int j) const {
        return {data_.data() + idx(i, j, 0), static_cast<std::size_t>(d2_)};
    }

    /// [d1 x d2] slice at outer index i.
    MatrixView slice(int i) const { return {data_.data() + idx(i, 0, 0), d1_, d2_}; }
    /// [rows*d1 x d2] view over `count` consecutive outer slices.
    MatrixView slab(int first, int count) const {
        return {data_.data() + idx(first, 0, 0), count * d1_, d2_};
    }

    std::vector<float>& data() { return data_; }
    const std::vector<float>& data() const { return data_; }

private:
    std::size_t idx(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * d1_ + j) * d2_ + k;
    }
    int d0_ = 0, d1_ = 0, d2_ = 0;
    std::vector<float> data_;
};

/// One prefilled cache: per layer, K and V as [kv_heads x T x d] and the
/// probe query slice as [q_heads x S_w x d]. Immutable after construction.
struct KVCache {
    CacheShape shape;
    int probe_window = 0;  // S_w, rows of probe_q per query head
    std::vector<Tensor3> k;        // per layer
    std::vector<Tensor3> v;        // per layer
    std::vector<Tensor3> probe_q;  // per layer

    MatrixView k_head(int layer, int kv_head) const { return k[layer].slice(kv_head); }
    MatrixView v_head(int layer, int kv_head) const { return v[layer].slice(kv_head); }
    MatrixView probe_head(int layer, int q_head) const { return probe_q[layer].slice(q_head); }
    /// Stacked probe rows of every query head mapped to `kv_head`:
    /// [group()*S_w x d].
    MatrixView probe_group(int layer, int kv_head) const {
        return probe_q[layer].slab(kv_head * shape.group(), shape.group());
    }

    void validate() const;
};

/// Row-stochastic attention matrix over T tokens. Entries are stored in
/// double: probability identities downstream are asserted at 1e-12.
struct AttentionMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;  // row-major

    std::span<const double> row(int r) const {
        return {a.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }
};

/// Causal softmax of q_window against K. Row r covers tokens
/// 0..causal_offsets[r] and is exactly zero past the offset.
AttentionMatrix attention_probe(MatrixView q_window, MatrixView k,
                                std::span<const int> causal_offsets);

/// o_r = sum_t a[r,t] * v_t. Returns row-major [rows x d] in double.
std::vector<double> attention_output(const AttentionMatrix& a, MatrixView v);

/// `RDKVC001` container: magic, u32-le header length, JSON header, then raw
/// little-endian f32 payload (K, V, probe_Q in declared order).
void save_cache(const KVCache& cache, std::ostream& out);
KVCache load_cache(std::istream& in);
void save_cache_file(const KVCache& cache, const std::string& path);
KVCache load_cache_file(const std::string& path);

/// Deterministic standard-normal cache. The first `outlier_channels` K
/// channels are scaled by `outlier_scale` in every layer and head.
KVCache gen_synthetic_cache(std::uint64_t seed, const CacheShape& shape, int probe_window,
                            int outlier_channels = 0, double outlier_scale = 1.0);

}  // namespace rdkv
