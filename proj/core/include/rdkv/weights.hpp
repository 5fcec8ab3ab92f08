#pragma once

#include <span>
#include <vector>

#include "rdkv/cache.hpp"

namespace rdkv {

enum class WeightKind { token, channel };

/// Nonnegative per-unit distortion weights: one per token (V cache) or one
/// per channel (K cache).
struct WeightVector {
    WeightKind kind = WeightKind::token;
    std::vector<float> values;
};

/// Centered moving average with symmetric zero padding; stride 1, output
/// length equals input length.
std::vector<float> moving_average(std::span<const float> raw, int kernel);

/// Token weights for one KV head: column sums of attention mass over every
/// query row of all grouped query heads, then pooled. `group` must equal
/// heads.size().
WeightVector token_weights(std::span<const AttentionMatrix> heads, int group, int pool_kernel);

/// Total-variation distance between `row` and the renormalized distribution
/// after evicting index t. Equals row[t] for exactly normalized rows; the
/// sum is computed explicitly, not shortcut.
double tv_after_evict(std::span<const double> row, int t);

/// w_c = ||Q[:,c]|| * ||K[:,c]|| / sqrt(d) per channel.
WeightVector channel_weights(MatrixView q, MatrixView k);

/// Largest singular value of the explicit rank-one logit deviation
/// -(1/sqrt(d)) Q[:,c] K[:,c]^T, via power iteration (tolerance 1e-10,
/// at most 10000 iterations). Independent cross-check for channel_weights.
double logit_deviation_norm(MatrixView q, MatrixView k, int channel);

}  // namespace rdkv
