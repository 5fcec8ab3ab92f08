#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rdkv/cache.hpp"

namespace rdkv {

/// Allowed bit-widths. The pipeline default is {0,2,4,8,16}; 0 is eviction,
/// 16 is full-precision retention. validate() enforces the full invariant
/// (0 and 16 present); validate_relaxed() admits the restricted action sets
/// used by the sweep ablations (e.g. quantize-only without 0).
struct BitSet {
    std::vector<int> widths{0, 2, 4, 8, 16};

    bool contains(int b) const;
    void validate() const;
    void validate_relaxed() const;
    static BitSet parse(const std::string& csv);
};

/// Affine quantization parameters for one unit: v_hat = scale * (code - zero_point).
/// zero_point may fall outside [0, 2^bits) when the unit's values do not
/// straddle zero; codes are always clamped to [0, 2^bits).
struct QuantParams {
    float scale = 0.0f;
    std::int64_t zero_point = 0;
    int bits = 0;
};

struct QuantizedUnit {
    std::vector<std::uint8_t> codes;
    QuantParams params;
};

/// Uniform asymmetric min/max quantizer; bits must be 2, 4 or 8.
QuantizedUnit quantize_unit(std::span<const float> values, int bits);
std::vector<float> dequantize_unit(std::span<const std::uint8_t> codes, const QuantParams& params);

/// High-rate RMSE coefficient of a uniform quantizer with dynamic range R:
/// sigma = R / (2*sqrt(3)); per-coordinate RMSE ~ sigma * 2^-b.
double bennett_sigma(double range);

/// ||x_hat - x||^2 / ||x||^2; requires a nonzero original.
double unit_nmse(std::span<const float> original, std::span<const float> reconstructed);

enum class Granularity { token, channel };

/// Calibrated normalized distortion eps(b) for one granularity.
/// eps(0) = 1 (eviction) and eps(16) = 0 (exact retention) by construction;
/// eps is strictly decreasing over the bit-width set.
struct DistortionTable {
    Granularity granularity = Granularity::token;
    std::vector<std::pair<int, double>> eps;  // (bits, eps), ascending bits
    std::string provenance;

    double at(int bits) const;
    void validate() const;
};

/// Empirical eps(b): every unit of every cache in the sample is quantized at
/// each finite width and the per-unit NMSE is averaged. Token granularity
/// quantizes V rows, channel granularity quantizes K columns. Zero-norm
/// units are skipped.
DistortionTable calibrate_epsilon(std::span<const KVCache> caches, Granularity granularity,
                                  const BitSet& bits = {});

std::string distortion_table_to_json(const DistortionTable& table);
DistortionTable distortion_table_from_json(const std::string& text);

/// Tables file: either a single table object or an array holding one table
/// per granularity.
void save_distortion_tables(const std::vector<DistortionTable>& tables, const std::string& path);
std::vector<DistortionTable> load_distortion_tables(const std::string& path);
/// Picks the table of the requested granularity out of a tables file.
DistortionTable select_table(const std::vector<DistortionTable>& tables, Granularity granularity);

}  // namespace rdkv
