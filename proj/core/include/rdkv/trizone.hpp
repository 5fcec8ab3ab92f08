#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rdkv/pipeline.hpp"
#include "rdkv/quantizer.hpp"

namespace rdkv {

/// Packs codes (< 2^bits each) into bytes. 2-bit uses quarter-split packing
/// (four codes per byte at bit offsets 0,2,4,6), 4-bit half-split (two
/// codes at offsets 0,4), 8-bit one code per byte.
std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> codes, int bits);
std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, int bits,
                                      int logical_len);

/// Number of payload bytes for one packed row of `len` codes (after
/// alignment padding: 2-bit rows pad to a multiple of 4 codes, 4-bit to a
/// multiple of 2; 8-bit rows are unpadded).
int padded_len(int len, int bits);
int packed_row_bytes(int len, int bits);

/// One uniform-bit-width group inside Zone A.
///
/// V segments: one unit per member token row; logical_len = head_dim codes
/// per row, params holds one QuantParams per row.
/// K segments: members are channel ids; every kept token contributes one
/// packed row of logical_len = members.size() codes; params holds one
/// QuantParams per channel. Padded positions behave as scale = zero_point
/// = 0 and contribute nothing.
struct PackedSegment {
    int bits = 0;
    int logical_len = 0;
    int pad_count = 0;
    int rows = 0;
    std::vector<int> members;
    std::vector<int> positions;  // V only: index of each member in kept order
    std::vector<QuantParams> params;
    std::vector<std::uint8_t> payload;  // rows * packed_row_bytes(logical_len, bits)

    int row_bytes() const { return packed_row_bytes(logical_len, bits); }
};

/// Full-precision side storage (fp32 in memory; budget accounting treats
/// each scalar as 16 bits).
struct FpSegment {
    std::vector<int> members;
    std::vector<int> positions;  // V only
    int width = 0;               // scalars per row
    std::vector<float> data;     // rows-major
};

/// Packed mixed-bit cache of one (layer, head).
///
/// Zone A: packed V sub-segments (b in {2,4,8}) plus all kept K rows with
/// channels grouped by bit-width (16-bit K channels ride along unpacked).
/// Zone B: full-precision V rows of the b_v = 16 tokens. Zone C: K/V rows
/// appended during decode, one per step.
struct TriZoneCache {
    int head_dim = 0;
    std::vector<int> kept;     // ascending original token ids
    std::vector<int> evicted;
    std::vector<int> v_bits;   // allocation copies, per original token/channel
    std::vector<int> k_bits;

    std::vector<PackedSegment> zone_a_v;  // ascending bit-width
    std::vector<PackedSegment> zone_a_k;  // ascending bit-width, rows = kept count
    FpSegment k16;                        // unpacked 16-bit K channels, rows = kept count
    FpSegment zone_b;                     // V rows, width = head_dim
    std::vector<float> zone_c_k;          // appended rows * head_dim
    std::vector<float> zone_c_v;
    int zone_c_len = 0;

    std::vector<int> channel_perm;  // kept channels in segment order
};

TriZoneCache build_trizone(MatrixView k, MatrixView v, const HeadAllocation& alloc);

/// q^T k_hat per kept token via the fused rewrite
/// sum_c (s_c q_c) code_c - sum_c s_c z_c q_c. No 1/sqrt(d) scaling.
std::vector<double> fused_k_logits(std::span<const float> q, const TriZoneCache& cache);

/// One decode step: softmax over kept + appended tokens (logits / sqrt(d)),
/// output accumulated from the three zones. Throws NumericError on an
/// empty cache.
std::vector<double> packed_decode_step(std::span<const float> q, const TriZoneCache& cache);

void append_new_token(TriZoneCache& cache, std::span<const float> k, std::span<const float> v);

/// Dense (K_hat, V_hat) of the kept tokens in original channel order,
/// materialized by unpacking the zones. Removed channels are zero.
struct DenseKV {
    std::vector<int> kept;
    std::vector<float> k_hat;  // kept x d
    std::vector<float> v_hat;  // kept x d
};
DenseKV materialize(const TriZoneCache& cache);

/// Independent reference: re-quantizes the source tensors directly per the
/// allocation (bypassing the packed bytes entirely).
DenseKV reconstruct_dense(MatrixView k, MatrixView v, const HeadAllocation& alloc);

/// Dense attention over (K_hat, V_hat) plus appended zone-C rows; the
/// numerical reference for packed_decode_step.
std::vector<double> dense_decode_reference(std::span<const float> q, const DenseKV& dense,
                                           std::span<const float> new_k,
                                           std::span<const float> new_v, int new_len);

/// Byte accounting. Packed payload bytes count padding; full-precision
/// zones are reported at 16 bits per scalar to match the budget arithmetic
/// (in-memory storage is fp32). Metadata (params, permutations, index maps)
/// is reported separately.
struct StorageReport {
    std::size_t zone_a_payload_bytes = 0;
    std::size_t padding_bits = 0;  // alignment overhead inside the packed payload
    std::size_t fp_equiv_bytes = 0;
    std::size_t metadata_bytes = 0;
    double allocation_bits = 0.0;  // budget-implied bits of the stored entries
};
StorageReport storage_report(const TriZoneCache& cache);

/// `RDKVP001` container: all heads of a model allocation, JSON manifest +
/// raw payload blob.
struct PackedModel {
    CacheShape shape;
    std::vector<TriZoneCache> heads;  // index = layer * kv_heads + head

    const TriZoneCache& at(int layer, int kv_head) const {
        return heads[static_cast<std::size_t>(layer) * shape.kv_heads + kv_head];
    }
};

PackedModel build_packed_model(const KVCache& cache, const ModelAllocation& alloc);
void save_packed(const PackedModel& model, const std::string& path);
PackedModel load_packed(const std::string& path);

}  // namespace rdkv
