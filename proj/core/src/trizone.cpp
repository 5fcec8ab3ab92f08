#include "rdkv/trizone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace rdkv {

namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'R', 'D', 'K', 'V', 'P', '0', '0', '1'};
constexpr int kPackableBits[] = {2, 4, 8};

void require(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
}

inline std::uint8_t extract_code(const std::uint8_t* row, int j, int bits) {
    switch (bits) {
        case 2: return static_cast<std::uint8_t>((row[j >> 2] >> ((j & 3) * 2)) & 0x3);
        case 4: return static_cast<std::uint8_t>((row[j >> 1] >> ((j & 1) * 4)) & 0xf);
        default: return row[j];
    }
}

std::vector<std::uint8_t> pad_codes(std::span<const std::uint8_t> codes, int bits) {
    std::vector<std::uint8_t> padded(codes.begin(), codes.end());
    padded.resize(padded_len(static_cast<int>(codes.size()), bits), 0);
    return padded;
}

double dot_f(std::span<const float> a, const float* b, int n) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

}  // namespace

int padded_len(int len, int bits) {
    switch (bits) {
        case 2: return (len + 3) / 4 * 4;
        case 4: return (len + 1) / 2 * 2;
        case 8: return len;
        default: throw std::invalid_argument("padded_len: bits must be 2, 4 or 8");
    }
}

int packed_row_bytes(int len, int bits) { return padded_len(len, bits) * bits / 8; }

std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> codes, int bits) {
    const int per_byte = [&] {
        switch (bits) {
            case 2: return 4;
            case 4: return 2;
            case 8: return 1;
            default: throw std::invalid_argument("pack_bits: bits must be 2, 4 or 8");
        }
    }();
    const std::uint8_t limit = static_cast<std::uint8_t>((1u << bits) - 1u);
    std::vector<std::uint8_t> out((codes.size() + per_byte - 1) / per_byte, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > limit) throw std::invalid_argument("pack_bits: code overflows bit-width");
        out[i / per_byte] |= static_cast<std::uint8_t>(codes[i] << ((i % per_byte) * bits));
    }
    return out;
}

std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, int bits,
                                      int logical_len) {
    if (bits != 2 && bits != 4 && bits != 8) {
        throw std::invalid_argument("unpack_bits: bits must be 2, 4 or 8");
    }
    const int per_byte = 8 / bits;
    if (static_cast<std::size_t>((logical_len + per_byte - 1) / per_byte) > bytes.size()) {
        throw std::invalid_argument("unpack_bits: byte buffer too short");
    }
    std::vector<std::uint8_t> out(logical_len);
    for (int j = 0; j < logical_len; ++j) out[j] = extract_code(bytes.data(), j, bits);
    return out;
}

TriZoneCache build_trizone(MatrixView k, MatrixView v, const HeadAllocation& alloc) {
    const int t_len = k.rows;
    const int d = k.cols;
    require(v.rows == t_len && v.cols == d, "build_trizone: K/V shape mismatch");
    require(static_cast<int>(alloc.v_bits.size()) == t_len,
            "build_trizone: v_bits length must equal T");

    TriZoneCache out;
    out.head_dim = d;
    out.v_bits = alloc.v_bits;
    out.kept = alloc.kept.kept;
    out.evicted = alloc.kept.evicted;
    const int kept_n = static_cast<int>(out.kept.size());

    // allocation consistency: kept must be exactly {t : v_bits > 0}
    {
        std::vector<int> derived;
        for (int t = 0; t < t_len; ++t) {
            if (alloc.v_bits[t] > 0) derived.push_back(t);
        }
        require(derived == out.kept, "build_trizone: kept set inconsistent with v_bits");
    }
    if (kept_n == 0) {
        require(alloc.k_bits.empty() || static_cast<int>(alloc.k_bits.size()) == d,
                "build_trizone: k_bits length must equal d");
        out.k_bits.assign(d, 0);
        return out;
    }
    require(static_cast<int>(alloc.k_bits.size()) == d,
            "build_trizone: k_bits length must equal d");
    out.k_bits = alloc.k_bits;

    std::vector<int> kept_pos(t_len, -1);
    for (int i = 0; i < kept_n; ++i) kept_pos[out.kept[i]] = i;

    // Zone A (V): uniform-bit sub-segments, ascending width, stable by token
    for (int bits : kPackableBits) {
        PackedSegment seg;
        seg.bits = bits;
        seg.logical_len = d;
        seg.pad_count = padded_len(d, bits) - d;
        for (int t : out.kept) {
            if (alloc.v_bits[t] != bits) continue;
            seg.members.push_back(t);
            seg.positions.push_back(kept_pos[t]);
            auto q = quantize_unit(v.row(t), bits);
            seg.params.push_back(q.params);
            auto packed = pack_bits(pad_codes(q.codes, bits), bits);
            seg.payload.insert(seg.payload.end(), packed.begin(), packed.end());
        }
        seg.rows = static_cast<int>(seg.members.size());
        if (seg.rows > 0) out.zone_a_v.push_back(std::move(seg));
    }

    // Zone B: full-precision V rows
    out.zone_b.width = d;
    std::size_t v16_expected = 0;
    for (int t : out.kept) v16_expected += alloc.v_bits[t] == 16 ? 1 : 0;
    require(alloc.kept.v16.size() == v16_expected,
            "build_trizone: v16 set inconsistent with v_bits");
    for (int t : alloc.kept.v16) {
        require(alloc.v_bits[t] == 16, "build_trizone: v16 set inconsistent with v_bits");
        out.zone_b.members.push_back(t);
        out.zone_b.positions.push_back(kept_pos[t]);
        auto row = v.row(t);
        out.zone_b.data.insert(out.zone_b.data.end(), row.begin(), row.end());
    }

    // Zone A (K): channels grouped by width over the kept rows only
    std::vector<float> column(kept_n);
    for (int bits : kPackableBits) {
        PackedSegment seg;
        seg.bits = bits;
        seg.rows = kept_n;
        std::vector<std::vector<std::uint8_t>> channel_codes;
        for (int c = 0; c < d; ++c) {
            if (alloc.k_bits[c] != bits) continue;
            seg.members.push_back(c);
            for (int r = 0; r < kept_n; ++r) column[r] = k.at(out.kept[r], c);
            auto q = quantize_unit(column, bits);
            seg.params.push_back(q.params);
            channel_codes.push_back(std::move(q.codes));
        }
        seg.logical_len = static_cast<int>(seg.members.size());
        seg.pad_count = padded_len(seg.logical_len, bits) - seg.logical_len;
        if (seg.members.empty()) continue;
        std::vector<std::uint8_t> row_codes(seg.logical_len);
        for (int r = 0; r < kept_n; ++r) {
            for (int j = 0; j < seg.logical_len; ++j) row_codes[j] = channel_codes[j][r];
            auto packed = pack_bits(pad_codes(row_codes, bits), bits);
            seg.payload.insert(seg.payload.end(), packed.begin(), packed.end());
        }
        out.zone_a_k.push_back(std::move(seg));
    }

    // 16-bit K channels stay unpacked next to the packed segments
    for (int c = 0; c < d; ++c) {
        if (alloc.k_bits[c] == 16) out.k16.members.push_back(c);
    }
    out.k16.width = static_cast<int>(out.k16.members.size());
    if (out.k16.width > 0) {
        out.k16.data.resize(static_cast<std::size_t>(kept_n) * out.k16.width);
        for (int r = 0; r < kept_n; ++r) {
            for (int j = 0; j < out.k16.width; ++j) {
                out.k16.data[static_cast<std::size_t>(r) * out.k16.width + j] =
                    k.at(out.kept[r], out.k16.members[j]);
            }
        }
    }

    // channel permutation: kept channels in stored order (2,4,8 then 16)
    for (const auto& seg : out.zone_a_k) {
        out.channel_perm.insert(out.channel_perm.end(), seg.members.begin(), seg.members.end());
    }
    out.channel_perm.insert(out.channel_perm.end(), out.k16.members.begin(),
                            out.k16.members.end());
    return out;
}

std::vector<double> fused_k_logits(std::span<const float> q, const TriZoneCache& cache) {
    require(static_cast<int>(q.size()) == cache.head_dim,
            "fused_k_logits: query dimension mismatch");
    const int kept_n = static_cast<int>(cache.kept.size());
    std::vector<double> logits(kept_n, 0.0);
    if (kept_n == 0) return logits;

    double bias = 0.0;
    std::vector<double> scaled_q;
    for (const auto& seg : cache.zone_a_k) {
        scaled_q.resize(seg.logical_len);
        for (int j = 0; j < seg.logical_len; ++j) {
            const auto& p = seg.params[j];
            const double qc = q[seg.members[j]];
            scaled_q[j] = static_cast<double>(p.scale) * qc;
            bias += static_cast<double>(p.scale) * static_cast<double>(p.zero_point) * qc;
        }
        const int rb = seg.row_bytes();
        for (int r = 0; r < seg.rows; ++r) {
            const std::uint8_t* row = seg.payload.data() + static_cast<std::size_t>(r) * rb;
            double acc = 0.0;
            for (int j = 0; j < seg.logical_len; ++j) {
                acc += scaled_q[j] * extract_code(row, j, seg.bits);
            }
            logits[r] += acc;
        }
    }
    if (cache.k16.width > 0) {
        for (int r = 0; r < kept_n; ++r) {
            const float* row = cache.k16.data.data() + static_cast<std::size_t>(r) * cache.k16.width;
            double acc = 0.0;
            for (int j = 0; j < cache.k16.width; ++j) {
                acc += static_cast<double>(q[cache.k16.members[j]]) * row[j];
            }
            logits[r] += acc;
        }
    }
    for (double& z : logits) z -= bias;
    return logits;
}

std::vector<double> packed_decode_step(std::span<const float> q, const TriZoneCache& cache) {
    require(static_cast<int>(q.size()) == cache.head_dim,
            "packed_decode_step: query dimension mismatch");
    const int kept_n = static_cast<int>(cache.kept.size());
    const int total = kept_n + cache.zone_c_len;
    if (total == 0) throw NumericError("packed_decode_step: empty cache, softmax undefined");
    const int d = cache.head_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<double> logits = fused_k_logits(q, cache);
    logits.resize(total);
    for (int r = 0; r < cache.zone_c_len; ++r) {
        logits[kept_n + r] = dot_f(q, cache.zone_c_k.data() + static_cast<std::size_t>(r) * d, d);
    }
    double max_logit = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < total; ++i) {
        logits[i] *= inv_sqrt_d;
        max_logit = std::max(max_logit, logits[i]);
    }
    double denom = 0.0;
    for (int i = 0; i < total; ++i) {
        logits[i] = std::exp(logits[i] - max_logit);
        denom += logits[i];
    }
    for (int i = 0; i < total; ++i) logits[i] /= denom;  // now attention weights

    std::vector<double> out(d, 0.0);
    // quantized V (Zone A)
    for (const auto& seg : cache.zone_a_v) {
        const int rb = seg.row_bytes();
        for (int i = 0; i < seg.rows; ++i) {
            const double w = logits[seg.positions[i]];
            const auto& p = seg.params[i];
            const double scale = p.scale;
            const double zp = static_cast<double>(p.zero_point);
            const std::uint8_t* row = seg.payload.data() + static_cast<std::size_t>(i) * rb;
            for (int c = 0; c < d; ++c) {
                out[c] += w * (scale * (extract_code(row, c, seg.bits) - zp));
            }
        }
    }
    // full-precision V (Zone B)
    for (std::size_t i = 0; i < cache.zone_b.members.size(); ++i) {
        const double w = logits[cache.zone_b.positions[i]];
        const float* row = cache.zone_b.data.data() + i * static_cast<std::size_t>(d);
        for (int c = 0; c < d; ++c) out[c] += w * row[c];
    }
    // appended tokens (Zone C)
    for (int r = 0; r < cache.zone_c_len; ++r) {
        const double w = logits[kept_n + r];
        const float* row = cache.zone_c_v.data() + static_cast<std::size_t>(r) * d;
        for (int c = 0; c < d; ++c) out[c] += w * row[c];
    }
    return out;
}

void append_new_token(TriZoneCache& cache, std::span<const float> k, std::span<const float> v) {
    require(static_cast<int>(k.size()) == cache.head_dim &&
                static_cast<int>(v.size()) == cache.head_dim,
            "append_new_token: dimension mismatch");
    cache.zone_c_k.insert(cache.zone_c_k.end(), k.begin(), k.end());
    cache.zone_c_v.insert(cache.zone_c_v.end(), v.begin(), v.end());
    ++cache.zone_c_len;
}

DenseKV materialize(const TriZoneCache& cache) {
    const int kept_n = static_cast<int>(cache.kept.size());
    const int d = cache.head_dim;
    DenseKV out;
    out.kept = cache.kept;
    out.k_hat.assign(static_cast<std::size_t>(kept_n) * d, 0.0f);
    out.v_hat.assign(static_cast<std::size_t>(kept_n) * d, 0.0f);

    for (const auto& seg : cache.zone_a_v) {
        const int rb = seg.row_bytes();
        for (int i = 0; i < seg.rows; ++i) {
            const auto& p = seg.params[i];
            const std::uint8_t* row = seg.payload.data() + static_cast<std::size_t>(i) * rb;
            float* dst = out.v_hat.data() + static_cast<std::size_t>(seg.positions[i]) * d;
            for (int c = 0; c < d; ++c) {
                dst[c] = static_cast<float>(
                    static_cast<double>(p.scale) *
                    (static_cast<double>(extract_code(row, c, seg.bits)) - p.zero_point));
            }
        }
    }
    for (std::size_t i = 0; i < cache.zone_b.members.size(); ++i) {
        std::memcpy(out.v_hat.data() + static_cast<std::size_t>(cache.zone_b.positions[i]) * d,
                    cache.zone_b.data.data() + i * static_cast<std::size_t>(d),
                    sizeof(float) * d);
    }
    for (const auto& seg : cache.zone_a_k) {
        const int rb = seg.row_bytes();
        for (int r = 0; r < seg.rows; ++r) {
            const std::uint8_t* row = seg.payload.data() + static_cast<std::size_t>(r) * rb;
            float* dst = out.k_hat.data() + static_cast<std::size_t>(r) * d;
            for (int j = 0; j < seg.logical_len; ++j) {
                const auto& p = seg.params[j];
                dst[seg.members[j]] = static_cast<float>(
                    static_cast<double>(p.scale) *
                    (static_cast<double>(extract_code(row, j, seg.bits)) - p.zero_point));
            }
        }
    }
    for (int r = 0; r < kept_n; ++r) {
        for (int j = 0; j < cache.k16.width; ++j) {
            out.k_hat[static_cast<std::size_t>(r) * d + cache.k16.members[j]] =
                cache.k16.data[static_cast<std::size_t>(r) * cache.k16.width + j];
        }
    }
    return out;
}

DenseKV reconstruct_dense(MatrixView k, MatrixView v, const HeadAllocation& alloc) {
    const int d = k.cols;
    const int kept_n = static_cast<int>(alloc.kept.kept.size());
    DenseKV out;
    out.kept = alloc.kept.kept;
    out.k_hat.assign(static_cast<std::size_t>(kept_n) * d, 0.0f);
    out.v_hat.assign(static_cast<std::size_t>(kept_n) * d, 0.0f);

    for (int i = 0; i < kept_n; ++i) {
        const int t = out.kept[i];
        const int bits = alloc.v_bits[t];
        float* dst = out.v_hat.data() + static_cast<std::size_t>(i) * d;
        if (bits == 16) {
            auto row = v.row(t);
            std::copy(row.begin(), row.end(), dst);
        } else {
            auto q = quantize_unit(v.row(t), bits);
            auto rec = dequantize_unit(q.codes, q.params);
            std::copy(rec.begin(), rec.end(), dst);
        }
    }
    if (kept_n > 0) {
        std::vector<float> column(kept_n);
        for (int c = 0; c < d; ++c) {
            const int bits = alloc.k_bits.empty() ? 0 : alloc.k_bits[c];
            if (bits == 0) continue;  // removed channel: zero contribution
            for (int r = 0; r < kept_n; ++r) column[r] = k.at(out.kept[r], c);
            if (bits == 16) {
                for (int r = 0; r < kept_n; ++r) {
                    out.k_hat[static_cast<std::size_t>(r) * d + c] = column[r];
                }
            } else {
                auto q = quantize_unit(column, bits);
                auto rec = dequantize_unit(q.codes, q.params);
                for (int r = 0; r < kept_n; ++r) {
                    out.k_hat[static_cast<std::size_t>(r) * d + c] = rec[r];
                }
            }
        }
    }
    return out;
}

std::vector<double> dense_decode_reference(std::span<const float> q, const DenseKV& dense,
                                           std::span<const float> new_k,
                                           std::span<const float> new_v, int new_len) {
    const int kept_n = static_cast<int>(dense.kept.size());
    const int total = kept_n + new_len;
    if (total == 0) throw NumericError("dense_decode_reference: empty context");
    const int d = static_cast<int>(q.size());
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<double> logits(total);
    for (int r = 0; r < kept_n; ++r) {
        logits[r] = dot_f(q, dense.k_hat.data() + static_cast<std::size_t>(r) * d, d) * inv_sqrt_d;
    }
    for (int r = 0; r < new_len; ++r) {
        logits[kept_n + r] =
            dot_f(q, new_k.data() + static_cast<std::size_t>(r) * d, d) * inv_sqrt_d;
    }
    double max_logit = -std::numeric_limits<double>::infinity();
    for (double z : logits) max_logit = std::max(max_logit, z);
    double denom = 0.0;
    for (double& z : logits) {
        z = std::exp(z - max_logit);
        denom += z;
    }
    std::vector<double> out(d, 0.0);
    for (int r = 0; r < kept_n; ++r) {
        const double w = logits[r] / denom;
        const float* row = dense.v_hat.data() + static_cast<std::size_t>(r) * d;
        for (int c = 0; c < d; ++c) out[c] += w * row[c];
    }
    for (int r = 0; r < new_len; ++r) {
        const double w = logits[kept_n + r] / denom;
        const float* row = new_v.data() + static_cast<std::size_t>(r) * d;
        for (int c = 0; c < d; ++c) out[c] += w * row[c];
    }
    return out;
}

StorageReport storage_report(const TriZoneCache& cache) {
    StorageReport rep;
    const int kept_n = static_cast<int>(cache.kept.size());
    auto segment_bits = [](const PackedSegment& seg) {
        return static_cast<double>(seg.rows) * seg.logical_len * seg.bits;
    };
    for (const auto& seg : cache.zone_a_v) {
        rep.zone_a_payload_bytes += seg.payload.size();
        rep.padding_bits +=
            static_cast<std::size_t>(seg.rows) * seg.pad_count * seg.bits;
        rep.allocation_bits += segment_bits(seg);
        rep.metadata_bytes += seg.params.size() * (sizeof(float) + sizeof(std::int64_t) + sizeof(int));
        rep.metadata_bytes += (seg.members.size() + seg.positions.size()) * sizeof(int);
    }
    for (const auto& seg : cache.zone_a_k) {
        rep.zone_a_payload_bytes += seg.payload.size();
        rep.padding_bits +=
            static_cast<std::size_t>(seg.rows) * seg.pad_count * seg.bits;
        rep.allocation_bits += segment_bits(seg);
        rep.metadata_bytes += seg.params.size() * (sizeof(float) + sizeof(std::int64_t) + sizeof(int));
        rep.metadata_bytes += seg.members.size() * sizeof(int);
    }
    const std::size_t fp_scalars = cache.zone_b.data.size() + cache.k16.data.size() +
                                   cache.zone_c_k.size() + cache.zone_c_v.size();
    rep.fp_equiv_bytes = fp_scalars * 2;  // 16 bits per scalar in budget arithmetic
    rep.allocation_bits += 16.0 * static_cast<double>(cache.zone_b.data.size());
    rep.allocation_bits += 16.0 * static_cast<double>(kept_n) * cache.k16.width;
    rep.metadata_bytes += (cache.kept.size() + cache.evicted.size() + cache.channel_perm.size() +
                           cache.zone_b.members.size() + cache.k16.members.size()) *
                          sizeof(int);
    return rep;
}

PackedModel build_packed_model(const KVCache& cache, const ModelAllocation& alloc) {
    PackedModel model;
    model.shape = cache.shape;
    const int n = cache.shape.layers * cache.shape.kv_heads;
    model.heads.resize(n);
    for (int i = 0; i < n; ++i) {
        const int layer = i / cache.shape.kv_heads;
        const int head = i % cache.shape.kv_heads;
        model.heads[i] =
            build_trizone(cache.k_head(layer, head), cache.v_head(layer, head), alloc.at(layer, head));
    }
    return model;
}

namespace {

json params_to_json(const std::vector<QuantParams>& params) {
    json arr = json::array();
    for (const auto& p : params) {
        arr.push_back(json::array({static_cast<double>(p.scale), p.zero_point, p.bits}));
    }
    return arr;
}

std::vector<QuantParams> params_from_json(const json& arr) {
    std::vector<QuantParams> out;
    for (const auto& item : arr) {
        QuantParams p;
        p.scale = static_cast<float>(item.at(0).get<double>());
        p.zero_point = item.at(1).get<std::int64_t>();
        p.bits = item.at(2).get<int>();
        out.push_back(p);
    }
    return out;
}

void write_u32le(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("packed container: truncated header length");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_packed(const PackedModel& model, const std::string& path) {
    std::vector<std::uint8_t> blob;
    auto append_bytes = [&blob](const std::uint8_t* data, std::size_t n) {
        const std::size_t off = blob.size();
        blob.insert(blob.end(), data, data + n);
        return off;
    };
    auto append_floats = [&](const std::vector<float>& data) {
        return append_bytes(reinterpret_cast<const std::uint8_t*>(data.data()),
                            data.size() * sizeof(float));
    };

    json heads = json::array();
    for (int i = 0; i < static_cast<int>(model.heads.size()); ++i) {
        const auto& h = model.heads[i];
        auto seg_json = [&](const PackedSegment& seg) {
            const std::size_t off = append_bytes(seg.payload.data(), seg.payload.size());
            return json{{"bits", seg.bits},
                        {"logical_len", seg.logical_len},
                        {"pad_count", seg.pad_count},
                        {"rows", seg.rows},
                        {"members", seg.members},
                        {"positions", seg.positions},
                        {"params", params_to_json(seg.params)},
                        {"offset", off},
                        {"nbytes", seg.payload.size()}};
        };
        json v_segs = json::array();
        for (const auto& seg : h.zone_a_v) v_segs.push_back(seg_json(seg));
        json k_segs = json::array();
        for (const auto& seg : h.zone_a_k) k_segs.push_back(seg_json(seg));

        const std::size_t k16_off = append_floats(h.k16.data);
        const std::size_t zb_off = append_floats(h.zone_b.data);
        const std::size_t zck_off = append_floats(h.zone_c_k);
        const std::size_t zcv_off = append_floats(h.zone_c_v);

        heads.push_back(json{
            {"layer", i / model.shape.kv_heads},
            {"head", i % model.shape.kv_heads},
            {"head_dim", h.head_dim},
            {"kept", h.kept},
            {"evicted", h.evicted},
            {"v_bits", h.v_bits},
            {"k_bits", h.k_bits},
            {"channel_perm", h.channel_perm},
            {"v_segments", v_segs},
            {"k_segments", k_segs},
            {"k16", {{"members", h.k16.members}, {"width", h.k16.width}, {"offset", k16_off}}},
            {"zone_b",
             {{"members", h.zone_b.members},
              {"positions", h.zone_b.positions},
              {"width", h.zone_b.width},
              {"offset", zb_off}}},
            {"zone_c", {{"len", h.zone_c_len}, {"offset_k", zck_off}, {"offset_v", zcv_off}}},
        });
    }
    json manifest = {
        {"version", 1},
        {"shape",
         {{"L", model.shape.layers},
          {"H_q", model.shape.q_heads},
          {"H_kv", model.shape.kv_heads},
          {"d", model.shape.head_dim},
          {"T", model.shape.seq_len}}},
        {"blob_bytes", blob.size()},
        {"heads", heads},
    };
    const std::string text = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_u32le(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!out) throw FormatError("packed container: write failed");
}

PackedModel load_packed(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open for reading: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("packed container: bad magic, expected RDKVP001");
    }
    const std::uint32_t hlen = read_u32le(in);
    if (hlen == 0 || hlen > (1u << 28)) {
        throw FormatError("packed container: implausible header length");
    }
    std::string text(hlen, '\0');
    in.read(text.data(), hlen);
    if (static_cast<std::uint32_t>(in.gcount()) != hlen) {
        throw FormatError("packed container: truncated manifest");
    }
    json manifest;
    try {
        manifest = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("packed container: manifest is not valid JSON: ") + e.what());
    }

    PackedModel model;
    try {
        const auto& s = manifest.at("shape");
        model.shape.layers = s.at("L").get<int>();
        model.shape.q_heads = s.at("H_q").get<int>();
        model.shape.kv_heads = s.at("H_kv").get<int>();
        model.shape.head_dim = s.at("d").get<int>();
        model.shape.seq_len = s.at("T").get<int>();
        model.shape.validate();

        const std::size_t blob_bytes = manifest.at("blob_bytes").get<std::size_t>();
        std::vector<std::uint8_t> blob(blob_bytes);
        in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob_bytes));
        if (static_cast<std::size_t>(in.gcount()) != blob_bytes) {
            throw FormatError("packed container: truncated payload blob");
        }
        char extra;
        in.read(&extra, 1);
        if (in.gcount() != 0) throw FormatError("packed container: trailing bytes after blob");

        auto slice_bytes = [&blob](std::size_t off, std::size_t n) {
            if (off + n > blob.size()) throw FormatError("packed container: blob slice out of range");
            return std::vector<std::uint8_t>(blob.begin() + off, blob.begin() + off + n);
        };
        auto slice_floats = [&blob](std::size_t off, std::size_t count) {
            if (off + count * sizeof(float) > blob.size()) {
                throw FormatError("packed container: float slice out of range");
            }
            std::vector<float> out(count);
            std::memcpy(out.data(), blob.data() + off, count * sizeof(float));
            return out;
        };

        model.heads.resize(static_cast<std::size_t>(model.shape.layers) * model.shape.kv_heads);
        for (const auto& hj : manifest.at("heads")) {
            TriZoneCache h;
            h.head_dim = hj.at("head_dim").get<int>();
            if (h.head_dim != model.shape.head_dim) {
                throw FormatError("packed container: head_dim disagrees with the shape header");
            }
            h.kept = hj.at("kept").get<std::vector<int>>();
            h.evicted = hj.at("evicted").get<std::vector<int>>();
            h.v_bits = hj.at("v_bits").get<std::vector<int>>();
            h.k_bits = hj.at("k_bits").get<std::vector<int>>();
            h.channel_perm = hj.at("channel_perm").get<std::vector<int>>();
            const int kept_n = static_cast<int>(h.kept.size());
            auto seg_from = [&](const json& sj, bool v_side) {
                PackedSegment seg;
                seg.bits = sj.at("bits").get<int>();
                seg.logical_len = sj.at("logical_len").get<int>();
                seg.pad_count = sj.at("pad_count").get<int>();
                seg.rows = sj.at("rows").get<int>();
                seg.members = sj.at("members").get<std::vector<int>>();
                seg.positions = sj.at("positions").get<std::vector<int>>();
                seg.params = params_from_json(sj.at("params"));
                if (seg.rows < 0 || seg.logical_len < 0) {
                    throw FormatError("packed container: negative segment extent");
                }
                if (v_side) {
                    if (seg.logical_len != h.head_dim ||
                        seg.members.size() != static_cast<std::size_t>(seg.rows) ||
                        seg.positions.size() != seg.members.size() ||
                        seg.params.size() != seg.members.size()) {
                        throw FormatError("packed container: malformed V segment tables");
                    }
                    for (int p : seg.positions) {
                        if (p < 0 || p >= kept_n) {
                            throw FormatError("packed container: V segment position out of range");
                        }
                    }
                } else {
                    if (seg.rows != kept_n ||
                        seg.members.size() != static_cast<std::size_t>(seg.logical_len) ||
                        seg.params.size() != seg.members.size() || !seg.positions.empty()) {
                        throw FormatError("packed container: malformed K segment tables");
                    }
                    for (int c : seg.members) {
                        if (c < 0 || c >= h.head_dim) {
                            throw FormatError("packed container: K segment channel out of range");
                        }
                    }
                }
                const std::size_t nbytes = sj.at("nbytes").get<std::size_t>();
                const std::size_t expected =
                    static_cast<std::size_t>(seg.rows) * packed_row_bytes(seg.logical_len, seg.bits);
                if (nbytes != expected) {
                    throw FormatError("packed container: segment byte count disagrees with shape");
                }
                seg.payload = slice_bytes(sj.at("offset").get<std::size_t>(), nbytes);
                return seg;
            };
            for (const auto& sj : hj.at("v_segments")) h.zone_a_v.push_back(seg_from(sj, true));
            for (const auto& sj : hj.at("k_segments")) h.zone_a_k.push_back(seg_from(sj, false));

            const auto& k16j = hj.at("k16");
            h.k16.members = k16j.at("members").get<std::vector<int>>();
            h.k16.width = k16j.at("width").get<int>();
            if (h.k16.width < 0 ||
                h.k16.members.size() != static_cast<std::size_t>(h.k16.width)) {
                throw FormatError("packed container: malformed k16 table");
            }
            for (int c : h.k16.members) {
                if (c < 0 || c >= h.head_dim) {
                    throw FormatError("packed container: k16 channel out of range");
                }
            }
            h.k16.data = slice_floats(k16j.at("offset").get<std::size_t>(),
                                      h.kept.size() * static_cast<std::size_t>(h.k16.width));

            const auto& zbj = hj.at("zone_b");
            h.zone_b.members = zbj.at("members").get<std::vector<int>>();
            h.zone_b.positions = zbj.at("positions").get<std::vector<int>>();
            h.zone_b.width = zbj.at("width").get<int>();
            if (h.zone_b.width < 0 || h.zone_b.positions.size() != h.zone_b.members.size()) {
                throw FormatError("packed container: malformed zone_b table");
            }
            for (int p : h.zone_b.positions) {
                if (p < 0 || p >= kept_n) {
                    throw FormatError("packed container: zone_b position out of range");
                }
            }
            h.zone_b.data = slice_floats(zbj.at("offset").get<std::size_t>(),
                                         h.zone_b.members.size() * static_cast<std::size_t>(h.zone_b.width));

            const auto& zcj = hj.at("zone_c");
            h.zone_c_len = zcj.at("len").get<int>();
            h.zone_c_k = slice_floats(zcj.at("offset_k").get<std::size_t>(),
                                      static_cast<std::size_t>(h.zone_c_len) * h.head_dim);
            h.zone_c_v = slice_floats(zcj.at("offset_v").get<std::size_t>(),
                                      static_cast<std::size_t>(h.zone_c_len) * h.head_dim);

            const int layer = hj.at("layer").get<int>();
            const int head = hj.at("head").get<int>();
            if (layer < 0 || layer >= model.shape.layers || head < 0 ||
                head >= model.shape.kv_heads) {
                throw FormatError("packed container: head index out of range");
            }
            model.heads[static_cast<std::size_t>(layer) * model.shape.kv_heads + head] =
                std::move(h);
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("packed container: bad manifest fields: ") + e.what());
    }
    return model;
}

}  // namespace rdkv
