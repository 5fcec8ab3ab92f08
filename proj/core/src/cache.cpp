#include "rdkv/cache.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace rdkv {

namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'R', 'D', 'K', 'V', 'C', '0', '0', '1'};

// mt19937_64 + Box-Muller. std::normal_distribution is implementation-
// defined, this keeps caches byte-identical across toolchains.
class NormalSampler {
public:
    explicit NormalSampler(std::uint64_t seed) : eng_(seed) {}

    float next() {
        if (have_spare_) {
            have_spare_ = false;
            return static_cast<float>(spare_);
        }
        double u1 = uniform01();
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return static_cast<float>(r * std::cos(theta));
    }

private:
    double uniform01() {
        // 53-bit mantissa, strictly inside (0,1) so log() is safe
        return (static_cast<double>(eng_() >> 11) + 0.5) * 0x1p-53;
    }
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

void check_finite(MatrixView m, const char* what) {
    for (int r = 0; r < m.rows; ++r) {
        for (float x : m.row(r)) {
            if (!std::isfinite(x)) {
                throw NumericError(std::string(what) + ": non-finite entry");
            }
        }
    }
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
    if (!in) throw FormatError("cache container: truncated header length");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_floats(std::ostream& out, const std::vector<float>& data) {
    static_assert(sizeof(float) == 4);
    // host is little-endian on every supported target; write raw
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
}

void read_floats(std::istream& in, std::vector<float>& data) {
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != data.size() * sizeof(float)) {
        throw FormatError("cache container: truncated payload");
    }
}

}  // namespace

void CacheShape::validate() const {
    if (layers < 1 || head_dim < 1 || seq_len < 1) {
        throw std::invalid_argument("CacheShape: layers, head_dim, seq_len must be >= 1");
    }
    if (q_heads < 1 || kv_heads < 1) {
        throw std::invalid_argument("CacheShape: head counts must be >= 1");
    }
    if (q_heads % kv_heads != 0) {
        throw std::invalid_argument("CacheShape: q_heads must be a multiple of kv_heads");
    }
}

void ProbeConfig::validate() const {
    if (window < 1) throw std::invalid_argument("ProbeConfig: window must be >= 1");
    if (pool_kernel < 1 || pool_kernel % 2 == 0) {
        throw std::invalid_argument("ProbeConfig: pool_kernel must be odd and >= 1");
    }
}

void KVCache::validate() const {
    shape.validate();
    if (probe_window < 1 || probe_window > shape.seq_len) {
        throw std::invalid_argument("KVCache: probe window must be in [1, seq_len]");
    }
    auto expect = [](const std::vector<Tensor3>& ts, int n0, int n1, int n2, const char* what) {
        for (const auto& t : ts) {
            if (t.dim0() != n0 || t.dim1() != n1 || t.dim2() != n2) {
                throw std::invalid_argument(std::string("KVCache: bad tensor shape for ") + what);
            }
            for (float x : t.data()) {
                if (!std::isfinite(x)) {
                    throw NumericError(std::string("KVCache: non-finite entry in ") + what);
                }
            }
        }
    };
    if (static_cast<int>(k.size()) != shape.layers || static_cast<int>(v.size()) != shape.layers ||
        static_cast<int>(probe_q.size()) != shape.layers) {
        throw std::invalid_argument("KVCache: layer count mismatch");
    }
    expect(k, shape.kv_heads, shape.seq_len, shape.head_dim, "K");
    expect(v, shape.kv_heads, shape.seq_len, shape.head_dim, "V");
    expect(probe_q, shape.q_heads, probe_window, shape.head_dim, "probe_Q");
}

AttentionMatrix attention_probe(MatrixView q_window, MatrixView k,
                                std::span<const int> causal_offsets) {
    if (q_window.cols != k.cols) {
        throw std::invalid_argument("attention_probe: head_dim mismatch between Q and K");
    }
    if (static_cast<int>(causal_offsets.size()) != q_window.rows) {
        throw std::invalid_argument("attention_probe: one causal offset per query required");
    }
    const int t_len = k.rows;
    const int d = k.cols;
    check_finite(q_window, "attention_probe Q");
    check_finite(k, "attention_probe K");

    AttentionMatrix out;
    out.rows = q_window.rows;
    out.cols = t_len;
    out.a.assign(static_cast<std::size_t>(out.rows) * t_len, 0.0);

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> logits(t_len);
    for (int r = 0; r < q_window.rows; ++r) {
        const int off = causal_offsets[r];
        if (off < 0 || off >= t_len) {
            throw std::invalid_argument("attention_probe: causal offset out of [0, T)");
        }
        auto q = q_window.row(r);
        double max_logit = -std::numeric_limits<double>::infinity();
        for (int t = 0; t <= off; ++t) {
            auto key = k.row(t);
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += static_cast<double>(q[c]) * key[c];
            logits[t] = dot * inv_sqrt_d;
            max_logit = std::max(max_logit, logits[t]);
        }
        double denom = 0.0;
        for (int t = 0; t <= off; ++t) {
            logits[t] = std::exp(logits[t] - max_logit);
            denom += logits[t];
        }
        double* row = out.a.data() + static_cast<std::size_t>(r) * t_len;
        for (int t = 0; t <= off; ++t) row[t] = logits[t] / denom;
        // entries past the offset stay exactly zero
    }
    return out;
}

std::vector<double> attention_output(const AttentionMatrix& a, MatrixView v) {
    if (a.cols != v.rows) {
        throw std::invalid_argument("attention_output: attention columns must match V rows");
    }
    const int d = v.cols;
    std::vector<double> out(static_cast<std::size_t>(a.rows) * d, 0.0);
    for (int r = 0; r < a.rows; ++r) {
        auto arow = a.row(r);
        double* orow = out.data() + static_cast<std::size_t>(r) * d;
        for (int t = 0; t < a.cols; ++t) {
            const double w = arow[t];
            if (w == 0.0) continue;
            auto vrow = v.row(t);
            for (int c = 0; c < d; ++c) orow[c] += w * vrow[c];
        }
    }
    return out;
}

void save_cache(const KVCache& cache, std::ostream& out) {
    cache.validate();
    json header = {
        {"version", 1},
        {"L", cache.shape.layers},
        {"H_q", cache.shape.q_heads},
        {"H_kv", cache.shape.kv_heads},
        {"d", cache.shape.head_dim},
        {"T", cache.shape.seq_len},
        {"S_w", cache.probe_window},
        {"dtype", "f32"},
        {"layout", "layer-major, head-major, row-major"},
    };
    const std::string htext = header.dump();
    out.write(kMagic, sizeof(kMagic));
    write_u32le(out, static_cast<std::uint32_t>(htext.size()));
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& t : cache.k) write_floats(out, t.data());
    for (const auto& t : cache.v) write_floats(out, t.data());
    for (const auto& t : cache.probe_q) write_floats(out, t.data());
    if (!out) throw FormatError("cache container: write failed");
}

KVCache load_cache(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("cache container: bad magic, expected RDKVC001");
    }
    const std::uint32_t hlen = read_u32le(in);
    if (hlen == 0 || hlen > (1u << 20)) {
        throw FormatError("cache container: implausible header length");
    }
    std::string htext(hlen, '\0');
    in.read(htext.data(), hlen);
    if (static_cast<std::uint32_t>(in.gcount()) != hlen) {
        throw FormatError("cache container: truncated header");
    }
    json header;
    try {
        header = json::parse(htext);
    } catch (const json::exception& e) {
        throw FormatError(std::string("cache container: header is not valid JSON: ") + e.what());
    }

    KVCache cache;
    try {
        cache.shape.layers = header.at("L").get<int>();
        cache.shape.q_heads = header.at("H_q").get<int>();
        cache.shape.kv_heads = header.at("H_kv").get<int>();
        cache.shape.head_dim = header.at("d").get<int>();
        cache.shape.seq_len = header.at("T").get<int>();
        cache.probe_window = header.at("S_w").get<int>();
        if (header.at("dtype").get<std::string>() != "f32") {
            throw FormatError("cache container: unsupported dtype");
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("cache container: bad header fields: ") + e.what());
    }
    cache.shape.validate();
    if (cache.probe_window < 1 || cache.probe_window > cache.shape.seq_len) {
        throw FormatError("cache container: S_w out of range");
    }

    const auto& s = cache.shape;
    for (int l = 0; l < s.layers; ++l) cache.k.emplace_back(s.kv_heads, s.seq_len, s.head_dim);
    for (int l = 0; l < s.layers; ++l) cache.v.emplace_back(s.kv_heads, s.seq_len, s.head_dim);
    for (int l = 0; l < s.layers; ++l) {
        cache.probe_q.emplace_back(s.q_heads, cache.probe_window, s.head_dim);
    }
    for (auto& t : cache.k) read_floats(in, t.data());
    for (auto& t : cache.v) read_floats(in, t.data());
    for (auto& t : cache.probe_q) read_floats(in, t.data());

    // header/payload size agreement: nothing may trail the declared payload
    char extra;
    in.read(&extra, 1);
    if (in.gcount() != 0) {
        throw FormatError("cache container: payload longer than header declares");
    }
    cache.validate();
    return cache;
}

void save_cache_file(const KVCache& cache, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path);
    save_cache(cache, out);
}

KVCache load_cache_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open for reading: " + path);
    return load_cache(in);
}

KVCache gen_synthetic_cache(std::uint64_t seed, const CacheShape& shape, int probe_window,
                            int outlier_channels, double outlier_scale) {
    shape.validate();
    if (probe_window < 1 || probe_window > shape.seq_len) {
        throw std::invalid_argument("gen_synthetic_cache: probe_window must be in [1, seq_len]");
    }
    if (outlier_channels < 0 || outlier_channels > shape.head_dim) {
        throw std::invalid_argument("gen_synthetic_cache: outlier_channels must be in [0, head_dim]");
    }
    if (!std::isfinite(outlier_scale)) {
        throw std::invalid_argument("gen_synthetic_cache: outlier_scale must be finite");
    }

    NormalSampler rng(seed);
    KVCache cache;
    cache.shape = shape;
    cache.probe_window = probe_window;
    auto fill = [&rng](Tensor3& t) {
        for (auto& x : t.data()) x = rng.next();
    };
    for (int l = 0; l < shape.layers; ++l) {
        auto& kt = cache.k.emplace_back(shape.kv_heads, shape.seq_len, shape.head_dim);
        fill(kt);
    }
    for (int l = 0; l < shape.layers; ++l) {
        auto& vt = cache.v.emplace_back(shape.kv_heads, shape.seq_len, shape.head_dim);
        fill(vt);
    }
    for (int l = 0; l < shape.layers; ++l) {
        auto& qt = cache.probe_q.emplace_back(shape.q_heads, probe_window, shape.head_dim);
        fill(qt);
    }
    const float scale = static_cast<float>(outlier_scale);
    for (auto& kt : cache.k) {
        for (int h = 0; h < shape.kv_heads; ++h) {
            for (int t = 0; t < shape.seq_len; ++t) {
                for (int c = 0; c < outlier_channels; ++c) kt.at(h, t, c) *= scale;
            }
        }
    }
    return cache;
}

}  // namespace rdkv
