#include "rdkv/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "rdkv/parallel.hpp"

namespace rdkv {

namespace {

using json = nlohmann::json;

constexpr double kMinRange = 1e-12;

bool is_quant_width(int b) { return b == 2 || b == 4 || b == 8; }

const char* granularity_name(Granularity g) {
    return g == Granularity::token ? "token" : "channel";
}

Granularity granularity_from_name(const std::string& name) {
    if (name == "token") return Granularity::token;
    if (name == "channel") return Granularity::channel;
    throw FormatError("distortion table: unknown granularity '" + name + "'");
}

json table_to_json_value(const DistortionTable& table) {
    json eps = json::object();
    for (const auto& [b, e] : table.eps) eps[std::to_string(b)] = e;
    return json{{"granularity", granularity_name(table.granularity)},
                {"eps", eps},
                {"provenance", table.provenance}};
}

DistortionTable table_from_json_value(const json& j) {
    DistortionTable table;
    try {
        table.granularity = granularity_from_name(j.at("granularity").get<std::string>());
        table.provenance = j.value("provenance", std::string{});
        std::vector<std::pair<int, double>> eps;
        for (const auto& [key, value] : j.at("eps").items()) {
            eps.emplace_back(std::stoi(key), value.get<double>());
        }
        std::sort(eps.begin(), eps.end());
        table.eps = std::move(eps);
    } catch (const json::exception& e) {
        throw FormatError(std::string("distortion table: bad JSON: ") + e.what());
    }
    table.validate();
    return table;
}

}  // namespace

bool BitSet::contains(int b) const {
    return std::find(widths.begin(), widths.end(), b) != widths.end();
}

void BitSet::validate_relaxed() const {
    if (widths.empty()) throw std::invalid_argument("BitSet: empty");
    for (std::size_t i = 0; i < widths.size(); ++i) {
        if (widths[i] < 0 || widths[i] > 16 || widths[i] % 2 != 0) {
            throw std::invalid_argument("BitSet: widths must be even and within [0, 16]");
        }
        if (i > 0 && widths[i] <= widths[i - 1]) {
            throw std::invalid_argument("BitSet: widths must be strictly increasing");
        }
    }
    for (int b : widths) {
        if (b != 0 && b != 16 && !is_quant_width(b)) {
            throw std::invalid_argument("BitSet: finite widths must be 2, 4 or 8");
        }
    }
}

void BitSet::validate() const {
    validate_relaxed();
    if (!contains(0) || !contains(16)) {
        throw std::invalid_argument("BitSet: must contain both 0 and 16");
    }
}

BitSet BitSet::parse(const std::string& csv) {
    BitSet out;
    out.widths.clear();
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.widths.push_back(std::stoi(item));
    }
    std::sort(out.widths.begin(), out.widths.end());
    out.validate_relaxed();
    return out;
}

QuantizedUnit quantize_unit(std::span<const float> values, int bits) {
    if (!is_quant_width(bits)) {
        throw std::invalid_argument("quantize_unit: bits must be 2, 4 or 8");
    }
    if (values.empty()) throw std::invalid_argument("quantize_unit: empty unit");

    float lo = values[0], hi = values[0];
    for (float v : values) {
        if (!std::isfinite(v)) throw NumericError("quantize_unit: non-finite value");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double max_code = static_cast<double>((1 << bits) - 1);
    const double scale = std::max(static_cast<double>(hi) - lo, kMinRange) / max_code;
    double zd = std::round(-static_cast<double>(lo) / scale);
    zd = std::clamp(zd, -9.0e18, 9.0e18);  // keep the integer representable

    QuantizedUnit out;
    out.params.scale = static_cast<float>(scale);
    out.params.zero_point = static_cast<std::int64_t>(zd);
    out.params.bits = bits;
    out.codes.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double c = std::round(values[i] / scale) + zd;
        out.codes[i] = static_cast<std::uint8_t>(std::clamp(c, 0.0, max_code));
    }
    return out;
}

std::vector<float> dequantize_unit(std::span<const std::uint8_t> codes, const QuantParams& params) {
    if (!is_quant_width(params.bits)) {
        throw std::invalid_argument("dequantize_unit: bits must be 2, 4 or 8");
    }
    const int max_code = (1 << params.bits) - 1;
    std::vector<float> out(codes.size());
    const double scale = params.scale;
    const double zp = static_cast<double>(params.zero_point);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > max_code) {
            throw std::invalid_argument("dequantize_unit: code exceeds 2^bits - 1");
        }
        out[i] = static_cast<float>(scale * (static_cast<double>(codes[i]) - zp));
    }
    return out;
}

double bennett_sigma(double range) {
    if (range < 0.0 || !std::isfinite(range)) {
        throw std::invalid_argument("bennett_sigma: range must be nonnegative and finite");
    }
    return range / (2.0 * std::sqrt(3.0));
}

double unit_nmse(std::span<const float> original, std::span<const float> reconstructed) {
    if (original.size() != reconstructed.size()) {
        throw std::invalid_argument("unit_nmse: length mismatch");
    }
    double err = 0.0, energy = 0.0;
    for (std::size_t i = 0; i < original.size(); ++i) {
        const double d = static_cast<double>(reconstructed[i]) - original[i];
        err += d * d;
        energy += static_cast<double>(original[i]) * original[i];
    }
    if (energy == 0.0) throw NumericError("unit_nmse: zero-norm original");
    return err / energy;
}

double DistortionTable::at(int bits) const {
    for (const auto& [b, e] : eps) {
        if (b == bits) return e;
    }
    throw std::invalid_argument("DistortionTable: no entry for bit-width " +
                                std::to_string(bits));
}

void DistortionTable::validate() const {
    if (eps.empty()) throw std::invalid_argument("DistortionTable: empty");
    for (std::size_t i = 0; i < eps.size(); ++i) {
        if (!std::isfinite(eps[i].second) || eps[i].second < 0.0) {
            throw std::invalid_argument("DistortionTable: eps must be finite and >= 0");
        }
        if (i > 0) {
            if (eps[i].first <= eps[i - 1].first) {
                throw std::invalid_argument("DistortionTable: widths must be ascending");
            }
            if (eps[i].second >= eps[i - 1].second) {
                throw std::invalid_argument("DistortionTable: eps must be strictly decreasing");
            }
        }
    }
    for (const auto& [b, e] : eps) {
        if (b == 0 && e != 1.0) throw std::invalid_argument("DistortionTable: eps(0) must be 1");
        if (b == 16 && e != 0.0) throw std::invalid_argument("DistortionTable: eps(16) must be 0");
    }
}

DistortionTable calibrate_epsilon(std::span<const KVCache> caches, Granularity granularity,
                                  const BitSet& bits) {
    if (caches.empty()) throw std::invalid_argument("calibrate_epsilon: empty sample");
    bits.validate_relaxed();

    std::vector<int> quant_widths;
    for (int b : bits.widths) {
        if (is_quant_width(b)) quant_widths.push_back(b);
    }

    // one job per (cache, layer, head) slice; partial sums merge in job
    // order, so the result does not depend on the worker count
    struct Partial {
        std::vector<double> err_sum;
        std::size_t units = 0;
    };
    std::vector<std::pair<int, std::pair<int, int>>> jobs;  // (cache, (layer, head))
    for (int ci = 0; ci < static_cast<int>(caches.size()); ++ci) {
        const auto& s = caches[ci].shape;
        for (int l = 0; l < s.layers; ++l) {
            for (int h = 0; h < s.kv_heads; ++h) jobs.push_back({ci, {l, h}});
        }
    }
    std::vector<Partial> partials(jobs.size());
    parallel_for(static_cast<int>(jobs.size()), [&](int j) {
        const auto [ci, lh] = jobs[j];
        const auto& cache = caches[ci];
        Partial p;
        p.err_sum.assign(quant_widths.size(), 0.0);
        std::vector<float> column;
        auto account_unit = [&](std::span<const float> unit) {
            double energy = 0.0;
            for (float v : unit) energy += static_cast<double>(v) * v;
            if (energy == 0.0) return;  // NMSE undefined; the unit carries no weight
            ++p.units;
            for (std::size_t bi = 0; bi < quant_widths.size(); ++bi) {
                const auto q = quantize_unit(unit, quant_widths[bi]);
                const auto rec = dequantize_unit(q.codes, q.params);
                p.err_sum[bi] += unit_nmse(unit, rec);
            }
        };
        if (granularity == Granularity::token) {
            const MatrixView rows = cache.v_head(lh.first, lh.second);
            for (int t = 0; t < rows.rows; ++t) account_unit(rows.row(t));
        } else {
            const MatrixView rows = cache.k_head(lh.first, lh.second);
            column.resize(rows.rows);
            for (int c = 0; c < rows.cols; ++c) {
                for (int t = 0; t < rows.rows; ++t) column[t] = rows.at(t, c);
                account_unit(column);
            }
        }
        partials[j] = std::move(p);
    });

    std::vector<double> err_sum(quant_widths.size(), 0.0);
    std::size_t unit_count = 0;
    for (const auto& p : partials) {
        for (std::size_t bi = 0; bi < quant_widths.size(); ++bi) err_sum[bi] += p.err_sum[bi];
        unit_count += p.units;
    }
    if (unit_count == 0) throw NumericError("calibrate_epsilon: all units have zero norm");

    DistortionTable table;
    table.granularity = granularity;
    std::ostringstream prov;
    prov << "calibrated on " << caches.size() << " cache(s), " << unit_count << " "
         << granularity_name(granularity) << " units";
    table.provenance = prov.str();
    for (int b : bits.widths) {
        double e;
        if (b == 0) {
            e = 1.0;
        } else if (b == 16) {
            e = 0.0;
        } else {
            const auto it = std::find(quant_widths.begin(), quant_widths.end(), b);
            e = err_sum[static_cast<std::size_t>(it - quant_widths.begin())] /
                static_cast<double>(unit_count);
        }
        table.eps.emplace_back(b, e);
    }
    table.validate();
    return table;
}

std::string distortion_table_to_json(const DistortionTable& table) {
    return table_to_json_value(table).dump(2) + "\n";
}

DistortionTable distortion_table_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("distortion table: parse error: ") + e.what());
    }
    return table_from_json_value(j);
}

void save_distortion_tables(const std::vector<DistortionTable>& tables, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open for writing: " + path);
    if (tables.size() == 1) {
        out << distortion_table_to_json(tables.front());
        return;
    }
    json arr = json::array();
    for (const auto& t : tables) arr.push_back(table_to_json_value(t));
    out << arr.dump(2) << "\n";
}

std::vector<DistortionTable> load_distortion_tables(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open for reading: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    json j;
    try {
        j = json::parse(buf.str());
    } catch (const json::exception& e) {
        throw FormatError(std::string("distortion tables: parse error: ") + e.what());
    }
    std::vector<DistortionTable> tables;
    if (j.is_array()) {
        for (const auto& item : j) tables.push_back(table_from_json_value(item));
    } else {
        tables.push_back(table_from_json_value(j));
    }
    return tables;
}

DistortionTable select_table(const std::vector<DistortionTable>& tables, Granularity granularity) {
    for (const auto& t : tables) {
        if (t.granularity == granularity) return t;
    }
    throw std::invalid_argument(std::string("no distortion table with granularity '") +
                                granularity_name(granularity) + "'");
}

}  // namespace rdkv
