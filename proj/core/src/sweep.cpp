#include "rdkv/sweep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

#include "rdkv/parallel.hpp"
#include "rdkv/weights.hpp"

namespace rdkv {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

double quantile(std::vector<double> values, double p) {
    std::sort(values.begin(), values.end());
    if (values.empty()) return 0.0;
    const double pos = p * (static_cast<double>(values.size()) - 1.0);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
}

struct HeadWeights {
    WeightVector token;
    WeightVector channel;
};

}  // namespace

SweepResult run_sweep(std::span<const KVCache> sequences, std::span<const double> grid,
                      const DistortionTable& eps_v, const DistortionTable& eps_k,
                      const BitSet& bits, const SolverConfig& solver, const ProbeConfig& probe) {
    if (grid.empty()) throw std::invalid_argument("run_sweep: empty grid");
    for (double b : grid) {
        if (!(b > 0.0) || b > 16.0) {
            throw std::invalid_argument("run_sweep: grid values must be in (0, 16]");
        }
    }
    probe.validate();
    bits.validate_relaxed();

    // feasible primals make every row a valid duality sandwich
    SolverConfig strict = solver;
    strict.strict_budget = true;

    SweepResult result;
    for (int seq = 0; seq < static_cast<int>(sequences.size()); ++seq) {
        const KVCache& cache = sequences[seq];
        cache.validate();
        const auto& s = cache.shape;
        const int window = std::min(probe.window, cache.probe_window);
        const int g = s.group();

        // stage-1 weights once per head, shared across the whole grid
        const int n_heads = s.layers * s.kv_heads;
        std::vector<HeadWeights> weights(n_heads);
        parallel_for(n_heads, [&](int i) {
            const int layer = i / s.kv_heads;
            const int head = i % s.kv_heads;
            std::vector<int> offsets(window);
            for (int r = 0; r < window; ++r) offsets[r] = s.seq_len - window + r;
            const MatrixView k_view = cache.k_head(layer, head);
            std::vector<AttentionMatrix> attn;
            attn.reserve(g);
            for (int qi = 0; qi < g; ++qi) {
                MatrixView full = cache.probe_head(layer, head * g + qi);
                MatrixView q_win{
                    full.data + static_cast<std::size_t>(full.rows - window) * full.cols, window,
                    full.cols};
                attn.push_back(attention_probe(q_win, k_view, offsets));
            }
            weights[i].token = token_weights(attn, g, probe.pool_kernel);
            std::vector<float> scratch;
            weights[i].channel =
                channel_weights(probe_group_window(cache, layer, head, window, scratch), k_view);
        });

        for (double target : grid) {
            double primal = 0.0;
            double dual = 0.0;
            bool feasible = true;
            for (const auto& hw : weights) {
                const auto v_alloc = mckp_bisect(hw.token.values, eps_v, target, bits, strict);
                const double v_budget = target * static_cast<double>(hw.token.values.size());
                const auto v_bound =
                    dual_bound(hw.token.values, eps_v, v_alloc.lambda, v_budget, bits);
                const auto k_alloc = mckp_bisect(hw.channel.values, eps_k, target, bits, strict);
                const double k_budget = target * static_cast<double>(hw.channel.values.size());
                const auto k_bound =
                    dual_bound(hw.channel.values, eps_k, k_alloc.lambda, k_budget, bits);
                primal += v_alloc.objective + k_alloc.objective;
                dual += v_bound.g_lambda + k_bound.g_lambda;
                feasible = feasible && v_bound.feasible && k_bound.feasible;
            }
            result.rows.push_back({seq, target, primal, dual, feasible});
        }
    }
    std::stable_sort(result.rows.begin(), result.rows.end(),
                     [](const SweepPoint& a, const SweepPoint& b) {
                         if (a.avg_bits != b.avg_bits) return a.avg_bits < b.avg_bits;
                         return a.seq_id < b.seq_id;
                     });
    return result;
}

std::string sweep_to_csv(const SweepResult& result) {
    std::ostringstream out;
    out << "seq_id,avg_bits,primal,dual,feasible\n";
    for (const auto& row : result.rows) {
        out << row.seq_id << ',' << fmt_double(row.avg_bits) << ',' << fmt_double(row.primal)
            << ',' << fmt_double(row.dual) << ',' << (row.feasible ? 1 : 0) << '\n';
    }
    // aggregates per grid value
    std::vector<double> grid;
    for (const auto& row : result.rows) {
        if (grid.empty() || grid.back() != row.avg_bits) grid.push_back(row.avg_bits);
    }
    for (double b : grid) {
        std::vector<double> primals, duals;
        int feas = 0, total = 0;
        for (const auto& row : result.rows) {
            if (row.avg_bits != b) continue;
            primals.push_back(row.primal);
            duals.push_back(row.dual);
            feas += row.feasible ? 1 : 0;
            ++total;
        }
        const double frac = total ? static_cast<double>(feas) / total : 0.0;
        const char* names[3] = {"q25", "median", "q75"};
        const double probs[3] = {0.25, 0.5, 0.75};
        for (int i = 0; i < 3; ++i) {
            out << names[i] << ',' << fmt_double(b) << ',' << fmt_double(quantile(primals, probs[i]))
                << ',' << fmt_double(quantile(duals, probs[i])) << ',' << fmt_double(frac) << '\n';
        }
    }
    return out.str();
}

std::string sweep_to_svg(const SweepResult& result) {
    if (result.rows.empty()) throw std::invalid_argument("sweep_to_svg: empty result");
    const double width = 640, height = 420, margin = 56;

    double b_lo = 1e300, b_hi = -1e300;
    double y_hi = -1e300;
    for (const auto& row : result.rows) {
        b_lo = std::min(b_lo, row.avg_bits);
        b_hi = std::max(b_hi, row.avg_bits);
        y_hi = std::max({y_hi, row.primal, row.dual});
    }
    if (b_hi == b_lo) b_hi = b_lo + 1.0;
    const double y_floor = std::max(y_hi * 1e-9, 1e-12);  // log axis floor
    const double log_lo = std::log10(y_floor);
    const double log_hi = std::log10(std::max(y_hi, y_floor * 10.0));

    auto x_of = [&](double b) {
        return margin + (b - b_lo) / (b_hi - b_lo) * (width - 2 * margin);
    };
    auto y_of = [&](double v) {
        const double lv = std::log10(std::max(v, y_floor));
        return height - margin - (lv - log_lo) / (log_hi - log_lo) * (height - 2 * margin);
    };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin
        << "\" y2=\"" << height - margin << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
        << height - margin << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"" << height - 12
        << "\" text-anchor=\"middle\" font-size=\"13\">average bits</text>\n";
    svg << "<text x=\"16\" y=\"" << height / 2
        << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 " << height / 2
        << ")\">weighted distortion (log)</text>\n";

    std::map<int, std::map<double, double>> primal_by_seq;
    std::map<double, std::vector<double>> duals;
    for (const auto& row : result.rows) {
        primal_by_seq[row.seq_id][row.avg_bits] = row.primal;
        duals[row.avg_bits].push_back(row.dual);
    }
    for (const auto& [seq, curve] : primal_by_seq) {
        svg << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-opacity=\"0.55\" points=\"";
        for (const auto& [b, p] : curve) svg << x_of(b) << ',' << y_of(p) << ' ';
        svg << "\"/>\n";
    }
    svg << "<polyline fill=\"none\" stroke=\"#d62728\" stroke-dasharray=\"6 3\" points=\"";
    for (const auto& [b, ds] : duals) {
        svg << x_of(b) << ',' << y_of(quantile(ds, 0.5)) << ' ';
    }
    svg << "\"/>\n";
    for (const auto& [b, ds] : duals) {
        svg << "<text x=\"" << x_of(b) << "\" y=\"" << height - margin + 16
            << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt_double(b) << "</text>\n";
    }
    svg << "<text x=\"" << width - margin << "\" y=\"" << margin - 8
        << "\" text-anchor=\"end\" font-size=\"12\" fill=\"#1f77b4\">per-sequence "
           "distortion</text>\n";
    svg << "<text x=\"" << width - margin << "\" y=\"" << margin + 8
        << "\" text-anchor=\"end\" font-size=\"12\" fill=\"#d62728\">median dual lower "
           "bound</text>\n";
    svg << "</svg>\n";
    return svg.str();
}

std::string dump_bits_csv(const ModelAllocation& alloc, int layer, int head, WeightKind kind) {
    if (layer < 0 || layer >= alloc.shape.layers || head < 0 || head >= alloc.shape.kv_heads) {
        throw std::invalid_argument("dump_bits_csv: (layer, head) out of range");
    }
    const HeadAllocation& h = alloc.at(layer, head);
    const auto& weights = kind == WeightKind::token ? h.v_weights : h.k_weights;
    const auto& bits = kind == WeightKind::token ? h.v_bits : h.k_bits;
    std::ostringstream out;
    out << "index,weight,bit\n";
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const int b = i < bits.size() ? bits[i] : 0;
        out << i << ',' << fmt_double(weights[i]) << ',' << b << '\n';
    }
    return out.str();
}

}  // namespace rdkv
