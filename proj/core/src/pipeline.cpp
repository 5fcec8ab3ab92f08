#include "rdkv/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "rdkv/parallel.hpp"

namespace rdkv {

namespace {

using json = nlohmann::json;

KeptSets derive_kept(std::span<const int> v_bits) {
    KeptSets sets;
    for (int t = 0; t < static_cast<int>(v_bits.size()); ++t) {
        if (v_bits[t] > 0) {
            sets.kept.push_back(t);
            if (v_bits[t] == 16) sets.v16.push_back(t);
        } else {
            sets.evicted.push_back(t);
        }
    }
    return sets;
}

}  // namespace

// Stacked probe rows of the KV head's query group, restricted to the
// trailing `window` positions of each head. Returns a view into the cache
// when the whole stored window is used, otherwise gathers into scratch.
MatrixView probe_group_window(const KVCache& cache, int layer, int kv_head, int window,
                              std::vector<float>& scratch) {
    if (window >= cache.probe_window) return cache.probe_group(layer, kv_head);
    const int g = cache.shape.group();
    const int d = cache.shape.head_dim;
    scratch.resize(static_cast<std::size_t>(g) * window * d);
    for (int qi = 0; qi < g; ++qi) {
        const MatrixView full = cache.probe_head(layer, kv_head * g + qi);
        const float* src = full.data + static_cast<std::size_t>(full.rows - window) * d;
        std::copy(src, src + static_cast<std::size_t>(window) * d,
                  scratch.begin() + static_cast<std::size_t>(qi) * window * d);
    }
    return {scratch.data(), g * window, d};
}

void BudgetSpec::validate() const {
    if (n_tokens < 1) throw std::invalid_argument("BudgetSpec: n_tokens must be >= 1");
    if (!(r_k > 0.0) || !(r_k < 1.0)) {
        throw std::invalid_argument("BudgetSpec: r_k must be in (0, 1)");
    }
    bits.validate();
}

HeadBudget head_budget(const BudgetSpec& spec, int head_dim, int kv_heads) {
    spec.validate();
    if (head_dim < 1 || kv_heads < 1) {
        throw std::invalid_argument("head_budget: head_dim and kv_heads must be >= 1");
    }
    HeadBudget out;
    const double tokens_per_head = static_cast<double>(spec.n_tokens) / kv_heads;
    out.sub_token = spec.n_tokens < kv_heads;
    out.head_bits = 2.0 * tokens_per_head * head_dim * 16.0;
    out.k_bits = spec.r_k * out.head_bits;
    out.v_bits = (1.0 - spec.r_k) * out.head_bits;
    return out;
}

VAllocation allocate_v(const WeightVector& token_w, const DistortionTable& eps_v, double v_budget_bits,
                       int head_dim, const BitSet& bits, const SolverConfig& cfg) {
    if (token_w.kind != WeightKind::token) {
        throw std::invalid_argument("allocate_v: token weights required");
    }
    const int t_len = static_cast<int>(token_w.values.size());
    if (t_len < 1) throw std::invalid_argument("allocate_v: empty sequence");

    VAllocation out;
    if (!(v_budget_bits > 0.0)) {
        out.v_bits.assign(t_len, 0);
        out.kept = derive_kept(out.v_bits);
        out.raw.bits = out.v_bits;
        return out;
    }
    const double target = std::min(16.0, v_budget_bits / (static_cast<double>(head_dim) * t_len));
    out.raw = mckp_bisect(token_w.values, eps_v, target, bits, cfg);
    out.v_bits = out.raw.bits;
    out.kept = derive_kept(out.v_bits);
    return out;
}

DiscreteAllocation allocate_k(const WeightVector& channel_w, const DistortionTable& eps_k,
                              double k_budget_bits, int kept_count, const BitSet& bits,
                              const SolverConfig& cfg) {
    if (channel_w.kind != WeightKind::channel) {
        throw std::invalid_argument("allocate_k: channel weights required");
    }
    const int d = static_cast<int>(channel_w.values.size());
    DiscreteAllocation out;
    if (kept_count == 0) return out;  // all tokens evicted: no K storage at all
    if (!(k_budget_bits > 0.0)) {
        out.bits.assign(d, 0);
        return out;
    }
    const double target =
        std::min(16.0, k_budget_bits / (static_cast<double>(kept_count) * d));
    return mckp_bisect(channel_w.values, eps_k, target, bits, cfg);
}

HeadAllocation allocate_head(const KVCache& cache, int layer, int kv_head, const BudgetSpec& spec,
                             const DistortionTable& eps_v, const DistortionTable& eps_k,
                             const PipelineConfig& cfg) {
    spec.validate();
    cfg.probe.validate();
    const auto& s = cache.shape;
    if (layer < 0 || layer >= s.layers || kv_head < 0 || kv_head >= s.kv_heads) {
        throw std::invalid_argument("allocate_head: (layer, head) out of range");
    }

    const int t_len = s.seq_len;
    const int window = std::min(cfg.probe.window, cache.probe_window);
    const int g = s.group();

    // Stage 1: probe attention per grouped query head, then weights
    std::vector<int> offsets(window);
    for (int i = 0; i < window; ++i) offsets[i] = t_len - window + i;
    const MatrixView k_view = cache.k_head(layer, kv_head);

    std::vector<AttentionMatrix> group_attn;
    group_attn.reserve(g);
    for (int qi = 0; qi < g; ++qi) {
        MatrixView full = cache.probe_head(layer, kv_head * g + qi);
        // trailing `window` probe rows
        MatrixView q_win{full.data + static_cast<std::size_t>(full.rows - window) * full.cols,
                         window, full.cols};
        group_attn.push_back(attention_probe(q_win, k_view, offsets));
    }
    WeightVector token_w = token_weights(group_attn, g, cfg.probe.pool_kernel);

    std::vector<float> probe_scratch;
    MatrixView probe_win = probe_group_window(cache, layer, kv_head, window, probe_scratch);
    WeightVector channel_w = channel_weights(probe_win, k_view);

    const HeadBudget budget = head_budget(spec, s.head_dim, s.kv_heads);

    // Stage 2: V tokens
    VAllocation v_alloc =
        allocate_v(token_w, eps_v, budget.v_bits, s.head_dim, spec.bits, cfg.solver);
    if (cfg.force_window_retain) {
        for (int i = 0; i < window; ++i) v_alloc.v_bits[t_len - window + i] = 16;
        v_alloc.kept = derive_kept(v_alloc.v_bits);
    }

    // Stage 3: K channels over kept tokens, weights reused from stage 1
    DiscreteAllocation k_alloc =
        allocate_k(channel_w, eps_k, budget.k_bits, static_cast<int>(v_alloc.kept.kept.size()),
                   spec.bits, cfg.solver);

    HeadAllocation head;
    head.v_bits = std::move(v_alloc.v_bits);
    head.k_bits = k_alloc.bits;
    head.kept = std::move(v_alloc.kept);
    head.v_weights = std::move(token_w.values);
    head.k_weights = std::move(channel_w.values);
    head.objective_v = allocation_objective(head.v_weights, eps_v, head.v_bits);
    head.objective_k =
        head.k_bits.empty() ? 0.0 : allocation_objective(head.k_weights, eps_k, head.k_bits);
    head.lambda_v = v_alloc.raw.lambda;
    head.lambda_k = k_alloc.lambda;
    head.v_converged = v_alloc.raw.converged;
    head.k_converged = k_alloc.converged;

    double v_sum = 0.0, k_sum = 0.0;
    for (int b : head.v_bits) v_sum += b;
    for (int b : head.k_bits) k_sum += b;
    head.achieved_bits =
        v_sum * s.head_dim + k_sum * static_cast<double>(head.kept.kept.size());
    return head;
}

double ModelAllocation::total_achieved_bits() const {
    double total = 0.0;
    for (const auto& h : heads) total += h.achieved_bits;
    return total;
}

ModelAllocation allocate_model(const KVCache& cache, const BudgetSpec& spec,
                               const DistortionTable& eps_v, const DistortionTable& eps_k,
                               const PipelineConfig& cfg) {
    cache.validate();
    spec.validate();
    ModelAllocation out;
    out.shape = cache.shape;
    out.spec = spec;
    const int n = cache.shape.layers * cache.shape.kv_heads;
    out.heads.resize(n);
    parallel_for(n, [&](int i) {
        const int layer = i / cache.shape.kv_heads;
        const int head = i % cache.shape.kv_heads;
        out.heads[i] = allocate_head(cache, layer, head, spec, eps_v, eps_k, cfg);
    });
    return out;
}

std::string allocation_to_json(const ModelAllocation& alloc) {
    json heads = json::array();
    for (int layer = 0; layer < alloc.shape.layers; ++layer) {
        for (int head = 0; head < alloc.shape.kv_heads; ++head) {
            const auto& h = alloc.at(layer, head);
            heads.push_back(json{{"layer", layer},
                                 {"head", head},
                                 {"v_bits", h.v_bits},
                                 {"k_bits", h.k_bits},
                                 {"kept", h.kept.kept},
                                 {"evicted", h.kept.evicted},
                                 {"v16", h.kept.v16},
                                 {"v_weights", h.v_weights},
                                 {"k_weights", h.k_weights},
                                 {"objective_v", h.objective_v},
                                 {"objective_k", h.objective_k},
                                 {"achieved_bits", h.achieved_bits},
                                 {"lambda_v", h.lambda_v},
                                 {"lambda_k", h.lambda_k},
                                 {"v_converged", h.v_converged},
                                 {"k_converged", h.k_converged}});
        }
    }
    json root = {
        {"version", 1},
        {"shape",
         {{"L", alloc.shape.layers},
          {"H_q", alloc.shape.q_heads},
          {"H_kv", alloc.shape.kv_heads},
          {"d", alloc.shape.head_dim},
          {"T", alloc.shape.seq_len}}},
        {"budget",
         {{"n_tokens", alloc.spec.n_tokens}, {"r_k", alloc.spec.r_k}, {"bits", alloc.spec.bits.widths}}},
        {"heads", heads},
    };
    return root.dump(2) + "\n";
}

ModelAllocation allocation_from_json(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("allocation: parse error: ") + e.what());
    }
    ModelAllocation alloc;
    try {
        const auto& s = root.at("shape");
        alloc.shape.layers = s.at("L").get<int>();
        alloc.shape.q_heads = s.at("H_q").get<int>();
        alloc.shape.kv_heads = s.at("H_kv").get<int>();
        alloc.shape.head_dim = s.at("d").get<int>();
        alloc.shape.seq_len = s.at("T").get<int>();
        const auto& b = root.at("budget");
        alloc.spec.n_tokens = b.at("n_tokens").get<int>();
        alloc.spec.r_k = b.at("r_k").get<double>();
        alloc.spec.bits.widths = b.at("bits").get<std::vector<int>>();
        alloc.heads.resize(static_cast<std::size_t>(alloc.shape.layers) * alloc.shape.kv_heads);
        for (const auto& hj : root.at("heads")) {
            const int layer = hj.at("layer").get<int>();
            const int head = hj.at("head").get<int>();
            HeadAllocation h;
            h.v_bits = hj.at("v_bits").get<std::vector<int>>();
            h.k_bits = hj.at("k_bits").get<std::vector<int>>();
            h.kept.kept = hj.at("kept").get<std::vector<int>>();
            h.kept.evicted = hj.at("evicted").get<std::vector<int>>();
            h.kept.v16 = hj.at("v16").get<std::vector<int>>();
            h.v_weights = hj.at("v_weights").get<std::vector<float>>();
            h.k_weights = hj.at("k_weights").get<std::vector<float>>();
            h.objective_v = hj.at("objective_v").get<double>();
            h.objective_k = hj.at("objective_k").get<double>();
            h.achieved_bits = hj.at("achieved_bits").get<double>();
            h.lambda_v = hj.at("lambda_v").get<double>();
            h.lambda_k = hj.at("lambda_k").get<double>();
            h.v_converged = hj.at("v_converged").get<bool>();
            h.k_converged = hj.at("k_converged").get<bool>();
            alloc.heads[static_cast<std::size_t>(layer) * alloc.shape.kv_heads + head] =
                std::move(h);
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("allocation: bad fields: ") + e.what());
    }
    return alloc;
}

void save_allocation(const ModelAllocation& alloc, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << allocation_to_json(alloc);
}

ModelAllocation load_allocation(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open for reading: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return allocation_from_json(buf.str());
}

}  // namespace rdkv
