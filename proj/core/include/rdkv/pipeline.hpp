#pragma once

#include <span>
#include <string>
#include <vector>

#include "rdkv/allocator.hpp"
#include "rdkv/cache.hpp"
#include "rdkv/quantizer.hpp"
#include "rdkv/weights.hpp"

namespace rdkv {

/// Budget: n_tokens is the FP16-equivalent per-layer token count
/// (B_total = n_tokens * L); r_k is the K-side share of each head's bits.
struct BudgetSpec {
    int n_tokens = 128;
    double r_k = 0.5;
    BitSet bits;

    void validate() const;
};

/// Per-head bit budget. B_tok = n_tokens / kv_heads tokens per head,
/// B_head = 2 * B_tok * d * 16 bits, split B_k = r_k * B_head,
/// B_v = (1 - r_k) * B_head. `sub_token` flags fractional per-head token
/// budgets (n_tokens < kv_heads).
struct HeadBudget {
    double head_bits = 0.0;
    double v_bits = 0.0;
    double k_bits = 0.0;
    bool sub_token = false;
};

HeadBudget head_budget(const BudgetSpec& spec, int head_dim, int kv_heads);

struct KeptSets {
    std::vector<int> kept;     // ascending token ids with b_v > 0
    std::vector<int> evicted;  // complement
    std::vector<int> v16;      // subset of kept with b_v == 16
};

/// Everything the packer and the reports need for one (layer, head).
struct HeadAllocation {
    std::vector<int> v_bits;  // per token
    std::vector<int> k_bits;  // per channel
    KeptSets kept;
    std::vector<float> v_weights;  // pooled token weights (stage 1)
    std::vector<float> k_weights;  // channel weights (stage 1)
    double objective_v = 0.0;
    double objective_k = 0.0;
    double achieved_bits = 0.0;  // d * sum(v_bits) + |kept| * sum(k_bits)
    double lambda_v = 0.0;
    double lambda_k = 0.0;
    bool v_converged = true;
    bool k_converged = true;
};

struct PipelineConfig {
    ProbeConfig probe;
    SolverConfig solver;
    bool force_window_retain = false;  // pin observation-window tokens at 16 bits
};

struct VAllocation {
    std::vector<int> v_bits;
    KeptSets kept;
    DiscreteAllocation raw;
};

/// Stage 2: token allocation over the V cache at target average
/// B_v / (d * T) bits per token (clamped to 16).
VAllocation allocate_v(const WeightVector& token_w, const DistortionTable& eps_v, double v_budget_bits,
                       int head_dim, const BitSet& bits, const SolverConfig& cfg);

/// Stage 3: channel allocation over the K cache of the kept tokens at
/// target average B_k / (kept_count * d) bits per channel (clamped to 16).
/// kept_count == 0 yields an empty allocation.
DiscreteAllocation allocate_k(const WeightVector& channel_w, const DistortionTable& eps_k,
                              double k_budget_bits, int kept_count, const BitSet& bits,
                              const SolverConfig& cfg);

/// Stacked probe rows of a KV head's query group, trailing `window`
/// positions per head; backed by `scratch` when a gather is needed.
MatrixView probe_group_window(const KVCache& cache, int layer, int kv_head, int window,
                              std::vector<float>& scratch);

/// Stages 1-3 for one (layer, kv head): probe attention, weights, V tokens,
/// then K channels over the kept tokens (channel weights reused from
/// stage 1).
HeadAllocation allocate_head(const KVCache& cache, int layer, int kv_head, const BudgetSpec& spec,
                             const DistortionTable& eps_v, const DistortionTable& eps_k,
                             const PipelineConfig& cfg);

/// Deterministic per-(layer, head) map of allocations.
struct ModelAllocation {
    CacheShape shape;
    BudgetSpec spec;
    std::vector<HeadAllocation> heads;  // index = layer * kv_heads + head

    const HeadAllocation& at(int layer, int kv_head) const {
        return heads[static_cast<std::size_t>(layer) * shape.kv_heads + kv_head];
    }
    double total_achieved_bits() const;
};

/// Runs allocate_head for every (layer, head), in parallel; output is
/// independent of scheduling.
ModelAllocation allocate_model(const KVCache& cache, const BudgetSpec& spec,
                               const DistortionTable& eps_v, const DistortionTable& eps_k,
                               const PipelineConfig& cfg);

std::string allocation_to_json(const ModelAllocation& alloc);
ModelAllocation allocation_from_json(const std::string& text);
void save_allocation(const ModelAllocation& alloc, const std::string& path);
ModelAllocation load_allocation(const std::string& path);

}  // namespace rdkv
