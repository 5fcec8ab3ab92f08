#pragma once

#include <span>
#include <string>
#include <vector>

#include "rdkv/allocator.hpp"
#include "rdkv/cache.hpp"
#include "rdkv/pipeline.hpp"

namespace rdkv {

/// One sweep sample: weighted distortion and its Lagrangian lower bound for
/// one sequence at one average bit-width.
struct SweepPoint {
    int seq_id = 0;
    double avg_bits = 0.0;
    double primal = 0.0;
    double dual = 0.0;
    bool feasible = false;
};

struct SweepResult {
    std::vector<SweepPoint> rows;  // ordered by (avg_bits, seq_id)
};

/// For every sequence and every grid value b: solves the discrete
/// allocation per (layer, head) on both the token (V) and channel (K) side
/// at target average b, sums the objectives (primal) and the dual bounds
/// g(lambda) at each solver's final lambda.
SweepResult run_sweep(std::span<const KVCache> sequences, std::span<const double> grid,
                      const DistortionTable& eps_v, const DistortionTable& eps_k,
                      const BitSet& bits, const SolverConfig& solver, const ProbeConfig& probe);

/// CSV: header, per-sequence rows, then aggregate rows per grid value with
/// seq_id in {median, q25, q75} (feasible column holds the feasible
/// fraction). Byte-deterministic for fixed inputs.
std::string sweep_to_csv(const SweepResult& result);

/// Per-unit scatter dump: index, weight, assigned bit-width; one row per
/// token (kind == token) or per channel (kind == channel).
std::string dump_bits_csv(const ModelAllocation& alloc, int layer, int head, WeightKind kind);

/// Optional plot output: per-sequence distortion curves (log scale) with the
/// median dual lower bound, as a self-contained SVG.
std::string sweep_to_svg(const SweepResult& result);

}  // namespace rdkv
