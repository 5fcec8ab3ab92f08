#pragma once

#include <span>
#include <vector>

#include "rdkv/quantizer.hpp"

namespace rdkv {

enum class TieBreak { prefer_lower_bits };

struct SolverConfig {
    double tolerance = 1e-2;  // relative, on average bits
    int max_iterations = 64;
    TieBreak tie_break = TieBreak::prefer_lower_bits;
    bool strict_budget = false;

    void validate() const;
};

/// Solution of the continuous reverse water-filling problem.
struct ContinuousAllocation {
    std::vector<double> bits;
    double lambda = 0.0;
    double budget_used = 0.0;
};

/// Discrete bit assignment from the Lagrangian bisection. `converged` is
/// false when the solver exited at max_iterations without meeting the
/// tolerance; the last iterate is returned unrepaired in default mode.
struct DiscreteAllocation {
    std::vector<int> bits;
    double lambda = 0.0;
    double achieved_avg_bits = 0.0;
    double objective = 0.0;
    bool converged = true;
};

/// Lagrangian certificate: g_lambda <= OPT, and OPT <= primal whenever the
/// allocation at lambda is budget-feasible.
struct DualBound {
    double g_lambda = 0.0;
    double primal = 0.0;
    bool feasible = false;
    double gap = 0.0;
};

/// Minimizes sum_u coeff_u * 2^-b_u over b_u >= 0 with sum b_u = budget.
/// b_u = [log2(ln2 * coeff_u / lambda)]+ with lambda found by bisection;
/// units below the water level lambda/ln2 receive zero bits.
ContinuousAllocation waterfill_continuous(std::span<const double> coeffs, double budget);

/// argmin over the bit set of weight*eps(b) + lambda*b; ties break toward
/// the lower bit-width.
int per_unit_argmin(double weight, const DistortionTable& eps, double lambda, const BitSet& bits);

/// Lagrangian bisection knapsack solver. Bisects lambda in [0, max weight]
/// until the average assigned bits is within cfg.tolerance of
/// target_avg_bits; the upper bracket is doubled first until it is
/// budget-feasible. With cfg.strict_budget an infeasible terminal iterate is
/// replaced by the allocation at the feasible bracket end.
DiscreteAllocation mckp_bisect(std::span<const float> weights, const DistortionTable& eps,
                               double target_avg_bits, const BitSet& bits = {},
                               const SolverConfig& cfg = {});

/// g(lambda) = sum_u min_b [w_u eps(b) + lambda b] - lambda * total_budget,
/// paired with the primal objective of the per-unit minimizers.
DualBound dual_bound(std::span<const float> weights, const DistortionTable& eps, double lambda,
                     double total_budget, const BitSet& bits = {});

/// Exhaustive minimizer of the discrete allocation problem with
/// sum b_u <= total_budget; lexicographically-smallest bits break ties.
/// Only for small instances (at most 12 units).
DiscreteAllocation mckp_bruteforce(std::span<const float> weights, const DistortionTable& eps,
                                   double total_budget, const BitSet& bits = {});

/// sum_u w_u * eps(b_u).
double allocation_objective(std::span<const float> weights, const DistortionTable& eps,
                            std::span<const int> bits_alloc);

}  // namespace rdkv
