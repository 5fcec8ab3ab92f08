#include "rdkv/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace rdkv {

namespace {

constexpr double kLn2 = std::numbers::ln2;

double continuous_bits(double coeff, double lambda) {
    if (coeff <= 0.0) return 0.0;
    const double b = std::log2(kLn2 * coeff / lambda);
    return b > 0.0 ? b : 0.0;
}

double continuous_total(std::span<const double> coeffs, double lambda) {
    double total = 0.0;
    for (double c : coeffs) total += continuous_bits(c, lambda);
    return total;
}

struct ArgminTable {
    // (bits, eps) pairs restricted to the active bit set, ascending bits
    std::vector<std::pair<int, double>> entries;
};

ArgminTable make_argmin_table(const DistortionTable& eps, const BitSet& bits) {
    bits.validate_relaxed();
    ArgminTable t;
    for (int b : bits.widths) t.entries.emplace_back(b, eps.at(b));
    return t;
}

int argmin_entry(double weight, const ArgminTable& t, double lambda) {
    int best_bits = t.entries.front().first;
    double best_cost = weight * t.entries.front().second + lambda * best_bits;
    for (std::size_t i = 1; i < t.entries.size(); ++i) {
        const double cost = weight * t.entries[i].second + lambda * t.entries[i].first;
        if (cost < best_cost) {  // strict: ties keep the lower bit-width
            best_cost = cost;
            best_bits = t.entries[i].first;
        }
    }
    return best_bits;
}

double assign_all(std::span<const float> weights, const ArgminTable& t, double lambda,
                  std::vector<int>& out_bits) {
    double total = 0.0;
    for (std::size_t u = 0; u < weights.size(); ++u) {
        const int b = argmin_entry(weights[u], t, lambda);
        out_bits[u] = b;
        total += b;
    }
    return total / static_cast<double>(weights.size());
}

void check_weights(std::span<const float> weights, const char* who) {
    for (float w : weights) {
        if (!std::isfinite(w) || w < 0.0f) {
            throw std::invalid_argument(std::string(who) + ": weights must be finite and >= 0");
        }
    }
}

}  // namespace

void SolverConfig::validate() const {
    if (!(tolerance > 0.0)) throw std::invalid_argument("SolverConfig: tolerance must be > 0");
    if (max_iterations < 1) throw std::invalid_argument("SolverConfig: max_iterations must be >= 1");
}

ContinuousAllocation waterfill_continuous(std::span<const double> coeffs, double budget) {
    if (!(budget > 0.0)) throw std::invalid_argument("waterfill_continuous: budget must be > 0");
    double max_coeff = 0.0;
    for (double c : coeffs) {
        if (!std::isfinite(c) || c < 0.0) {
            throw std::invalid_argument("waterfill_continuous: coefficients must be finite, >= 0");
        }
        max_coeff = std::max(max_coeff, c);
    }
    if (max_coeff == 0.0) {
        throw std::invalid_argument("waterfill_continuous: all coefficients are zero");
    }

    // At lambda_hi = ln2 * max_coeff every unit sits at zero bits; halve
    // lambda_lo until the budget is reachable, then bisect. The total is
    // continuous and strictly decreasing in lambda wherever it is positive.
    double hi = kLn2 * max_coeff;
    double lo = hi;
    for (int i = 0; i < 4096 && continuous_total(coeffs, lo) < budget; ++i) lo *= 0.5;
    if (continuous_total(coeffs, lo) < budget) {
        throw NumericError("waterfill_continuous: budget unreachable within lambda precision");
    }

    double lambda = lo;
    for (int it = 0; it < 500; ++it) {
        lambda = 0.5 * (lo + hi);
        const double total = continuous_total(coeffs, lambda);
        const double rel = std::abs(total - budget) / budget;
        if (rel < 1e-13) break;
        if (total > budget) {
            lo = lambda;
        } else {
            hi = lambda;
        }
        if ((hi - lo) <= 1e-16 * hi) break;
    }

    ContinuousAllocation out;
    out.lambda = lambda;
    out.bits.resize(coeffs.size());
    double used = 0.0;
    for (std::size_t u = 0; u < coeffs.size(); ++u) {
        out.bits[u] = continuous_bits(coeffs[u], lambda);
        used += out.bits[u];
    }
    out.budget_used = used;
    return out;
}

int per_unit_argmin(double weight, const DistortionTable& eps, double lambda, const BitSet& bits) {
    if (lambda < 0.0 || !std::isfinite(lambda)) {
        throw std::invalid_argument("per_unit_argmin: lambda must be >= 0");
    }
    const ArgminTable t = make_argmin_table(eps, bits);
    return argmin_entry(weight, t, lambda);
}

DiscreteAllocation mckp_bisect(std::span<const float> weights, const DistortionTable& eps,
                               double target_avg_bits, const BitSet& bits,
                               const SolverConfig& cfg) {
    cfg.validate();
    check_weights(weights, "mckp_bisect");
    if (!(target_avg_bits > 0.0) || target_avg_bits > 16.0) {
        throw std::invalid_argument("mckp_bisect: target average bits must be in (0, 16]");
    }
    const ArgminTable table = make_argmin_table(eps, bits);

    DiscreteAllocation out;
    out.bits.resize(weights.size());
    if (weights.empty()) {
        out.achieved_avg_bits = 0.0;
        return out;
    }

    // boundary: at the top width the optimum is lambda = 0 exactly
    const int max_width = table.entries.back().first;
    if (target_avg_bits >= static_cast<double>(max_width)) {
        std::fill(out.bits.begin(), out.bits.end(), max_width);
        out.lambda = 0.0;
        out.achieved_avg_bits = max_width;
        out.objective = allocation_objective(weights, eps, out.bits);
        out.converged = true;
        return out;
    }

    double lambda_lo = 0.0;
    double lambda_hi = 0.0;
    for (float w : weights) lambda_hi = std::max(lambda_hi, static_cast<double>(w));

    // Alg-2 bracket repair: the textbook lambda_hi = max_u w_u need not make
    // the allocation fit when eps gaps are small against bit gaps. Stop at
    // the ladder floor: once every unit sits at the minimum width, larger
    // lambda changes nothing (a sub-floor target has no bracket at all).
    const double floor_avg = table.entries.front().first;
    std::vector<int> hi_bits(weights.size());
    if (lambda_hi > 0.0) {
        double hi_avg = assign_all(weights, table, lambda_hi, hi_bits);
        int guard = 0;
        while (hi_avg > target_avg_bits && hi_avg > floor_avg && guard++ < 128) {
            lambda_hi *= 2.0;
            hi_avg = assign_all(weights, table, lambda_hi, hi_bits);
        }
    } else {
        assign_all(weights, table, lambda_hi, hi_bits);
    }

    double lambda = lambda_hi;
    double avg = 0.0;
    out.converged = false;
    for (int it = 0; it < cfg.max_iterations; ++it) {
        lambda = 0.5 * (lambda_lo + lambda_hi);
        avg = assign_all(weights, table, lambda, out.bits);
        if (std::abs(avg - target_avg_bits) / target_avg_bits < cfg.tolerance) {
            out.converged = true;
            break;
        }
        if (avg > target_avg_bits) {
            lambda_lo = lambda;
        } else {
            lambda_hi = lambda;
            hi_bits = out.bits;
        }
    }

    if (cfg.strict_budget && avg > target_avg_bits) {
        // smallest bracketed lambda known to be feasible
        lambda = lambda_hi;
        out.bits = hi_bits;
        avg = 0.0;
        for (int b : out.bits) avg += b;
        avg /= static_cast<double>(out.bits.size());
        out.converged = std::abs(avg - target_avg_bits) / target_avg_bits < cfg.tolerance;
    }

    out.lambda = lambda;
    out.achieved_avg_bits = avg;
    out.objective = allocation_objective(weights, eps, out.bits);
    return out;
}

DualBound dual_bound(std::span<const float> weights, const DistortionTable& eps, double lambda,
                     double total_budget, const BitSet& bits) {
    if (lambda < 0.0 || !std::isfinite(lambda)) {
        throw std::invalid_argument("dual_bound: lambda must be >= 0");
    }
    check_weights(weights, "dual_bound");
    const ArgminTable table = make_argmin_table(eps, bits);

    double min_sum = 0.0;
    double primal = 0.0;
    double bits_used = 0.0;
    for (float w : weights) {
        const int b = argmin_entry(w, table, lambda);
        double e = 0.0;
        for (const auto& [bb, ee] : table.entries) {
            if (bb == b) { e = ee; break; }
        }
        min_sum += static_cast<double>(w) * e + lambda * b;
        primal += static_cast<double>(w) * e;
        bits_used += b;
    }

    DualBound out;
    out.g_lambda = min_sum - lambda * total_budget;
    out.primal = primal;
    out.feasible = bits_used <= total_budget + 1e-9;
    out.gap = out.primal - out.g_lambda;
    return out;
}

DiscreteAllocation mckp_bruteforce(std::span<const float> weights, const DistortionTable& eps,
                                   double total_budget, const BitSet& bits) {
    check_weights(weights, "mckp_bruteforce");
    const std::size_t n_units = weights.size();
    if (n_units > 12) {
        throw std::invalid_argument("mckp_bruteforce: at most 12 units (exhaustive search)");
    }
    if (total_budget < 0.0) {
        throw std::invalid_argument("mckp_bruteforce: negative budget");
    }
    const ArgminTable table = make_argmin_table(eps, bits);
    const std::size_t n_choices = table.entries.size();

    std::vector<int> current(n_units, 0);
    std::vector<int> best;
    double best_obj = std::numeric_limits<double>::infinity();
    const double budget_slack = total_budget + 1e-9;

    // depth-first in lexicographic order (ascending bits per unit): the
    // first minimum found is the lexicographically-smallest minimizer
    auto recurse = [&](auto&& self, std::size_t u, double used_bits, double obj) -> void {
        if (used_bits > budget_slack || obj > best_obj) return;
        if (u == n_units) {
            if (obj < best_obj) {
                best_obj = obj;
                best = current;
            }
            return;
        }
        for (std::size_t i = 0; i < n_choices; ++i) {
            const auto& [b, e] = table.entries[i];
            current[u] = b;
            self(self, u + 1, used_bits + b, obj + static_cast<double>(weights[u]) * e);
        }
    };
    recurse(recurse, 0, 0.0, 0.0);

    if (best.empty() && n_units > 0) {
        // reachable only when the smallest width is positive (no eviction)
        throw std::invalid_argument("mckp_bruteforce: no feasible assignment under budget");
    }

    DiscreteAllocation out;
    out.bits = std::move(best);
    double total_bits = 0.0;
    for (int b : out.bits) total_bits += b;
    out.achieved_avg_bits = n_units ? total_bits / static_cast<double>(n_units) : 0.0;
    out.objective = allocation_objective(weights, eps, out.bits);
    out.lambda = 0.0;
    out.converged = true;
    return out;
}

double allocation_objective(std::span<const float> weights, const DistortionTable& eps,
                            std::span<const int> bits_alloc) {
    if (weights.size() != bits_alloc.size()) {
        throw std::invalid_argument("allocation_objective: length mismatch");
    }
    double obj = 0.0;
    for (std::size_t u = 0; u < weights.size(); ++u) {
        obj += static_cast<double>(weights[u]) * eps.at(bits_alloc[u]);
    }
    return obj;
}

}  // namespace rdkv
