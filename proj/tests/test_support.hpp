#pragma once

// Shared test-only helpers: deterministic RNG and independent numerical
// oracles. Everything here recomputes results from first principles and
// must stay decoupled from the library's own code paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rdkv/cache.hpp"
#include "rdkv/quantizer.hpp"

namespace testsupport {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    double uniform(double lo, double hi) {
        const double u = (static_cast<double>(eng_() >> 11) + 0.5) * 0x1p-53;
        return lo + u * (hi - lo);
    }
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform(0.0, 1.0);
        const double u2 = uniform(0.0, 1.0);
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * 3.14159265358979323846 * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }
    int uniform_int(int lo, int hi) {  // inclusive
        return lo + static_cast<int>(eng_() % static_cast<std::uint64_t>(hi - lo + 1));
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline double rel_err(double got, double want) {
    const double denom = std::max(std::abs(want), 1e-300);
    return std::abs(got - want) / denom;
}

inline double vec_rel_err(std::span<const double> got, std::span<const double> want) {
    double diff = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        diff += (got[i] - want[i]) * (got[i] - want[i]);
        norm += want[i] * want[i];
    }
    return std::sqrt(diff) / std::max(std::sqrt(norm), 1e-300);
}

/// Probability distribution with entries bounded away from extreme
/// concentration (raw mass in [0.01, 1] before normalizing).
inline std::vector<double> random_distribution(Rng& rng, int n) {
    std::vector<double> p(n);
    double sum = 0.0;
    for (double& x : p) {
        x = rng.uniform(0.01, 1.0);
        sum += x;
    }
    for (double& x : p) x /= sum;
    return p;
}

/// Valid random distortion table on {0,2,4,8,16}: eps(0)=1, eps(16)=0,
/// strictly decreasing with realistic decade gaps.
inline rdkv::DistortionTable random_eps_table(Rng& rng, rdkv::Granularity g) {
    const double e2 = std::pow(10.0, rng.uniform(-1.2, -0.3));
    const double e4 = e2 * std::pow(10.0, rng.uniform(-2.0, -1.0));
    const double e8 = e4 * std::pow(10.0, rng.uniform(-2.2, -1.2));
    rdkv::DistortionTable t;
    t.granularity = g;
    t.eps = {{0, 1.0}, {2, e2}, {4, e4}, {8, e8}, {16, 0.0}};
    t.provenance = "random test table";
    t.validate();
    return t;
}

/// Softmax over logits q.k/sqrt(d) for tokens 0..offset, computed
/// independently (exp-normalize in double).
inline std::vector<double> softmax_row_oracle(std::span<const float> q, rdkv::MatrixView k,
                                              int offset) {
    const int d = k.cols;
    std::vector<double> row(k.rows, 0.0);
    std::vector<double> logits(offset + 1);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    double mx = -1e300;
    for (int t = 0; t <= offset; ++t) {
        double dot = 0.0;
        for (int c = 0; c < d; ++c) dot += static_cast<double>(q[c]) * k.at(t, c);
        logits[t] = dot * scale;
        mx = std::max(mx, logits[t]);
    }
    double denom = 0.0;
    for (int t = 0; t <= offset; ++t) denom += std::exp(logits[t] - mx);
    for (int t = 0; t <= offset; ++t) row[t] = std::exp(logits[t] - mx) / denom;
    return row;
}

/// Jacobi eigenvalues of a symmetric matrix (row-major n x n).
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, int n) {
    auto at = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * n + j]; };
    for (int sweep = 0; sweep < 128; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        }
        if (off < 1e-30) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(at(p, q)) < 1e-300) continue;
                const double theta = (at(q, q) - at(p, p)) / (2.0 * at(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = at(i, p), aiq = at(i, q);
                    at(i, p) = c * aip - s * aiq;
                    at(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = at(p, i), aqi = at(q, i);
                    at(p, i) = c * api - s * aqi;
                    at(q, i) = s * api + c * aqi;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (int i = 0; i < n; ++i) eig[i] = at(i, i);
    return eig;
}

/// All singular values of a dense row-major m x n matrix via the Gram
/// matrix of the smaller side.
inline std::vector<double> singular_values(const std::vector<double>& m_data, int m, int n) {
    const bool use_cols = n <= m;
    const int k = use_cols ? n : m;
    std::vector<double> gram(static_cast<std::size_t>(k) * k, 0.0);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            double acc = 0.0;
            if (use_cols) {
                for (int r = 0; r < m; ++r) {
                    acc += m_data[static_cast<std::size_t>(r) * n + i] *
                           m_data[static_cast<std::size_t>(r) * n + j];
                }
            } else {
                for (int c = 0; c < n; ++c) {
                    acc += m_data[static_cast<std::size_t>(i) * n + c] *
                           m_data[static_cast<std::size_t>(j) * n + c];
                }
            }
            gram[static_cast<std::size_t>(i) * k + j] = acc;
        }
    }
    auto eig = jacobi_eigenvalues(gram, k);
    std::vector<double> sv;
    for (double e : eig) sv.push_back(std::sqrt(std::max(e, 0.0)));
    std::sort(sv.rbegin(), sv.rend());
    return sv;
}

/// Plain dense attention over (K, V) rows plus optional appended rows;
/// independent of the library decode paths.
inline std::vector<double> dense_attention_oracle(std::span<const float> q,
                                                  const std::vector<float>& k_rows,
                                                  const std::vector<float>& v_rows, int n_ctx,
                                                  int d) {
    std::vector<double> logits(n_ctx);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    double mx = -1e300;
    for (int t = 0; t < n_ctx; ++t) {
        double dot = 0.0;
        for (int c = 0; c < d; ++c) {
            dot += static_cast<double>(q[c]) * k_rows[static_cast<std::size_t>(t) * d + c];
        }
        logits[t] = dot * scale;
        mx = std::max(mx, logits[t]);
    }
    double denom = 0.0;
    for (double& z : logits) {
        z = std::exp(z - mx);
        denom += z;
    }
    std::vector<double> out(d, 0.0);
    for (int t = 0; t < n_ctx; ++t) {
        const double w = logits[t] / denom;
        for (int c = 0; c < d; ++c) {
            out[c] += w * v_rows[static_cast<std::size_t>(t) * d + c];
        }
    }
    return out;
}

/// Generic 2^b-level uniform quantizer over [min, max] (arbitrary b, used
/// for the high-rate distortion check where b is not a cache width).
inline double uniform_quantizer_rmse(std::span<const double> samples, int b) {
    double lo = samples[0], hi = samples[0];
    for (double v : samples) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double levels = std::pow(2.0, b) - 1.0;
    const double step = (hi - lo) / levels;
    double err = 0.0;
    for (double v : samples) {
        const double code = std::clamp(std::round((v - lo) / step), 0.0, levels);
        const double rec = lo + code * step;
        err += (rec - v) * (rec - v);
    }
    return std::sqrt(err / static_cast<double>(samples.size()));
}

inline rdkv::AttentionMatrix make_attention(const std::vector<std::vector<double>>& rows) {
    rdkv::AttentionMatrix a;
    a.rows = static_cast<int>(rows.size());
    a.cols = static_cast<int>(rows.front().size());
    for (const auto& r : rows) a.a.insert(a.a.end(), r.begin(), r.end());
    return a;
}

}  // namespace testsupport
