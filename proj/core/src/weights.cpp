#include "rdkv/weights.hpp"

#include <cmath>
#include <stdexcept>

namespace rdkv {

std::vector<float> moving_average(std::span<const float> raw, int kernel) {
    if (kernel < 1 || kernel % 2 == 0) {
        throw std::invalid_argument("moving_average: kernel must be odd and >= 1");
    }
    const int n = static_cast<int>(raw.size());
    const int half = kernel / 2;
    std::vector<float> out(raw.size());
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        const int lo = std::max(0, i - half);
        const int hi = std::min(n - 1, i + half);
        for (int j = lo; j <= hi; ++j) acc += raw[j];
        out[i] = static_cast<float>(acc / kernel);  // zero padding: divide by full kernel
    }
    return out;
}

WeightVector token_weights(std::span<const AttentionMatrix> heads, int group, int pool_kernel) {
    if (heads.empty()) throw std::invalid_argument("token_weights: no attention matrices");
    if (static_cast<int>(heads.size()) != group) {
        throw std::invalid_argument("token_weights: group size does not match head count");
    }
    const int t_len = heads.front().cols;
    std::vector<double> raw(t_len, 0.0);
    for (const auto& a : heads) {
        if (a.cols != t_len) {
            throw std::invalid_argument("token_weights: attention matrices disagree on T");
        }
        for (int r = 0; r < a.rows; ++r) {
            auto row = a.row(r);
            for (int t = 0; t < t_len; ++t) raw[t] += row[t];
        }
    }
    std::vector<float> rawf(raw.begin(), raw.end());
    WeightVector w;
    w.kind = WeightKind::token;
    w.values = moving_average(rawf, pool_kernel);
    return w;
}

double tv_after_evict(std::span<const double> row, int t) {
    const int n = static_cast<int>(row.size());
    if (t < 0 || t >= n) throw std::invalid_argument("tv_after_evict: index out of range");
    for (double p : row) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw NumericError("tv_after_evict: row is not a distribution");
        }
    }
    const double evicted = row[t];
    if (evicted >= 1.0) {
        throw NumericError("tv_after_evict: degenerate row, evicted entry holds all mass");
    }
    const double renorm = 1.0 / (1.0 - evicted);
    double sum_abs = evicted;  // |row[t] - 0|
    for (int i = 0; i < n; ++i) {
        if (i == t) continue;
        sum_abs += std::abs(row[i] * renorm - row[i]);
    }
    return 0.5 * sum_abs;
}

WeightVector channel_weights(MatrixView q, MatrixView k) {
    if (q.cols != k.cols) {
        throw std::invalid_argument("channel_weights: Q and K must share head_dim");
    }
    const int d = q.cols;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    WeightVector w;
    w.kind = WeightKind::channel;
    w.values.resize(d);
    for (int c = 0; c < d; ++c) {
        double qq = 0.0, kk = 0.0;
        for (int r = 0; r < q.rows; ++r) {
            const double x = q.at(r, c);
            qq += x * x;
        }
        for (int r = 0; r < k.rows; ++r) {
            const double x = k.at(r, c);
            kk += x * x;
        }
        w.values[c] = static_cast<float>(std::sqrt(qq) * std::sqrt(kk) * inv_sqrt_d);
    }
    return w;
}

double logit_deviation_norm(MatrixView q, MatrixView k, int channel) {
    if (q.cols != k.cols) {
        throw std::invalid_argument("logit_deviation_norm: Q and K must share head_dim");
    }
    if (channel < 0 || channel >= q.cols) {
        throw std::invalid_argument("logit_deviation_norm: channel out of range");
    }
    const int m = q.rows;
    const int n = k.rows;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols));

    // dZ[i][j] = -(1/sqrt(d)) q_i k_j, formed explicitly
    std::vector<double> dz(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        const double qi = -inv_sqrt_d * q.at(i, channel);
        for (int j = 0; j < n; ++j) dz[static_cast<std::size_t>(i) * n + j] = qi * k.at(j, channel);
    }

    auto apply = [&](const std::vector<double>& x, std::vector<double>& ax) {
        double norm = 0.0;
        for (int i = 0; i < m; ++i) {
            double acc = 0.0;
            const double* row = dz.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) acc += row[j] * x[j];
            ax[i] = acc;
            norm += acc * acc;
        }
        return std::sqrt(norm);
    };

    // power iteration on dZ^T dZ; pick a start vector not in the null space
    std::vector<double> x(n, 1.0 / std::sqrt(static_cast<double>(n)));
    std::vector<double> ax(m), y(n);
    double ax_norm = apply(x, ax);
    for (int j = 0; j < n && ax_norm == 0.0; ++j) {
        std::fill(x.begin(), x.end(), 0.0);
        x[j] = 1.0;
        ax_norm = apply(x, ax);
    }
    if (ax_norm == 0.0) return 0.0;  // every column annihilated: dZ is zero

    double sigma = 0.0;
    const double tol = 1e-10;
    const int max_iters = 10000;
    for (int it = 0; it < max_iters; ++it) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) acc += dz[static_cast<std::size_t>(i) * n + j] * ax[i];
            y[j] = acc;
        }
        double y_norm = 0.0;
        for (double v : y) y_norm += v * v;
        y_norm = std::sqrt(y_norm);
        const double next_sigma = ax_norm;
        if (it > 0 && std::abs(next_sigma - sigma) <= tol * std::max(1.0, next_sigma)) {
            return next_sigma;
        }
        sigma = next_sigma;
        for (int j = 0; j < n; ++j) x[j] = y[j] / y_norm;
        ax_norm = apply(x, ax);
    }
    throw NumericError("logit_deviation_norm: power iteration did not converge");
}

}  // namespace rdkv
