#include "refreshkv/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "refreshkv/errors.hpp"

namespace refreshkv {

void softmax_inplace(std::span<double> values) {
    if (values.empty()) {
        throw ContractViolation("softmax: empty input");
    }
    double max_value = values[0];
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw ContractViolation("softmax: non-finite logit");
        }
        max_value = std::max(max_value, v);
    }
    double total = 0.0;
    for (double& v : values) {
        v = std::exp(v - max_value);
        total += v;
    }
    const double inv = 1.0 / total;
    for (double& v : values) {
        v *= inv;
    }
}

ScoreVector softmax(std::span<const double> logits) {
    ScoreVector out(logits.begin(), logits.end());
    softmax_inplace(out);
    return out;
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw ContractViolation("cosine_similarity: length mismatch (" + std::to_string(u.size()) +
                                " vs " + std::to_string(v.size()) + ")");
    }
    double dot = 0.0;
    double uu = 0.0;
    double vv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    if (uu == 0.0 || vv == 0.0) {
        return 0.0;
    }
    return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

ScoreVector max_pool_1d(std::span<const double> scores, int kernel) {
    if (kernel <= 0 || kernel % 2 == 0) {
        throw ConfigError("max_pool_1d: kernel must be odd and positive, got " + std::to_string(kernel));
    }
    const auto n = static_cast<std::ptrdiff_t>(scores.size());
    const std::ptrdiff_t half = kernel / 2;
    ScoreVector out(scores.size());
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, i - half);
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n - 1, i + half);
        double best = scores[lo];
        for (std::ptrdiff_t j = lo + 1; j <= hi; ++j) {
            best = std::max(best, scores[j]);
        }
        out[i] = best;
    }
    return out;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
    if (k == 0 || k > scores.size()) {
        throw ContractViolation("top_k_indices: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(scores.size()) + "]");
    }
    if (std::any_of(scores.begin(), scores.end(), [](double s) { return std::isnan(s); })) {
        throw ContractViolation("top_k_indices: NaN score");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (k < scores.size()) {
        // Strict total order: higher score first, then lower index.
        auto better = [&](std::size_t a, std::size_t b) {
            if (scores[a] != scores[b]) {
                return scores[a] > scores[b];
            }
            return a < b;
        };
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k) - 1, order.end(), better);
        order.resize(k);
        std::sort(order.begin(), order.end());
    }
    return order;
}

double max_relative_difference(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ContractViolation("max_relative_difference: length mismatch");
    }
    double scale = 0.0;
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        scale = std::max(scale, std::abs(b[i]));
        diff = std::max(diff, std::abs(a[i] - b[i]));
    }
    return diff / std::max(scale, 1e-300);
}

}  // namespace refreshkv
