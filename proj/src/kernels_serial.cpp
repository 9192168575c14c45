#include <cmath>
#include <string>

#include "refreshkv/errors.hpp"
#include "refreshkv/kernels.hpp"
#include "refreshkv/numerics.hpp"

namespace refreshkv::kernels {

namespace detail {

double dot(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

void attend_head(const double* query, const double* keys, const double* values, std::size_t n,
                 std::size_t stride, std::size_t head_dim, double* out, double* scratch) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (std::size_t j = 0; j < n; ++j) {
        scratch[j] = dot(query, keys + j * stride, head_dim) * scale;
    }
    softmax_inplace(std::span<double>(scratch, n));
    for (std::size_t d = 0; d < head_dim; ++d) {
        out[d] = 0.0;
    }
    for (std::size_t j = 0; j < n; ++j) {
        const double p = scratch[j];
        const double* v = values + j * stride;
        for (std::size_t d = 0; d < head_dim; ++d) {
            out[d] += p * v[d];
        }
    }
}

void check_view(const AttentionShape& shape, std::span<const double> queries, const LayerView& view) {
    if (view.size() != shape.n_kv_heads) {
        throw ContractViolation("attention: view has " + std::to_string(view.size()) + " kv-heads, expected " +
                                std::to_string(shape.n_kv_heads));
    }
    if (queries.size() != shape.n_query_heads * shape.head_dim) {
        throw ContractViolation("attention: query buffer has wrong size");
    }
    for (const HeadView& head : view) {
        if (head.size() == 0) {
            throw ContractViolation("attention: empty cache view");
        }
        if (head.keys.size() != head.size() * shape.head_dim || head.values.size() != head.size() * shape.head_dim) {
            throw ContractViolation("attention: key/value span does not match position count");
        }
    }
}

}  // namespace detail

namespace serial {

void matvec(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> x,
            std::span<double> out) {
    for (std::size_t r = 0; r < rows; ++r) {
        out[r] = detail::dot(w.data() + r * cols, x.data(), cols);
    }
}

void matmul_rows(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> x,
                 std::size_t n, std::span<double> out) {
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t r = 0; r < rows; ++r) {
            out[t * rows + r] = detail::dot(w.data() + r * cols, x.data() + t * cols, cols);
        }
    }
}

void decode_attention(const AttentionShape& shape, std::span<const double> queries, const LayerView& view,
                      std::span<double> out, AttentionRows* rows) {
    detail::check_view(shape, queries, view);
    const std::size_t hd = shape.head_dim;
    if (rows != nullptr) {
        rows->assign(shape.n_query_heads, {});
    }
    std::vector<double> scratch;
    for (std::size_t h = 0; h < shape.n_query_heads; ++h) {
        const HeadView& kv = view[h / shape.group_size()];
        scratch.resize(kv.size());
        detail::attend_head(queries.data() + h * hd, kv.keys.data(), kv.values.data(), kv.size(), hd, hd,
                            out.data() + h * hd, scratch.data());
        if (rows != nullptr) {
            (*rows)[h] = scratch;
        }
    }
}

AttentionRows attention_probabilities(const AttentionShape& shape, std::span<const double> queries,
                                      const LayerView& view) {
    detail::check_view(shape, queries, view);
    const std::size_t hd = shape.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    AttentionRows rows(shape.n_query_heads);
    for (std::size_t h = 0; h < shape.n_query_heads; ++h) {
        const HeadView& kv = view[h / shape.group_size()];
        rows[h].resize(kv.size());
        for (std::size_t j = 0; j < kv.size(); ++j) {
            rows[h][j] = detail::dot(queries.data() + h * hd, kv.keys.data() + j * hd, hd) * scale;
        }
        softmax_inplace(rows[h]);
    }
    return rows;
}

void causal_attention(const AttentionShape& shape, std::span<const double> q, std::span<const double> k,
                      std::span<const double> v, std::size_t n, std::span<double> out, AttentionRows* last_rows) {
    const std::size_t hd = shape.head_dim;
    const std::size_t q_width = shape.n_query_heads * hd;
    const std::size_t kv_width = shape.n_kv_heads * hd;
    std::vector<double> scratch(n);
    if (last_rows != nullptr) {
        last_rows->assign(shape.n_query_heads, {});
    }
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t h = 0; h < shape.n_query_heads; ++h) {
            const std::size_t g = h / shape.group_size();
            detail::attend_head(q.data() + t * q_width + h * hd, k.data() + g * hd, v.data() + g * hd, t + 1,
                                kv_width, hd, out.data() + t * q_width + h * hd, scratch.data());
            if (last_rows != nullptr && t + 1 == n) {
                (*last_rows)[h].assign(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(n));
            }
        }
    }
}

}  // namespace serial
}  // namespace refreshkv::kernels
