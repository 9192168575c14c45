#include "refreshkv/kernels.hpp"

#include <cmath>
#include <exception>
#include <mutex>

#include "refreshkv/numerics.hpp"

namespace refreshkv::kernels {

namespace {

// Exceptions cannot cross an OpenMP region boundary; park the first one and
// rethrow it on the calling thread.
class ErrorSlot {
public:
    template <typename Fn>
    void run(Fn&& fn) {
        try {
            fn();
        } catch (...) {
            std::lock_guard lock(mutex_);
            if (!error_) {
                error_ = std::current_exception();
            }
        }
    }
    void rethrow() const {
        if (error_) {
            std::rethrow_exception(error_);
        }
    }

private:
    std::mutex mutex_;
    std::exception_ptr error_;
};

}  // namespace

void matvec(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> x,
            std::span<double> out) {
    const auto n_rows = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
    for (std::ptrdiff_t r = 0; r < n_rows; ++r) {
        out[r] = detail::dot(w.data() + r * cols, x.data(), cols);
    }
}

void matmul_rows(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> x,
                 std::size_t n, std::span<double> out) {
    const auto total = static_cast<std::ptrdiff_t>(n * rows);
#pragma omp parallel for schedule(static) if (n * rows * cols >= kParallelWork)
    for (std::ptrdiff_t i = 0; i < total; ++i) {
        const std::size_t t = static_cast<std::size_t>(i) / rows;
        const std::size_t r = static_cast<std::size_t>(i) % rows;
        out[i] = detail::dot(w.data() + r * cols, x.data() + t * cols, cols);
    }
}

void decode_attention(const AttentionShape& shape, std::span<const double> queries, const LayerView& view,
                      std::span<double> out, AttentionRows* rows) {
    detail::check_view(shape, queries, view);
    const std::size_t hd = shape.head_dim;
    const auto n_heads = static_cast<std::ptrdiff_t>(shape.n_query_heads);
    if (rows != nullptr) {
        rows->assign(shape.n_query_heads, {});
    }
    std::size_t work = 0;
    for (const HeadView& kv : view) {
        work += kv.size() * hd * shape.group_size();
    }
    ErrorSlot errors;
#pragma omp parallel if (work >= kParallelWork)
    {
        std::vector<double> scratch;
#pragma omp for schedule(static)
        for (std::ptrdiff_t h = 0; h < n_heads; ++h) {
            const HeadView& kv = view[static_cast<std::size_t>(h) / shape.group_size()];
            errors.run([&] {
                scratch.resize(kv.size());
                detail::attend_head(queries.data() + h * hd, kv.keys.data(), kv.values.data(), kv.size(), hd, hd,
                                    out.data() + h * hd, scratch.data());
                if (rows != nullptr) {
                    (*rows)[h] = scratch;
                }
            });
        }
    }
    errors.rethrow();
}

AttentionRows attention_probabilities(const AttentionShape& shape, std::span<const double> queries,
                                      const LayerView& view) {
    detail::check_view(shape, queries, view);
    const std::size_t hd = shape.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto n_heads = static_cast<std::ptrdiff_t>(shape.n_query_heads);
    AttentionRows rows(shape.n_query_heads);
    std::size_t work = 0;
    for (const HeadView& kv : view) {
        work += kv.size() * hd * shape.group_size();
    }
    ErrorSlot errors;
#pragma omp parallel for schedule(static) if (work >= kParallelWork)
    for (std::ptrdiff_t h = 0; h < n_heads; ++h) {
        const HeadView& kv = view[static_cast<std::size_t>(h) / shape.group_size()];
        auto& row = rows[h];
        row.resize(kv.size());
        for (std::size_t j = 0; j < kv.size(); ++j) {
            row[j] = detail::dot(queries.data() + h * hd, kv.keys.data() + j * hd, hd) * scale;
        }
        errors.run([&] { softmax_inplace(row); });
    }
    errors.rethrow();
    return rows;
}

void causal_attention(const AttentionShape& shape, std::span<const double> q, std::span<const double> k,
                      std::span<const double> v, std::size_t n, std::span<double> out, AttentionRows* last_rows) {
    const std::size_t hd = shape.head_dim;
    const std::size_t q_width = shape.n_query_heads * hd;
    const std::size_t kv_width = shape.n_kv_heads * hd;
    const auto total = static_cast<std::ptrdiff_t>(n * shape.n_query_heads);
    if (last_rows != nullptr) {
        last_rows->assign(shape.n_query_heads, {});
    }
    ErrorSlot errors;
#pragma omp parallel if (n * n * q_width / 2 >= kParallelWork)
    {
        std::vector<double> scratch(n);
        // Later positions attend to more keys; dynamic chunks balance the triangle.
#pragma omp for schedule(dynamic, 8)
        for (std::ptrdiff_t i = 0; i < total; ++i) {
            const std::size_t t = static_cast<std::size_t>(i) / shape.n_query_heads;
            const std::size_t h = static_cast<std::size_t>(i) % shape.n_query_heads;
            const std::size_t g = h / shape.group_size();
            errors.run([&] {
                detail::attend_head(q.data() + t * q_width + h * hd, k.data() + g * hd, v.data() + g * hd, t + 1,
                                    kv_width, hd, out.data() + t * q_width + h * hd, scratch.data());
                if (last_rows != nullptr && t + 1 == n) {
                    (*last_rows)[h].assign(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(n));
                }
            });
        }
    }
    errors.rethrow();
}

}  // namespace refreshkv::kernels
