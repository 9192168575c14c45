#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

// Dense kernels used by the forward pass. Everything in `kernels` is
// OpenMP-parallel; `kernels::serial` holds the single-threaded reference
// implementations kept for testing and benchmarking. Both share the same
// per-row inner loops, so their results agree bitwise.
namespace refreshkv {

// One kv-head's slice of a cache: `size` entries, row-major keys/values of
// width head_dim, and each entry's original absolute position.
struct HeadView {
    std::span<const double> keys;
    std::span<const double> values;
    std::span<const std::int64_t> positions;

    std::size_t size() const { return positions.size(); }
};

// Indexed by kv-head.
using LayerView = std::vector<HeadView>;

// Probability rows of the current token, indexed by query head.
using AttentionRows = std::vector<std::vector<double>>;

struct AttentionShape {
    std::size_t n_query_heads = 0;
    std::size_t n_kv_heads = 0;
    std::size_t head_dim = 0;

    std::size_t group_size() const { return n_query_heads / n_kv_heads; }
};

namespace kernels {

// Below this many multiply-adds a kernel stays on the calling thread.
inline constexpr std::size_t kParallelWork = 1 << 14;

// out[r] = sum_c w[r * cols + c] * x[c]
void matvec(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> x,
            std::span<double> out);

// out[t] = W x[t] for n row-major inputs of width cols.
void matmul_rows(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> x,
                 std::size_t n, std::span<double> out);

// Single-token attention. queries: n_query_heads x head_dim; out likewise.
// When rows is non-null it receives one probability row per query head.
void decode_attention(const AttentionShape& shape, std::span<const double> queries, const LayerView& view,
                      std::span<double> out, AttentionRows* rows);

// Probability rows only (no value mix); used for score probes.
AttentionRows attention_probabilities(const AttentionShape& shape, std::span<const double> queries,
                                      const LayerView& view);

// Causal self-attention over n positions: q is n x (n_query_heads*head_dim),
// k/v are n x (n_kv_heads*head_dim). Rows for the last position are written
// to last_rows when non-null.
void causal_attention(const AttentionShape& shape, std::span<const double> q, std::span<const double> k,
                      std::span<const double> v, std::size_t n, std::span<double> out, AttentionRows* last_rows);

namespace serial {

void matvec(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> x,
            std::span<double> out);
void matmul_rows(std::span<const double> w, std::size_t rows, std::size_t cols, std::span<const double> x,
                 std::size_t n, std::span<double> out);
void decode_attention(const AttentionShape& shape, std::span<const double> queries, const LayerView& view,
                      std::span<double> out, AttentionRows* rows);
AttentionRows attention_probabilities(const AttentionShape& shape, std::span<const double> queries,
                                      const LayerView& view);
void causal_attention(const AttentionShape& shape, std::span<const double> q, std::span<const double> k,
                      std::span<const double> v, std::size_t n, std::span<double> out, AttentionRows* last_rows);

}  // namespace serial

namespace detail {

double dot(const double* a, const double* b, std::size_t n);

// Attention of one query head over n strided keys/values. `scratch` must hold
// n doubles and is left holding the probability row.
void attend_head(const double* query, const double* keys, const double* values, std::size_t n,
                 std::size_t stride, std::size_t head_dim, double* out, double* scratch);

void check_view(const AttentionShape& shape, std::span<const double> queries, const LayerView& view);

}  // namespace detail
}  // namespace kernels
}  // namespace refreshkv
