#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "refreshkv/model.hpp"
#include "refreshkv/policies.hpp"
#include "refreshkv/scheduler.hpp"
#include "refreshkv/trace.hpp"

namespace refreshkv {

// Cost model (64-bit floats, batch size 1), per layer and per generated token:
//   attend over n entries: flops = n_query_heads * (2 n head_dim + 2 n head_dim)
//                          bytes = n * 2 * head_dim * n_kv_heads * 8
//   probe n entries (scores only): flops = n_query_heads * 2 n head_dim
//                                  bytes = n * head_dim * n_kv_heads * 8
// Selection overheads (aggregation, pooling, top-K, similarity) are counted
// separately as overhead_flops.
struct Cost {
    std::uint64_t flops = 0;
    std::uint64_t bytes = 0;

    Cost& operator+=(const Cost& other) {
        flops += other.flops;
        bytes += other.bytes;
        return *this;
    }
    bool operator==(const Cost&) const = default;
};

Cost layer_attention_cost(std::size_t attended, const ModelConfig& config);
Cost layer_probe_cost(std::size_t probed, const ModelConfig& config);
// Every layer attending `attended` entries.
Cost attention_cost(std::size_t attended, const ModelConfig& config);
// Re-derives a step's cost from its per-layer records.
Cost step_cost(const StepTrace& step, const ModelConfig& config);

struct TraceTotals {
    std::uint64_t attention_flops = 0;
    std::uint64_t kv_bytes_moved = 0;
    std::uint64_t overhead_flops = 0;
    std::vector<std::size_t> full_steps_per_layer;  // full or probe steps

    // Associative, order-independent merge of two sessions' totals.
    TraceTotals& operator+=(const TraceTotals& other);
    bool operator==(const TraceTotals&) const = default;
};

TraceTotals summarize(std::span<const StepTrace> trace, std::size_t n_layers);

// -log softmax(logits)[target], computed stably.
double negative_log_likelihood(std::span<const double> logits, int target);

struct TeacherForcedResult {
    double perplexity = 0.0;
    std::vector<double> nll;  // one per predicted tail token
    std::vector<StepTrace> trace;
};

// Prefills tokens[0, n - tail) and predicts the last `tail` tokens under
// teacher forcing, the cache evolving under the policy across the stream.
// Throws ConfigError unless 0 < tail < tokens.size().
TeacherForcedResult teacher_forced(const ModelWeights& weights, const PolicyConfig& policy,
                                   const ScheduleConfig& schedule, std::span<const int> tokens, std::size_t tail);

double perplexity(const ModelWeights& weights, const PolicyConfig& policy, const ScheduleConfig& schedule,
                  std::span<const int> tokens, std::size_t tail);

// Perplexity of the tail from a from-scratch full forward pass.
double reference_perplexity(const ModelWeights& weights, std::span<const int> tokens, std::size_t tail);

}  // namespace refreshkv
