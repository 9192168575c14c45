#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "refreshkv/model.hpp"
#include "refreshkv/policies.hpp"
#include "refreshkv/scheduler.hpp"
#include "refreshkv/trace.hpp"

namespace refreshkv {

// One decode session: a model, a policy instance, and the per-step trace.
// Not shareable across threads; the weights may be shared by many sessions.
class Session {
public:
    Session(const ModelWeights& weights, const PolicyConfig& policy, const ScheduleConfig& schedule);

    // Must be called once, before step().
    const StepOutput& prefill(std::span<const int> prompt);
    // Feeds `token` at the next position and appends a StepTrace.
    const StepOutput& step(int token);

    const StepOutput& last_output() const { return last_; }
    std::span<const StepTrace> trace() const { return trace_; }
    StepTrace& last_trace() { return trace_.back(); }
    CachePolicy& policy() { return *policy_; }
    const CachePolicy& policy() const { return *policy_; }
    const ModelWeights& weights() const { return weights_; }
    std::size_t prompt_length() const { return prompt_length_; }
    std::int64_t next_position() const { return next_position_; }

private:
    const ModelWeights& weights_;
    std::unique_ptr<CachePolicy> policy_;
    StepOutput last_;
    std::vector<StepTrace> trace_;
    std::size_t prompt_length_ = 0;
    std::int64_t next_position_ = 0;
    bool started_ = false;
};

// Index of the largest logit; ties go to the lower token id.
int argmax_token(std::span<const double> logits);

struct GenerationResult {
    std::vector<int> tokens;
    std::vector<std::vector<double>> logits;  // [0] from prefill, then one per step
    std::vector<StepTrace> trace;
};

// Greedy decoding with n_steps decode steps. tokens[0] comes from the
// prefill logits; step i feeds tokens[i - 1] and yields tokens[i], so
// n_steps + 1 tokens are returned.
GenerationResult generate_greedy(const ModelWeights& weights, const PolicyConfig& policy,
                                 const ScheduleConfig& schedule, std::span<const int> prompt, std::size_t n_steps);

}  // namespace refreshkv
