#include "refreshkv/session.hpp"

#include <string>

#include "refreshkv/errors.hpp"
#include "refreshkv/metrics.hpp"

namespace refreshkv {

Session::Session(const ModelWeights& weights, const PolicyConfig& policy, const ScheduleConfig& schedule)
    : weights_(weights), policy_(make_policy(weights.config, policy, schedule)) {}

const StepOutput& Session::prefill(std::span<const int> prompt) {
    if (started_) {
        throw ContractViolation("Session::prefill called twice");
    }
    PrefillResult result = refreshkv::prefill(weights_, prompt, policy_->needs_prefill_scores());
    last_ = result.last;
    policy_->start(std::move(result));
    prompt_length_ = prompt.size();
    next_position_ = static_cast<std::int64_t>(prompt.size());
    started_ = true;
    return last_;
}

const StepOutput& Session::step(int token) {
    if (!started_) {
        throw ContractViolation("Session::step before prefill");
    }
    const std::size_t step_index = trace_.size() + 1;
    policy_->begin_step(step_index);
    try {
        last_ = decode_step(weights_, token, next_position_, *policy_);
    } catch (const ContractViolation& e) {
        throw ContractViolation("step " + std::to_string(step_index) + ": " + e.what());
    }

    StepTrace t;
    t.step_index = step_index;
    t.position = next_position_;
    t.input_token = token;
    t.layers.assign(policy_->layer_traces().begin(), policy_->layer_traces().end());
    const Cost cost = step_cost(t, weights_.config);
    t.attention_flops = cost.flops;
    t.kv_bytes_moved = cost.bytes;
    double mass = 0.0;
    std::size_t refreshed = 0;
    for (const LayerTrace& layer : t.layers) {
        t.overhead_flops += layer.overhead_flops;
        for (double m : layer.retained_post) {
            mass += m;
            ++refreshed;
        }
    }
    if (refreshed > 0) {
        t.retained_mass = mass / static_cast<double>(refreshed);
    }
    t.predicted_token = argmax_token(last_.logits);
    trace_.push_back(std::move(t));
    ++next_position_;
    return last_;
}

int argmax_token(std::span<const double> logits) {
    if (logits.empty()) {
        throw ContractViolation("argmax_token: empty logits");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) {
            best = i;
        }
    }
    return static_cast<int>(best);
}

GenerationResult generate_greedy(const ModelWeights& weights, const PolicyConfig& policy,
                                 const ScheduleConfig& schedule, std::span<const int> prompt, std::size_t n_steps) {
    Session session(weights, policy, schedule);
    GenerationResult out;
    const StepOutput& first = session.prefill(prompt);
    out.logits.push_back(first.logits);
    out.tokens.push_back(argmax_token(first.logits));
    for (std::size_t i = 0; i < n_steps; ++i) {
        const StepOutput& step = session.step(out.tokens.back());
        out.logits.push_back(step.logits);
        out.tokens.push_back(argmax_token(step.logits));
    }
    out.trace.assign(session.trace().begin(), session.trace().end());
    return out;
}

}  // namespace refreshkv
