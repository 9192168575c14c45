#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "refreshkv/model.hpp"
#include "refreshkv/policies.hpp"
#include "refreshkv/scheduler.hpp"

namespace refreshkv {

// Two greedy runs that must agree: logits within `tolerance` (norm-wise
// relative) at every step and identical token sequences.
struct LadderRung {
    std::string name;
    PolicyConfig policy;
    ScheduleConfig schedule;
    PolicyConfig reference_policy;
    ScheduleConfig reference_schedule;

    bool passed = false;
    double max_relative_difference = 0.0;
    bool tokens_equal = false;
    // First logits index (0 = prefill) outside tolerance; -1 when none.
    long first_mismatch = -1;
};

struct LadderReport {
    std::size_t prompt_length = 0;
    std::size_t n_generate = 0;
    double tolerance = 0.0;
    std::vector<LadderRung> rungs;

    bool passed() const;
};

// The four rungs for a prompt of length L and N generated tokens:
//   refreshkv (K = L, always_full)              vs vanilla
//   refreshkv (never_full, no eviction on append) vs snapkv with the same K
//   streaming (K = L + N)                        vs vanilla
//   h2o (K = L + N)                              vs vanilla
// `base` supplies the remaining policy knobs (k for the snapkv rung, kernel,
// aggregation, selection granularity).
std::vector<LadderRung> ladder_rungs(std::size_t prompt_length, std::size_t n_generate, const PolicyConfig& base);

LadderReport run_equivalence_ladder(const ModelWeights& weights, std::span<const int> prompt,
                                    std::size_t n_generate, const PolicyConfig& base, double tolerance = 1e-9);

nlohmann::json to_json(const LadderReport& report);

}  // namespace refreshkv
