#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "refreshkv/trace.hpp"

namespace refreshkv {

enum class ScheduleMode { fixed, qc, always_full, never_full };

std::string_view to_string(ScheduleMode mode);
ScheduleMode schedule_mode_from_string(std::string_view name);

struct ScheduleConfig {
    ScheduleMode mode = ScheduleMode::qc;
    std::size_t stride = 10;     // fixed mode
    std::size_t qc_stride = 10;  // qc mode: how often the similarity check runs
    double threshold = 0.85;     // qc mode: partial when similarity >= threshold

    void validate() const;
    bool operator==(const ScheduleConfig&) const = default;
};

struct LayerScheduleState {
    std::vector<double> reference_query;  // mean query of the layer's latest full step (prefill included)
    std::size_t full_step_count = 0;      // generation-phase full steps only
    std::size_t generated_step_count = 0;
};

struct ScheduleDecision {
    bool full = false;
    std::optional<double> similarity;  // set when a QC comparison ran
};

// Pure in (state, step_index, query, config). step_index starts at 1.
ScheduleDecision should_full(const LayerScheduleState& state, std::size_t step_index,
                             std::span<const double> current_query, const ScheduleConfig& config);

// Counts the step and, on a full step, makes `query` the new reference.
void record_step(LayerScheduleState& state, bool full, std::span<const double> query);

// Generated steps / full-attention events of `layer` over the trace; nullopt
// when the layer never ran a full step. Prefill is not an event.
std::optional<double> effective_stride(std::span<const StepTrace> trace, std::size_t layer);

// Mean of the defined per-layer effective strides; nullopt when none is defined.
std::optional<double> mean_effective_stride(std::span<const StepTrace> trace, std::size_t n_layers);

}  // namespace refreshkv
