#include "refreshkv/scheduler.hpp"

#include <cmath>
#include <string>

#include "refreshkv/errors.hpp"
#include "refreshkv/numerics.hpp"

namespace refreshkv {

std::string_view to_string(ScheduleMode mode) {
    switch (mode) {
        case ScheduleMode::fixed: return "fixed";
        case ScheduleMode::qc: return "qc";
        case ScheduleMode::always_full: return "always_full";
        case ScheduleMode::never_full: return "never_full";
    }
    return "?";
}

ScheduleMode schedule_mode_from_string(std::string_view name) {
    if (name == "fixed") return ScheduleMode::fixed;
    if (name == "qc") return ScheduleMode::qc;
    if (name == "always_full") return ScheduleMode::always_full;
    if (name == "never_full") return ScheduleMode::never_full;
    throw ConfigError("unknown schedule mode '" + std::string(name) + "'");
}

void ScheduleConfig::validate() const {
    if (mode == ScheduleMode::fixed && stride == 0) {
        throw ConfigError("schedule.stride must be positive in fixed mode");
    }
    if (mode == ScheduleMode::qc) {
        if (qc_stride == 0) {
            throw ConfigError("schedule.qc_stride must be positive in qc mode");
        }
        if (std::isnan(threshold)) {
            throw ConfigError("schedule.threshold must be a number in qc mode");
        }
    }
}

ScheduleDecision should_full(const LayerScheduleState& state, std::size_t step_index,
                             std::span<const double> current_query, const ScheduleConfig& config) {
    switch (config.mode) {
        case ScheduleMode::always_full: return {true, std::nullopt};
        case ScheduleMode::never_full: return {false, std::nullopt};
        case ScheduleMode::fixed: return {step_index % config.stride == 0, std::nullopt};
        case ScheduleMode::qc: {
            if (step_index % config.qc_stride != 0) {
                return {false, std::nullopt};
            }
            const double sim = cosine_similarity(current_query, state.reference_query);
            // Equality stays partial.
            return {sim < config.threshold, sim};
        }
    }
    return {false, std::nullopt};
}

void record_step(LayerScheduleState& state, bool full, std::span<const double> query) {
    ++state.generated_step_count;
    if (full) {
        ++state.full_step_count;
        state.reference_query.assign(query.begin(), query.end());
    }
}

std::optional<double> effective_stride(std::span<const StepTrace> trace, std::size_t layer) {
    if (trace.empty()) {
        throw ContractViolation("effective_stride: empty trace");
    }
    std::size_t events = 0;
    for (const StepTrace& step : trace) {
        if (layer >= step.layers.size()) {
            throw ContractViolation("effective_stride: layer " + std::to_string(layer) + " not in trace");
        }
        if (step.layers[layer].mode != LayerMode::partial) {
            ++events;
        }
    }
    if (events == 0) {
        return std::nullopt;
    }
    return static_cast<double>(trace.size()) / static_cast<double>(events);
}

std::optional<double> mean_effective_stride(std::span<const StepTrace> trace, std::size_t n_layers) {
    double total = 0.0;
    std::size_t defined = 0;
    for (std::size_t l = 0; l < n_layers; ++l) {
        if (auto s = effective_stride(trace, l)) {
            total += *s;
            ++defined;
        }
    }
    if (defined == 0) {
        return std::nullopt;
    }
    return total / static_cast<double>(defined);
}

}  // namespace refreshkv
