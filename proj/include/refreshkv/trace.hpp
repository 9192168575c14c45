#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace refreshkv {

// full: attended the whole cache. partial: attended a reduced cache.
// probe: scored the whole cache without attending to it, then attended the
// refreshed partial cache.
enum class LayerMode { full, partial, probe };

std::string_view to_string(LayerMode mode);
LayerMode layer_mode_from_string(std::string_view name);

struct LayerTrace {
    LayerMode mode = LayerMode::full;
    std::size_t attended = 0;  // entries attended per kv-head
    std::size_t probed = 0;    // entries scored by a probe, 0 otherwise
    std::optional<double> similarity;  // query similarity when a QC check ran
    // Retained attention mass per kv-head, before and after a refresh.
    std::vector<double> retained_pre;
    std::vector<double> retained_post;
    std::uint64_t overhead_flops = 0;
};

struct StepTrace {
    std::size_t step_index = 0;  // 1 for the first generated token
    std::int64_t position = 0;
    int input_token = 0;
    std::vector<LayerTrace> layers;
    std::uint64_t attention_flops = 0;
    std::uint64_t kv_bytes_moved = 0;
    std::uint64_t overhead_flops = 0;
    std::optional<double> retained_mass;  // mean post-refresh mass when any layer refreshed
    std::optional<int> predicted_token;
    std::optional<double> nll;  // teacher-forced loss of the next token
};

nlohmann::json to_json(const StepTrace& step);
StepTrace step_trace_from_json(const nlohmann::json& j);

}  // namespace refreshkv
