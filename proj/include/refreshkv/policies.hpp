#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "refreshkv/kv_store.hpp"
#include "refreshkv/model.hpp"
#include "refreshkv/numerics.hpp"
#include "refreshkv/scheduler.hpp"
#include "refreshkv/trace.hpp"

namespace refreshkv {

enum class PolicyKind { vanilla, streaming, h2o, snapkv, refreshkv, refreshkv_no_refresh, refreshkv_no_full };
enum class GqaAggregation { max, mean, first };

std::string_view to_string(PolicyKind kind);
PolicyKind policy_kind_from_string(std::string_view name);
std::string_view to_string(GqaAggregation mode);
GqaAggregation gqa_aggregation_from_string(std::string_view name);

struct PolicyConfig {
    PolicyKind kind = PolicyKind::refreshkv;
    std::optional<std::size_t> k;  // absolute cache budget; takes precedence over k_fraction
    double k_fraction = 0.125;
    int kernel_size = 7;
    GqaAggregation gqa_aggregation = GqaAggregation::max;
    std::size_t n_sink = 4;                // streaming only
    std::optional<bool> evict_on_append;   // unset: false for snapkv, true otherwise
    bool shared_selection = false;         // one top-K set per layer instead of per kv-head

    void validate() const;
    // Cache budget before clamping: k, or floor(k_fraction * prompt_length).
    std::size_t budget(std::size_t prompt_length) const;
    // Partial-cache size for selection from the prompt: min(budget, prompt_length).
    std::size_t resolve_k(std::size_t prompt_length) const;
    bool evicts_on_append() const;

    bool operator==(const PolicyConfig&) const = default;
};

// Elementwise max / mean over the rows of one query group, or its first row.
ScoreVector aggregate_group_scores(std::span<const std::vector<double>> rows, GqaAggregation mode);

// Per kv-head selection scores from per-query-head probability rows:
// group aggregation, then max pooling with config.kernel_size. With
// shared_selection every head receives the elementwise max over heads.
std::vector<ScoreVector> selection_scores(const AttentionRows& rows, std::size_t group_size,
                                          const PolicyConfig& config);

// Per kv-head mean of the group's probability rows (each a distribution).
std::vector<ScoreVector> group_mean_rows(const AttentionRows& rows, std::size_t group_size);

// Positions kept by StreamingLLM once `generated` tokens follow a prompt of
// length prompt_length: the first n_sink positions plus the budget - n_sink
// most recent ones. Throws ConfigError when budget < n_sink.
std::vector<std::int64_t> streaming_keepset(std::size_t prompt_length, std::size_t generated, std::size_t budget,
                                            std::size_t n_sink);

// One kv-head of an H2O cache: entries plus their cumulative attention.
struct H2OHead {
    HeadStore store;
    std::vector<double> cumulative;

    void admit(std::int64_t position, std::span<const double> key, std::span<const double> value);
    // row is over the current entries, in store order.
    void accumulate(std::span<const double> row);
    // Keeps the budget - budget/2 newest entries plus the budget/2 entries
    // with the highest cumulative score among the rest (ties to the older).
    void evict_to_budget(std::size_t budget);
};

// Accumulates `row` and evicts down to the budget; returns the kept positions.
std::vector<std::int64_t> h2o_step(H2OHead& state, std::span<const double> row, std::size_t budget);

// C_p chosen from prefill scores; identical to init_partial over selection_scores.
PartialCache snapkv_prefill_select(const PrefillResult& prefill, const ModelConfig& model,
                                   const PolicyConfig& config);

// Retained probability mass of `row` over the given row indices.
double retained_mass(std::span<const double> row, std::span<const std::size_t> indices);

// A cache policy drives one decode session: it owns the caches and answers
// the model's per-layer routing questions.
class CachePolicy : public CacheRouter {
public:
    CachePolicy(const ModelConfig& model, PolicyConfig config);

    const PolicyConfig& config() const { return config_; }
    const ModelConfig& model_config() const { return model_; }

    virtual bool needs_prefill_scores() const = 0;
    virtual void start(PrefillResult prefill) = 0;
    // Entries held across all stores of a layer (memory accounting).
    virtual std::size_t stored_entries(std::size_t layer) const = 0;

    void begin_step(std::size_t step_index);
    std::size_t step_index() const { return step_; }
    std::size_t prompt_length() const { return prompt_length_; }
    std::span<const LayerTrace> layer_traces() const { return traces_; }

    // When enabled, the positions attended by each kv-head on the latest step
    // are kept: attended_positions()[layer][kv_head].
    void set_capture(bool enabled) { capture_ = enabled; }
    const std::vector<std::vector<std::vector<std::int64_t>>>& attended_positions() const { return attended_; }

protected:
    LayerTrace& layer_trace(std::size_t layer) { return traces_.at(layer); }
    void set_prompt_length(std::size_t n) { prompt_length_ = n; }
    // Records the attended view for tracing and returns it.
    LayerView attend_over(std::size_t layer, LayerView view);

    ModelConfig model_;
    PolicyConfig config_;

private:
    std::size_t step_ = 0;
    std::size_t prompt_length_ = 0;
    std::vector<LayerTrace> traces_;
    bool capture_ = false;
    std::vector<std::vector<std::vector<std::int64_t>>> attended_;
};

class VanillaPolicy final : public CachePolicy {
public:
    VanillaPolicy(const ModelConfig& model, PolicyConfig config);
    bool needs_prefill_scores() const override { return false; }
    void start(PrefillResult prefill) override;
    std::size_t stored_entries(std::size_t layer) const override;
    LayerPlan plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double> mean_query) override;

    const FullCache& cache() const { return cache_; }

private:
    FullCache cache_;
};

class StreamingPolicy final : public CachePolicy {
public:
    StreamingPolicy(const ModelConfig& model, PolicyConfig config);
    bool needs_prefill_scores() const override { return false; }
    void start(PrefillResult prefill) override;
    std::size_t stored_entries(std::size_t layer) const override;
    LayerPlan plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double> mean_query) override;

    std::size_t budget() const { return budget_; }

private:
    void retain(LayerStore& store, std::size_t generated) const;

    FullCache cache_;
    std::size_t budget_ = 0;
};

class H2OPolicy final : public CachePolicy {
public:
    H2OPolicy(const ModelConfig& model, PolicyConfig config);
    bool needs_prefill_scores() const override { return true; }
    void start(PrefillResult prefill) override;
    std::size_t stored_entries(std::size_t layer) const override;
    LayerPlan plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double> mean_query) override;
    void observe(std::size_t layer, const AttentionRows& rows) override;

    std::size_t budget() const { return budget_; }
    const std::vector<H2OHead>& heads(std::size_t layer) const { return layers_.at(layer); }

private:
    LayerView view(std::size_t layer) const;

    std::vector<std::vector<H2OHead>> layers_;
    std::size_t budget_ = 0;
};

// SnapKV, RefreshKV and the two RefreshKV ablations: a never-evicting full
// cache, a scored partial cache, and a pending buffer per layer.
class RefreshPolicy final : public CachePolicy {
public:
    RefreshPolicy(const ModelConfig& model, PolicyConfig config, ScheduleConfig schedule);
    bool needs_prefill_scores() const override { return true; }
    void start(PrefillResult prefill) override;
    std::size_t stored_entries(std::size_t layer) const override;
    LayerPlan plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double> mean_query) override;
    LayerView after_probe(std::size_t layer, const AttentionRows& rows) override;
    void observe(std::size_t layer, const AttentionRows& rows) override;

    std::size_t k() const { return k_; }
    const ScheduleConfig& schedule() const { return schedule_; }
    const LayerStore& full(std::size_t layer) const { return full_.at(layer); }
    const PartialLayer& partial(std::size_t layer) const { return partial_.at(layer); }
    const PartialCache& partial_cache() const { return partial_; }
    const LayerStore& pending(std::size_t layer) const { return pending_.at(layer); }
    const LayerScheduleState& schedule_state(std::size_t layer) const { return sched_.at(layer); }

private:
    void refresh_from(std::size_t layer, const AttentionRows& rows);

    ScheduleConfig schedule_;
    std::size_t k_ = 0;
    FullCache full_;
    PendingBuffer pending_;
    PartialCache partial_;
    std::vector<LayerScheduleState> sched_;
};

std::unique_ptr<CachePolicy> make_policy(const ModelConfig& model, const PolicyConfig& policy,
                                         const ScheduleConfig& schedule);

}  // namespace refreshkv
