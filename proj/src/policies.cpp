#include "refreshkv/policies.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "refreshkv/errors.hpp"

namespace refreshkv {

std::string_view to_string(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::vanilla: return "vanilla";
        case PolicyKind::streaming: return "streaming";
        case PolicyKind::h2o: return "h2o";
        case PolicyKind::snapkv: return "snapkv";
        case PolicyKind::refreshkv: return "refreshkv";
        case PolicyKind::refreshkv_no_refresh: return "refreshkv_no_refresh";
        case PolicyKind::refreshkv_no_full: return "refreshkv_no_full";
    }
    return "?";
}

PolicyKind policy_kind_from_string(std::string_view name) {
    for (auto kind : {PolicyKind::vanilla, PolicyKind::streaming, PolicyKind::h2o, PolicyKind::snapkv,
                      PolicyKind::refreshkv, PolicyKind::refreshkv_no_refresh, PolicyKind::refreshkv_no_full}) {
        if (to_string(kind) == name) {
            return kind;
        }
    }
    throw ConfigError("unknown policy kind '" + std::string(name) + "'");
}

std::string_view to_string(GqaAggregation mode) {
    switch (mode) {
        case GqaAggregation::max: return "max";
        case GqaAggregation::mean: return "mean";
        case GqaAggregation::first: return "first";
    }
    return "?";
}

GqaAggregation gqa_aggregation_from_string(std::string_view name) {
    if (name == "max") return GqaAggregation::max;
    if (name == "mean") return GqaAggregation::mean;
    if (name == "first") return GqaAggregation::first;
    throw ConfigError("unknown gqa aggregation '" + std::string(name) + "'");
}

void PolicyConfig::validate() const {
    if (k && *k == 0) {
        throw ConfigError("policy.k must be positive");
    }
    if (!k && !(k_fraction > 0.0 && k_fraction <= 1.0)) {
        throw ConfigError("policy.k_fraction must lie in (0, 1]");
    }
    if (kernel_size <= 0 || kernel_size % 2 == 0) {
        throw ConfigError("policy.kernel_size must be odd and positive, got " + std::to_string(kernel_size));
    }
}

std::size_t PolicyConfig::budget(std::size_t prompt_length) const {
    if (k) {
        return *k;
    }
    return static_cast<std::size_t>(std::floor(k_fraction * static_cast<double>(prompt_length)));
}

std::size_t PolicyConfig::resolve_k(std::size_t prompt_length) const {
    const std::size_t resolved = std::min(budget(prompt_length), prompt_length);
    if (resolved == 0) {
        throw ConfigError("policy: cache budget resolves to 0 for prompt length " + std::to_string(prompt_length));
    }
    return resolved;
}

bool PolicyConfig::evicts_on_append() const {
    return evict_on_append.value_or(kind != PolicyKind::snapkv);
}

ScoreVector aggregate_group_scores(std::span<const std::vector<double>> rows, GqaAggregation mode) {
    if (rows.empty()) {
        throw ContractViolation("aggregate_group_scores: empty group");
    }
    const std::size_t n = rows.front().size();
    for (const auto& row : rows) {
        if (row.size() != n) {
            throw ContractViolation("aggregate_group_scores: ragged rows");
        }
    }
    ScoreVector out(rows.front());
    if (mode == GqaAggregation::first) {
        return out;
    }
    for (std::size_t r = 1; r < rows.size(); ++r) {
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = mode == GqaAggregation::max ? std::max(out[i], rows[r][i]) : out[i] + rows[r][i];
        }
    }
    if (mode == GqaAggregation::mean) {
        for (double& v : out) {
            v /= static_cast<double>(rows.size());
        }
    }
    return out;
}

std::vector<ScoreVector> selection_scores(const AttentionRows& rows, std::size_t group_size,
                                          const PolicyConfig& config) {
    if (group_size == 0 || rows.size() % group_size != 0) {
        throw ContractViolation("selection_scores: rows do not split into groups of " + std::to_string(group_size));
    }
    const std::size_t n_groups = rows.size() / group_size;
    std::vector<ScoreVector> out;
    out.reserve(n_groups);
    for (std::size_t g = 0; g < n_groups; ++g) {
        const std::span<const std::vector<double>> group(rows.data() + g * group_size, group_size);
        out.push_back(max_pool_1d(aggregate_group_scores(group, config.gqa_aggregation), config.kernel_size));
    }
    if (config.shared_selection && n_groups > 1) {
        ScoreVector shared = aggregate_group_scores(out, GqaAggregation::max);
        for (auto& head : out) {
            head = shared;
        }
    }
    return out;
}

std::vector<ScoreVector> group_mean_rows(const AttentionRows& rows, std::size_t group_size) {
    std::vector<ScoreVector> out;
    for (std::size_t g = 0; g * group_size < rows.size(); ++g) {
        const std::span<const std::vector<double>> group(rows.data() + g * group_size, group_size);
        out.push_back(aggregate_group_scores(group, GqaAggregation::mean));
    }
    return out;
}

std::vector<std::int64_t> streaming_keepset(std::size_t prompt_length, std::size_t generated, std::size_t budget,
                                            std::size_t n_sink) {
    if (budget < n_sink) {
        throw ConfigError("streaming: budget " + std::to_string(budget) + " is smaller than n_sink " +
                          std::to_string(n_sink));
    }
    const auto total = static_cast<std::int64_t>(prompt_length + generated);
    std::vector<std::int64_t> keep;
    if (total <= static_cast<std::int64_t>(budget)) {
        for (std::int64_t p = 0; p < total; ++p) {
            keep.push_back(p);
        }
        return keep;
    }
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(n_sink); ++p) {
        keep.push_back(p);
    }
    for (std::int64_t p = total - static_cast<std::int64_t>(budget - n_sink); p < total; ++p) {
        keep.push_back(p);
    }
    return keep;
}

void H2OHead::admit(std::int64_t position, std::span<const double> key, std::span<const double> value) {
    store.append(position, key, value);
    cumulative.push_back(0.0);
}

void H2OHead::accumulate(std::span<const double> row) {
    if (row.size() != cumulative.size()) {
        throw ContractViolation("h2o: attention row length " + std::to_string(row.size()) + " != cache length " +
                                std::to_string(cumulative.size()));
    }
    for (std::size_t i = 0; i < row.size(); ++i) {
        cumulative[i] += row[i];
    }
}

void H2OHead::evict_to_budget(std::size_t budget) {
    const std::size_t n = store.size();
    if (n <= budget) {
        return;
    }
    const std::size_t heavy = budget / 2;
    const std::size_t recent = budget - heavy;
    const std::size_t older = n - recent;
    std::vector<bool> keep(n, false);
    for (std::size_t i = older; i < n; ++i) {
        keep[i] = true;
    }
    if (heavy > 0) {
        for (std::size_t i : top_k_indices(std::span<const double>(cumulative).first(older), heavy)) {
            keep[i] = true;
        }
    }
    HeadStore kept(store.head_dim());
    kept.reserve(budget);
    std::vector<double> kept_scores;
    kept_scores.reserve(budget);
    for (std::size_t i = 0; i < n; ++i) {
        if (keep[i]) {
            kept.append(store.positions()[i], store.key(i), store.value(i));
            kept_scores.push_back(cumulative[i]);
        }
    }
    store = std::move(kept);
    cumulative = std::move(kept_scores);
}

std::vector<std::int64_t> h2o_step(H2OHead& state, std::span<const double> row, std::size_t budget) {
    state.accumulate(row);
    state.evict_to_budget(budget);
    return {state.store.positions().begin(), state.store.positions().end()};
}

PartialCache snapkv_prefill_select(const PrefillResult& prefill, const ModelConfig& model,
                                   const PolicyConfig& config) {
    const std::size_t n = prefill.cache.empty() ? 0 : prefill.cache.front().size();
    const std::size_t k = config.resolve_k(n);
    PartialCache out;
    out.reserve(prefill.cache.size());
    for (std::size_t l = 0; l < prefill.cache.size(); ++l) {
        const auto& rows = prefill.last.attention_rows.at(l);
        if (!rows) {
            throw ContractViolation("snapkv_prefill_select: prefill ran without score observation");
        }
        out.push_back(init_partial(prefill.cache[l], selection_scores(*rows, model.group_size(), config), k));
    }
    return out;
}

double retained_mass(std::span<const double> row, std::span<const std::size_t> indices) {
    double mass = 0.0;
    for (std::size_t i : indices) {
        if (i >= row.size()) {
            throw ContractViolation("retained_mass: index " + std::to_string(i) + " outside row of " +
                                    std::to_string(row.size()));
        }
        mass += row[i];
    }
    return mass;
}

// --- CachePolicy ------------------------------------------------------------

CachePolicy::CachePolicy(const ModelConfig& model, PolicyConfig config)
    : model_(model), config_(std::move(config)), traces_(model.n_layers), attended_(model.n_layers) {
    model_.validate();
    config_.validate();
}

void CachePolicy::begin_step(std::size_t step_index) {
    step_ = step_index;
    std::fill(traces_.begin(), traces_.end(), LayerTrace{});
}

LayerView CachePolicy::attend_over(std::size_t layer, LayerView view) {
    LayerTrace& t = layer_trace(layer);
    t.attended = 0;
    for (const HeadView& head : view) {
        t.attended = std::max(t.attended, head.size());
    }
    if (capture_) {
        auto& heads = attended_.at(layer);
        heads.clear();
        for (const HeadView& head : view) {
            heads.emplace_back(head.positions.begin(), head.positions.end());
        }
    }
    return view;
}

namespace {

// Indices of `positions` inside the sorted position list of a full cache.
std::vector<std::size_t> indices_in(std::span<const std::int64_t> full_positions,
                                    std::span<const std::int64_t> positions) {
    std::vector<std::size_t> out;
    out.reserve(positions.size());
    for (std::int64_t p : positions) {
        auto it = std::lower_bound(full_positions.begin(), full_positions.end(), p);
        if (it == full_positions.end() || *it != p) {
            throw ContractViolation("partial cache holds position " + std::to_string(p) + " absent from full cache");
        }
        out.push_back(static_cast<std::size_t>(it - full_positions.begin()));
    }
    return out;
}

}  // namespace

// --- Vanilla ----------------------------------------------------------------

VanillaPolicy::VanillaPolicy(const ModelConfig& model, PolicyConfig config) : CachePolicy(model, std::move(config)) {}

void VanillaPolicy::start(PrefillResult prefill) {
    set_prompt_length(prefill.cache.front().size());
    cache_ = std::move(prefill.cache);
}

std::size_t VanillaPolicy::stored_entries(std::size_t layer) const { return cache_.at(layer).size(); }

LayerPlan VanillaPolicy::plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double>) {
    cache_.at(layer).append(kv.position, kv.keys, kv.values);
    layer_trace(layer).mode = LayerMode::full;
    return {attend_over(layer, cache_[layer].view()), false, std::nullopt};
}

// --- StreamingLLM -----------------------------------------------------------

StreamingPolicy::StreamingPolicy(const ModelConfig& model, PolicyConfig config)
    : CachePolicy(model, std::move(config)) {}

void StreamingPolicy::retain(LayerStore& store, std::size_t generated) const {
    const auto keep = streaming_keepset(prompt_length(), generated, budget_, config_.n_sink);
    for (HeadStore& head : store.heads) {
        if (head.size() == keep.size()) {
            continue;
        }
        HeadStore kept(head.head_dim());
        kept.reserve(keep.size());
        for (std::size_t i = 0; i < head.size(); ++i) {
            if (std::binary_search(keep.begin(), keep.end(), head.positions()[i])) {
                kept.append(head.positions()[i], head.key(i), head.value(i));
            }
        }
        head = std::move(kept);
    }
}

void StreamingPolicy::start(PrefillResult prefill) {
    set_prompt_length(prefill.cache.front().size());
    budget_ = config_.budget(prompt_length());
    if (budget_ == 0) {
        throw ConfigError("streaming: cache budget resolves to 0");
    }
    cache_ = std::move(prefill.cache);
    for (LayerStore& store : cache_) {
        retain(store, 0);
    }
}

std::size_t StreamingPolicy::stored_entries(std::size_t layer) const { return cache_.at(layer).size(); }

LayerPlan StreamingPolicy::plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double>) {
    LayerStore& store = cache_.at(layer);
    store.append(kv.position, kv.keys, kv.values);
    retain(store, static_cast<std::size_t>(kv.position + 1) - prompt_length());
    layer_trace(layer).mode = LayerMode::partial;
    return {attend_over(layer, store.view()), false, std::nullopt};
}

// --- H2O --------------------------------------------------------------------

H2OPolicy::H2OPolicy(const ModelConfig& model, PolicyConfig config) : CachePolicy(model, std::move(config)) {}

void H2OPolicy::start(PrefillResult prefill) {
    set_prompt_length(prefill.cache.front().size());
    budget_ = config_.budget(prompt_length());
    if (budget_ == 0) {
        throw ConfigError("h2o: cache budget resolves to 0");
    }
    layers_.assign(model_.n_layers, {});
    for (std::size_t l = 0; l < model_.n_layers; ++l) {
        const auto& rows = prefill.last.attention_rows.at(l);
        if (!rows) {
            throw ContractViolation("h2o: prefill ran without score observation");
        }
        const LayerStore& full = prefill.cache[l];
        for (std::size_t g = 0; g < full.heads.size(); ++g) {
            const std::span<const std::vector<double>> group(rows->data() + g * model_.group_size(),
                                                             model_.group_size());
            H2OHead head{full.heads[g], aggregate_group_scores(group, config_.gqa_aggregation)};
            head.evict_to_budget(budget_);
            layers_[l].push_back(std::move(head));
        }
    }
}

std::size_t H2OPolicy::stored_entries(std::size_t layer) const {
    std::size_t n = 0;
    for (const auto& head : layers_.at(layer)) {
        n = std::max(n, head.store.size());
    }
    return n;
}

LayerView H2OPolicy::view(std::size_t layer) const {
    LayerView out;
    for (const auto& head : layers_.at(layer)) {
        out.push_back(head.store.view());
    }
    return out;
}

LayerPlan H2OPolicy::plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double>) {
    const std::size_t hd = model_.head_dim;
    auto& heads = layers_.at(layer);
    for (std::size_t g = 0; g < heads.size(); ++g) {
        heads[g].admit(kv.position, kv.keys.subspan(g * hd, hd), kv.values.subspan(g * hd, hd));
        heads[g].evict_to_budget(budget_);
    }
    layer_trace(layer).mode = LayerMode::partial;
    return {attend_over(layer, view(layer)), true, std::nullopt};
}

void H2OPolicy::observe(std::size_t layer, const AttentionRows& rows) {
    auto& heads = layers_.at(layer);
    std::uint64_t overhead = 0;
    for (std::size_t g = 0; g < heads.size(); ++g) {
        const std::span<const std::vector<double>> group(rows.data() + g * model_.group_size(), model_.group_size());
        heads[g].accumulate(aggregate_group_scores(group, config_.gqa_aggregation));
        overhead += (model_.group_size() + 1) * heads[g].store.size();
    }
    layer_trace(layer).overhead_flops += overhead;
}

// --- SnapKV / RefreshKV -----------------------------------------------------

RefreshPolicy::RefreshPolicy(const ModelConfig& model, PolicyConfig config, ScheduleConfig schedule)
    : CachePolicy(model, std::move(config)), schedule_(schedule) {
    if (config_.kind == PolicyKind::snapkv) {
        schedule_.mode = ScheduleMode::never_full;
    }
    schedule_.validate();
}

void RefreshPolicy::start(PrefillResult prefill) {
    set_prompt_length(prefill.cache.front().size());
    k_ = config_.resolve_k(prompt_length());
    partial_ = snapkv_prefill_select(prefill, model_, config_);
    sched_.assign(model_.n_layers, {});
    for (std::size_t l = 0; l < model_.n_layers; ++l) {
        sched_[l].reference_query = prefill.last.mean_query(l, model_.head_dim);
    }
    full_ = std::move(prefill.cache);
    pending_.assign(model_.n_layers, LayerStore(model_.n_kv_heads, model_.head_dim));
}

std::size_t RefreshPolicy::stored_entries(std::size_t layer) const {
    return full_.at(layer).size() + pending_.at(layer).size() + partial_.at(layer).size();
}

LayerPlan RefreshPolicy::plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double> mean_query) {
    LayerTrace& t = layer_trace(layer);
    LayerScheduleState& state = sched_.at(layer);
    const ScheduleDecision decision = should_full(state, step_index(), mean_query, schedule_);
    record_step(state, decision.full, mean_query);
    t.similarity = decision.similarity;
    if (decision.similarity) {
        t.overhead_flops += 6 * model_.head_dim;
    }

    if (!decision.full) {
        append_and_evict(partial_.at(layer), kv.position, kv.keys, kv.values, config_.evicts_on_append());
        pending_.at(layer).append(kv.position, kv.keys, kv.values);
        t.mode = LayerMode::partial;
        return {attend_over(layer, partial_[layer].view()), false, std::nullopt};
    }

    LayerStore& full = full_.at(layer);
    merge_pending(full, pending_.at(layer));
    full.append(kv.position, kv.keys, kv.values);
    switch (config_.kind) {
        case PolicyKind::refreshkv_no_full:
            t.mode = LayerMode::probe;
            t.probed = full.size();
            return {{}, false, full.view()};
        case PolicyKind::refreshkv_no_refresh:
            t.mode = LayerMode::full;
            return {attend_over(layer, full.view()), false, std::nullopt};
        default:
            t.mode = LayerMode::full;
            return {attend_over(layer, full.view()), true, std::nullopt};
    }
}

LayerView RefreshPolicy::after_probe(std::size_t layer, const AttentionRows& rows) {
    refresh_from(layer, rows);
    return attend_over(layer, partial_.at(layer).view());
}

void RefreshPolicy::observe(std::size_t layer, const AttentionRows& rows) {
    if (layer_trace(layer).mode == LayerMode::full) {
        refresh_from(layer, rows);
    }
}

void RefreshPolicy::refresh_from(std::size_t layer, const AttentionRows& rows) {
    const LayerStore& full = full_.at(layer);
    PartialLayer& partial = partial_.at(layer);
    LayerTrace& t = layer_trace(layer);
    const auto mass_rows = group_mean_rows(rows, model_.group_size());
    const auto full_positions = full.heads.front().positions();

    t.retained_pre.clear();
    for (std::size_t g = 0; g < partial.heads.size(); ++g) {
        const auto idx = indices_in(full_positions, partial.heads[g].store.positions());
        t.retained_pre.push_back(retained_mass(mass_rows[g], idx));
    }

    refresh(partial, full, selection_scores(rows, model_.group_size(), config_), k_);

    t.retained_post.clear();
    for (std::size_t g = 0; g < partial.heads.size(); ++g) {
        const auto idx = indices_in(full_positions, partial.heads[g].store.positions());
        t.retained_post.push_back(retained_mass(mass_rows[g], idx));
    }
    const std::uint64_t per_head =
        full.size() * (model_.group_size() + static_cast<std::uint64_t>(config_.kernel_size) + 1);
    t.overhead_flops += per_head * model_.n_kv_heads;
}

std::unique_ptr<CachePolicy> make_policy(const ModelConfig& model, const PolicyConfig& policy,
                                         const ScheduleConfig& schedule) {
    switch (policy.kind) {
        case PolicyKind::vanilla: return std::make_unique<VanillaPolicy>(model, policy);
        case PolicyKind::streaming: return std::make_unique<StreamingPolicy>(model, policy);
        case PolicyKind::h2o: return std::make_unique<H2OPolicy>(model, policy);
        default: return std::make_unique<RefreshPolicy>(model, policy, schedule);
    }
}

}  // namespace refreshkv
