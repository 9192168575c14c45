#include "refreshkv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "refreshkv/errors.hpp"
#include "refreshkv/session.hpp"

namespace refreshkv {

Cost layer_attention_cost(std::size_t attended, const ModelConfig& config) {
    const std::uint64_t n = attended;
    const std::uint64_t hd = config.head_dim;
    return {config.n_query_heads * (2 * n * hd + 2 * n * hd), n * 2 * hd * config.n_kv_heads * sizeof(double)};
}

Cost layer_probe_cost(std::size_t probed, const ModelConfig& config) {
    const std::uint64_t n = probed;
    const std::uint64_t hd = config.head_dim;
    return {config.n_query_heads * 2 * n * hd, n * hd * config.n_kv_heads * sizeof(double)};
}

Cost attention_cost(std::size_t attended, const ModelConfig& config) {
    const Cost layer = layer_attention_cost(attended, config);
    return {layer.flops * config.n_layers, layer.bytes * config.n_layers};
}

Cost step_cost(const StepTrace& step, const ModelConfig& config) {
    Cost total;
    for (const LayerTrace& layer : step.layers) {
        total += layer_attention_cost(layer.attended, config);
        if (layer.probed > 0) {
            total += layer_probe_cost(layer.probed, config);
        }
    }
    return total;
}

TraceTotals& TraceTotals::operator+=(const TraceTotals& other) {
    attention_flops += other.attention_flops;
    kv_bytes_moved += other.kv_bytes_moved;
    overhead_flops += other.overhead_flops;
    if (full_steps_per_layer.size() < other.full_steps_per_layer.size()) {
        full_steps_per_layer.resize(other.full_steps_per_layer.size(), 0);
    }
    for (std::size_t l = 0; l < other.full_steps_per_layer.size(); ++l) {
        full_steps_per_layer[l] += other.full_steps_per_layer[l];
    }
    return *this;
}

TraceTotals summarize(std::span<const StepTrace> trace, std::size_t n_layers) {
    TraceTotals totals;
    totals.full_steps_per_layer.assign(n_layers, 0);
    for (const StepTrace& step : trace) {
        totals.attention_flops += step.attention_flops;
        totals.kv_bytes_moved += step.kv_bytes_moved;
        totals.overhead_flops += step.overhead_flops;
        for (std::size_t l = 0; l < std::min(n_layers, step.layers.size()); ++l) {
            if (step.layers[l].mode != LayerMode::partial) {
                ++totals.full_steps_per_layer[l];
            }
        }
    }
    return totals;
}

double negative_log_likelihood(std::span<const double> logits, int target) {
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
        throw ContractViolation("negative_log_likelihood: target " + std::to_string(target) + " out of range");
    }
    const double max_logit = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double v : logits) {
        total += std::exp(v - max_logit);
    }
    return max_logit + std::log(total) - logits[static_cast<std::size_t>(target)];
}

namespace {

void check_tail(std::size_t length, std::size_t tail) {
    if (tail == 0 || tail >= length) {
        throw ConfigError("perplexity: tail " + std::to_string(tail) + " must lie in [1, " +
                          std::to_string(length) + ")");
    }
}

double exp_mean(std::span<const double> nll) {
    double total = 0.0;
    for (double v : nll) {
        total += v;
    }
    return std::exp(total / static_cast<double>(nll.size()));
}

}  // namespace

TeacherForcedResult teacher_forced(const ModelWeights& weights, const PolicyConfig& policy,
                                   const ScheduleConfig& schedule, std::span<const int> tokens, std::size_t tail) {
    check_tail(tokens.size(), tail);
    const std::size_t prompt_length = tokens.size() - tail;
    Session session(weights, policy, schedule);
    TeacherForcedResult out;
    out.nll.push_back(negative_log_likelihood(session.prefill(tokens.first(prompt_length)).logits,
                                              tokens[prompt_length]));
    for (std::size_t i = prompt_length; i + 1 < tokens.size(); ++i) {
        const StepOutput& step = session.step(tokens[i]);
        const double nll = negative_log_likelihood(step.logits, tokens[i + 1]);
        session.last_trace().nll = nll;
        out.nll.push_back(nll);
    }
    out.perplexity = exp_mean(out.nll);
    out.trace.assign(session.trace().begin(), session.trace().end());
    return out;
}

double perplexity(const ModelWeights& weights, const PolicyConfig& policy, const ScheduleConfig& schedule,
                  std::span<const int> tokens, std::size_t tail) {
    return teacher_forced(weights, policy, schedule, tokens, tail).perplexity;
}

double reference_perplexity(const ModelWeights& weights, std::span<const int> tokens, std::size_t tail) {
    check_tail(tokens.size(), tail);
    const auto logits = forward_logits(weights, tokens.first(tokens.size() - 1));
    std::vector<double> nll;
    for (std::size_t t = tokens.size() - 1 - tail; t + 1 < tokens.size(); ++t) {
        nll.push_back(negative_log_likelihood(logits[t], tokens[t + 1]));
    }
    return exp_mean(nll);
}

// --- trace serialization ----------------------------------------------------

std::string_view to_string(LayerMode mode) {
    switch (mode) {
        case LayerMode::full: return "full";
        case LayerMode::partial: return "partial";
        case LayerMode::probe: return "probe";
    }
    return "?";
}

LayerMode layer_mode_from_string(std::string_view name) {
    if (name == "full") return LayerMode::full;
    if (name == "partial") return LayerMode::partial;
    if (name == "probe") return LayerMode::probe;
    throw ConfigError("unknown layer mode '" + std::string(name) + "'");
}

nlohmann::json to_json(const StepTrace& step) {
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerTrace& l : step.layers) {
        nlohmann::json j = {{"mode", to_string(l.mode)}, {"attended", l.attended}};
        if (l.probed > 0) j["probed"] = l.probed;
        if (l.similarity) j["similarity"] = *l.similarity;
        if (!l.retained_pre.empty()) j["retained_pre"] = l.retained_pre;
        if (!l.retained_post.empty()) j["retained_post"] = l.retained_post;
        if (l.overhead_flops > 0) j["overhead_flops"] = l.overhead_flops;
        layers.push_back(std::move(j));
    }
    nlohmann::json j = {{"step_index", step.step_index},
                        {"position", step.position},
                        {"input_token", step.input_token},
                        {"layers", std::move(layers)},
                        {"attention_flops", step.attention_flops},
                        {"kv_bytes_moved", step.kv_bytes_moved},
                        {"overhead_flops", step.overhead_flops}};
    if (step.retained_mass) j["retained_mass"] = *step.retained_mass;
    if (step.predicted_token) j["predicted_token"] = *step.predicted_token;
    if (step.nll) j["nll"] = *step.nll;
    return j;
}

StepTrace step_trace_from_json(const nlohmann::json& j) {
    StepTrace step;
    step.step_index = j.at("step_index").get<std::size_t>();
    step.position = j.at("position").get<std::int64_t>();
    step.input_token = j.at("input_token").get<int>();
    for (const auto& lj : j.at("layers")) {
        LayerTrace l;
        l.mode = layer_mode_from_string(lj.at("mode").get<std::string>());
        l.attended = lj.at("attended").get<std::size_t>();
        l.probed = lj.value("probed", std::size_t{0});
        if (lj.contains("similarity")) l.similarity = lj["similarity"].get<double>();
        if (lj.contains("retained_pre")) l.retained_pre = lj["retained_pre"].get<std::vector<double>>();
        if (lj.contains("retained_post")) l.retained_post = lj["retained_post"].get<std::vector<double>>();
        l.overhead_flops = lj.value("overhead_flops", std::uint64_t{0});
        step.layers.push_back(std::move(l));
    }
    step.attention_flops = j.at("attention_flops").get<std::uint64_t>();
    step.kv_bytes_moved = j.at("kv_bytes_moved").get<std::uint64_t>();
    step.overhead_flops = j.at("overhead_flops").get<std::uint64_t>();
    if (j.contains("retained_mass")) step.retained_mass = j["retained_mass"].get<double>();
    if (j.contains("predicted_token")) step.predicted_token = j["predicted_token"].get<int>();
    if (j.contains("nll")) step.nll = j["nll"].get<double>();
    return step;
}

}  // namespace refreshkv
