#include "refreshkv/ladder.hpp"

#include <algorithm>
#include <tuple>

#include "refreshkv/numerics.hpp"
#include "refreshkv/session.hpp"

namespace refreshkv {

namespace {

PolicyConfig with_kind(PolicyConfig config, PolicyKind kind) {
    config.kind = kind;
    config.evict_on_append.reset();
    return config;
}

ScheduleConfig with_mode(ScheduleMode mode) {
    ScheduleConfig s;
    s.mode = mode;
    return s;
}

}  // namespace

bool LadderReport::passed() const {
    return !rungs.empty() && std::all_of(rungs.begin(), rungs.end(), [](const LadderRung& r) { return r.passed; });
}

std::vector<LadderRung> ladder_rungs(std::size_t prompt_length, std::size_t n_generate, const PolicyConfig& base) {
    const PolicyConfig vanilla = with_kind(base, PolicyKind::vanilla);
    std::vector<LadderRung> rungs;

    LadderRung full;
    full.name = "refreshkv(K=L, always_full) == vanilla";
    full.policy = with_kind(base, PolicyKind::refreshkv);
    full.policy.k = prompt_length;
    full.schedule = with_mode(ScheduleMode::always_full);
    full.reference_policy = vanilla;
    rungs.push_back(full);

    LadderRung snap;
    snap.name = "refreshkv(never_full, no eviction) == snapkv";
    snap.policy = with_kind(base, PolicyKind::refreshkv);
    snap.policy.evict_on_append = false;
    snap.schedule = with_mode(ScheduleMode::never_full);
    snap.reference_policy = with_kind(base, PolicyKind::snapkv);
    rungs.push_back(snap);

    LadderRung streaming;
    streaming.name = "streaming(K=L+N) == vanilla";
    streaming.policy = with_kind(base, PolicyKind::streaming);
    streaming.policy.k = prompt_length + n_generate;
    streaming.reference_policy = vanilla;
    rungs.push_back(streaming);

    LadderRung h2o;
    h2o.name = "h2o(K=L+N) == vanilla";
    h2o.policy = with_kind(base, PolicyKind::h2o);
    h2o.policy.k = prompt_length + n_generate;
    h2o.reference_policy = vanilla;
    rungs.push_back(h2o);
    return rungs;
}

LadderReport run_equivalence_ladder(const ModelWeights& weights, std::span<const int> prompt,
                                    std::size_t n_generate, const PolicyConfig& base, double tolerance) {
    LadderReport report;
    report.prompt_length = prompt.size();
    report.n_generate = n_generate;
    report.tolerance = tolerance;
    report.rungs = ladder_rungs(prompt.size(), n_generate, base);

    // Reference runs are shared between rungs (vanilla appears three times).
    std::vector<std::tuple<PolicyConfig, ScheduleConfig, GenerationResult>> cache;
    auto generate = [&](const PolicyConfig& p, const ScheduleConfig& s) -> const GenerationResult& {
        for (const auto& [cp, cs, result] : cache) {
            if (cp == p && cs == s) {
                return result;
            }
        }
        cache.emplace_back(p, s, generate_greedy(weights, p, s, prompt, n_generate));
        return std::get<2>(cache.back());
    };

    for (LadderRung& rung : report.rungs) {
        const GenerationResult candidate = generate_greedy(weights, rung.policy, rung.schedule, prompt, n_generate);
        const GenerationResult& reference = generate(rung.reference_policy, rung.reference_schedule);
        rung.tokens_equal = candidate.tokens == reference.tokens;
        bool logits_ok = candidate.logits.size() == reference.logits.size();
        for (std::size_t i = 0; logits_ok && i < candidate.logits.size(); ++i) {
            const double d = max_relative_difference(candidate.logits[i], reference.logits[i]);
            rung.max_relative_difference = std::max(rung.max_relative_difference, d);
            if (!(d <= tolerance) && rung.first_mismatch < 0) {
                rung.first_mismatch = static_cast<long>(i);
            }
        }
        rung.passed = logits_ok && rung.tokens_equal && rung.first_mismatch < 0;
    }
    return report;
}

nlohmann::json to_json(const LadderReport& report) {
    nlohmann::json rungs = nlohmann::json::array();
    for (const LadderRung& r : report.rungs) {
        rungs.push_back({{"name", r.name},
                         {"passed", r.passed},
                         {"max_relative_difference", r.max_relative_difference},
                         {"tokens_equal", r.tokens_equal},
                         {"first_mismatch", r.first_mismatch < 0 ? nlohmann::json(nullptr) : nlohmann::json(r.first_mismatch)}});
    }
    return {{"prompt_length", report.prompt_length},
            {"n_generate", report.n_generate},
            {"tolerance", report.tolerance},
            {"passed", report.passed()},
            {"rungs", rungs}};
}

}  // namespace refreshkv
