#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "refreshkv/ladder.hpp"
#include "refreshkv/model.hpp"
#include "refreshkv/policies.hpp"
#include "refreshkv/scheduler.hpp"
#include "refreshkv/tasks.hpp"
#include "refreshkv/trace.hpp"

namespace refreshkv {

enum class TaskKind { lm, chainkey };

std::string_view to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view name);

struct TaskConfig {
    TaskKind kind = TaskKind::lm;
    // lm: a synthetic stream whose last `tail` tokens are scored under
    // teacher forcing; the prompt is the first stream_length - tail tokens.
    std::size_t stream_length = 640;
    std::size_t tail = 128;
    StreamOptions stream;
    // chainkey
    std::size_t n_keys = 40;
    std::size_t T = 10;
    std::size_t W = 2;

    bool operator==(const TaskConfig&) const = default;
};

struct RunConfig {
    ModelConfig model;
    PolicyConfig policy;
    ScheduleConfig schedule;
    TaskConfig task;
    std::size_t n_generate = 160;  // chainkey decode steps; lm runs tail - 1 steps
    std::uint64_t seed = 0;        // task seed
    std::string output = "run";    // directory for trace.jsonl and report.json
    std::optional<std::string> weights;  // weight file; random init from model.seed when unset

    // Checks everything that can be checked without building the task.
    void validate() const;
};

nlohmann::json to_json(const PolicyConfig& config);
PolicyConfig policy_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ScheduleConfig& config);
ScheduleConfig schedule_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TaskConfig& config);
TaskConfig task_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);
// Missing keys keep their defaults; unknown keys raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);

// Sets a dotted key ("schedule.qc-stride", '-' read as '_') in a config
// document. The value is parsed as JSON when possible, otherwise taken as a
// string; a key whose current value is a string always takes the raw text.
void apply_override(nlohmann::json& config, std::string_view dotted_key, std::string_view value);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

// Prompt tokens for the configured task (the chainkey instance is returned
// through `instance` when non-null).
std::vector<int> task_tokens(const RunConfig& config, ChainKeyInstance* instance = nullptr);

ModelWeights load_or_init_weights(const RunConfig& config);

struct RunResult {
    nlohmann::json report;
    std::vector<StepTrace> trace;
    std::optional<LadderReport> ladder;
};

struct RunOptions {
    bool self_check = false;
    bool record_wall_clock = true;
};

// Validates, builds the task, runs prefill and decode. With self_check the
// equivalence ladder runs first on the same model and prompt and a failed
// rung raises ContractViolation.
RunResult run(const RunConfig& config, const RunOptions& options = {});

std::string trace_jsonl(std::span<const StepTrace> trace);
std::vector<StepTrace> read_trace_jsonl(const std::filesystem::path& path);
// Writes <output>/trace.jsonl and <output>/report.json.
void write_run(const RunConfig& config, const RunResult& result);

LadderReport run_self_check(const RunConfig& config);

struct ComparisonRow {
    std::string label;
    std::string metric_name;  // "perplexity" or "chain_score"
    double metric = 0.0;
    std::uint64_t attention_flops = 0;
    std::uint64_t kv_bytes_moved = 0;
    std::optional<double> metric_ratio;  // nullopt when the baseline value is 0
    std::optional<double> flops_ratio;
    std::optional<double> bytes_ratio;
};

struct Comparison {
    std::size_t baseline = 0;
    std::vector<ComparisonRow> rows;
};

// Baseline is the first vanilla report, else the first report. Reports must
// share the task seed and task settings; otherwise ConfigError explains why.
Comparison compare_reports(std::span<const nlohmann::json> reports);
std::string format_comparison(const Comparison& comparison);
nlohmann::json to_json(const Comparison& comparison);

// Per-step NLL of every run and its ratio to the baseline run:
// step,position,nll_<label>...,ratio_<label>... (baseline has no ratio column).
std::string nll_ratio_csv(const Comparison& comparison, std::span<const std::vector<StepTrace>> traces);

}  // namespace refreshkv
