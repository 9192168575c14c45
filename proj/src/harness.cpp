#include "refreshkv/harness.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "refreshkv/errors.hpp"
#include "refreshkv/metrics.hpp"
#include "refreshkv/session.hpp"
#include "refreshkv/weights_io.hpp"

namespace refreshkv {

namespace {

constexpr std::string_view kCostModel =
    "per layer per token: attend n -> flops n_query_heads*4*n*head_dim, bytes n*2*head_dim*n_kv_heads*8; "
    "probe n -> flops n_query_heads*2*n*head_dim, bytes n*head_dim*n_kv_heads*8";

template <typename Fn>
void for_each_field(const nlohmann::json& j, std::string_view section, Fn&& fn) {
    if (!j.is_object()) {
        throw ConfigError(std::string(section) + " must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        try {
            if (!fn(key, value)) {
                throw ConfigError("unknown " + std::string(section) + " key '" + key + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string(section) + "." + key + ": " + e.what());
        }
    }
}

nlohmann::json optional_json(const auto& value) {
    return value ? nlohmann::json(*value) : nlohmann::json(nullptr);
}

std::string format_number(double v) {
    std::ostringstream out;
    out << std::setprecision(6) << v;
    return out.str();
}

std::optional<double> ratio(double value, double base) {
    if (base == 0.0) {
        return std::nullopt;
    }
    return value / base;
}

}  // namespace

std::string_view to_string(TaskKind kind) { return kind == TaskKind::lm ? "lm" : "chainkey"; }

TaskKind task_kind_from_string(std::string_view name) {
    if (name == "lm") return TaskKind::lm;
    if (name == "chainkey") return TaskKind::chainkey;
    throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

nlohmann::json to_json(const PolicyConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"k", optional_json(c.k)},
            {"k_fraction", c.k_fraction},
            {"kernel_size", c.kernel_size},
            {"gqa_aggregation", to_string(c.gqa_aggregation)},
            {"n_sink", c.n_sink},
            {"evict_on_append", optional_json(c.evict_on_append)},
            {"shared_selection", c.shared_selection}};
}

PolicyConfig policy_config_from_json(const nlohmann::json& j) {
    PolicyConfig c;
    for_each_field(j, "policy", [&](const std::string& key, const nlohmann::json& v) {
        if (key == "kind") c.kind = policy_kind_from_string(v.get<std::string>());
        else if (key == "k") c.k = v.is_null() ? std::nullopt : std::optional(v.get<std::size_t>());
        else if (key == "k_fraction") c.k_fraction = v.get<double>();
        else if (key == "kernel_size") c.kernel_size = v.get<int>();
        else if (key == "gqa_aggregation") c.gqa_aggregation = gqa_aggregation_from_string(v.get<std::string>());
        else if (key == "n_sink") c.n_sink = v.get<std::size_t>();
        else if (key == "evict_on_append") c.evict_on_append = v.is_null() ? std::nullopt : std::optional(v.get<bool>());
        else if (key == "shared_selection") c.shared_selection = v.get<bool>();
        else return false;
        return true;
    });
    return c;
}

nlohmann::json to_json(const ScheduleConfig& c) {
    return {{"mode", to_string(c.mode)}, {"stride", c.stride}, {"qc_stride", c.qc_stride}, {"threshold", c.threshold}};
}

ScheduleConfig schedule_config_from_json(const nlohmann::json& j) {
    ScheduleConfig c;
    for_each_field(j, "schedule", [&](const std::string& key, const nlohmann::json& v) {
        if (key == "mode") c.mode = schedule_mode_from_string(v.get<std::string>());
        else if (key == "stride") c.stride = v.get<std::size_t>();
        else if (key == "qc_stride") c.qc_stride = v.get<std::size_t>();
        else if (key == "threshold") c.threshold = v.get<double>();
        else return false;
        return true;
    });
    return c;
}

nlohmann::json to_json(const TaskConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"stream_length", c.stream_length},
            {"tail", c.tail},
            {"structure", to_string(c.stream.structure)},
            {"motif_period", c.stream.motif_period},
            {"noise", c.stream.noise},
            {"n_keys", c.n_keys},
            {"T", c.T},
            {"W", c.W}};
}

TaskConfig task_config_from_json(const nlohmann::json& j) {
    TaskConfig c;
    for_each_field(j, "task", [&](const std::string& key, const nlohmann::json& v) {
        if (key == "kind") c.kind = task_kind_from_string(v.get<std::string>());
        else if (key == "stream_length") c.stream_length = v.get<std::size_t>();
        else if (key == "tail") c.tail = v.get<std::size_t>();
        else if (key == "structure") c.stream.structure = stream_structure_from_string(v.get<std::string>());
        else if (key == "motif_period") c.stream.motif_period = v.get<std::size_t>();
        else if (key == "noise") c.stream.noise = v.get<double>();
        else if (key == "n_keys") c.n_keys = v.get<std::size_t>();
        else if (key == "T") c.T = v.get<std::size_t>();
        else if (key == "W") c.W = v.get<std::size_t>();
        else return false;
        return true;
    });
    return c;
}

nlohmann::json to_json(const RunConfig& c) {
    return {{"model", model_config_to_json(c.model)},
            {"policy", to_json(c.policy)},
            {"schedule", to_json(c.schedule)},
            {"task", to_json(c.task)},
            {"n_generate", c.n_generate},
            {"seed", c.seed},
            {"output", c.output},
            {"weights", optional_json(c.weights)}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    for_each_field(j, "config", [&](const std::string& key, const nlohmann::json& v) {
        if (key == "model") c.model = model_config_from_json(v);
        else if (key == "policy") c.policy = policy_config_from_json(v);
        else if (key == "schedule") c.schedule = schedule_config_from_json(v);
        else if (key == "task") c.task = task_config_from_json(v);
        else if (key == "n_generate") c.n_generate = v.get<std::size_t>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "output") c.output = v.get<std::string>();
        else if (key == "weights") c.weights = v.is_null() ? std::nullopt : std::optional(v.get<std::string>());
        else return false;
        return true;
    });
    return c;
}

void RunConfig::validate() const {
    model.validate();
    policy.validate();
    schedule.validate();
    if (task.kind == TaskKind::lm) {
        if (task.tail == 0 || task.tail >= task.stream_length) {
            throw ConfigError("task.tail must be in [1, stream_length), got " + std::to_string(task.tail));
        }
        if (task.stream_length > model.max_position) {
            throw ConfigError("task.stream_length exceeds model.max_position");
        }
        if (task.stream.structure == StreamStructure::repeated_motif && task.stream.motif_period == 0) {
            throw ConfigError("task.motif_period must be positive");
        }
        if (!(task.stream.noise >= 0.0 && task.stream.noise <= 1.0)) {
            throw ConfigError("task.noise must be in [0, 1]");
        }
        policy.resolve_k(task.stream_length - task.tail);
    } else {
        if (model.vocab_size < 256) {
            throw ConfigError("chainkey uses byte tokens and needs model.vocab_size >= 256");
        }
        if (task.W < 2 || task.T == 0 || task.n_keys < std::max<std::size_t>(task.T, 2)) {
            throw ConfigError("chainkey needs W >= 2, T >= 1 and n_keys >= max(T, 2)");
        }
    }
    if (output.empty()) {
        throw ConfigError("output must name a directory");
    }
}

void apply_override(nlohmann::json& config, std::string_view dotted_key, std::string_view value) {
    std::string key(dotted_key);
    while (key.starts_with("-")) {
        key.erase(0, 1);
    }
    if (key.empty()) {
        throw ConfigError("empty override key");
    }
    nlohmann::json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        for (char& ch : part) {
            if (ch == '-') ch = '_';
        }
        if (!node->is_object() || !node->contains(part)) {
            throw ConfigError("unknown config key '" + std::string(dotted_key) + "'");
        }
        node = &(*node)[part];
        if (dot == std::string::npos) {
            break;
        }
        start = dot + 1;
    }
    if (node->is_object()) {
        throw ConfigError("'" + std::string(dotted_key) + "' is a section, not a value");
    }
    if (node->is_string()) {
        *node = std::string(value);
        return;
    }
    nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
    *node = parsed.is_discarded() ? nlohmann::json(std::string(value)) : parsed;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        throw ConfigError(path.string() + ": not valid JSON");
    }
    return j;
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

std::vector<int> task_tokens(const RunConfig& config, ChainKeyInstance* instance) {
    if (config.task.kind == TaskKind::lm) {
        return synthetic_lm_stream(config.task.stream_length, config.model.vocab_size, config.seed,
                                   config.task.stream);
    }
    ChainKeyInstance built = generate_chain_instance(config.task.n_keys, config.task.W, config.task.T, config.seed);
    std::vector<int> tokens = encode_bytes(built.prompt);
    if (instance != nullptr) {
        *instance = std::move(built);
    }
    return tokens;
}

ModelWeights load_or_init_weights(const RunConfig& config) {
    if (!config.weights) {
        return init_model(config.model);
    }
    ModelWeights w = load_weights(*config.weights);
    if (!(w.config == config.model)) {
        throw ConfigError("weights file " + *config.weights + " was saved with a different model config");
    }
    return w;
}

LadderReport run_self_check(const RunConfig& config) {
    config.validate();
    const ModelWeights weights = load_or_init_weights(config);
    std::vector<int> tokens = task_tokens(config);
    std::size_t n_generate = config.n_generate;
    if (config.task.kind == TaskKind::lm) {
        tokens.resize(config.task.stream_length - config.task.tail);
        n_generate = config.task.tail - 1;
    }
    return run_equivalence_ladder(weights, tokens, n_generate, config.policy);
}

RunResult run(const RunConfig& config, const RunOptions& options) {
    config.validate();
    ChainKeyInstance instance;
    const std::vector<int> tokens = task_tokens(config, &instance);
    const std::size_t prompt_length =
        config.task.kind == TaskKind::lm ? tokens.size() - config.task.tail : tokens.size();
    const std::size_t steps = config.task.kind == TaskKind::lm ? config.task.tail - 1 : config.n_generate;
    if (prompt_length + steps > config.model.max_position) {
        throw ConfigError("prompt length " + std::to_string(prompt_length) + " plus " + std::to_string(steps) +
                          " steps exceeds model.max_position");
    }
    const std::size_t k = config.policy.kind == PolicyKind::vanilla ? 0 : config.policy.budget(prompt_length);
    if (config.policy.kind != PolicyKind::vanilla) {
        config.policy.resolve_k(prompt_length);
    }
    const ModelWeights weights = load_or_init_weights(config);
    const auto started = std::chrono::steady_clock::now();

    RunResult result;
    if (options.self_check) {
        result.ladder = run_self_check(config);
        if (!result.ladder->passed()) {
            throw ContractViolation("self-check failed: " + to_json(*result.ladder).dump());
        }
    }

    nlohmann::json report;
    report["config"] = to_json(config);
    report["label"] = to_string(config.policy.kind);
    report["task"] = to_string(config.task.kind);
    report["prompt_length"] = prompt_length;
    report["generated_steps"] = steps;
    report["k"] = k == 0 ? nlohmann::json(nullptr) : nlohmann::json(k);

    if (config.task.kind == TaskKind::lm) {
        TeacherForcedResult tf = teacher_forced(weights, config.policy, config.schedule, tokens, config.task.tail);
        report["perplexity"] = tf.perplexity;
        report["tail_nll"] = tf.nll;
        result.trace = std::move(tf.trace);
    } else {
        GenerationResult gen = generate_greedy(weights, config.policy, config.schedule, tokens, steps);
        const std::string text = decode_bytes(gen.tokens);
        const ChainScore score = evaluate_chain(instance, text);
        report["chain"] = {{"score", score.score},
                           {"valid_prefix_length", score.valid_prefix_length},
                           {"T", instance.T},
                           {"output", text},
                           {"output_tokens", gen.tokens}};
        result.trace = std::move(gen.trace);
    }

    const std::size_t n_layers = config.model.n_layers;
    const TraceTotals totals = summarize(result.trace, n_layers);
    report["totals"] = {{"attention_flops", totals.attention_flops},
                        {"kv_bytes_moved", totals.kv_bytes_moved},
                        {"overhead_flops", totals.overhead_flops}};
    report["full_steps_per_layer"] = totals.full_steps_per_layer;
    nlohmann::json strides = nlohmann::json::array();
    for (std::size_t layer = 0; layer < n_layers; ++layer) {
        strides.push_back(optional_json(effective_stride(result.trace, layer)));
    }
    report["effective_stride"] = strides;
    report["mean_effective_stride"] = optional_json(mean_effective_stride(result.trace, n_layers));
    report["cost_model"] = kCostModel;
    report["trace_file"] = "trace.jsonl";
    if (result.ladder) {
        report["self_check"] = to_json(*result.ladder);
    }
    if (options.record_wall_clock) {
        report["wall_clock_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    }
    result.report = std::move(report);
    return result;
}

std::string trace_jsonl(std::span<const StepTrace> trace) {
    std::string out;
    for (const StepTrace& step : trace) {
        out += to_json(step).dump();
        out += '\n';
    }
    return out;
}

std::vector<StepTrace> read_trace_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<StepTrace> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            throw IoError(path.string() + ":" + std::to_string(line_no) + ": not valid JSON");
        }
        out.push_back(step_trace_from_json(j));
    }
    return out;
}

void write_run(const RunConfig& config, const RunResult& result) {
    const std::filesystem::path dir(config.output);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create " + dir.string() + ": " + ec.message());
    }
    write_text_file(dir / "trace.jsonl", trace_jsonl(result.trace));
    // Generated text from an untrained model is arbitrary bytes.
    write_text_file(dir / "report.json",
                    result.report.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n");
}

Comparison compare_reports(std::span<const nlohmann::json> reports) {
    if (reports.size() < 2) {
        throw ConfigError("compare needs at least two reports");
    }
    const auto& first = reports.front().at("config");
    for (std::size_t i = 1; i < reports.size(); ++i) {
        const auto& c = reports[i].at("config");
        if (c.at("seed") != first.at("seed")) {
            throw ConfigError("report " + std::to_string(i + 1) + " uses task seed " + c.at("seed").dump() +
                              ", report 1 uses " + first.at("seed").dump() + "; results are not comparable");
        }
        if (c.at("task") != first.at("task")) {
            throw ConfigError("report " + std::to_string(i + 1) + " ran a different task (" + c.at("task").dump() +
                              " vs " + first.at("task").dump() + ")");
        }
    }

    Comparison out;
    std::map<std::string, int> seen;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i];
        ComparisonRow row;
        row.label = r.at("label").get<std::string>();
        if (const int n = ++seen[row.label]; n > 1) {
            row.label += "_" + std::to_string(n);
        }
        if (r.contains("perplexity")) {
            row.metric_name = "perplexity";
            row.metric = r.at("perplexity").get<double>();
        } else {
            row.metric_name = "chain_score";
            row.metric = r.at("chain").at("score").get<double>();
        }
        row.attention_flops = r.at("totals").at("attention_flops").get<std::uint64_t>();
        row.kv_bytes_moved = r.at("totals").at("kv_bytes_moved").get<std::uint64_t>();
        out.rows.push_back(std::move(row));
    }
    for (std::size_t i = 0; i < reports.size(); ++i) {
        if (reports[i].at("label") == "vanilla") {
            out.baseline = i;
            break;
        }
    }
    const ComparisonRow base = out.rows[out.baseline];
    for (ComparisonRow& row : out.rows) {
        row.metric_ratio = ratio(row.metric, base.metric);
        row.flops_ratio = ratio(static_cast<double>(row.attention_flops), static_cast<double>(base.attention_flops));
        row.bytes_ratio = ratio(static_cast<double>(row.kv_bytes_moved), static_cast<double>(base.kv_bytes_moved));
    }
    return out;
}

std::string format_comparison(const Comparison& comparison) {
    auto cell = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string("n/a"); };
    std::ostringstream out;
    out << std::left << std::setw(22) << "policy" << std::setw(14) << comparison.rows.front().metric_name
        << std::setw(16) << "attn_flops" << std::setw(16) << "kv_bytes" << std::setw(12) << "metric/base"
        << std::setw(12) << "flops/base" << "bytes/base\n";
    for (std::size_t i = 0; i < comparison.rows.size(); ++i) {
        const ComparisonRow& r = comparison.rows[i];
        out << std::setw(22) << (r.label + (i == comparison.baseline ? " *" : "")) << std::setw(14)
            << format_number(r.metric) << std::setw(16) << r.attention_flops << std::setw(16) << r.kv_bytes_moved
            << std::setw(12) << cell(r.metric_ratio) << std::setw(12) << cell(r.flops_ratio) << cell(r.bytes_ratio)
            << "\n";
    }
    out << "* baseline\n";
    return out.str();
}

nlohmann::json to_json(const Comparison& comparison) {
    nlohmann::json rows = nlohmann::json::array();
    for (const ComparisonRow& r : comparison.rows) {
        rows.push_back({{"label", r.label},
                        {r.metric_name, r.metric},
                        {"attention_flops", r.attention_flops},
                        {"kv_bytes_moved", r.kv_bytes_moved},
                        {"metric_ratio", optional_json(r.metric_ratio)},
                        {"flops_ratio", optional_json(r.flops_ratio)},
                        {"bytes_ratio", optional_json(r.bytes_ratio)}});
    }
    return {{"baseline", comparison.rows.at(comparison.baseline).label}, {"rows", rows}};
}

std::string nll_ratio_csv(const Comparison& comparison, std::span<const std::vector<StepTrace>> traces) {
    if (traces.size() != comparison.rows.size()) {
        throw ContractViolation("nll_ratio_csv: one trace per report is required");
    }
    const auto& base = traces[comparison.baseline];
    for (const auto& t : traces) {
        if (t.size() != base.size()) {
            throw ConfigError("nll csv: traces have different lengths");
        }
        for (const StepTrace& s : t) {
            if (!s.nll) {
                throw ConfigError("nll csv: trace has no per-step nll (only lm runs record it)");
            }
        }
    }
    std::ostringstream out;
    out << std::setprecision(17) << "step,position";
    for (const ComparisonRow& r : comparison.rows) {
        out << ",nll_" << r.label;
    }
    for (std::size_t i = 0; i < comparison.rows.size(); ++i) {
        if (i != comparison.baseline) {
            out << ",ratio_" << comparison.rows[i].label;
        }
    }
    out << "\n";
    for (std::size_t s = 0; s < base.size(); ++s) {
        out << base[s].step_index << "," << base[s].position;
        for (const auto& t : traces) {
            out << "," << *t[s].nll;
        }
        for (std::size_t i = 0; i < traces.size(); ++i) {
            if (i != comparison.baseline) {
                out << "," << *traces[i][s].nll / *base[s].nll;
            }
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace refreshkv
