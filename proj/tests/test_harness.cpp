#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "refreshkv/errors.hpp"
#include "refreshkv/harness.hpp"
#include "refreshkv/session.hpp"

namespace fs = std::filesystem;
using namespace refreshkv;

namespace {

RunConfig small_lm(PolicyKind kind) {
    RunConfig c;
    c.policy.kind = kind;
    c.task.stream_length = 200;
    c.task.tail = 64;
    c.policy.k = 16;
    return c;
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("refreshkv_test_harness_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("config JSON round trip and defaults") {
    RunConfig c;
    c.policy.kind = PolicyKind::h2o;
    c.policy.k = 48;
    c.policy.gqa_aggregation = GqaAggregation::mean;
    c.schedule.mode = ScheduleMode::fixed;
    c.schedule.stride = 7;
    c.task.kind = TaskKind::chainkey;
    c.task.stream.structure = StreamStructure::uniform;
    c.weights = "w.bin";
    c.seed = 99;
    const RunConfig back = run_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(back.policy == c.policy);
    CHECK(back.schedule == c.schedule);
    CHECK(back.task == c.task);
    CHECK(back.model == c.model);
    CHECK(back.weights == c.weights);

    const RunConfig defaults = run_config_from_json(nlohmann::json::object());
    CHECK(defaults.policy == PolicyConfig{});
    CHECK(defaults.schedule.mode == ScheduleMode::qc);
    CHECK(defaults.schedule.threshold == 0.85);
    CHECK(defaults.policy.kernel_size == 7);
}

TEST_CASE("unknown keys and bad values are config errors") {
    CHECK_THROWS_AS(run_config_from_json({{"polcy", {}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"policy", {{"kernel", 7}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"policy", {{"kind", "quest"}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"schedule", {{"stride", "ten"}}}}), ConfigError);
    RunConfig c;
    c.schedule.qc_stride = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = RunConfig{};
    c.task.tail = c.task.stream_length;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("dotted overrides") {
    nlohmann::json doc = to_json(RunConfig{});
    apply_override(doc, "policy.k", "32");
    apply_override(doc, "--schedule.qc-stride", "5");
    apply_override(doc, "policy.kind", "snapkv");
    apply_override(doc, "output", "123");
    apply_override(doc, "task.noise", "0.25");
    const RunConfig c = run_config_from_json(doc);
    CHECK(c.policy.k == 32u);
    CHECK(c.schedule.qc_stride == 5u);
    CHECK(c.policy.kind == PolicyKind::snapkv);
    CHECK(c.output == "123");
    CHECK(c.task.stream.noise == 0.25);
    CHECK_THROWS_AS(apply_override(doc, "policy.nope", "1"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "policy.k.deeper", "1"), ConfigError);
}

TEST_CASE("identical configs write byte-identical traces") {
    RunConfig c = small_lm(PolicyKind::refreshkv);
    c.output = scratch("det_a").string();
    const RunOptions opts{false, false};
    write_run(c, run(c, opts));
    RunConfig d = c;
    d.output = scratch("det_b").string();
    write_run(d, run(d, opts));
    const std::string a = slurp(fs::path(c.output) / "trace.jsonl");
    CHECK(!a.empty());
    CHECK(a == slurp(fs::path(d.output) / "trace.jsonl"));
    const auto back = read_trace_jsonl(fs::path(c.output) / "trace.jsonl");
    CHECK(trace_jsonl(back) == a);
    const nlohmann::json report = read_json_file(fs::path(c.output) / "report.json");
    CHECK(report["generated_steps"] == 63);
    CHECK(report["perplexity"].get<double>() >= 1.0);
    CHECK_THROWS_AS(read_trace_jsonl(scratch("missing") / "trace.jsonl"), IoError);
}

TEST_CASE("comparisons") {
    const RunOptions opts{false, false};
    const nlohmann::json vanilla = run(small_lm(PolicyKind::vanilla), opts).report;
    const nlohmann::json refresh = run(small_lm(PolicyKind::refreshkv), opts).report;

    const std::vector<nlohmann::json> self{refresh, refresh};
    const Comparison same = compare_reports(self);
    REQUIRE(same.rows.size() == 2);
    CHECK(same.rows[1].metric_ratio == 1.0);
    CHECK(same.rows[1].bytes_ratio == 1.0);
    CHECK(same.rows[1].flops_ratio == 1.0);
    CHECK(same.rows[0].label != same.rows[1].label);

    const std::vector<nlohmann::json> both{refresh, vanilla};
    const Comparison cmp = compare_reports(both);
    CHECK(cmp.baseline == 1);
    CHECK(cmp.rows[0].kv_bytes_moved < cmp.rows[1].kv_bytes_moved);
    CHECK(*cmp.rows[0].bytes_ratio < 1.0);
    CHECK(format_comparison(cmp).find("refreshkv") != std::string::npos);
    CHECK(to_json(cmp)["rows"].size() == 2);

    nlohmann::json other_seed = refresh;
    other_seed["config"]["seed"] = 1;
    const std::vector<nlohmann::json> mismatched{vanilla, other_seed};
    CHECK_THROWS_AS(compare_reports(mismatched), ConfigError);
}

TEST_CASE("per-step NLL ratio table") {
    const RunOptions opts{false, false};
    const RunResult vanilla = run(small_lm(PolicyKind::vanilla), opts);
    const RunResult snap = run(small_lm(PolicyKind::snapkv), opts);
    const std::vector<nlohmann::json> reports{vanilla.report, snap.report};
    const std::vector<std::vector<StepTrace>> traces{vanilla.trace, snap.trace};
    const std::string csv = nll_ratio_csv(compare_reports(reports), traces);
    std::stringstream s(csv);
    std::string header;
    std::getline(s, header);
    CHECK(header == "step,position,nll_vanilla,nll_snapkv,ratio_snapkv");
    std::size_t lines = 0;
    for (std::string line; std::getline(s, line);) ++lines;
    CHECK(lines == vanilla.trace.size());
}

TEST_CASE("fixed stride 10 over 100 steps reports stride 10") {
    RunConfig c = small_lm(PolicyKind::refreshkv);
    c.task.stream_length = 164;
    c.task.tail = 101;
    c.schedule.mode = ScheduleMode::fixed;
    c.schedule.stride = 10;
    const nlohmann::json report = run(c, {false, false}).report;
    CHECK(report["generated_steps"] == 100);
    CHECK(report["mean_effective_stride"] == 10.0);
    CHECK(report["full_steps_per_layer"] == nlohmann::json::array({10, 10}));
}

TEST_CASE("exact refreshkv generates the vanilla token sequence") {
    RunConfig c;
    c.task.kind = TaskKind::chainkey;
    c.task.n_keys = 6;
    c.task.T = 5;
    c.n_generate = 40;
    c.policy.kind = PolicyKind::vanilla;
    const nlohmann::json vanilla = run(c, {false, false}).report;
    c.policy.kind = PolicyKind::refreshkv;
    c.policy.k = vanilla["prompt_length"].get<std::size_t>();
    c.schedule.mode = ScheduleMode::always_full;
    const nlohmann::json exact = run(c, {false, false}).report;
    CHECK(exact["chain"]["output_tokens"] == vanilla["chain"]["output_tokens"]);
    CHECK(exact["chain"]["score"] == vanilla["chain"]["score"]);
}

TEST_CASE("self-check on a run") {
    RunConfig c = small_lm(PolicyKind::refreshkv);
    c.task.stream_length = 96;
    c.task.tail = 32;
    const RunResult r = run(c, {true, false});
    REQUIRE(r.ladder.has_value());
    CHECK(r.ladder->passed());
    CHECK(r.report["self_check"]["rungs"].size() == 4);
}

TEST_CASE("file errors") {
    CHECK_THROWS_AS(read_json_file(scratch("none") / "config.json"), IoError);
    const fs::path dir = scratch("badjson");
    fs::create_directories(dir);
    write_text_file(dir / "c.json", "{not json");
    CHECK_THROWS_AS(read_json_file(dir / "c.json"), ConfigError);
    RunConfig c = small_lm(PolicyKind::vanilla);
    c.weights = (dir / "absent.bin").string();
    CHECK_THROWS_AS(load_or_init_weights(c), IoError);
}
