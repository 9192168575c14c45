// refreshkv command line: run experiments, compare reports, and generate or
// score chain-of-key instances.
//
// Exit codes: 0 success, 1 config error, 2 invariant violation, 3 I/O error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "refreshkv/errors.hpp"
#include "refreshkv/harness.hpp"
#include "refreshkv/tasks.hpp"

namespace fs = std::filesystem;
using namespace refreshkv;

namespace {

enum ExitCode { kOk = 0, kConfig = 1, kInvariant = 2, kIo = 3 };

// Remaining arguments are config overrides: --a.b value or --a.b=value.
RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& extras,
                         const std::string& output) {
    RunConfig base;
    if (!config_path.empty()) {
        base = run_config_from_json(read_json_file(config_path));
    }
    nlohmann::json doc = to_json(base);
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const std::string& arg = extras[i];
        if (!arg.starts_with("--")) {
            throw ConfigError("unexpected argument '" + arg + "'");
        }
        if (const auto eq = arg.find('='); eq != std::string::npos) {
            apply_override(doc, arg.substr(0, eq), arg.substr(eq + 1));
            continue;
        }
        if (i + 1 >= extras.size()) {
            throw ConfigError("override " + arg + " needs a value");
        }
        apply_override(doc, arg, extras[++i]);
    }
    RunConfig config = run_config_from_json(doc);
    if (!output.empty()) {
        config.output = output;
    }
    return config;
}

int report_error(const char* kind, const std::exception& e, int code) {
    std::cerr << "refreshkv: " << kind << ": " << e.what() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache policy experiments on a toy transformer"};
    app.require_subcommand(1);

    std::string config_path;
    std::string output;
    bool self_check = false;
    bool print_config = false;
    auto* run_cmd = app.add_subcommand("run", "prefill + decode under one policy; writes trace.jsonl and report.json");
    run_cmd->add_option("--config", config_path, "run config (JSON)");
    run_cmd->add_option("--output", output, "output directory (overrides config.output)");
    run_cmd->add_flag("--self-check", self_check, "run the equivalence ladder first and fail on any mismatch");
    run_cmd->add_flag("--print-config", print_config, "print the resolved config and exit");
    run_cmd->allow_extras();

    auto* check_cmd = app.add_subcommand("self-check", "run the equivalence ladder for a config");
    check_cmd->add_option("--config", config_path, "run config (JSON)");
    check_cmd->allow_extras();

    std::vector<std::string> report_paths;
    std::string nll_csv;
    std::string compare_json;
    auto* compare_cmd = app.add_subcommand("compare", "side-by-side table of run reports");
    compare_cmd->add_option("reports", report_paths, "report.json files or run directories")->required();
    compare_cmd->add_option("--nll-csv", nll_csv, "write per-step NLL and NLL-ratio curves (lm runs)");
    compare_cmd->add_option("--json", compare_json, "also write the table as JSON");

    std::size_t n_keys = 40;
    std::size_t T = 10;
    std::size_t W = 2;
    std::uint64_t seed = 0;
    std::size_t count = 1;
    std::string instances_out;
    auto* gen_cmd = app.add_subcommand("gen-chainkey", "generate chain-of-key instances as JSON-lines");
    gen_cmd->add_option("--n-keys", n_keys, "keys in the context")->capture_default_str();
    gen_cmd->add_option("--T", T, "target chain length")->capture_default_str();
    gen_cmd->add_option("--W", W, "words per key")->capture_default_str();
    gen_cmd->add_option("--seed", seed, "seed of the first instance; instance i uses seed + i")->capture_default_str();
    gen_cmd->add_option("--count", count, "number of instances")->capture_default_str();
    gen_cmd->add_option("--output", instances_out, "JSON-lines file (stdout when omitted)");

    std::string instances_path;
    std::string outputs_path;
    std::string scores_out;
    auto* eval_cmd = app.add_subcommand("eval-chainkey", "score {instance_id, output_text} lines against instances");
    eval_cmd->add_option("--instances", instances_path, "instances JSON-lines")->required();
    eval_cmd->add_option("--outputs", outputs_path, "model outputs JSON-lines")->required();
    eval_cmd->add_option("--output", scores_out, "scores JSON-lines (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*run_cmd) {
            const RunConfig config = resolve_config(config_path, run_cmd->remaining(), output);
            if (print_config) {
                std::cout << to_json(config).dump(2) << "\n";
                return kOk;
            }
            const RunResult result = run(config, RunOptions{.self_check = self_check});
            write_run(config, result);
            const auto& r = result.report;
            std::cout << r.at("label").get<std::string>() << ": ";
            if (r.contains("perplexity")) {
                std::cout << "perplexity " << r.at("perplexity").get<double>();
            } else {
                std::cout << "chain score " << r.at("chain").at("score").get<double>();
            }
            std::cout << ", kv bytes " << r.at("totals").at("kv_bytes_moved").get<std::uint64_t>() << " -> "
                      << config.output << "\n";
        } else if (*check_cmd) {
            const RunConfig config = resolve_config(config_path, check_cmd->remaining(), "");
            const LadderReport report = run_self_check(config);
            for (const LadderRung& rung : report.rungs) {
                std::cout << (rung.passed ? "PASS " : "FAIL ") << rung.name
                          << " (max rel diff " << rung.max_relative_difference << ")\n";
            }
            if (!report.passed()) {
                std::cerr << "refreshkv: invariant violation: equivalence ladder failed\n";
                return kInvariant;
            }
        } else if (*compare_cmd) {
            std::vector<nlohmann::json> reports;
            std::vector<fs::path> dirs;
            for (const std::string& p : report_paths) {
                fs::path path(p);
                if (fs::is_directory(path)) {
                    path /= "report.json";
                }
                reports.push_back(read_json_file(path));
                dirs.push_back(path.parent_path());
            }
            const Comparison comparison = compare_reports(reports);
            std::cout << format_comparison(comparison);
            if (!compare_json.empty()) {
                write_text_file(compare_json, to_json(comparison).dump(2) + "\n");
            }
            if (!nll_csv.empty()) {
                std::vector<std::vector<StepTrace>> traces;
                for (std::size_t i = 0; i < reports.size(); ++i) {
                    traces.push_back(read_trace_jsonl(dirs[i] / reports[i].value("trace_file", "trace.jsonl")));
                }
                write_text_file(nll_csv, nll_ratio_csv(comparison, traces));
            }
        } else if (*gen_cmd) {
            std::vector<IdentifiedInstance> instances;
            for (std::size_t i = 0; i < count; ++i) {
                instances.push_back({static_cast<std::uint64_t>(i), generate_chain_instance(n_keys, W, T, seed + i)});
            }
            std::ostringstream text;
            write_instances_jsonl(instances, text);
            if (instances_out.empty()) {
                std::cout << text.str();
            } else {
                write_text_file(instances_out, text.str());
            }
        } else if (*eval_cmd) {
            std::ifstream instances_in(instances_path);
            if (!instances_in) {
                throw IoError("cannot open " + instances_path);
            }
            std::ifstream outputs_in(outputs_path);
            if (!outputs_in) {
                throw IoError("cannot open " + outputs_path);
            }
            const auto instances = read_instances_jsonl(instances_in);
            std::string text;
            for (const auto& line : score_outputs_jsonl(instances, outputs_in)) {
                text += line.dump() + "\n";
            }
            if (scores_out.empty()) {
                std::cout << text;
            } else {
                write_text_file(scores_out, text);
            }
        }
    } catch (const ConfigError& e) {
        return report_error("config error", e, kConfig);
    } catch (const ContractViolation& e) {
        return report_error("invariant violation", e, kInvariant);
    } catch (const IoError& e) {
        return report_error("I/O error", e, kIo);
    } catch (const nlohmann::json::exception& e) {
        return report_error("config error", e, kConfig);
    }
    return kOk;
}
