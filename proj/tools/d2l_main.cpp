// d2l: command-line front end for the experiment pipeline.
//
//   d2l pretrain-lm  --config exp.json [key.path=value ...]
//   d2l gen-data     --config exp.json
//   d2l meta-train   --config exp.json
//   d2l cd-baseline  --config exp.json
//   d2l eval         --config exp.json
//   d2l report       --runs runs/a runs/b --out report/
//
// Exit codes: 0 ok, 2 invalid configuration or shapes, 3 runtime failure.

#include "d2l/harness.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>

namespace {

std::atomic<bool> g_interrupt{false};

extern "C" void on_sigint(int) { g_interrupt.store(true); }

d2l::ExperimentConfig build_config(const std::string& path, const std::vector<std::string>& overrides) {
    nlohmann::json j = nlohmann::json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw d2l::ConfigError("cannot open config " + path);
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw d2l::ConfigError(path + ": not valid JSON: " + e.what());
        }
    }
    for (const auto& o : overrides) d2l::apply_override(j, o);
    return d2l::parse_experiment(j);
}

void print_rows(const std::vector<d2l::MetricsRow>& rows) {
    for (const auto& r : rows) {
        std::cout << r.method << " len=" << r.length << " acc=" << r.accuracy << " n=" << r.n;
        if (r.latency_ms_mean > 0.0) std::cout << " latency_ms=" << r.latency_ms_mean;
        if (r.truncated) std::cout << " (truncated)";
        std::cout << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Context internalization experiments on a tiny character LM"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "experiment JSON");
        sub->add_option("overrides", overrides, "dotted overrides, e.g. schedule.lr=5e-4");
    };
    auto* pretrain = app.add_subcommand("pretrain-lm", "train the frozen target model");
    auto* gen = app.add_subcommand("gen-data", "build the self-response meta-training set");
    auto* meta = app.add_subcommand("meta-train", "train the hypernetwork (resumable)");
    auto* cd = app.add_subcommand("cd-baseline", "context distillation by gradient descent");
    auto* eval = app.add_subcommand("eval", "needle-in-a-haystack evaluation of every method");
    for (auto* s : {pretrain, gen, meta, cd, eval}) add_common(s);

    auto* report = app.add_subcommand("report", "merge metrics from several runs");
    std::vector<std::string> runs;
    std::string out_dir = "report";
    report->add_option("--runs", runs, "run directories")->required();
    report->add_option("--out", out_dir, "output directory");

    CLI11_PARSE(app, argc, argv);
    std::signal(SIGINT, on_sigint);

    try {
        d2l::CommandContext ctx;
        ctx.interrupt = &g_interrupt;
        if (report->parsed()) {
            const auto rows = d2l::cmd_report(runs, out_dir);
            std::cout << "merged " << rows.size() << " rows into " << out_dir << "\n";
            return 0;
        }
        const d2l::ExperimentConfig cfg = build_config(config_path, overrides);
        std::cout << "run dir: " << d2l::resolve_run_dir(cfg) << "\n";
        if (pretrain->parsed()) {
            const auto r = d2l::cmd_pretrain_lm(cfg, ctx);
            std::cout << "teacher saved to " << d2l::teacher_path(cfg) << " (" << r.wall_seconds << " s)\n";
        } else if (gen->parsed()) {
            const auto r = d2l::cmd_gen_data(cfg, ctx);
            std::cout << r.count << " samples, " << r.teacher_mismatches << " teacher mismatches, hash " << r.file_hash
                      << "\n";
        } else if (meta->parsed()) {
            const auto r = d2l::cmd_meta_train(cfg, ctx);
            if (r.interrupted) {
                std::cout << "interrupted after " << r.steps_done << " steps; rerun to resume\n";
                return 130;
            }
            std::cout << "hypernetwork saved to " << d2l::hypernet_path(cfg) << " after " << r.steps_done << " steps\n";
        } else if (cd->parsed()) {
            print_rows(d2l::cmd_cd_baseline(cfg, ctx));
        } else if (eval->parsed()) {
            print_rows(d2l::cmd_eval(cfg, ctx));
        }
    } catch (const d2l::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const d2l::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
