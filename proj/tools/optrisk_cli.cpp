#include "optrisk/errors.hpp"
#include "optrisk/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

using namespace optrisk;

namespace {

struct CommonFlags {
    std::string config = "optrisk.yaml";
    std::vector<std::string> overrides;
    unsigned threads = 0;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("-c,--config", flags.config, "YAML run configuration")->capture_default_str();
    cmd->add_option("--set", flags.overrides, "Override a config key, e.g. --set backtest.scenarios=1000");
    cmd->add_option("-j,--threads", flags.threads, "Worker threads (does not change results)");
    cmd->add_flag("-f,--force", flags.force, "Rerun even when outputs are current");
}

RunConfig load(const CommonFlags& flags, std::vector<std::string> extra) {
    std::vector<std::string> overrides = flags.overrides;
    overrides.insert(overrides.end(), extra.begin(), extra.end());
    RunConfig config = load_config(flags.config, overrides);
    if (flags.threads > 0) {
        config.threads = flags.threads;
    }
    return config;
}

void print(const StageResult& r) {
    for (const auto& m : r.messages) {
        std::cout << m << (m.empty() || m.back() != '\n' ? "\n" : "");
    }
    if (!r.skipped) {
        for (const auto& a : r.artifacts) {
            std::cout << "  wrote " << a << '\n';
        }
    }
}

template <class T>
std::string yaml_list(const std::vector<T>& values) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < values.size(); ++i) {
        out << (i ? "," : "") << values[i];
    }
    out << ']';
    return out.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Option portfolio risk: synthetic data, factor decoding, neural-SDE training, scenarios and VaR "
                 "backtests"};
    app.require_subcommand(1);
    CommonFlags flags;

    std::vector<std::pair<std::string, CLI::App*>> stages;
    for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
             {"synth", "Simulate a Heston market and write delta-quoted raw option records"},
             {"ingest", "Interpolate raw quotes onto the liquid lattice, with arbitrage repair statistics"},
             {"decode", "Decode primary and secondary price factors and their reconstruction metrics"},
             {"train", "Train the factor and index dynamics; loss curves and residual QQ data"},
             {"simulate", "Simulate scenarios, implied-vol snapshots and VIX paths"}}) {
        CLI::App* cmd = app.add_subcommand(name, help);
        add_common(cmd, flags);
        stages.emplace_back(name, cmd);
    }

    CLI::App* backtest = app.add_subcommand("backtest", "VaR backtest of the portfolio catalog");
    add_common(backtest, flags);
    std::string engine;
    std::vector<int> horizons;
    std::vector<double> alphas;
    std::size_t scenarios = 0;
    backtest->add_option("--engine", engine, "nsde or fhs")->check(CLI::IsMember({"nsde", "fhs"}));
    backtest->add_option("--horizon", horizons, "VaR horizon in days (repeatable)");
    backtest->add_option("--alpha", alphas, "VaR confidence level (repeatable)");
    backtest->add_option("--scenarios", scenarios, "Scenarios per forecast");

    CLI::App* all = app.add_subcommand("run", "Run synth (unless raw quotes are configured) through backtest");
    add_common(all, flags);

    CLI::App* verify = app.add_subcommand("verify", "Check schema, config hashes and cross-stage digests");
    add_common(verify, flags);

    CLI::App* show = app.add_subcommand("config", "Print the per-stage config hashes");
    add_common(show, flags);

    CLI11_PARSE(app, argc, argv);

    try {
        for (const auto& [name, cmd] : stages) {
            if (cmd->parsed()) {
                print(run_stage(name, load(flags, {}), flags.force));
                return 0;
            }
        }
        if (backtest->parsed()) {
            std::vector<std::string> extra;
            if (!engine.empty()) {
                extra.push_back("backtest.engine=" + engine);
            }
            if (!horizons.empty()) {
                extra.push_back("backtest.horizons=" + yaml_list(horizons));
            }
            if (!alphas.empty()) {
                extra.push_back("backtest.alphas=" + yaml_list(alphas));
            }
            if (scenarios > 0) {
                extra.push_back("backtest.scenarios=" + std::to_string(scenarios));
            }
            print(run_stage("backtest", load(flags, extra), flags.force));
            return 0;
        }
        if (all->parsed()) {
            const RunConfig config = load(flags, {});
            for (const auto& name : stage_names) {
                if (name == "synth" && !config.raw_quotes.empty()) {
                    continue;
                }
                print(run_stage(name, config, flags.force));
            }
            return 0;
        }
        const RunConfig config = load(flags, {});
        if (show->parsed()) {
            for (const auto& name : stage_names) {
                std::cout << name << ' ' << config_hash(config, name) << '\n';
            }
            return 0;
        }
        const VerifyReport report = verify_run(config);
        for (const auto& [name, sha] : report.artifacts) {
            std::cout << sha << "  " << name << '\n';
        }
        for (const auto& p : report.problems) {
            std::cerr << "problem: " << p << '\n';
        }
        std::cout << (report.ok() ? "verify: ok" : "verify: FAILED") << '\n';
        return report.ok() ? 0 : 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
