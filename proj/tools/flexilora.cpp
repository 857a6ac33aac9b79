#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "flexi/runtime.hpp"
#include "flexi/selftest.hpp"

namespace {

using namespace flexi;

constexpr int kOk = 0, kConfigError = 1, kRuntimeError = 2, kSelftestFailed = 3;

struct Options {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string precision;
    std::string out;
    std::optional<std::size_t> threads;
    // finetune / eval policy selection
    std::string policy;
    std::optional<int> rank;
    std::string range;
    std::string rank_set;
    std::vector<std::string> only;
};

ExperimentConfig build_config(const Options& o) {
    auto cfg = o.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(o.config);
    for (const auto& kv : o.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.seed) cfg.set("seed", std::to_string(*o.seed));
    if (!o.precision.empty()) cfg.set("precision", o.precision);
    if (!o.out.empty()) cfg.set("out", o.out);
    if (o.threads) cfg.set("threads", std::to_string(*o.threads));
    cfg.validate();
    return cfg;
}

// "--policy dylora --range 1-8 --rank 4" -> "dylora:1-8@4"
std::string policy_descriptor(const Options& o) {
    const auto& p = o.policy;
    auto need = [&](bool have, const char* flag) {
        if (!have) throw ConfigError("--policy " + p + " needs " + flag);
    };
    if (p == "lora") {
        need(o.rank.has_value(), "--rank");
        return "lora:" + std::to_string(*o.rank);
    }
    if (p == "dylora") {
        need(!o.range.empty(), "--range");
        return "dylora:" + o.range + (o.rank ? "@" + std::to_string(*o.rank) : "");
    }
    if (p == "dylora+") {
        need(!o.range.empty(), "--range");
        return "dylora+:" + o.range;
    }
    if (p == "flexi") {
        need(!o.rank_set.empty(), "--rank-set");
        std::string s = o.rank_set;
        for (auto& c : s)
            if (c == ',') c = '/';
        return "flexi:" + s;
    }
    throw ConfigError("unknown --policy '" + p + "' (lora, dylora, dylora+, flexi)");
}

void print_evals(const RunSummary& s) {
    for (const auto& r : s.rows)
        std::cout << r.family << "  " << r.policy.label() << "  " << metric_name(r.eval.metric) << " "
                  << detail::fixed(100 * r.eval.mean, 2) << "  (easy " << detail::fixed(100 * r.eval.easy.mean(), 2)
                  << ", hard " << detail::fixed(100 * r.eval.hard.mean(), 2) << ")\n";
}

template <Real T>
void run_stage(const ExperimentConfig& cfg, Stage until) {
    Experiment<T> exp(cfg);
    const auto s = exp.run(until);
    switch (until) {
        case Stage::base: std::cout << "base model: " << (exp.dir() / "base.flxl").string() << "\n"; break;
        case Stage::tasks: std::cout << "datasets: " << (exp.dir() / "data").string() << "\n"; break;
        case Stage::labels: std::cout << "labels: " << (exp.dir() / "labels").string() << "\n"; break;
        case Stage::router:
            for (const auto& [f, info] : s.routers)
                std::cout << f << ": router held-out accuracy " << detail::fixed(100 * info.heldout_accuracy, 2)
                          << "% (" << info.easy << " easy / " << info.hard << " hard labels)\n";
            break;
        case Stage::finetune: std::cout << "adapters: " << (exp.dir() / "adapters").string() << "\n"; break;
        case Stage::eval: print_evals(s); break;
        case Stage::report: std::cout << s.report->text; break;
    }
}

void dispatch(const ExperimentConfig& cfg, Stage until) {
    if (cfg.precision == Precision::f64)
        run_stage<double>(cfg, until);
    else
        run_stage<float>(cfg, until);
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Flexi-LoRA laboratory: dynamic-rank adapters on a small transformer"};
    app.require_subcommand(1);
    Options o;
    auto global = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "experiment config file");
        sub->add_option("--set", o.overrides, "override one config key (key=value), repeatable");
        sub->add_option("--seed", o.seed, "global seed");
        sub->add_option("--precision", o.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
        sub->add_option("--out", o.out, "run directory");
        sub->add_option("--threads", o.threads, "evaluation threads")->check(CLI::PositiveNumber);
    };
    auto policy_flags = [&](CLI::App* sub, bool required) {
        auto* p = sub->add_option("--policy", o.policy, "lora, dylora, dylora+ or flexi");
        if (required) p->required();
        sub->add_option("--rank", o.rank, "rank (lora) or inference rank (dylora)");
        sub->add_option("--range", o.range, "training rank range lo-hi (dylora, dylora+)");
        sub->add_option("--rank-set", o.rank_set, "router class ranks, easy to hard (flexi), e.g. 2,8");
    };

    struct Cmd {
        const char* name;
        const char* help;
        Stage until;
    };
    const Cmd cmds[] = {{"pretrain", "pretrain (or load) the base model", Stage::base},
                        {"gen-tasks", "generate train/eval datasets", Stage::tasks},
                        {"label", "label training samples easy/hard from the base model", Stage::labels},
                        {"train-router", "train the difficulty router", Stage::router},
                        {"finetune", "fine-tune adapters under one policy", Stage::finetune},
                        {"eval", "evaluate policies", Stage::eval},
                        {"report", "emit the comparison report", Stage::report},
                        {"run", "full pipeline", Stage::report}};
    std::map<CLI::App*, Stage> stage_of;
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        global(sub);
        if (std::string_view(c.name) == "finetune") policy_flags(sub, true);
        if (std::string_view(c.name) == "eval") policy_flags(sub, false);
        stage_of[sub] = c.until;
    }
    auto* selftest_cmd = app.add_subcommand("selftest", "run the invariant suites");
    selftest_cmd->add_option("--only", o.only, "check names to run");
    bool list = false;
    selftest_cmd->add_flag("--list", list, "list checks and exit");
    auto* config_cmd = app.add_subcommand("config", "print the effective configuration");
    global(config_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }

    auto* sub = app.get_subcommands().front();
    try {
        if (sub == selftest_cmd) {
            if (list) {
                for (const auto& c : selftest_checks()) std::cout << c.name << "  " << c.what << "\n";
                return kOk;
            }
            for (const auto& name : o.only) {
                bool known = false;
                for (const auto& c : selftest_checks()) known |= c.name == name;
                if (!known) throw ConfigError("unknown selftest check '" + name + "' (see selftest --list)");
            }
            bool ok = true;
            for (const auto& r : run_selftest(o.only, std::cout)) ok &= r.passed;
            return ok ? kOk : kSelftestFailed;
        }
        auto cfg = build_config(o);
        if (sub == config_cmd) {
            std::cout << cfg.dump();
            return kOk;
        }
        if (!o.policy.empty()) {
            cfg.set("policies", policy_descriptor(o));
            cfg.validate();
        } else if (o.rank || !o.range.empty() || !o.rank_set.empty()) {
            throw ConfigError("--rank/--range/--rank-set need --policy");
        }
        dispatch(cfg, stage_of.at(sub));
        return kOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
}
