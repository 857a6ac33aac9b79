#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flexi/hash.hpp"
#include "flexi/methods.hpp"

namespace flexi {

struct FamilyTaskConfig {
    std::vector<int> easy_knobs;
    std::vector<int> hard_knobs;
    MetricKind metric = MetricKind::answer_accuracy;
};

// Everything a run depends on. Text form: one `key = value` per line, `#`
// starts a comment, lists are comma separated and integer lists accept
// ranges ("6-8"). Unknown keys are errors.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    Precision precision = Precision::f32;
    std::string out = "runs/default";
    std::size_t threads = 1;

    ModelConfig model;
    PretrainConfig pretrain;
    std::string base_checkpoint;

    std::vector<Family> tasks{Family::mod_chain, Family::kv_recall};
    std::size_t train_size = 2000;
    std::size_t eval_size = 400;
    FamilyTaskConfig mod_chain{{1}, {2, 3}, MetricKind::answer_accuracy};
    FamilyTaskConfig kv_recall{{1, 2}, {4, 5, 6}, MetricKind::token_f1};

    std::string router_labels = "base";  // base | split
    double router_tau = -1;              // < 0: 1.0 for answer-accuracy, 0.5 for token-F1
    RouterTrainConfig router;

    int r_max = 8;
    double alpha = 16.0;
    double adapter_init_std = 0.02;
    std::vector<Target> targets{Target::wq, Target::wv};

    FinetuneConfig finetune;
    EvalConfig eval;
    std::vector<std::string> policies{"lora:2", "lora:8", "dylora:1-8@8", "dylora+:1-8", "flexi:2/8"};

    struct Key {
        std::string name;
        std::string doc;
        std::function<std::string(const ExperimentConfig&)> get;
        std::function<void(ExperimentConfig&, const std::string&)> set;
    };

    static const std::vector<Key>& schema();

    const FamilyTaskConfig& task_config(Family f) const {
        if (f == Family::mod_chain) return mod_chain;
        if (f == Family::kv_recall) return kv_recall;
        throw ConfigError("no task configuration for family " + std::string(family_name(f)));
    }

    TaskSpec task_spec(Family f) const {
        const auto& t = task_config(f);
        TaskSpec s;
        s.family = f;
        s.easy_knobs = t.easy_knobs;
        s.hard_knobs = t.hard_knobs;
        s.train_size = train_size;
        s.eval_size = eval_size;
        s.seed = seed;
        return s;
    }

    double tau_for(MetricKind m) const {
        if (router_tau >= 0) return router_tau;
        return m == MetricKind::answer_accuracy ? 1.0 : 0.5;
    }

    std::vector<PolicySpec> policy_specs() const {
        std::vector<PolicySpec> out;
        for (const auto& p : policies) out.push_back(parse_policy(p));
        return out;
    }

    std::string get(const std::string& key) const {
        for (const auto& k : schema())
            if (k.name == key) return k.get(*this);
        throw ConfigError("unknown config key '" + key + "'");
    }

    void set(const std::string& key, const std::string& value) {
        for (const auto& k : schema())
            if (k.name == key) {
                try {
                    k.set(*this, value);
                } catch (const std::exception& e) {
                    throw ConfigError("config key '" + key + "': " + e.what());
                }
                return;
            }
        throw ConfigError("unknown config key '" + key + "'");
    }

    // Cross-field checks; run before any compute.
    void validate() const {
        try {
            model.validate();
        } catch (const ValueError& e) {
            throw ConfigError(e.what());
        }
        if (model.vocab_size != task_tokenizer().vocab_size())
            throw ConfigError("model.vocab_size must equal the task vocabulary (" +
                              std::to_string(task_tokenizer().vocab_size()) + ")");
        if (tasks.empty()) throw ConfigError("tasks: at least one family required");
        for (Family f : tasks) {
            if (f == Family::copy) throw ConfigError("tasks: copy is a warm-up family, not a fine-tuning task");
            try {
                task_spec(f).validate();
            } catch (const ValueError& e) {
                throw ConfigError(std::string(family_name(f)) + ": " + e.what());
            }
        }
        if (train_size < 2 || eval_size < 2) throw ConfigError("task sizes must be >= 2");
        if (router_labels != "base" && router_labels != "split")
            throw ConfigError("router.labels must be 'base' or 'split'");
        if (router.sigma < 0) throw ConfigError("router.sigma must be >= 0");
        if (router.holdout < 0 || router.holdout >= 1) throw ConfigError("router.holdout must be in [0, 1)");
        if (r_max < 1) throw ConfigError("adapter.r_max must be >= 1");
        if (targets.empty()) throw ConfigError("adapter.targets must be nonempty");
        if (finetune.batch == 0 || eval.batch == 0 || pretrain.batch == 0 || router.batch == 0)
            throw ConfigError("batch sizes must be positive");
        if (policies.empty()) throw ConfigError("policies: at least one policy required");
        std::vector<std::string> seen;
        for (const auto& p : policies) {
            PolicySpec spec;
            try {
                spec = parse_policy(p);
                spec.validate(r_max);
            } catch (const ValueError& e) {
                throw ConfigError(e.what());
            }
            if (spec.kind == PolicyKind::flexi && spec.rank_set.size() != 2)
                throw ConfigError("policy " + p + ": flexi uses two difficulty classes");
            if (std::find(seen.begin(), seen.end(), spec.str()) != seen.end())
                throw ConfigError("policy " + p + " listed twice");
            seen.push_back(spec.str());
        }
    }

    // Canonical text of every key starting with one of `prefixes`.
    std::string canonical(const std::vector<std::string>& prefixes) const {
        std::string out;
        for (const auto& k : schema())
            for (const auto& p : prefixes)
                if (k.name.rfind(p, 0) == 0) {
                    out += k.name + "=" + k.get(*this) + "\n";
                    break;
                }
        return out;
    }

    // Hash identifying the inputs of a pipeline stage.
    std::string stage_hash(const std::string& stage) const {
        std::vector<std::string> keys{"seed", "precision"};
        auto add = [&](std::initializer_list<const char*> ps) { keys.insert(keys.end(), ps.begin(), ps.end()); };
        add({"model.", "pretrain.", "base."});
        if (stage != "base") add({"task", "mod_chain.", "kv_recall."});
        if (stage == "labels") add({"router.labels", "router.tau"});
        if (stage == "router" || stage == "finetune" || stage == "eval") add({"router."});
        if (stage == "finetune" || stage == "eval") add({"adapter.", "finetune."});
        if (stage == "eval") add({"eval."});
        return sha256_hex(stage + "\n" + canonical(keys));
    }

    // Every key with its effective value, in schema order.
    std::string dump() const {
        std::string out;
        for (const auto& k : schema()) out += k.name + " = " + k.get(*this) + "\n";
        return out;
    }

    static ExperimentConfig parse(const std::string& text, const std::string& source = "config") {
        ExperimentConfig c;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        std::vector<std::string> seen;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                const auto b = s.find_last_not_of(" \t\r");
                return s.substr(a, b - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            const auto where = source + ":" + std::to_string(lineno);
            if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
            const auto key = trim(line.substr(0, eq));
            const auto value = trim(line.substr(eq + 1));
            if (std::find(seen.begin(), seen.end(), key) != seen.end())
                throw ConfigError(where + ": duplicate key '" + key + "'");
            seen.push_back(key);
            try {
                c.set(key, value);
            } catch (const ConfigError& e) {
                throw ConfigError(where + ": " + e.what());
            }
        }
        c.validate();
        return c;
    }

    static ExperimentConfig load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot read config file " + path);
        std::ostringstream ss;
        ss << f.rdbuf();
        return parse(ss.str(), path);
    }
};

namespace cfgio {

inline std::string fmt(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}
inline std::string fmt(std::size_t v) { return std::to_string(v); }
inline std::string fmt(int v) { return std::to_string(v); }

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string item; std::getline(in, item, ',');) {
        const auto a = item.find_first_not_of(" \t");
        const auto b = item.find_last_not_of(" \t");
        if (a == std::string::npos) throw ConfigError("empty list element in '" + s + "'");
        out.push_back(item.substr(a, b - a + 1));
    }
    return out;
}

template <typename I>
I parse_uint(const std::string& s) {
    I v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty())
        throw ConfigError("expected a non-negative integer, got '" + s + "'");
    return v;
}

inline int parse_int(const std::string& s) {
    int v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty())
        throw ConfigError("expected an integer, got '" + s + "'");
    return v;
}

inline double parse_real(const std::string& s) {
    double v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty() || !std::isfinite(v))
        throw ConfigError("expected a number, got '" + s + "'");
    return v;
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    for (const auto& item : split_list(s)) {
        const auto dash = item.find('-', 1);
        if (dash == std::string::npos) {
            out.push_back(parse_int(item));
        } else {
            const int lo = parse_int(item.substr(0, dash)), hi = parse_int(item.substr(dash + 1));
            if (lo > hi) throw ConfigError("empty range '" + item + "'");
            for (int k = lo; k <= hi; ++k) out.push_back(k);
        }
    }
    return out;
}

inline std::string fmt_int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

inline std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

}  // namespace cfgio

inline const std::vector<ExperimentConfig::Key>& ExperimentConfig::schema() {
    using C = ExperimentConfig;
    using namespace cfgio;
    static const std::vector<Key> keys = [] {
        std::vector<Key> k;
        auto size_key = [&](std::string name, std::string doc, std::size_t& (*ref)(C&)) {
            k.push_back({name, doc, [ref](const C& c) { return fmt(ref(const_cast<C&>(c))); },
                         [ref](C& c, const std::string& v) { ref(c) = parse_uint<std::size_t>(v); }});
        };
        auto real_key = [&](std::string name, std::string doc, double& (*ref)(C&)) {
            k.push_back({name, doc, [ref](const C& c) { return fmt(ref(const_cast<C&>(c))); },
                         [ref](C& c, const std::string& v) { ref(c) = parse_real(v); }});
        };
        auto knobs_key = [&](std::string name, std::string doc, std::vector<int>& (*ref)(C&)) {
            k.push_back({name, doc, [ref](const C& c) { return fmt_int_list(ref(const_cast<C&>(c))); },
                         [ref](C& c, const std::string& v) { ref(c) = parse_int_list(v); }});
        };
        auto metric_key = [&](std::string name, std::string doc, MetricKind& (*ref)(C&)) {
            k.push_back({name, doc, [ref](const C& c) { return std::string(metric_name(ref(const_cast<C&>(c)))); },
                         [ref](C& c, const std::string& v) { ref(c) = parse_metric(v); }});
        };

        k.push_back({"seed", "global seed; every random stream is derived from it",
                     [](const C& c) { return std::to_string(c.seed); },
                     [](C& c, const std::string& v) { c.seed = parse_uint<std::uint64_t>(v); }});
        k.push_back({"precision", "scalar type for all runs: f32 or f64",
                     [](const C& c) { return std::string(precision_name(c.precision)); },
                     [](C& c, const std::string& v) { c.precision = parse_precision(v); }});
        k.push_back({"out", "run directory", [](const C& c) { return c.out; },
                     [](C& c, const std::string& v) { c.out = v; }});
        size_key("threads", "evaluation worker threads (results do not depend on it)", [](C& c) -> std::size_t& { return c.threads; });

        size_key("model.d_model", "embedding width", [](C& c) -> std::size_t& { return c.model.d_model; });
        size_key("model.n_layers", "decoder layers", [](C& c) -> std::size_t& { return c.model.n_layers; });
        size_key("model.n_heads", "attention heads", [](C& c) -> std::size_t& { return c.model.n_heads; });
        size_key("model.d_ff", "feed-forward width", [](C& c) -> std::size_t& { return c.model.d_ff; });
        size_key("model.max_seq_len", "context length", [](C& c) -> std::size_t& { return c.model.max_seq_len; });
        size_key("model.vocab_size", "vocabulary size (must match the task alphabet)", [](C& c) -> std::size_t& { return c.model.vocab_size; });

        size_key("pretrain.steps", "base pretraining steps", [](C& c) -> std::size_t& { return c.pretrain.steps; });
        real_key("pretrain.lr", "peak Adam learning rate", [](C& c) -> double& { return c.pretrain.lr; });
        size_key("pretrain.batch", "samples per pretraining step", [](C& c) -> std::size_t& { return c.pretrain.batch; });
        size_key("pretrain.warmup", "linear warm-up steps", [](C& c) -> std::size_t& { return c.pretrain.warmup; });
        real_key("pretrain.clip", "gradient-norm clip", [](C& c) -> double& { return c.pretrain.clip; });
        real_key("pretrain.copy_weight", "share of copy warm-up batches", [](C& c) -> double& { return c.pretrain.copy_weight; });
        real_key("pretrain.kv_weight", "share of kv_recall batches", [](C& c) -> double& { return c.pretrain.kv_weight; });
        real_key("pretrain.mod_weight", "share of mod_chain batches", [](C& c) -> double& { return c.pretrain.mod_weight; });
        knobs_key("pretrain.copy_knobs", "copy lengths in the corpus", [](C& c) -> std::vector<int>& { return c.pretrain.copy_knobs; });
        knobs_key("pretrain.kv_knobs", "kv_recall pair counts in the corpus", [](C& c) -> std::vector<int>& { return c.pretrain.kv_knobs; });
        knobs_key("pretrain.mod_knobs", "mod_chain lengths in the corpus", [](C& c) -> std::vector<int>& { return c.pretrain.mod_knobs; });
        k.push_back({"base.checkpoint", "load base weights from this file instead of pretraining (empty: pretrain)",
                     [](const C& c) { return c.base_checkpoint; },
                     [](C& c, const std::string& v) { c.base_checkpoint = v; }});

        k.push_back({"tasks", "fine-tuning task families (mod_chain, kv_recall)",
                     [](const C& c) {
                         std::vector<std::string> s;
                         for (auto f : c.tasks) s.emplace_back(family_name(f));
                         return join(s);
                     },
                     [](C& c, const std::string& v) {
                         c.tasks.clear();
                         for (const auto& s : split_list(v)) c.tasks.push_back(parse_family(s));
                     }});
        size_key("task.train_size", "training samples per family (half easy, half hard)", [](C& c) -> std::size_t& { return c.train_size; });
        size_key("task.eval_size", "evaluation samples per family (half easy, half hard)", [](C& c) -> std::size_t& { return c.eval_size; });
        knobs_key("mod_chain.easy_knobs", "chain lengths of the easy split", [](C& c) -> std::vector<int>& { return c.mod_chain.easy_knobs; });
        knobs_key("mod_chain.hard_knobs", "chain lengths of the hard split", [](C& c) -> std::vector<int>& { return c.mod_chain.hard_knobs; });
        metric_key("mod_chain.metric", "answer-accuracy or token-F1", [](C& c) -> MetricKind& { return c.mod_chain.metric; });
        knobs_key("kv_recall.easy_knobs", "pair counts of the easy split", [](C& c) -> std::vector<int>& { return c.kv_recall.easy_knobs; });
        knobs_key("kv_recall.hard_knobs", "pair counts of the hard split", [](C& c) -> std::vector<int>& { return c.kv_recall.hard_knobs; });
        metric_key("kv_recall.metric", "answer-accuracy or token-F1", [](C& c) -> MetricKind& { return c.kv_recall.metric; });

        k.push_back({"router.labels", "difficulty labels: base (zero-shot base decode) or split (easy/hard split membership)",
                     [](const C& c) { return c.router_labels; },
                     [](C& c, const std::string& v) { c.router_labels = v; }});
        real_key("router.tau", "easy iff metric >= tau; negative selects 1.0 for answer-accuracy, 0.5 for token-F1", [](C& c) -> double& { return c.router_tau; });
        real_key("router.sigma", "std of the Gaussian noise added to standardised embeddings", [](C& c) -> double& { return c.router.sigma; });
        size_key("router.hidden", "router hidden width", [](C& c) -> std::size_t& { return c.router.hidden; });
        size_key("router.epochs", "router training epochs", [](C& c) -> std::size_t& { return c.router.epochs; });
        real_key("router.lr", "router SGD learning rate", [](C& c) -> double& { return c.router.lr; });
        real_key("router.momentum", "router SGD momentum", [](C& c) -> double& { return c.router.momentum; });
        size_key("router.batch", "router minibatch size", [](C& c) -> std::size_t& { return c.router.batch; });
        real_key("router.holdout", "fraction held out for router accuracy", [](C& c) -> double& { return c.router.holdout; });

        k.push_back({"adapter.r_max", "adapter capacity rank", [](const C& c) { return std::to_string(c.r_max); },
                     [](C& c, const std::string& v) { c.r_max = parse_int(v); }});
        real_key("adapter.alpha", "alpha_base; rank r scales by alpha_base / r", [](C& c) -> double& { return c.alpha; });
        real_key("adapter.init_std", "std of the A initialisation (B starts at zero)", [](C& c) -> double& { return c.adapter_init_std; });
        k.push_back({"adapter.targets", "adapted projections (wq, wv)",
                     [](const C& c) {
                         std::vector<std::string> s;
                         for (auto t : c.targets) s.emplace_back(target_name(t));
                         return join(s);
                     },
                     [](C& c, const std::string& v) {
                         c.targets.clear();
                         for (const auto& s : split_list(v)) {
                             if (s == "wq") c.targets.push_back(Target::wq);
                             else if (s == "wv") c.targets.push_back(Target::wv);
                             else throw ConfigError("unknown adapter target '" + s + "'");
                         }
                     }});

        size_key("finetune.steps", "adapter training steps", [](C& c) -> std::size_t& { return c.finetune.steps; });
        real_key("finetune.lr", "adapter SGD learning rate", [](C& c) -> double& { return c.finetune.lr; });
        size_key("finetune.batch", "samples per adapter step", [](C& c) -> std::size_t& { return c.finetune.batch; });
        real_key("finetune.momentum", "SGD momentum", [](C& c) -> double& { return c.finetune.momentum; });
        real_key("finetune.clip", "gradient-norm clip", [](C& c) -> double& { return c.finetune.clip; });

        size_key("eval.batch", "samples per inference batch (one rank draw per batch for random policies)", [](C& c) -> std::size_t& { return c.eval.batch; });
        size_key("eval.max_new", "decode budget in tokens (0: longest gold + 2)", [](C& c) -> std::size_t& { return c.eval.max_new; });
        k.push_back({"policies", "rank policies to compare: lora:R, dylora:LO-HI@R, dylora+:LO-HI, flexi:R1/R2",
                     [](const C& c) { return join(c.policies); },
                     [](C& c, const std::string& v) {
                         c.policies.clear();
                         for (const auto& s : split_list(v)) c.policies.push_back(parse_policy(s).str());
                     }});
        return k;
    }();
    return keys;
}

}  // namespace flexi
