#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flexi/config.hpp"
#include "flexi/persist.hpp"
#include "flexi/records.hpp"
#include "flexi/report.hpp"

namespace flexi {

enum class Stage { base, tasks, labels, router, finetune, eval, report };

inline std::string_view stage_name(Stage s) {
    switch (s) {
        case Stage::base: return "pretrain";
        case Stage::tasks: return "gen-tasks";
        case Stage::labels: return "label";
        case Stage::router: return "train-router";
        case Stage::finetune: return "finetune";
        case Stage::eval: return "eval";
        case Stage::report: return "report";
    }
    return "?";
}

struct RouterInfo {
    double heldout_accuracy = 0;
    std::size_t balanced = 0;  // samples after balancing
    std::size_t easy = 0, hard = 0;  // label counts before balancing
    std::size_t params = 0;
};

struct RunSummary {
    std::vector<ReportRow> rows;
    std::vector<ConsistencyRow> gaps;
    std::map<std::string, RouterInfo> routers;  // by family
    std::optional<Report> report;
};

// Adapters trained with the same behaviour are shared: DyLoRA and DyLoRA+
// over the same range train identically and differ only at inference.
inline std::string training_key(const PolicySpec& p) {
    switch (p.kind) {
        case PolicyKind::fixed: return "lora_" + std::to_string(p.rank);
        case PolicyKind::dylora:
        case PolicyKind::dylora_plus: return "random_" + std::to_string(p.lo) + "-" + std::to_string(p.hi);
        case PolicyKind::flexi: {
            std::string s = "flexi";
            for (int r : p.rank_set) s += "_" + std::to_string(r);
            return s;
        }
    }
    return "?";
}

inline std::string file_token(const std::string& descriptor) {
    std::string s;
    for (char c : descriptor) {
        if (c == ':') s += '_';
        else if (c == '/') s += '-';
        else if (c == '@') s += "_at";
        else if (c == '+') s += "plus";
        else s += c;
    }
    return s;
}

// Stage-by-stage pipeline over a run directory. Every artifact is written
// next to a ".stage" file holding the hash of the configuration slice it was
// built from; a later run reuses it when the hash matches and refuses when it
// does not.
template <Real T>
class Experiment {
public:
    Experiment(ExperimentConfig cfg, std::ostream& log = std::cerr) : cfg_(std::move(cfg)), log_(log) {
        cfg_.validate();
        if (precision_of<T> != cfg_.precision) throw ConfigError("experiment precision does not match the config");
    }

    const ExperimentConfig& config() const { return cfg_; }
    std::filesystem::path dir() const { return cfg_.out; }

    // ---- stages -------------------------------------------------------------

    const TransformerWeights<T>& base() {
        if (base_) return *base_;
        guarded(Stage::base, [&] {
            if (!cfg_.base_checkpoint.empty()) {
                base_ = base_from_checkpoint(load_checkpoint<T>(cfg_.base_checkpoint));
                if (!(base_->config == cfg_.model))
                    throw ConfigError("base.checkpoint " + cfg_.base_checkpoint + " does not match the model.* settings");
                return;
            }
            const auto path = artifact("base.flxl");
            const auto hash = cfg_.stage_hash("base");
            if (cached(path, hash, Stage::base)) {
                base_ = base_from_checkpoint(load_checkpoint<T>(path.string()));
                return;
            }
            log_ << "[pretrain] " << cfg_.pretrain.steps << " steps, seed " << cfg_.seed << "\n";
            auto res = pretrain_base<T>(cfg_.model, cfg_.pretrain, cfg_.seed, [&](std::size_t step, double loss) {
                if ((step + 1) % 500 == 0) log_ << "[pretrain] step " << step + 1 << " loss " << loss << "\n";
            });
            save_checkpoint(to_checkpoint(res.weights), path.string());
            mark(path, hash);
            base_ = std::move(res.weights);
        });
        return *base_;
    }

    const std::vector<Sample>& dataset(Family f, const std::string& split) {
        const auto key = std::string(family_name(f)) + "." + split;
        if (auto it = data_.find(key); it != data_.end()) return it->second;
        guarded(Stage::tasks, [&] {
            const auto path = artifact("data/" + key + ".jsonl");
            const auto hash = sha256_hex(cfg_.stage_hash("tasks") + key);
            if (cached(path, hash, Stage::tasks)) {
                data_[key] = read_dataset(path.string());
                return;
            }
            const auto spec = cfg_.task_spec(f);
            auto samples = make_split(spec, split, split == "train" ? spec.train_size : spec.eval_size);
            write_dataset(path.string(), samples);
            mark(path, hash);
            data_[key] = std::move(samples);
        });
        return data_.at(key);
    }

    const std::vector<DifficultyLabel>& labels(Family f) {
        const auto key = std::string(family_name(f));
        if (auto it = labels_.find(key); it != labels_.end()) return it->second;
        const auto& train = dataset(f, "train");
        guarded(Stage::labels, [&] {
            const auto path = artifact("labels/" + key + ".jsonl");
            const auto hash = sha256_hex(cfg_.stage_hash("labels") + key);
            if (cached(path, hash, Stage::labels)) {
                labels_[key] = read_labels(path.string());
                return;
            }
            const auto metric = cfg_.task_config(f).metric;
            std::vector<DifficultyLabel> labels;
            if (cfg_.router_labels == "split") {
                for (std::size_t i = 0; i < train.size(); ++i)
                    labels.push_back({i, train[i].hard ? Difficulty::hard : Difficulty::easy, train[i].hard ? 0.0 : 1.0, metric});
            } else {
                log_ << "[label] " << key << ": zero-shot decode of " << train.size() << " samples\n";
                std::size_t max_new = 0;
                for (const auto& s : train) max_new = std::max(max_new, s.gold.size() + 2);
                labels = label_difficulty(base(), task_tokenizer(), train, metric, cfg_.tau_for(metric), max_new,
                                          cfg_.threads);
            }
            write_labels(path.string(), labels);
            mark(path, hash);
            labels_[key] = std::move(labels);
        });
        return labels_.at(key);
    }

    const RouterWeights<T>& router(Family f, const std::vector<int>& class_ranks) {
        std::string key = std::string(family_name(f));
        for (int r : class_ranks) key += "_" + std::to_string(r);
        if (auto it = routers_.find(key); it != routers_.end()) return it->second;
        const auto& labs = labels(f);
        const auto& train = dataset(f, "train");
        guarded(Stage::router, [&] {
            const auto path = artifact("router/" + key + ".flxl");
            const auto info_path = artifact("router/" + key + ".json");
            const auto hash = sha256_hex(cfg_.stage_hash("router") + key);
            if (cached(path, hash, Stage::router)) {
                routers_[key] = router_from_checkpoint(load_checkpoint<T>(path.string()));
                const auto j = read_json(info_path.string());
                RouterInfo info;
                info.heldout_accuracy = j.at("heldout_accuracy").template get<double>();
                info.balanced = j.at("balanced").template get<std::size_t>();
                info.easy = j.at("easy").template get<std::size_t>();
                info.hard = j.at("hard").template get<std::size_t>();
                info.params = routers_[key].param_count();
                router_info_[std::string(family_name(f))] = info;
                return;
            }
            RouterInfo info;
            for (const auto& l : labs) (l.label == Difficulty::easy ? info.easy : info.hard)++;
            const auto balanced = balance_classes(labs, cfg_.seed);
            info.balanced = balanced.size();
            std::vector<Sample> subset;
            std::vector<int> y;
            for (const auto& l : balanced) {
                subset.push_back(train.at(l.sample_id));
                y.push_back(l.label == Difficulty::hard ? 1 : 0);
            }
            const auto h = pooled_embeddings(base(), task_tokenizer(), subset);
            auto res = train_router(h, y, class_ranks, cfg_.router, cfg_.seed);
            info.heldout_accuracy = res.heldout_accuracy;
            info.params = res.router.param_count();
            log_ << "[train-router] " << key << ": " << info.easy << " easy / " << info.hard << " hard labels, "
                 << info.balanced << " balanced, held-out accuracy " << info.heldout_accuracy << "\n";
            save_checkpoint(to_checkpoint(res.router), path.string());
            write_json(info_path.string(), Json{{"heldout_accuracy", info.heldout_accuracy},
                                                {"balanced", info.balanced},
                                                {"easy", info.easy},
                                                {"hard", info.hard},
                                                {"loss", res.loss_trace}});
            mark(path, hash);
            routers_[key] = std::move(res.router);
            router_info_[std::string(family_name(f))] = info;
        });
        return routers_.at(key);
    }

    RankPolicy<T> policy(Family f, const PolicySpec& spec) {
        RankPolicy<T> p{spec, nullptr};
        if (spec.kind == PolicyKind::flexi) p.router = std::make_shared<RouterWeights<T>>(router(f, spec.rank_set));
        return p;
    }

    const AdapterSet<T>& adapters(Family f, const PolicySpec& spec) {
        const auto key = std::string(family_name(f)) + "." + training_key(spec);
        if (auto it = adapters_.find(key); it != adapters_.end()) return it->second;
        const auto& train = dataset(f, "train");
        auto pol = policy(f, spec);
        // Random-rank policies train the same way whatever their inference column.
        if (spec.kind == PolicyKind::dylora) pol.spec = PolicySpec::dylora_plus(spec.lo, spec.hi);
        guarded(Stage::finetune, [&] {
            const auto path = artifact("adapters/" + key + ".flxl");
            const auto rep_path = artifact("finetune/" + key + ".json");
            const auto hash = sha256_hex(cfg_.stage_hash("finetune") + key);
            if (cached(path, hash, Stage::finetune)) {
                adapters_[key] = adapters_from_checkpoint(load_checkpoint<T>(path.string()));
                return;
            }
            RngStream init_rng(cfg_.seed, "adapters.init");
            auto ad = AdapterSet<T>::init(cfg_.model.n_layers, cfg_.model.d_model, cfg_.targets, cfg_.r_max, cfg_.alpha,
                                          cfg_.adapter_init_std, init_rng);
            const auto& b = base();
            const auto before = b.content_hash();
            log_ << "[finetune] " << key << ": " << cfg_.finetune.steps << " steps\n";
            auto rep = finetune(b, ad, pol, train, cfg_.finetune, cfg_.seed);
            if (b.content_hash() != before) throw GraphError("base weights changed during fine-tuning");
            rep.adapter_ref = path.filename().string();
            save_checkpoint(to_checkpoint(ad), path.string());
            write_json(rep_path.string(), finetune_json(rep));
            mark(path, hash);
            adapters_[key] = std::move(ad);
        });
        return adapters_.at(key);
    }

    const EvalSummary& evaluation(Family f, const PolicySpec& spec) {
        const auto key = std::string(family_name(f)) + "." + file_token(spec.str());
        if (auto it = evals_.find(key); it != evals_.end()) return it->second;
        const auto path = artifact("eval/" + key + ".json");
        const auto hash = sha256_hex(cfg_.stage_hash("eval") + key);
        bool hit = false;
        guarded(Stage::eval, [&] {
            hit = cached(path, hash, Stage::eval);
            if (hit) evals_[key] = eval_from_json(read_json(path.string()), path.string());
        });
        if (hit) return evals_.at(key);
        const auto& ad = adapters(f, spec);
        const auto& data = dataset(f, "eval");
        auto pol = policy(f, spec);
        guarded(Stage::eval, [&] {
            auto ec = cfg_.eval;
            ec.threads = cfg_.threads;
            auto s = evaluate(base(), ad, pol, data, cfg_.task_config(f).metric, ec, cfg_.seed);
            log_ << "[eval] " << key << ": " << metric_name(s.metric) << " " << s.mean << "\n";
            write_json(path.string(), eval_json(s));
            mark(path, hash);
            evals_[key] = std::move(s);
        });
        return evals_.at(key);
    }

    // Runs every stage up to `until` for all configured tasks and policies.
    RunSummary run(Stage until = Stage::report) {
        RunSummary out;
        std::filesystem::create_directories(dir());
        detail::write_text((dir() / "config.txt").string(), cfg_.dump());
        base();
        if (until == Stage::base) return out;
        const auto specs = cfg_.policy_specs();
        bool any_flexi = false;
        for (const auto& s : specs) any_flexi |= s.kind == PolicyKind::flexi;
        for (Family f : cfg_.tasks) {
            dataset(f, "train");
            dataset(f, "eval");
            if (until == Stage::tasks) continue;
            if (until == Stage::labels || any_flexi) labels(f);
            if (until == Stage::labels) continue;
            for (const auto& s : specs)
                if (s.kind == PolicyKind::flexi) router(f, s.rank_set);
            if (until == Stage::router) {
                if (!any_flexi) router(f, {2, 8});
                continue;
            }
            for (const auto& s : specs) adapters(f, s);
            if (until == Stage::finetune) continue;
            for (const auto& s : specs) out.rows.push_back({std::string(family_name(f)), s, evaluation(f, s)});
            // One consistency row per random-rank adapter set: the training-consistent
            // random inference against fixed-rank inference on the same adapters.
            std::map<std::string, PolicySpec> fixed_col;
            for (const auto& s : specs) {
                if (s.kind == PolicyKind::dylora) fixed_col.try_emplace(training_key(s), s);
                if (s.kind == PolicyKind::dylora_plus)
                    fixed_col.try_emplace(training_key(s), PolicySpec::dylora(s.lo, s.hi, s.hi));
            }
            for (const auto& [key, fixed] : fixed_col) {
                const auto consistent = PolicySpec::dylora_plus(fixed.lo, fixed.hi);
                const auto& native = evaluation(f, consistent);
                const auto& mismatch = evaluation(f, fixed);
                out.gaps.push_back({std::string(family_name(f)),
                                    "random " + std::to_string(fixed.lo) + "-" + std::to_string(fixed.hi),
                                    consistent.label(), fixed.label(), native.mean, mismatch.mean});
            }
        }
        out.routers = router_info_;
        if (until != Stage::report) return out;
        guarded(Stage::report, [&] {
            std::size_t router_params = 0;
            for (const auto& [f, info] : router_info_) router_params = std::max(router_params, info.params);
            out.report = emit_report(out.rows, out.gaps, router_params);
            detail::write_text((dir() / "report.csv").string(), out.report->csv);
            detail::write_text((dir() / "report.txt").string(), out.report->text);
            detail::write_text((dir() / "pareto.csv").string(), out.report->pareto);
            detail::write_text((dir() / "consistency.csv").string(), out.report->consistency);
        });
        return out;
    }

private:
    template <typename Fn>
    void guarded(Stage s, Fn&& fn) {
        try {
            fn();
        } catch (const ConfigError&) {
            throw;
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(std::string(stage_name(s)), cfg_.seed, e.what());
        }
    }

    std::filesystem::path artifact(const std::string& rel) const {
        auto p = dir() / rel;
        std::filesystem::create_directories(p.parent_path());
        return p;
    }

    bool cached(const std::filesystem::path& path, const std::string& hash, Stage s) const {
        if (!std::filesystem::exists(path)) return false;
        const auto stamp = path.string() + ".stage";
        std::string recorded;
        if (std::filesystem::exists(stamp)) {
            recorded = read_file(stamp);
            while (!recorded.empty() && (recorded.back() == '\n' || recorded.back() == '\r')) recorded.pop_back();
        }
        if (recorded != hash)
            throw StageError(std::string(stage_name(s)), cfg_.seed,
                             "stale artifact " + path.string() +
                                 " was built from a different configuration; remove it or use another output directory");
        return true;
    }

    static void mark(const std::filesystem::path& path, const std::string& hash) {
        detail::write_text(path.string() + ".stage", hash + "\n");
    }

    ExperimentConfig cfg_;
    std::ostream& log_;
    std::optional<TransformerWeights<T>> base_;
    std::map<std::string, std::vector<Sample>> data_;
    std::map<std::string, std::vector<DifficultyLabel>> labels_;
    std::map<std::string, RouterWeights<T>> routers_;
    std::map<std::string, RouterInfo> router_info_;
    std::map<std::string, AdapterSet<T>> adapters_;
    std::map<std::string, EvalSummary> evals_;
};

}  // namespace flexi
