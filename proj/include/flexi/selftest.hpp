#pragma once

#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "flexi/experiment.hpp"
#include "flexi/grad_check.hpp"

namespace flexi {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0;
};

namespace selftest {

inline std::string sci(double v) {
    std::ostringstream s;
    s.precision(2);
    s << std::scientific << v;
    return s.str();
}

// A model small enough for finite differences and for full pipeline runs in seconds.
inline ModelConfig tiny_model() {
    ModelConfig c;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 16;
    c.max_seq_len = 96;
    return c;
}

inline ModelConfig small_model() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 96;
    return c;
}

template <Real T>
TransformerWeights<T> frozen_base(const ModelConfig& c, std::uint64_t seed) {
    auto w = TransformerWeights<T>::init(c, seed);
    w.set_frozen(true);
    return w;
}

// Adapters with a nonzero B so that every parameter influences the loss.
template <Real T>
AdapterSet<T> random_adapters(const ModelConfig& c, int r_max, std::uint64_t seed, double b_std) {
    RngStream rng(seed, "selftest.adapters");
    auto a = AdapterSet<T>::init(c.n_layers, c.d_model, {Target::wq, Target::wv}, r_max, 16.0, 0.3, rng);
    for (auto& p : a.pairs)
        for (auto& v : p.B.data()) v = static_cast<T>(rng.normal() * b_std);
    return a;
}

// ---- gradients ------------------------------------------------------------------

inline double primitive_grad_error(std::uint64_t seed) {
    RngStream rng(seed, "selftest.prims");
    auto rnd = [&](Shape s) { return Tensor<double>::randn(std::move(s), 1.0, rng, true); };
    auto a = rnd({3, 4}), b = rnd({3, 4}), w = rnd({5, 4}), bias = rnd({4}), c = rnd({3, 2});
    auto table = rnd({6, 3}), h = rnd({6, 3});
    auto x = rnd({4, 6}), gamma = rnd({6}), beta = rnd({6});
    auto proj = Tensor<double>::randn({4, 6}, 1.0, rng);
    auto q = rnd({6, 4}), k = rnd({6, 4}), v = rnd({6, 4});
    auto mix = Tensor<double>::randn({6, 4}, 1.0, rng);
    auto sq = [](Graph<double>& g, Tensor<double> t) { return g.sum(g.mul(t, t)); };
    double worst = 0;
    auto check = [&](const LossFn& f, std::vector<Tensor<double>> ps) {
        worst = std::max(worst, grad_check(f, std::move(ps)).max_rel_error);
    };
    check([&](Graph<double>& g) { return sq(g, g.add(a, b)); }, {a, b});
    check([&](Graph<double>& g) { return sq(g, g.add_bias(a, bias)); }, {a, bias});
    check([&](Graph<double>& g) { return sq(g, g.scale(a, 0.7)); }, {a});
    check([&](Graph<double>& g) { return g.sum(g.mul(a, b)); }, {a, b});
    check([&](Graph<double>& g) { return sq(g, g.matmul(a, g.reshape(w, {4, 5}))); }, {a, w});
    check([&](Graph<double>& g) { return sq(g, g.linear(a, w)); }, {a, w});
    check([&](Graph<double>& g) { return sq(g, g.concat(a, c)); }, {a, c});
    check([&](Graph<double>& g) { return g.sum(g.mul(g.relu(a), b)); }, {a});
    check([&](Graph<double>& g) { return sq(g, g.embedding(table, {0, 5, 5, 2})); }, {table});
    check([&](Graph<double>& g) { return sq(g, g.mean_pool(h, {1, 1, 0, 1, 0, 0}, 2, 3)); }, {h});
    check([&](Graph<double>& g) { return g.sum(g.mul(g.softmax(x), proj)); }, {x});
    check([&](Graph<double>& g) { return g.sum(g.mul(g.layer_norm(x, gamma, beta), proj)); }, {x, gamma, beta});
    check([&](Graph<double>& g) { return g.cross_entropy(x, {1, kIgnore, 5, 0}); }, {x});
    check([&](Graph<double>& g) { return g.sum(g.mul(g.causal_attention(q, k, v, 2, 3, 2), mix)); }, {q, k, v});
    return worst;
}

inline double adapter_loss_grad_error(std::uint64_t seed) {
    const auto cfg = tiny_model();
    const auto base = frozen_base<double>(cfg, seed);
    auto ad = random_adapters<double>(cfg, 4, seed, 0.1);
    RngStream rng(seed, "selftest.adapter_grad");
    const auto samples = generate(Family::mod_chain, {1, 2}, 3, rng);
    const auto batch = make_batch(task_tokenizer(), samples);
    RankAssignment ra{{1, 4, 3}, Phase::train, "selftest"};
    std::vector<Tensor<double>> params;
    for (auto& p : ad.pairs) {
        params.push_back(p.A);
        params.push_back(p.B);
    }
    auto f = [&](Graph<double>& g) { return task_loss(g, base, batch, {&ad, &ra}); };
    return grad_check(f, params).max_rel_error;
}

inline double router_loss_grad_error(std::uint64_t seed) {
    auto r = RouterWeights<double>::init(8, 6, {2, 8}, 0.0, seed);
    RngStream rng(seed, "selftest.router_grad");
    r.b1 = Tensor<double>::randn({6}, 0.5, rng, true);
    auto h = Tensor<double>::randn({5, 8}, 1.0, rng);
    std::vector<int> y{0, 1, 1, 0, 1};
    auto f = [&](Graph<double>& g) { return g.cross_entropy(router_logits(g, r, h), y); };
    return grad_check(f, r.params()).max_rel_error;
}

// ---- truncation -----------------------------------------------------------------

// Reference: each sample's rows through its own rank-r slice, computed directly with Eigen.
inline RowMat<float> sliced_reference(const Tensor<float>& x, const Tensor<float>& w, LoraPair<float>& pair,
                                      const std::vector<int>& ranks, std::size_t seq) {
    const auto d_in = static_cast<Eigen::Index>(x.dim(1));
    const auto d_out = static_cast<Eigen::Index>(w.dim(0));
    Eigen::Map<const RowMat<float>> X(x.data().data(), static_cast<Eigen::Index>(x.dim(0)), d_in);
    Eigen::Map<const RowMat<float>> W(w.data().data(), d_out, d_in);
    RowMat<float> out(X.rows(), d_out);
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        const auto rows = X.middleRows(static_cast<Eigen::Index>(i * seq), static_cast<Eigen::Index>(seq));
        auto v = truncate_view(pair, ranks[i]);
        const float alpha = static_cast<float>(alpha_of(pair, ranks[i]));
        out.middleRows(static_cast<Eigen::Index>(i * seq), static_cast<Eigen::Index>(seq)) =
            rows * W.transpose() + alpha * ((rows * v.A.transpose()) * v.B.transpose());
    }
    return out;
}

inline double truncation_error(std::uint64_t seed, std::size_t batches) {
    RngStream rng(seed, "selftest.truncation");
    const int choices[] = {1, 2, 4, 8};
    double worst = 0;
    for (std::size_t b = 0; b < batches; ++b) {
        const std::size_t n = 1 + rng.below(6), seq = 1 + rng.below(5), d_in = 4 + rng.below(12),
                          d_out = 4 + rng.below(12);
        // Adapter scale of a trained run; the delta stays comparable to the base output.
        auto pair = LoraPair<float>::init(0, Target::wq, d_in, d_out, 8, 16.0, 0.1, rng);
        for (auto& v : pair.B.data()) v = static_cast<float>(rng.normal() * 0.1);
        auto x = Tensor<float>::randn({n * seq, d_in}, 1.0f, rng);
        auto w = Tensor<float>::randn({d_out, d_in}, 0.3f, rng);
        RankAssignment ra;
        for (std::size_t i = 0; i < n; ++i) ra.ranks.push_back(choices[rng.below(4)]);
        Graph<float> g(GradMode::off);
        auto out = lora_forward(g, x, w, pair, ra);
        const auto ref = sliced_reference(x, w, pair, ra.ranks, seq);
        for (Eigen::Index i = 0; i < ref.size(); ++i) {
            const double got = out[static_cast<std::size_t>(i)], want = ref.data()[i];
            worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
        }
    }
    return worst;
}

// Largest output change after overwriting every A row / B column beyond the batch's largest rank.
inline double tail_perturbation_change(std::uint64_t seed) {
    RngStream rng(seed, "selftest.tail");
    auto pair = LoraPair<float>::init(0, Target::wv, 12, 10, 8, 16.0, 0.3, rng);
    for (auto& v : pair.B.data()) v = static_cast<float>(rng.normal() * 0.3);
    auto x = Tensor<float>::randn({4 * 3, 12}, 1.0f, rng);
    auto w = Tensor<float>::randn({10, 12}, 0.3f, rng);
    RankAssignment ra{{1, 4, 2, 4}, Phase::inference, "selftest"};
    auto run = [&] {
        Graph<float> g(GradMode::off);
        return lora_forward(g, x, w, pair, ra).clone();
    };
    const auto before = run();
    for (std::size_t j = 4; j < 8; ++j) {
        for (std::size_t c = 0; c < 12; ++c) pair.A[j * 12 + c] = 1e3f;
        for (std::size_t r = 0; r < 10; ++r) pair.B[r * 8 + j] = -1e3f;
    }
    const auto after = run();
    double worst = 0;
    for (std::size_t i = 0; i < before.numel(); ++i)
        worst = std::max(worst, static_cast<double>(std::abs(after[i] - before[i])));
    return worst;
}

// ---- frozen base, zero init ------------------------------------------------------

inline std::vector<Sample> tiny_data(std::uint64_t seed, std::size_t n) {
    TaskSpec spec;
    spec.seed = seed;
    spec.easy_knobs = {1};
    spec.hard_knobs = {3, 4};
    return make_split(spec, "train", n);
}

inline bool zero_init_bit_exact(std::uint64_t seed) {
    const auto cfg = tiny_model();
    const auto base = frozen_base<double>(cfg, seed);
    RngStream rng(seed, "adapters.init");
    const auto ad = AdapterSet<double>::init(cfg.n_layers, cfg.d_model, {Target::wq, Target::wv}, 8, 16.0, 0.02, rng);
    const auto batch = make_batch(task_tokenizer(), tiny_data(seed, 6));
    RankAssignment ra{{1, 8, 2, 4, 8, 3}, Phase::inference, "selftest"};
    Graph<double> g1(GradMode::off), g2(GradMode::off);
    const auto plain = forward_base(g1, base, batch);
    const auto adapted = forward(g2, base, batch, {&ad, &ra});
    return std::equal(plain.data().begin(), plain.data().end(), adapted.data().begin(), adapted.data().end());
}

// Runs every policy kind on a frozen base; returns the policies that altered it.
inline std::string base_mutations(std::uint64_t seed) {
    const auto cfg = tiny_model();
    const auto base = frozen_base<float>(cfg, seed);
    const auto before = base.content_hash();
    const auto data = tiny_data(seed, 16);
    FinetuneConfig fc;
    fc.steps = 4;
    fc.batch = 8;
    auto router = std::make_shared<RouterWeights<float>>(RouterWeights<float>::init(cfg.d_model, 8, {2, 8}, 0.1, seed));
    std::string changed;
    for (const auto& spec : {PolicySpec::fixed(4), PolicySpec::dylora(1, 8, 8), PolicySpec::dylora_plus(1, 8),
                             PolicySpec::flexi({2, 8})}) {
        RngStream rng(seed, "adapters.init");
        auto ad = AdapterSet<float>::init(cfg.n_layers, cfg.d_model, {Target::wq, Target::wv}, 8, 16.0, 0.02, rng);
        finetune(base, ad, RankPolicy<float>{spec, spec.kind == PolicyKind::flexi ? router : nullptr}, data, fc, seed);
        if (base.content_hash() != before) changed += (changed.empty() ? "" : ",") + spec.str();
    }
    return changed;
}

// ---- policy equivalence ----------------------------------------------------------

template <Real T>
std::string adapter_bytes(const AdapterSet<T>& a) {
    return encode_checkpoint(to_checkpoint(a));
}

// Flexi under a router that always picks class c against Fixed(class_ranks[c]).
inline std::string constant_router_mismatch(std::uint64_t seed) {
    const auto cfg = tiny_model();
    const auto base = frozen_base<float>(cfg, seed);
    const auto train = tiny_data(seed, 24);
    auto eval_spec = TaskSpec{};
    eval_spec.seed = seed;
    eval_spec.easy_knobs = {1};
    eval_spec.hard_knobs = {3, 4};
    const auto eval = make_split(eval_spec, "eval", 12);
    FinetuneConfig fc;
    fc.steps = 6;
    fc.batch = 8;
    EvalConfig ec;
    ec.batch = 5;
    const std::vector<int> ranks{2, 8};
    for (std::size_t c = 0; c < ranks.size(); ++c) {
        auto run = [&](const RankPolicy<float>& pol) {
            RngStream rng(seed, "adapters.init");
            auto ad = AdapterSet<float>::init(cfg.n_layers, cfg.d_model, {Target::wq, Target::wv}, 8, 16.0, 0.02, rng);
            auto rep = finetune(base, ad, pol, train, fc, seed);
            auto ev = evaluate(base, ad, pol, eval, MetricKind::answer_accuracy, ec, seed);
            return std::tuple{rep.loss_trace, adapter_bytes(ad), ev.scores, ev.predictions, ev.ranks, ev.mean};
        };
        auto router = std::make_shared<RouterWeights<float>>(RouterWeights<float>::constant(cfg.d_model, 4, ranks, c));
        const auto fixed = run({PolicySpec::fixed(ranks[c]), nullptr});
        const auto flexi = run({PolicySpec::flexi(ranks), router});
        if (std::get<0>(fixed) != std::get<0>(flexi)) return "loss traces differ at rank " + std::to_string(ranks[c]);
        if (std::get<1>(fixed) != std::get<1>(flexi)) return "adapters differ at rank " + std::to_string(ranks[c]);
        if (std::get<2>(fixed) != std::get<2>(flexi) || std::get<3>(fixed) != std::get<3>(flexi) ||
            std::get<4>(fixed) != std::get<4>(flexi) || std::get<5>(fixed) != std::get<5>(flexi))
            return "evaluation differs at rank " + std::to_string(ranks[c]);
    }
    return {};
}

// ---- persistence, determinism ----------------------------------------------------

template <Real T>
std::string checkpoint_roundtrip_failure(std::uint64_t seed) {
    const auto cfg = tiny_model();
    const auto base = frozen_base<T>(cfg, seed);
    const auto ad = random_adapters<T>(cfg, 8, seed, 0.1);
    const auto router = RouterWeights<T>::init(cfg.d_model, 8, {2, 8}, 0.1, seed);
    auto same = [](const std::vector<std::pair<std::string, Tensor<T>>>& x,
                   const std::vector<std::pair<std::string, Tensor<T>>>& y) {
        if (x.size() != y.size()) return false;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (x[i].first != y[i].first || x[i].second.shape() != y[i].second.shape()) return false;
            if (std::memcmp(x[i].second.data().data(), y[i].second.data().data(), x[i].second.numel() * sizeof(T)))
                return false;
        }
        return true;
    };
    const auto b1 = encode_checkpoint(to_checkpoint(base));
    const auto b2 = base_from_checkpoint(decode_checkpoint<T>(b1));
    if (!same(base.named(), b2.named()) || encode_checkpoint(to_checkpoint(b2)) != b1) return "base weights";
    const auto a1 = encode_checkpoint(to_checkpoint(ad));
    const auto a2 = adapters_from_checkpoint(decode_checkpoint<T>(a1));
    if (!same(ad.named(), a2.named()) || encode_checkpoint(to_checkpoint(a2)) != a1) return "adapters";
    const auto r1 = encode_checkpoint(to_checkpoint(router));
    const auto r2 = router_from_checkpoint(decode_checkpoint<T>(r1));
    if (!same(router.named(), r2.named()) || r2.class_ranks != router.class_ranks || r2.sigma != router.sigma ||
        encode_checkpoint(to_checkpoint(r2)) != r1)
        return "router";
    Checkpoint<T> empty;
    if (!decode_checkpoint<T>(encode_checkpoint(empty)).tensors.empty()) return "empty checkpoint";
    return {};
}

// A full pipeline on a small model in a scratch directory.
inline ExperimentConfig tiny_pipeline(const std::filesystem::path& out, std::size_t threads) {
    ExperimentConfig c;
    c.out = out.string();
    c.threads = threads;
    c.model = small_model();
    c.pretrain.steps = 30;
    c.pretrain.batch = 8;
    c.train_size = 48;
    c.eval_size = 30;
    c.router_labels = "split";
    c.router.epochs = 5;
    c.finetune.steps = 8;
    c.finetune.batch = 8;
    c.eval.batch = 7;
    return c;
}

inline std::string read_reports(const std::filesystem::path& dir) {
    std::string all;
    for (const char* f : {"report.csv", "report.txt", "pareto.csv", "consistency.csv"}) all += read_file((dir / f).string());
    return all;
}

// Empty when two runs (one threaded), and a cached rerun, give byte-identical reports.
inline std::string determinism_failure(const std::filesystem::path& scratch) {
    std::filesystem::remove_all(scratch);
    std::ostringstream quiet;
    Experiment<float>(tiny_pipeline(scratch / "a", 1), quiet).run();
    Experiment<float>(tiny_pipeline(scratch / "b", 3), quiet).run();
    const auto a = read_reports(scratch / "a");
    if (a != read_reports(scratch / "b")) return "reports differ between --threads 1 and 3";
    Experiment<float>(tiny_pipeline(scratch / "a", 2), quiet).run();
    if (a != read_reports(scratch / "a")) return "cached rerun changed the report";
    std::filesystem::remove_all(scratch);
    return {};
}

// ---- tasks -----------------------------------------------------------------------

// Independent solvers that parse the prompt text.
inline std::string solve_mod_chain(const std::string& prompt) {
    int acc = prompt.at(0) - '0';
    for (std::size_t i = 1; i + 1 < prompt.size() && prompt[i] != '='; i += 2) {
        const int a = prompt.at(i + 1) - '0';
        switch (prompt[i]) {
            case '+': acc = (acc + a) % 10; break;
            case '-': acc = ((acc - a) % 10 + 10) % 10; break;
            case '*': acc = (acc * a) % 10; break;
            default: return "?";
        }
    }
    return std::to_string(acc);
}

inline std::string solve_kv_recall(const std::string& prompt) {
    const auto q = prompt.find('?');
    const char key = prompt.at(q + 1);
    std::istringstream pairs(prompt.substr(0, q));
    for (std::string item; pairs >> item;)
        if (item.size() == 4 && item[0] == key && item[1] == ':') return item.substr(2);
    return "?";
}

inline std::string task_oracle_failure(std::uint64_t seed) {
    RngStream rng(seed, "selftest.tasks");
    for (int k = 1; k <= kChainMaxLength; ++k)
        for (const auto& s : generate(Family::mod_chain, {k}, 200, rng))
            if (solve_mod_chain(s.prompt) != s.gold) return "mod_chain " + s.prompt + " -> " + s.gold;
    for (int k = 1; k <= kKvMaxPairs; ++k)
        for (const auto& s : generate(Family::kv_recall, {k}, 200, rng))
            if (solve_kv_recall(s.prompt) != s.gold) return "kv_recall " + s.prompt + " -> " + s.gold;
    return {};
}

// ---- router ----------------------------------------------------------------------

// Two Gaussian clusters in 64 dimensions, centers 10 apart, std 0.1; router trained with sigma = 0.
inline double cluster_router_accuracy(std::uint64_t seed, bool shuffle_labels) {
    RngStream rng(seed, "selftest.clusters");
    const std::size_t n = 400, d = 64;
    std::vector<double> c0(d), dir(d);
    double norm = 0;
    for (std::size_t j = 0; j < d; ++j) {
        c0[j] = rng.normal();
        dir[j] = rng.normal();
        norm += dir[j] * dir[j];
    }
    for (auto& v : dir) v *= 10.0 / std::sqrt(norm);
    Tensor<float> h = Tensor<float>::zeros({n, d});
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(i % 2);
        for (std::size_t j = 0; j < d; ++j)
            h[i * d + j] = static_cast<float>(c0[j] + (y[i] ? dir[j] : 0.0) + rng.normal() * 0.1);
    }
    if (shuffle_labels) rng.shuffle(std::span<int>(y));
    RouterTrainConfig cfg;
    cfg.sigma = 0;
    return train_router(h, y, {2, 8}, cfg, seed).heldout_accuracy;
}

}  // namespace selftest

struct NamedCheck {
    std::string name;
    std::string what;
    std::function<CheckResult()> run;
};

inline std::vector<NamedCheck> selftest_checks(std::filesystem::path scratch = {}) {
    using namespace selftest;
    if (scratch.empty()) scratch = std::filesystem::temp_directory_path() / "flexilora-selftest";
    auto result = [](std::string name, bool ok, std::string detail) {
        return CheckResult{std::move(name), ok, std::move(detail), 0};
    };
    std::vector<NamedCheck> out;
    out.push_back({"grad-primitives", "64-bit finite differences on every primitive, 3 seeds, <= 1e-6", [=] {
                       double e = 0;
                       for (std::uint64_t s : {1, 2, 3}) e = std::max(e, primitive_grad_error(s));
                       return result("grad-primitives", e <= 1e-6, "max rel err " + sci(e));
                   }});
    out.push_back({"grad-adapter-loss", "adapter-augmented task loss, mixed ranks, 3 seeds, <= 1e-4", [=] {
                       double e = 0;
                       for (std::uint64_t s : {1, 2, 3}) e = std::max(e, adapter_loss_grad_error(s));
                       return result("grad-adapter-loss", e <= 1e-4, "max rel err " + sci(e));
                   }});
    out.push_back({"grad-router-loss", "router cross-entropy with sigma = 0, 3 seeds, <= 1e-4", [=] {
                       double e = 0;
                       for (std::uint64_t s : {1, 2, 3}) e = std::max(e, router_loss_grad_error(s));
                       return result("grad-router-loss", e <= 1e-4, "max rel err " + sci(e));
                   }});
    out.push_back({"truncation", "masked batch forward equals per-sample slices (32-bit, 100 batches, <= 1e-6)", [=] {
                       const double e = truncation_error(7, 100);
                       return result("truncation", e <= 1e-6, "max rel err " + sci(e));
                   }});
    out.push_back({"tail-perturbation", "A rows / B columns beyond the rank leave outputs unchanged", [=] {
                       const double e = tail_perturbation_change(11);
                       return result("tail-perturbation", e == 0, "max change " + sci(e));
                   }});
    out.push_back({"frozen-base", "fine-tuning leaves the base weight hash unchanged", [=] {
                       const auto changed = base_mutations(5);
                       return result("frozen-base", changed.empty(), changed.empty() ? "hash unchanged" : "changed by " + changed);
                   }});
    out.push_back({"zero-init", "zero-B adapters reproduce the base forward bit-exactly (64-bit)", [=] {
                       bool ok = true;
                       for (std::uint64_t s : {1, 2, 3}) ok = ok && zero_init_bit_exact(s);
                       return result("zero-init", ok, ok ? "bit-exact" : "logits differ");
                   }});
    out.push_back({"param-accounting", "count_params(8) = 2 count_params(4); 50/50 {2,8} expectation = 5120", [=] {
                       const ModelConfig m;
                       const std::vector<TargetShape> t{{Target::wq, m.d_model, m.d_model},
                                                        {Target::wv, m.d_model, m.d_model}};
                       const auto c4 = count_params(m.n_layers, t, 4), c8 = count_params(m.n_layers, t, 8);
                       const double e = expected_active_params(m.n_layers, t, {{2, 0.5}, {8, 0.5}});
                       return result("param-accounting", c8 == 2 * c4 && e == 5120.0,
                                     "r4 " + std::to_string(c4) + ", r8 " + std::to_string(c8) + ", E[{2,8}] " +
                                         std::to_string(static_cast<long long>(e)));
                   }});
    out.push_back({"task-oracles", "every generated gold answer matches an independent solver", [=] {
                       const auto f = task_oracle_failure(3);
                       return result("task-oracles", f.empty(), f.empty() ? "all match" : f);
                   }});
    out.push_back({"router-clusters", "router separates two synthetic clusters (>= 99% held out)", [=] {
                       const double acc = cluster_router_accuracy(1, false);
                       return result("router-clusters", acc >= 0.99, "held-out accuracy " + std::to_string(acc));
                   }});
    out.push_back({"router-shuffled", "shuffled cluster labels give chance accuracy (50% +- 10%)", [=] {
                       const double acc = cluster_router_accuracy(1, true);
                       return result("router-shuffled", std::abs(acc - 0.5) <= 0.1, "held-out accuracy " + std::to_string(acc));
                   }});
    out.push_back({"constant-router", "Flexi with a constant router is bit-identical to Fixed(r)", [=] {
                       const auto f = constant_router_mismatch(2);
                       return result("constant-router", f.empty(), f.empty() ? "bit-identical" : f);
                   }});
    out.push_back({"checkpoint-roundtrip", "save -> load -> save is bit-exact for every tensor kind (f32, f64)", [=] {
                       auto f = checkpoint_roundtrip_failure<float>(4);
                       if (f.empty()) f = checkpoint_roundtrip_failure<double>(4);
                       return result("checkpoint-roundtrip", f.empty(), f.empty() ? "bit-exact" : "mismatch: " + f);
                   }});
    out.push_back({"determinism", "byte-identical reports across reruns and thread counts", [=] {
                       const auto f = determinism_failure(scratch / "determinism");
                       return result("determinism", f.empty(), f.empty() ? "byte-identical" : f);
                   }});
    return out;
}

// Runs the checks whose names are listed (all when empty); prints one line each.
inline std::vector<CheckResult> run_selftest(const std::vector<std::string>& only, std::ostream& os,
                                             std::filesystem::path scratch = {}) {
    std::vector<CheckResult> results;
    for (const auto& c : selftest_checks(scratch)) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = {c.name, false, std::string("error: ") + e.what(), 0};
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        os << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace flexi
