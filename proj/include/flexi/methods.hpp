#pragma once

#include <charconv>
#include <chrono>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "flexi/router.hpp"

namespace flexi {

// ---- policies ----------------------------------------------------------------
//
//   kind      train        level    inference
//   lora      fixed        all      fixed
//   dylora    random       batch    fixed
//   dylora+   random       batch    random
//   flexi     router       sample   router

enum class PolicyKind { fixed, dylora, dylora_plus, flexi };

struct PolicySpec {
    PolicyKind kind = PolicyKind::fixed;
    int rank = 8;               // fixed
    int lo = 1, hi = 8;         // dylora / dylora+
    int inference_rank = 8;     // dylora
    std::vector<int> rank_set;  // flexi: class -> rank, ascending

    static PolicySpec fixed(int r) { return {PolicyKind::fixed, r, 1, 8, 8, {}}; }
    static PolicySpec dylora(int lo, int hi, int inf) { return {PolicyKind::dylora, 0, lo, hi, inf, {}}; }
    static PolicySpec dylora_plus(int lo, int hi) { return {PolicyKind::dylora_plus, 0, lo, hi, 0, {}}; }
    static PolicySpec flexi(std::vector<int> ranks) { return {PolicyKind::flexi, 0, 1, 8, 0, std::move(ranks)}; }

    // Canonical descriptor: lora:8, dylora:1-8@8, dylora+:1-8, flexi:2/8
    std::string str() const {
        switch (kind) {
            case PolicyKind::fixed: return "lora:" + std::to_string(rank);
            case PolicyKind::dylora:
                return "dylora:" + std::to_string(lo) + "-" + std::to_string(hi) + "@" + std::to_string(inference_rank);
            case PolicyKind::dylora_plus: return "dylora+:" + std::to_string(lo) + "-" + std::to_string(hi);
            case PolicyKind::flexi: {
                std::string s = "flexi:";
                for (std::size_t i = 0; i < rank_set.size(); ++i) s += (i ? "/" : "") + std::to_string(rank_set[i]);
                return s;
            }
        }
        return "?";
    }

    // Display label in the report tables.
    std::string label() const {
        switch (kind) {
            case PolicyKind::fixed: return "LoRA(" + std::to_string(rank) + ")";
            case PolicyKind::dylora: return "DyLoRA(" + std::to_string(inference_rank) + ")";
            case PolicyKind::dylora_plus: return "DyLoRA+(" + std::to_string(lo) + "-" + std::to_string(hi) + ")";
            case PolicyKind::flexi: {
                std::string s = "Flexi(";
                for (std::size_t i = 0; i < rank_set.size(); ++i) s += (i ? "," : "") + std::to_string(rank_set[i]);
                return s + ")";
            }
        }
        return "?";
    }

    int max_rank() const {
        switch (kind) {
            case PolicyKind::fixed: return rank;
            case PolicyKind::dylora: return std::max(hi, inference_rank);
            case PolicyKind::dylora_plus: return hi;
            case PolicyKind::flexi: return rank_set.empty() ? 0 : rank_set.back();
        }
        return 0;
    }

    void validate(int r_max) const {
        auto bad = [&](const std::string& why) { throw ValueError("policy " + str() + ": " + why); };
        switch (kind) {
            case PolicyKind::fixed: check_rank(rank, r_max); break;
            case PolicyKind::dylora:
            case PolicyKind::dylora_plus:
                if (lo > hi) bad("empty range");
                check_rank(lo, r_max);
                check_rank(hi, r_max);
                if (kind == PolicyKind::dylora) check_rank(inference_rank, r_max);
                break;
            case PolicyKind::flexi:
                if (rank_set.size() < 2) bad("needs at least two ranks");
                for (std::size_t i = 0; i < rank_set.size(); ++i) {
                    check_rank(rank_set[i], r_max);
                    if (i && rank_set[i] <= rank_set[i - 1]) bad("rank set must be strictly ascending");
                }
                break;
        }
    }

    bool operator==(const PolicySpec&) const = default;
};

namespace detail {
inline int parse_int(std::string_view s, std::string_view what) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty())
        throw ConfigError("bad integer '" + std::string(s) + "' in " + std::string(what));
    return v;
}

inline std::pair<int, int> parse_range(std::string_view s, std::string_view what) {
    const auto dash = s.find('-');
    if (dash == std::string_view::npos) throw ConfigError("expected LO-HI range in " + std::string(what));
    return {parse_int(s.substr(0, dash), what), parse_int(s.substr(dash + 1), what)};
}
}  // namespace detail

// Parses a descriptor; dylora without "@R" infers at the top of its range.
inline PolicySpec parse_policy(std::string_view desc) {
    const auto colon = desc.find(':');
    if (colon == std::string_view::npos) throw ConfigError("policy '" + std::string(desc) + "': expected KIND:ARGS");
    const auto kind = desc.substr(0, colon);
    const auto args = desc.substr(colon + 1);
    if (kind == "lora") return PolicySpec::fixed(detail::parse_int(args, desc));
    if (kind == "dylora") {
        const auto at = args.find('@');
        const auto [lo, hi] = detail::parse_range(args.substr(0, at), desc);
        const int inf = at == std::string_view::npos ? hi : detail::parse_int(args.substr(at + 1), desc);
        return PolicySpec::dylora(lo, hi, inf);
    }
    if (kind == "dylora+") {
        const auto [lo, hi] = detail::parse_range(args, desc);
        return PolicySpec::dylora_plus(lo, hi);
    }
    if (kind == "flexi") {
        std::vector<int> ranks;
        std::size_t start = 0;
        while (start <= args.size()) {
            const auto slash = args.find('/', start);
            const auto part = args.substr(start, slash == std::string_view::npos ? std::string_view::npos : slash - start);
            ranks.push_back(detail::parse_int(part, desc));
            if (slash == std::string_view::npos) break;
            start = slash + 1;
        }
        return PolicySpec::flexi(std::move(ranks));
    }
    throw ConfigError("unknown policy kind '" + std::string(kind) + "' (lora, dylora, dylora+, flexi)");
}

template <Real T>
struct RankPolicy {
    PolicySpec spec;
    std::shared_ptr<const RouterWeights<T>> router;  // flexi only

    std::string str() const { return spec.str(); }
};

// Ranks for one batch. `pooled` ([n, d] pooled embeddings) is only read by
// flexi; `rng` is only advanced by the random policies (one draw per batch).
template <Real T>
RankAssignment assign_ranks(const RankPolicy<T>& policy, std::size_t n, Phase phase, RngStream& rng,
                            const Tensor<T>* pooled = nullptr) {
    if (n == 0) throw ValueError("assign_ranks: empty batch");
    const auto& s = policy.spec;
    RankAssignment ra;
    ra.phase = phase;
    ra.policy = s.str();
    auto draw = [&] {
        if (s.lo > s.hi) throw ValueError("assign_ranks: empty range in " + s.str());
        return s.lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.hi - s.lo + 1)));
    };
    switch (s.kind) {
        case PolicyKind::fixed: ra.ranks.assign(n, s.rank); break;
        case PolicyKind::dylora: ra.ranks.assign(n, phase == Phase::train ? draw() : s.inference_rank); break;
        case PolicyKind::dylora_plus: ra.ranks.assign(n, draw()); break;
        case PolicyKind::flexi: {
            if (!policy.router) throw ValueError("assign_ranks: flexi policy has no router");
            if (!pooled) throw ValueError("assign_ranks: flexi policy needs pooled embeddings");
            if (pooled->dim(0) != n) throw ShapeError("assign_ranks: pooled batch size mismatch");
            const auto cls = route_classes(*policy.router, *pooled);
            if (s.rank_set.size() != policy.router->n_classes())
                throw ValueError("assign_ranks: rank set " + s.str() + " does not match router classes");
            for (auto c : cls) ra.ranks.push_back(s.rank_set[c]);
            break;
        }
    }
    return ra;
}

// ---- fine-tuning ---------------------------------------------------------------

struct FinetuneConfig {
    std::size_t steps = 3000;
    double lr = 0.03;
    std::size_t batch = 32;
    double momentum = 0.9;
    double clip = 1.0;
};

struct FinetuneReport {
    std::string policy;
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    std::vector<double> loss_trace;
    std::map<int, std::size_t> train_rank_histogram;  // samples seen per rank
    double wall_seconds = 0;  // informational; never written to reports
    std::string adapter_ref;
};

// Rows gathered from a [n, d] tensor.
template <Real T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
    const auto d = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros({idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(&x[idx[i] * d], d, &out[i * d]);
    return out;
}

// Trains the adapters in place under `policy`. Batches come from
// "finetune.batches" (epoch-wise shuffles) and random ranks from
// "finetune.ranks", so policies that draw no ranks see identical batches.
template <Real T>
FinetuneReport finetune(const TransformerWeights<T>& base, AdapterSet<T>& adapters, const RankPolicy<T>& policy,
                        const std::vector<Sample>& train, const FinetuneConfig& cfg, std::uint64_t seed,
                        const ProgressFn& progress = {}) {
    if (!base.frozen()) throw ValueError("finetune: base weights must be frozen");
    if (train.empty()) throw ValueError("finetune: empty training set");
    if (cfg.batch == 0) throw ValueError("finetune: batch size must be positive");
    policy.spec.validate(adapters.r_max);
    const auto t0 = std::chrono::steady_clock::now();
    const auto tok = task_tokenizer();

    FinetuneReport rep;
    rep.policy = policy.str();
    rep.seed = seed;
    rep.steps = cfg.steps;

    std::optional<Tensor<T>> pooled;
    if (policy.spec.kind == PolicyKind::flexi) pooled = pooled_embeddings(base, tok, train);

    std::vector<Tensor<T>> params;
    for (auto& p : adapters.pairs) {
        p.A.set_requires_grad(true);
        p.B.set_requires_grad(true);
        params.push_back(p.A);
        params.push_back(p.B);
    }
    SgdMomentum<T> opt(params, cfg.momentum);
    const auto base_params = base.params();

    RngStream batch_rng(seed, "finetune.batches");
    RngStream rank_rng(seed, "finetune.ranks");
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> idx;
        while (idx.size() < std::min(cfg.batch, train.size())) {
            if (cursor == order.size()) {
                batch_rng.shuffle(std::span<std::size_t>(order));
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        std::vector<const Sample*> samples;
        for (auto i : idx) samples.push_back(&train[i]);
        const auto tb = make_batch(tok, samples);
        std::optional<Tensor<T>> h;
        if (pooled) h = gather_rows(*pooled, idx);
        const auto ra = assign_ranks(policy, idx.size(), Phase::train, rank_rng, h ? &*h : nullptr);
        for (int r : ra.ranks) ++rep.train_rank_histogram[r];

        Graph<T> g;
        auto loss = task_loss(g, base, tb, AdapterContext<T>{&adapters, &ra});
        const double lv = loss.item();
        if (!std::isfinite(lv))
            throw DivergenceError("finetune diverged: loss " + std::to_string(lv) + " at step " + std::to_string(step) +
                                  " (seed " + std::to_string(seed) + ", policy " + rep.policy + ")");
        g.backward(loss);
        for (const auto& bp : base_params)
            if (bp.has_grad()) throw GraphError("finetune: a base weight received a gradient");
        clip_grad_norm(opt.params(), cfg.clip);
        // Only the leading max-rank rows of A / columns of B are touched.
        const auto active = static_cast<std::size_t>(ra.max_rank());
        std::vector<typename SgdMomentum<T>::Window> windows;
        for (std::size_t i = 0; i < adapters.pairs.size(); ++i) {
            windows.push_back({active, 0});
            windows.push_back({0, active});
        }
        opt.step(cfg.lr, windows);
        opt.zero_grad();
        rep.loss_trace.push_back(lv);
        if (progress) progress(step, lv);
    }
    for (auto& p : adapters.pairs) {
        p.A.set_requires_grad(false);
        p.B.set_requires_grad(false);
    }
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

// ---- evaluation ------------------------------------------------------------------

// Greedy decoding of a batch of prompts with per-sample ranks. Prompts are
// right-padded; causal attention keeps each row independent of the padding.
template <Real T>
std::vector<std::vector<int>> greedy_decode_batch(const TransformerWeights<T>& w,
                                                  const std::vector<std::vector<int>>& prompts, std::size_t max_new,
                                                  const AdapterSet<T>* adapters = nullptr,
                                                  const RankAssignment* ranks = nullptr) {
    const auto n = prompts.size();
    const auto V = w.config.vocab_size;
    std::vector<std::vector<int>> seqs(n), out(n);
    std::vector<bool> done(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        seqs[i].push_back(Tokenizer::kBos);
        seqs[i].insert(seqs[i].end(), prompts[i].begin(), prompts[i].end());
        if (seqs[i].size() > w.config.max_seq_len) done[i] = true;
    }
    for (std::size_t step = 0; step < max_new; ++step) {
        std::vector<std::size_t> live;
        for (std::size_t i = 0; i < n; ++i)
            if (!done[i]) live.push_back(i);
        if (live.empty()) break;
        std::size_t seq = 0;
        for (auto i : live) seq = std::max(seq, seqs[i].size());
        TokenBatch b;
        b.n = live.size();
        b.seq = seq;
        b.ids.assign(b.n * seq, Tokenizer::kPad);
        b.mask.assign(b.n * seq, 0);
        b.targets.assign(b.n * seq, kIgnore);
        RankAssignment ra;
        for (std::size_t j = 0; j < live.size(); ++j) {
            const auto& s = seqs[live[j]];
            std::copy(s.begin(), s.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(j * seq));
            std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(j * seq), s.size(), 1);
            if (ranks) ra.ranks.push_back(ranks->ranks[live[j]]);
        }
        if (ranks) ra.phase = ranks->phase;
        Graph<T> g(GradMode::off);
        auto logits = forward(g, w, b, adapters ? AdapterContext<T>{adapters, &ra} : AdapterContext<T>{});
        for (std::size_t j = 0; j < live.size(); ++j) {
            const auto i = live[j];
            const std::size_t row = (j * seq + seqs[i].size() - 1) * V;
            std::size_t best = 0;
            for (std::size_t c = 1; c < V; ++c)
                if (logits[row + c] > logits[row + best]) best = c;
            if (static_cast<int>(best) == Tokenizer::kEos) {
                done[i] = true;
                continue;
            }
            out[i].push_back(static_cast<int>(best));
            seqs[i].push_back(static_cast<int>(best));
            if (seqs[i].size() > w.config.max_seq_len) done[i] = true;
        }
    }
    return out;
}

struct EvalConfig {
    std::size_t batch = 50;    // rank-assignment and decoding batch
    std::size_t max_new = 0;   // 0 = longest gold + 2
    std::size_t threads = 1;
};

struct ClassScore {
    double sum = 0;
    std::size_t count = 0;
    double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

struct EvalSummary {
    std::string policy;
    MetricKind metric = MetricKind::answer_accuracy;
    std::size_t n = 0;
    double mean = 0;     // primary metric
    double mean_em = 0;  // exact match
    ClassScore easy, hard;  // by the sample's difficulty split
    std::map<int, std::size_t> rank_histogram;
    double expected_active_params = 0;
    std::size_t capacity_params = 0;  // count_params at the policy's largest rank
    std::vector<double> scores;
    std::vector<std::string> predictions;
    std::vector<int> ranks;
};

// Inference ranks are drawn batch by batch in dataset order from "eval.ranks";
// decoding then runs batches in parallel and the sums are formed in index order.
template <Real T>
EvalSummary evaluate(const TransformerWeights<T>& base, const AdapterSet<T>& adapters, const RankPolicy<T>& policy,
                     const std::vector<Sample>& data, MetricKind kind, const EvalConfig& cfg, std::uint64_t seed) {
    if (data.empty()) throw ValueError("evaluate: empty eval set");
    if (cfg.batch == 0) throw ValueError("evaluate: batch size must be positive");
    policy.spec.validate(adapters.r_max);
    const auto tok = task_tokenizer();
    std::size_t max_new = cfg.max_new;
    if (max_new == 0)
        for (const auto& s : data) max_new = std::max(max_new, s.gold.size() + 2);

    std::optional<Tensor<T>> pooled;
    if (policy.spec.kind == PolicyKind::flexi) pooled = pooled_embeddings(base, tok, data);
    RngStream rank_rng(seed, "eval.ranks");
    const std::size_t n_batches = (data.size() + cfg.batch - 1) / cfg.batch;
    std::vector<RankAssignment> assignments;
    for (std::size_t bi = 0; bi < n_batches; ++bi) {
        const auto lo = bi * cfg.batch;
        const auto hi = std::min(data.size(), lo + cfg.batch);
        std::optional<Tensor<T>> h;
        if (pooled) {
            std::vector<std::size_t> idx(hi - lo);
            std::iota(idx.begin(), idx.end(), lo);
            h = gather_rows(*pooled, idx);
        }
        assignments.push_back(assign_ranks(policy, hi - lo, Phase::inference, rank_rng, h ? &*h : nullptr));
    }

    EvalSummary s;
    s.policy = policy.str();
    s.metric = kind;
    s.n = data.size();
    s.scores.resize(data.size());
    s.predictions.resize(data.size());
    s.ranks.resize(data.size());
    std::vector<double> em(data.size());
    parallel_for(n_batches, cfg.threads, [&](std::size_t bi) {
        const auto lo = bi * cfg.batch;
        const auto hi = std::min(data.size(), lo + cfg.batch);
        std::vector<std::vector<int>> prompts;
        for (auto i = lo; i < hi; ++i) prompts.push_back(tok.encode(data[i].prompt));
        const auto outs = greedy_decode_batch(base, prompts, max_new, &adapters, &assignments[bi]);
        for (auto i = lo; i < hi; ++i) {
            const auto pred = tok.decode(outs[i - lo]);
            s.predictions[i] = pred;
            s.scores[i] = score(kind, pred, data[i].gold);
            em[i] = metric_exact_match(pred, data[i].gold);
            s.ranks[i] = assignments[bi].ranks[i - lo];
        }
    });
    double total = 0, total_em = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        total += s.scores[i];
        total_em += em[i];
        auto& cls = data[i].hard ? s.hard : s.easy;
        cls.sum += s.scores[i];
        ++cls.count;
        ++s.rank_histogram[s.ranks[i]];
    }
    s.mean = total / static_cast<double>(data.size());
    s.mean_em = total_em / static_cast<double>(data.size());
    const auto shapes = adapters.target_shapes(base.config.d_model);
    std::map<int, double> probs;
    for (const auto& [r, c] : s.rank_histogram) probs[r] = static_cast<double>(c) / static_cast<double>(data.size());
    s.expected_active_params = expected_active_params(base.config.n_layers, shapes, probs);
    s.capacity_params = count_params(base.config.n_layers, shapes, policy.spec.max_rank());
    return s;
}

// metric(policy_b at inference) - metric(policy_a at inference), same adapters.
template <Real T>
double consistency_gap(const TransformerWeights<T>& base, const AdapterSet<T>& adapters, const RankPolicy<T>& policy_a,
                       const RankPolicy<T>& policy_b, const std::vector<Sample>& data, MetricKind kind,
                       const EvalConfig& cfg, std::uint64_t seed) {
    if (policy_a.spec.max_rank() > adapters.r_max || policy_b.spec.max_rank() > adapters.r_max)
        throw ValueError("consistency_gap: policy rank exceeds adapter capacity r_max=" + std::to_string(adapters.r_max));
    const auto a = evaluate(base, adapters, policy_a, data, kind, cfg, seed);
    const auto b = evaluate(base, adapters, policy_b, data, kind, cfg, seed);
    return b.mean - a.mean;
}

}  // namespace flexi
