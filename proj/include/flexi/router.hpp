#pragma once

#include <algorithm>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "flexi/metrics.hpp"
#include "flexi/optim.hpp"
#include "flexi/parallel.hpp"
#include "flexi/transformer.hpp"

namespace flexi {

enum class Difficulty { easy = 0, hard = 1 };

inline std::string_view difficulty_name(Difficulty d) { return d == Difficulty::easy ? "easy" : "hard"; }

struct DifficultyLabel {
    std::size_t sample_id = 0;
    Difficulty label = Difficulty::hard;
    double metric = 0;
    MetricKind kind = MetricKind::answer_accuracy;
};

// Mask-weighted mean of token embeddings: h = sum_i m_i H_i / sum_i m_i.
template <Real T>
Tensor<T> pool_embedding(Graph<T>& g, Tensor<T> H, const std::vector<T>& mask) {
    if (H.rank() != 2) throw ShapeError("pool_embedding: H must be [seq, d], got " + shape_str(H.shape()));
    auto pooled = g.mean_pool(H, mask, 1, H.dim(0));
    return g.reshape(pooled, {H.dim(1)});
}

// Pooled layer-0 embeddings of a prompt-only batch -> [n, d].
template <Real T>
Tensor<T> pooled_embeddings(const TransformerWeights<T>& w, const TokenBatch& b) {
    Graph<T> g(GradMode::off);
    auto h0 = embed(g, w, b);
    std::vector<T> mask(b.mask.begin(), b.mask.end());
    return g.mean_pool(g.reshape(h0, {b.n * b.seq, w.config.d_model}), mask, b.n, b.seq);
}

// Pooled embeddings for a sample list, computed in chunks.
template <Real T>
Tensor<T> pooled_embeddings(const TransformerWeights<T>& w, const Tokenizer& tok, const std::vector<Sample>& samples,
                            std::size_t chunk = 256) {
    const auto d = w.config.d_model;
    Tensor<T> out = Tensor<T>::zeros({samples.size(), d});
    for (std::size_t s = 0; s < samples.size(); s += chunk) {
        std::vector<const Sample*> part;
        for (std::size_t i = s; i < std::min(samples.size(), s + chunk); ++i) part.push_back(&samples[i]);
        auto h = pooled_embeddings(w, make_batch(tok, part, false));
        std::copy(h.data().begin(), h.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(s * d));
    }
    return out;
}

// Two-layer classifier over the standardised pooled embedding:
//   logits = W2 relu(W1 (std(h) + eps) + b1) + b2
// class c maps to rank class_ranks[c]; classes are ordered easy -> hard.
template <Real T>
struct RouterWeights {
    Tensor<T> w1, b1, w2, b2;
    double sigma = 0.1;
    std::vector<int> class_ranks{2, 8};

    std::size_t input_dim() const { return w1.dim(1); }
    std::size_t n_classes() const { return w2.dim(0); }

    static RouterWeights init(std::size_t d, std::size_t hidden, std::vector<int> class_ranks, double sigma,
                              std::uint64_t seed) {
        if (class_ranks.size() < 2) throw ValueError("router: need at least two classes");
        for (std::size_t i = 1; i < class_ranks.size(); ++i)
            if (class_ranks[i] <= class_ranks[i - 1])
                throw ValueError("router: class->rank table must be strictly ascending");
        RngStream rng(seed, "router.init");
        RouterWeights r;
        r.w1 = Tensor<T>::randn({hidden, d}, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))), rng, true);
        r.b1 = Tensor<T>::zeros({hidden}, true);
        r.w2 = Tensor<T>::randn({class_ranks.size(), hidden}, T(0.01), rng, true);
        r.b2 = Tensor<T>::zeros({class_ranks.size()}, true);
        r.sigma = sigma;
        r.class_ranks = std::move(class_ranks);
        return r;
    }

    // Router that emits class `c` for every input.
    static RouterWeights constant(std::size_t d, std::size_t hidden, std::vector<int> class_ranks, std::size_t c) {
        RouterWeights r;
        r.w1 = Tensor<T>::zeros({hidden, d});
        r.b1 = Tensor<T>::zeros({hidden});
        r.w2 = Tensor<T>::zeros({class_ranks.size(), hidden});
        r.b2 = Tensor<T>::zeros({class_ranks.size()});
        r.b2[c] = T(10);
        r.class_ranks = std::move(class_ranks);
        return r;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named() const {
        return {{"router.w1", w1}, {"router.b1", b1}, {"router.w2", w2}, {"router.b2", b2}};
    }
    std::vector<Tensor<T>> params() const { return {w1, b1, w2, b2}; }
    std::size_t param_count() const { return w1.numel() + b1.numel() + w2.numel() + b2.numel(); }
};

template <Real T>
Tensor<T> standardize_rows(Graph<T>& g, Tensor<T> h) {
    const auto d = h.shape().back();
    auto ones = Tensor<T>::from({d}, std::vector<T>(d, T(1)));
    return g.layer_norm(h, ones, Tensor<T>::zeros({d}));
}

// Logits [n, classes] for pooled embeddings h [n, d]; `noise` (same shape as h) is added after standardisation.
template <Real T>
Tensor<T> router_logits(Graph<T>& g, const RouterWeights<T>& r, Tensor<T> h, const Tensor<T>* noise = nullptr) {
    if (h.rank() != 2 || h.dim(1) != r.input_dim())
        throw ShapeError("router: expected [n, " + std::to_string(r.input_dim()) + "] input, got " + shape_str(h.shape()));
    auto z = standardize_rows(g, h);
    if (noise) z = g.add(z, *noise);
    auto hidden = g.relu(g.add_bias(g.linear(z, r.w1), r.b1));
    return g.add_bias(g.linear(hidden, r.w2), r.b2);
}

// Argmax class (ties -> lower class, hence lower rank) for each row of h.
template <Real T>
std::vector<std::size_t> route_classes(const RouterWeights<T>& r, const Tensor<T>& h) {
    Graph<T> g(GradMode::off);
    auto logits = router_logits(g, r, h);
    const auto C = r.n_classes();
    std::vector<std::size_t> out(h.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (logits[i * C + c] > logits[i * C + best]) best = c;
        out[i] = best;
    }
    return out;
}

template <Real T>
RankAssignment route(const RouterWeights<T>& r, const Tensor<T>& h, Phase phase = Phase::inference) {
    RankAssignment ra;
    ra.phase = phase;
    ra.policy = "router";
    for (auto c : route_classes(r, h)) ra.ranks.push_back(r.class_ranks[c]);
    return ra;
}

// Zero-shot greedy decode of the frozen base, scored with `kind`; easy iff score >= tau.
// Greedy decoding is deterministic, so labels are a pure function of the inputs.
template <Real T>
std::vector<DifficultyLabel> label_difficulty(const TransformerWeights<T>& w, const Tokenizer& tok,
                                              const std::vector<Sample>& data, MetricKind kind, double tau,
                                              std::size_t max_new, std::size_t threads = 1) {
    std::vector<DifficultyLabel> labels(data.size());
    std::vector<std::string> warnings(data.size());
    parallel_for(data.size(), threads, [&](std::size_t i) {
        DifficultyLabel l{i, Difficulty::hard, 0.0, kind};
        try {
            const auto pred = greedy_decode(w, tok, data[i].prompt, max_new);
            l.metric = score(kind, pred, data[i].gold);
            l.label = l.metric >= tau ? Difficulty::easy : Difficulty::hard;
        } catch (const Error& e) {
            warnings[i] = e.what();
        }
        labels[i] = l;
    });
    for (std::size_t i = 0; i < warnings.size(); ++i)
        if (!warnings[i].empty())
            std::cerr << "warning: labelling sample " << i << " failed (" << warnings[i] << "); labelled hard\n";
    return labels;
}

// Downsamples the majority class to the minority count (seeded, without
// replacement) and returns the kept labels in a seeded shuffled order.
inline std::vector<DifficultyLabel> balance_classes(const std::vector<DifficultyLabel>& labels, std::uint64_t seed) {
    std::vector<DifficultyLabel> easy, hard;
    for (const auto& l : labels) (l.label == Difficulty::easy ? easy : hard).push_back(l);
    if (easy.empty() || hard.empty())
        throw ValueError(std::string("balance_classes: no ") + (easy.empty() ? "easy" : "hard") +
                         " samples; adjust the difficulty threshold tau");
    RngStream rng(seed, "router.balance");
    auto& major = easy.size() >= hard.size() ? easy : hard;
    const auto keep = std::min(easy.size(), hard.size());
    rng.shuffle(std::span<DifficultyLabel>(major));
    major.resize(keep);
    std::vector<DifficultyLabel> out = easy;
    out.insert(out.end(), hard.begin(), hard.end());
    rng.shuffle(std::span<DifficultyLabel>(out));
    return out;
}

struct RouterTrainConfig {
    double sigma = 0.1;
    std::size_t hidden = 32;
    std::size_t epochs = 40;
    double lr = 0.05;
    double momentum = 0.9;
    std::size_t batch = 32;
    double holdout = 0.2;
};

template <Real T>
struct RouterTrainResult {
    RouterWeights<T> router;
    double heldout_accuracy = 0;
    double initial_loss = 0;
    std::vector<double> loss_trace;  // mean loss per epoch
};

// Noise-added cross-entropy on pooled embeddings h [n, d] with class labels.
// Fresh noise per sample per epoch; the last `holdout` fraction of a seeded
// permutation is held out for the accuracy estimate.
template <Real T>
RouterTrainResult<T> train_router(const Tensor<T>& h, const std::vector<int>& labels, std::vector<int> class_ranks,
                                  const RouterTrainConfig& cfg, std::uint64_t seed) {
    if (cfg.sigma < 0) throw ValueError("train_router: sigma must be >= 0");
    if (h.rank() != 2 || h.dim(0) != labels.size()) throw ShapeError("train_router: embeddings/labels size mismatch");
    const auto n = labels.size();
    const auto d = h.dim(1);
    RngStream split_rng(seed, "router.split");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    split_rng.shuffle(std::span<std::size_t>(order));
    const auto n_hold = static_cast<std::size_t>(static_cast<double>(n) * cfg.holdout);
    std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_hold));
    std::vector<std::size_t> hold(order.end() - static_cast<std::ptrdiff_t>(n_hold), order.end());
    if (train.empty()) throw ValueError("train_router: empty training split");

    RouterTrainResult<T> res{RouterWeights<T>::init(d, cfg.hidden, std::move(class_ranks), cfg.sigma, seed), 0, 0, {}};
    auto& r = res.router;
    SgdMomentum<T> opt(r.params(), cfg.momentum);
    RngStream batch_rng(seed, "router.batches");
    RngStream noise_rng(seed, "router.noise");

    auto gather = [&](const std::vector<std::size_t>& idx) {
        Tensor<T> x = Tensor<T>::zeros({idx.size(), d});
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(&h[idx[i] * d], d, &x[i * d]);
        return x;
    };
    {
        Graph<T> g(GradMode::off);
        std::vector<int> y;
        for (auto i : train) y.push_back(labels[i]);
        res.initial_loss = static_cast<double>(g.cross_entropy(router_logits(g, r, gather(train)), y).item());
    }
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        batch_rng.shuffle(std::span<std::size_t>(train));
        double total = 0;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < train.size(); s += cfg.batch) {
            std::vector<std::size_t> idx(train.begin() + static_cast<std::ptrdiff_t>(s),
                                         train.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), s + cfg.batch)));
            std::vector<int> y;
            for (auto i : idx) y.push_back(labels[i]);
            Tensor<T> noise = Tensor<T>::zeros({idx.size(), d});
            if (cfg.sigma > 0)
                for (auto& v : noise.data()) v = static_cast<T>(noise_rng.normal() * cfg.sigma);
            Graph<T> g;
            auto loss = g.cross_entropy(router_logits(g, r, gather(idx), &noise), y);
            const double lv = loss.item();
            if (!std::isfinite(lv)) throw DivergenceError("train_router: non-finite loss at epoch " + std::to_string(epoch));
            g.backward(loss);
            opt.step(cfg.lr);
            opt.zero_grad();
            total += lv;
            ++batches;
        }
        res.loss_trace.push_back(total / static_cast<double>(batches));
    }
    for (auto& t : r.params()) t.set_requires_grad(false);
    if (!hold.empty()) {
        const auto cls = route_classes(r, gather(hold));
        std::size_t hit = 0;
        for (std::size_t i = 0; i < hold.size(); ++i) hit += static_cast<int>(cls[i]) == labels[hold[i]];
        res.heldout_accuracy = static_cast<double>(hit) / static_cast<double>(hold.size());
    }
    return res;
}

}  // namespace flexi
