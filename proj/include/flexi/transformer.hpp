#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flexi/graph.hpp"
#include "flexi/hash.hpp"
#include "flexi/lora.hpp"
#include "flexi/optim.hpp"
#include "flexi/tasks.hpp"
#include "flexi/tokenizer.hpp"

namespace flexi {

struct ModelConfig {
    std::size_t vocab_size = 37;
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t max_seq_len = 96;

    void validate() const {
        if (vocab_size < 4) throw ValueError("model: vocab_size must be >= 4");
        if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0)
            throw ValueError("model: dimensions must be positive");
        if (d_model % n_heads != 0)
            throw ValueError("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                             std::to_string(n_heads));
    }

    bool operator==(const ModelConfig&) const = default;
};

// Standard task vocabulary: the tokenizer over every generator character.
inline Tokenizer task_tokenizer() { return Tokenizer::build({task_alphabet()}); }

template <Real T>
struct LayerWeights {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> wq, wk, wv, wo;  // [d, d]
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w1;  // [d_ff, d]
    Tensor<T> w2;  // [d, d_ff]
};

template <Real T>
struct TransformerWeights {
    ModelConfig config;
    Tensor<T> tok_emb;  // [vocab, d]
    std::vector<LayerWeights<T>> layers;
    Tensor<T> lnf_g, lnf_b;
    Tensor<T> head;  // [vocab, d]

    static TransformerWeights init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        RngStream rng(seed, "model.init");
        const auto d = cfg.d_model;
        const T proj_std = static_cast<T>(0.02);
        const T out_std = static_cast<T>(0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers)));
        auto ones = [](std::size_t n) { return Tensor<T>::from({n}, std::vector<T>(n, T(1)), true); };
        TransformerWeights w;
        w.config = cfg;
        w.tok_emb = Tensor<T>::randn({cfg.vocab_size, d}, T(1), rng, true);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            LayerWeights<T> lw;
            lw.ln1_g = ones(d);
            lw.ln1_b = Tensor<T>::zeros({d}, true);
            lw.wq = Tensor<T>::randn({d, d}, proj_std, rng, true);
            lw.wk = Tensor<T>::randn({d, d}, proj_std, rng, true);
            lw.wv = Tensor<T>::randn({d, d}, proj_std, rng, true);
            lw.wo = Tensor<T>::randn({d, d}, out_std, rng, true);
            lw.ln2_g = ones(d);
            lw.ln2_b = Tensor<T>::zeros({d}, true);
            lw.w1 = Tensor<T>::randn({cfg.d_ff, d}, proj_std, rng, true);
            lw.w2 = Tensor<T>::randn({d, cfg.d_ff}, out_std, rng, true);
            w.layers.push_back(std::move(lw));
        }
        w.lnf_g = ones(d);
        w.lnf_b = Tensor<T>::zeros({d}, true);
        w.head = Tensor<T>::randn({cfg.vocab_size, d}, proj_std, rng, true);
        return w;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("embed.tok", tok_emb);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto p = "layer" + std::to_string(l) + ".";
            const auto& lw = layers[l];
            out.emplace_back(p + "ln1.g", lw.ln1_g);
            out.emplace_back(p + "ln1.b", lw.ln1_b);
            out.emplace_back(p + "wq", lw.wq);
            out.emplace_back(p + "wk", lw.wk);
            out.emplace_back(p + "wv", lw.wv);
            out.emplace_back(p + "wo", lw.wo);
            out.emplace_back(p + "ln2.g", lw.ln2_g);
            out.emplace_back(p + "ln2.b", lw.ln2_b);
            out.emplace_back(p + "w1", lw.w1);
            out.emplace_back(p + "w2", lw.w2);
        }
        out.emplace_back("final.ln.g", lnf_g);
        out.emplace_back("final.ln.b", lnf_b);
        out.emplace_back("head", head);
        return out;
    }

    std::vector<Tensor<T>> params() const {
        std::vector<Tensor<T>> out;
        for (auto& [n, t] : named()) out.push_back(t);
        return out;
    }

    // Frozen weights never receive gradients.
    void set_frozen(bool frozen) const {
        for (auto t : params()) t.set_requires_grad(!frozen);
    }
    bool frozen() const {
        for (const auto& t : params())
            if (t.requires_grad()) return false;
        return true;
    }

    std::string content_hash() const {
        Sha256 h;
        for (const auto& [name, t] : named()) {
            h.update(name).update_u64(t.rank());
            for (auto s : t.shape()) h.update_u64(s);
            h.update_span(t.data());
        }
        return h.hex();
    }

    TransformerWeights clone() const {
        TransformerWeights c = *this;
        c.tok_emb = tok_emb.clone();
        for (auto& l : c.layers)
            for (Tensor<T>* t : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b, &l.w1, &l.w2})
                *t = t->clone();
        c.lnf_g = lnf_g.clone();
        c.lnf_b = lnf_b.clone();
        c.head = head.clone();
        return c;
    }
};

// Right-padded token grid. Targets carry kIgnore on prompt and pad positions.
struct TokenBatch {
    std::size_t n = 0;
    std::size_t seq = 0;
    std::vector<int> ids;
    std::vector<std::uint8_t> mask;
    std::vector<int> targets;
};

// Training layout: BOS prompt answer EOS, shifted by one; only answer and
// EOS positions are supervised. With include_answer=false the batch holds
// BOS + prompt only (what the router and the decoder see).
inline TokenBatch make_batch(const Tokenizer& tok, const std::vector<const Sample*>& samples, bool include_answer = true) {
    if (samples.empty()) throw ValueError("make_batch: no samples");
    std::vector<std::vector<int>> inputs, targets;
    std::size_t seq = 0;
    for (const Sample* s : samples) {
        std::vector<int> full{Tokenizer::kBos};
        const auto p = tok.encode(s->prompt);
        full.insert(full.end(), p.begin(), p.end());
        const std::size_t prompt_end = full.size();  // index of first answer token
        std::vector<int> in, tg;
        if (include_answer) {
            const auto a = tok.encode(s->gold);
            full.insert(full.end(), a.begin(), a.end());
            full.push_back(Tokenizer::kEos);
            in.assign(full.begin(), full.end() - 1);
            for (std::size_t t = 0; t + 1 < full.size(); ++t) tg.push_back(t + 1 >= prompt_end ? full[t + 1] : kIgnore);
        } else {
            in = full;
            tg.assign(full.size(), kIgnore);
        }
        seq = std::max(seq, in.size());
        inputs.push_back(std::move(in));
        targets.push_back(std::move(tg));
    }
    TokenBatch b;
    b.n = samples.size();
    b.seq = seq;
    b.ids.assign(b.n * seq, Tokenizer::kPad);
    b.mask.assign(b.n * seq, 0);
    b.targets.assign(b.n * seq, kIgnore);
    for (std::size_t i = 0; i < b.n; ++i)
        for (std::size_t t = 0; t < inputs[i].size(); ++t) {
            b.ids[i * seq + t] = inputs[i][t];
            b.mask[i * seq + t] = 1;
            b.targets[i * seq + t] = targets[i][t];
        }
    return b;
}

inline TokenBatch make_batch(const Tokenizer& tok, const std::vector<Sample>& samples, bool include_answer = true) {
    std::vector<const Sample*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);
    return make_batch(tok, ptrs, include_answer);
}

// Sinusoidal position table for positions [0, seq).
template <Real T>
std::vector<T> positional_encoding(std::size_t seq, std::size_t d) {
    std::vector<T> pe(seq * d);
    for (std::size_t t = 0; t < seq; ++t)
        for (std::size_t i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
            pe[t * d + i] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
            if (i + 1 < d) pe[t * d + i + 1] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
        }
    return pe;
}

// H0[i, t] = tok_emb[id(i,t)] + PE(t). Pad positions embed like any token.
template <Real T>
Tensor<T> embed(Graph<T>& g, const TransformerWeights<T>& w, const TokenBatch& b) {
    const auto d = w.config.d_model;
    for (int id : b.ids)
        if (id < 0 || static_cast<std::size_t>(id) >= w.config.vocab_size)
            throw ValueError("embed: token id " + std::to_string(id) + " out of range");
    const auto pe1 = positional_encoding<T>(b.seq, d);
    std::vector<T> pe(b.n * b.seq * d);
    for (std::size_t i = 0; i < b.n; ++i) std::copy(pe1.begin(), pe1.end(), pe.begin() + static_cast<std::ptrdiff_t>(i * b.seq * d));
    auto tok = g.embedding(w.tok_emb, b.ids);
    auto h = g.add(tok, Tensor<T>::from({b.n * b.seq, d}, std::move(pe)));
    return g.reshape(h, {b.n, b.seq, d});
}

// Adapters applied through one shared per-sample rank mask.
template <Real T>
struct AdapterContext {
    const AdapterSet<T>* adapters = nullptr;
    const RankAssignment* ranks = nullptr;
};

// Causal pre-LN decoder. Returns logits [n, seq, vocab].
template <Real T>
Tensor<T> forward(Graph<T>& g, const TransformerWeights<T>& w, const TokenBatch& b, AdapterContext<T> ctx = {}) {
    const auto& cfg = w.config;
    if (b.seq > cfg.max_seq_len)
        throw ValueError("forward: sequence length " + std::to_string(b.seq) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    Tensor<T> mask;
    if (ctx.adapters) {
        if (!ctx.ranks) throw ValueError("forward: adapters given without a rank assignment");
        ctx.ranks->validate(ctx.adapters->r_max, b.n);
        mask = rank_mask<T>(*ctx.ranks, b.seq, ctx.adapters->r_max, ctx.adapters->alpha_base);
    }
    auto project = [&](Tensor<T> h, const Tensor<T>& wt, int layer, Target target) {
        if (ctx.adapters)
            if (const auto* pair = ctx.adapters->find(layer, target)) return lora_linear(g, h, wt, *pair, mask);
        return g.linear(h, wt);
    };
    auto x = embed(g, w, b);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& lw = w.layers[l];
        const int li = static_cast<int>(l);
        auto h = g.layer_norm(x, lw.ln1_g, lw.ln1_b);
        auto q = project(h, lw.wq, li, Target::wq);
        auto k = g.linear(h, lw.wk);
        auto v = project(h, lw.wv, li, Target::wv);
        auto a = g.causal_attention(q, k, v, b.n, b.seq, cfg.n_heads);
        x = g.add(x, g.linear(a, lw.wo));
        auto h2 = g.layer_norm(x, lw.ln2_g, lw.ln2_b);
        x = g.add(x, g.linear(g.relu(g.linear(h2, lw.w1)), lw.w2));
    }
    x = g.layer_norm(x, w.lnf_g, w.lnf_b);
    return g.linear(x, w.head);
}

template <Real T>
Tensor<T> forward_base(Graph<T>& g, const TransformerWeights<T>& w, const TokenBatch& b) {
    return forward(g, w, b, {});
}

// Mean next-token cross-entropy over supervised positions.
template <Real T>
Tensor<T> task_loss(Graph<T>& g, const TransformerWeights<T>& w, const TokenBatch& b, AdapterContext<T> ctx = {}) {
    return g.cross_entropy(forward(g, w, b, ctx), b.targets);
}

// Fraction of supervised positions whose argmax equals the target.
template <Real T>
double next_token_accuracy(const TransformerWeights<T>& w, const TokenBatch& b, AdapterContext<T> ctx = {}) {
    Graph<T> g(GradMode::off);
    auto logits = forward(g, w, b, ctx);
    const auto V = w.config.vocab_size;
    std::size_t hit = 0, total = 0;
    for (std::size_t r = 0; r < b.targets.size(); ++r) {
        if (b.targets[r] == kIgnore) continue;
        std::size_t best = 0;
        for (std::size_t c = 1; c < V; ++c)
            if (logits[r * V + c] > logits[r * V + best]) best = c;
        hit += best == static_cast<std::size_t>(b.targets[r]);
        ++total;
    }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

// ---- pretraining ------------------------------------------------------------

struct PretrainConfig {
    std::size_t steps = 4000;
    double lr = 2e-3;
    std::size_t batch = 32;
    std::size_t warmup = 100;
    double clip = 1.0;
    // Corpus mix: relative weights and knob ranges per family.
    double copy_weight = 1.0;
    double kv_weight = 1.0;
    double mod_weight = 1.0;
    std::vector<int> kv_knobs{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
    std::vector<int> mod_knobs{1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<int> copy_knobs{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
};

// One pretraining batch. The family is drawn per batch from the configured
// mix so that short and long formats are not padded to a common length.
inline std::vector<Sample> draw_pretrain_batch(const PretrainConfig& pc, RngStream& rng) {
    const double total = pc.copy_weight + pc.kv_weight + pc.mod_weight;
    if (!(total > 0)) throw ValueError("pretrain: family weights must have a positive sum");
    const double u = rng.uniform() * total;
    const Family f = u < pc.copy_weight ? Family::copy
                     : u < pc.copy_weight + pc.kv_weight ? Family::kv_recall
                                                         : Family::mod_chain;
    const auto& knobs = f == Family::copy ? pc.copy_knobs : f == Family::kv_recall ? pc.kv_knobs : pc.mod_knobs;
    if (knobs.empty()) throw ValueError("pretrain: empty knob list for " + std::string(family_name(f)));
    return generate(f, knobs, pc.batch, rng);
}

template <Real T>
struct PretrainResult {
    TransformerWeights<T> weights;
    std::vector<double> loss_trace;
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

// Adam on next-token loss over a stream of generated samples. Deterministic
// in (config, pretrain config, seed). Weights come back frozen.
template <Real T>
PretrainResult<T> pretrain_base(const ModelConfig& cfg, const PretrainConfig& pc, std::uint64_t seed,
                                const ProgressFn& progress = {}) {
    const auto tok = task_tokenizer();
    if (tok.vocab_size() != cfg.vocab_size)
        throw ValueError("pretrain: model vocab_size " + std::to_string(cfg.vocab_size) + " != tokenizer vocab " +
                         std::to_string(tok.vocab_size()));
    PretrainResult<T> res{TransformerWeights<T>::init(cfg, seed), {}};
    res.weights.set_frozen(false);
    RngStream data(seed, "pretrain.data");
    Adam<T> opt(res.weights.params());
    const double pi = 3.14159265358979323846;
    for (std::size_t step = 0; step < pc.steps; ++step) {
        const auto tb = make_batch(tok, draw_pretrain_batch(pc, data));
        Graph<T> g;
        auto loss = task_loss(g, res.weights, tb);
        const double lv = loss.item();
        if (!std::isfinite(lv))
            throw DivergenceError("pretrain diverged: loss " + std::to_string(lv) + " at step " + std::to_string(step) +
                                  " (seed " + std::to_string(seed) + ")");
        g.backward(loss);
        clip_grad_norm(opt.params(), pc.clip);
        const double warm = pc.warmup ? std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(pc.warmup)) : 1.0;
        const double progress_frac = static_cast<double>(step) / static_cast<double>(pc.steps);
        const double lr = pc.lr * warm * (0.1 + 0.9 * 0.5 * (1 + std::cos(pi * progress_frac)));
        opt.step(lr);
        opt.zero_grad();
        res.loss_trace.push_back(lv);
        if (progress) progress(step, lv);
    }
    res.weights.set_frozen(true);
    return res;
}

// ---- decoding ---------------------------------------------------------------

// Argmax decoding from BOS + prompt; stops at EOS, max_new tokens or the
// context limit. Ties go to the lowest token id.
template <Real T>
std::vector<int> greedy_decode_ids(const TransformerWeights<T>& w, std::vector<int> prompt_ids, std::size_t max_new,
                                   const AdapterSet<T>* adapters = nullptr, int rank = 0) {
    std::vector<int> ids{Tokenizer::kBos};
    ids.insert(ids.end(), prompt_ids.begin(), prompt_ids.end());
    std::vector<int> out;
    RankAssignment ra{{rank}, Phase::inference, ""};
    const auto V = w.config.vocab_size;
    while (out.size() < max_new && ids.size() <= w.config.max_seq_len) {
        TokenBatch b{1, ids.size(), ids, std::vector<std::uint8_t>(ids.size(), 1), std::vector<int>(ids.size(), kIgnore)};
        Graph<T> g(GradMode::off);
        auto logits = forward(g, w, b, adapters ? AdapterContext<T>{adapters, &ra} : AdapterContext<T>{});
        const std::size_t last = (ids.size() - 1) * V;
        std::size_t best = 0;
        for (std::size_t c = 1; c < V; ++c)
            if (logits[last + c] > logits[last + best]) best = c;
        if (static_cast<int>(best) == Tokenizer::kEos) break;
        out.push_back(static_cast<int>(best));
        ids.push_back(static_cast<int>(best));
    }
    return out;
}

template <Real T>
std::string greedy_decode(const TransformerWeights<T>& w, const Tokenizer& tok, const std::string& prompt,
                          std::size_t max_new, const AdapterSet<T>* adapters = nullptr, int rank = 0) {
    return tok.decode(greedy_decode_ids(w, tok.encode(prompt), max_new, adapters, rank));
}

}  // namespace flexi
