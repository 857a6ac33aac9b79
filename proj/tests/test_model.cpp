#include <cmath>

#include <gtest/gtest.h>

#include "flexi/transformer.hpp"

using namespace flexi;

namespace {

ModelConfig small() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 40;
    return c;
}

Sample sample(std::string prompt, std::string gold) {
    Sample s;
    s.prompt = std::move(prompt);
    s.gold = std::move(gold);
    return s;
}

std::vector<float> logits_of(const TransformerWeights<float>& w, const TokenBatch& b) {
    Graph<float> g(GradMode::off);
    auto out = forward_base(g, w, b);
    return {out.data().begin(), out.data().end()};
}

}  // namespace

TEST(Tokenizer, SortedIdsAfterSpecials) {
    const auto t = Tokenizer::build({"ba", "c"});
    EXPECT_EQ(t.vocab_size(), 3u + 3u);
    EXPECT_EQ(t.encode("abc"), (std::vector<int>{3, 4, 5}));
    EXPECT_EQ(Tokenizer::kPad, 0);
    EXPECT_EQ(Tokenizer::kBos, 1);
    EXPECT_EQ(Tokenizer::kEos, 2);
}

TEST(Tokenizer, RoundTripAndUnknownCharacter) {
    const auto t = task_tokenizer();
    EXPECT_EQ(t.decode(t.encode("3+4=7")), "3+4=7");
    EXPECT_EQ(t.vocab_size(), ModelConfig{}.vocab_size);
    try {
        t.encode("\xcf\x80");
        FAIL() << "expected an encode error";
    } catch (const ValueError& e) {
        EXPECT_NE(std::string(e.what()).find("not in the vocabulary"), std::string::npos);
    }
}

TEST(Batch, TargetsCoverAnswerAndEosOnly) {
    const auto tok = task_tokenizer();
    const auto b = make_batch(tok, std::vector<Sample>{sample("1+2=?", "3"), sample("5=?", "5")});
    ASSERT_EQ(b.n, 2u);
    // BOS + 5 prompt chars + answer; EOS is the last target
    EXPECT_EQ(b.seq, 7u);
    std::vector<int> t0(b.targets.begin(), b.targets.begin() + 7);
    EXPECT_EQ(t0, (std::vector<int>{kIgnore, kIgnore, kIgnore, kIgnore, kIgnore, tok.encode("3")[0], Tokenizer::kEos}));
    // second sample is right-padded
    EXPECT_EQ(b.mask[7 + 5], 0);
    EXPECT_EQ(b.ids[7 + 5], Tokenizer::kPad);
    EXPECT_EQ(b.targets[7 + 3], tok.encode("5")[0]);
}

TEST(Embed, TokenRowPlusSinusoid) {
    const auto w = TransformerWeights<double>::init(small(), 3);
    const auto tok = task_tokenizer();
    const auto b = make_batch(tok, std::vector<Sample>{sample("ab", "c"), sample("ab", "c")});
    Graph<double> g(GradMode::off);
    const auto h = embed(g, w, b);
    ASSERT_EQ(h.shape(), (Shape{2, b.seq, 16}));
    const std::size_t t = 2, i = 5;
    const int id = b.ids[t];
    const double freq = std::pow(10000.0, -4.0 / 16.0);
    EXPECT_NEAR(h[t * 16 + i], w.tok_emb[static_cast<std::size_t>(id) * 16 + i] + std::cos(2.0 * freq), 1e-12);
    for (std::size_t k = 0; k < b.seq * 16; ++k) EXPECT_EQ(h[k], h[b.seq * 16 + k]);
    TokenBatch bad = b;
    bad.ids[0] = 99;
    EXPECT_THROW(embed(g, w, bad), ValueError);
}

TEST(Forward, ShapeAndInitialLoss) {
    const auto w = TransformerWeights<float>::init(small(), 1);
    TokenBatch one{1, 1, {Tokenizer::kBos}, {1}, {kIgnore}};
    Graph<float> g(GradMode::off);
    EXPECT_EQ(forward_base(g, w, one).shape(), (Shape{1, 1, w.config.vocab_size}));

    RngStream rng(4, "model.test");
    const auto b = make_batch(task_tokenizer(), generate(Family::kv_recall, {1, 2, 3}, 32, rng));
    const double loss = task_loss(g, w, b).item();
    const double uniform = std::log(static_cast<double>(w.config.vocab_size));
    EXPECT_NEAR(loss, uniform, 0.15 * uniform);
}

TEST(Forward, BatchPermutationAndCausality) {
    const auto w = TransformerWeights<float>::init(small(), 2);
    const auto tok = task_tokenizer();
    const auto ab = make_batch(tok, std::vector<Sample>{sample("12+3", "4"), sample("7*7", "9")});
    const auto ba = make_batch(tok, std::vector<Sample>{sample("7*7", "9"), sample("12+3", "4")});
    const auto x = logits_of(w, ab), y = logits_of(w, ba);
    const std::size_t per = ab.seq * w.config.vocab_size;
    for (std::size_t k = 0; k < per; ++k) {
        EXPECT_EQ(x[k], y[per + k]);
        EXPECT_EQ(x[per + k], y[k]);
    }
    auto changed = ab;
    changed.ids[4] = tok.encode("0")[0];  // position 4 of sample 0
    const auto z = logits_of(w, changed);
    for (std::size_t k = 0; k < 4 * w.config.vocab_size; ++k) EXPECT_EQ(x[k], z[k]);
    bool later_moved = false;
    for (std::size_t k = 4 * w.config.vocab_size; k < per; ++k) later_moved |= x[k] != z[k];
    EXPECT_TRUE(later_moved);
}

TEST(Forward, OverlongSequenceIsRejected) {
    const auto w = TransformerWeights<float>::init(small(), 1);
    std::vector<int> ids(41, Tokenizer::kBos);
    TokenBatch b{1, 41, ids, std::vector<std::uint8_t>(41, 1), std::vector<int>(41, kIgnore)};
    Graph<float> g(GradMode::off);
    EXPECT_THROW(forward_base(g, w, b), ValueError);
}

TEST(Pretrain, ZeroStepsReturnsInitWeights) {
    PretrainConfig pc;
    pc.steps = 0;
    const auto res = pretrain_base<float>(small(), pc, 9);
    EXPECT_EQ(res.weights.content_hash(), TransformerWeights<float>::init(small(), 9).content_hash());
    EXPECT_TRUE(res.loss_trace.empty());
    EXPECT_TRUE(res.weights.frozen());
}

TEST(Pretrain, DeterministicAndLossDecreases) {
    PretrainConfig pc;
    pc.steps = 60;
    pc.batch = 8;
    pc.warmup = 5;
    pc.kv_knobs = {1, 2};
    pc.mod_knobs = {1, 2};
    pc.copy_knobs = {1, 2, 3};
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto a = pretrain_base<float>(small(), pc, seed);
        const auto b = pretrain_base<float>(small(), pc, seed);
        EXPECT_EQ(a.weights.content_hash(), b.weights.content_hash());
        ASSERT_EQ(a.loss_trace.size(), 60u);
        double first = 0, last = 0;
        for (std::size_t i = 0; i < 10; ++i) {
            first += a.loss_trace[i];
            last += a.loss_trace[50 + i];
        }
        EXPECT_LT(last, first) << "seed " << seed;
    }
}

TEST(Decode, BoundaryAndDeterminism) {
    const auto w = TransformerWeights<float>::init(small(), 5);
    const auto tok = task_tokenizer();
    EXPECT_EQ(greedy_decode(w, tok, "ab|", 0), "");
    const auto a = greedy_decode(w, tok, "ab|", 6);
    EXPECT_EQ(a, greedy_decode(w, tok, "ab|", 6));
    EXPECT_LE(a.size(), 6u);
}

// A base trained only on short copies reproduces a memorised continuation.
TEST(Decode, MemorisedCopy) {
    PretrainConfig pc;
    pc.steps = 2500;
    pc.batch = 16;
    pc.lr = 3e-3;
    pc.kv_weight = 0;
    pc.mod_weight = 0;
    pc.copy_knobs = {1, 2};
    const auto w = pretrain_base<float>(small(), pc, 1).weights;
    const auto tok = task_tokenizer();
    RngStream rng(8, "memorised");
    const auto probes = generate(Family::copy, {1, 2}, 20, rng);
    std::size_t hit = 0;
    for (const auto& s : probes) hit += greedy_decode(w, tok, s.prompt, 4) == s.gold;
    EXPECT_GE(hit, 19u);
}

TEST(Weights, FreezeCloneAndHash) {
    auto w = TransformerWeights<float>::init(small(), 1);
    const auto h = w.content_hash();
    auto c = w.clone();
    c.layers[0].wq[0] += 1.0f;
    EXPECT_EQ(w.content_hash(), h);
    EXPECT_NE(c.content_hash(), h);
    w.set_frozen(true);
    for (const auto& p : w.params()) EXPECT_FALSE(p.requires_grad());
}
