#include <cmath>

#include <gtest/gtest.h>

#include "flexi/grad_check.hpp"
#include "flexi/graph.hpp"

using namespace flexi;

namespace {

Tensor<double> rnd(Shape s, RngStream& rng, double std = 1.0) { return Tensor<double>::randn(std::move(s), std, rng, true); }

}  // namespace

TEST(Matmul, IdentityAndHandValue) {
    Graph<float> g;
    auto a = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
    auto eye = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
    auto c = g.matmul(a, eye);
    EXPECT_TRUE(c.bit_equal(a));

    auto r = Tensor<float>::from({1, 2}, {1, 0});
    auto col = Tensor<float>::from({2, 1}, {2, 5});
    auto d = g.matmul(r, col);
    ASSERT_EQ(d.shape(), (Shape{1, 1}));
    EXPECT_EQ(d[0], 2.0f);
}

TEST(Matmul, MismatchNamesBothShapes) {
    Graph<float> g;
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({2, 3});
    try {
        g.matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(2,3) vs (2,3)"), std::string::npos) << msg;
    }
}

TEST(Matmul, GradMatchesFiniteDifferences) {
    RngStream rng(7, "matmul");
    auto a = rnd({3, 3}, rng);
    auto b = rnd({3, 3}, rng);
    auto res = grad_check([&](Graph<double>& g) { return g.sum(g.matmul(a, b)); }, {a, b});
    EXPECT_LE(res.max_rel_error, 1e-6);
}

TEST(CrossEntropy, HandValues) {
    Graph<double> g;
    auto z = Tensor<double>::from({1, 2}, {0, 0});
    EXPECT_NEAR(g.cross_entropy(z, {0}).item(), std::log(2.0), 1e-12);
    auto sat = Tensor<double>::from({1, 2}, {100, 0});
    EXPECT_LE(g.cross_entropy(sat, {0}).item(), 1e-6);
    auto two = Tensor<double>::from({2, 2}, {0, 0, 0, 0});
    EXPECT_NEAR(g.cross_entropy(two, {0, 1}).item(), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, Errors) {
    Graph<double> g;
    auto z = Tensor<double>::from({1, 2}, {0, 0});
    EXPECT_THROW(g.cross_entropy(z, {2}), ValueError);
    EXPECT_THROW(g.cross_entropy(z, {-3}), ValueError);
    EXPECT_THROW(g.cross_entropy(z, {kIgnore}), ValueError);
    auto empty = Tensor<double>::zeros({0, 2});
    EXPECT_THROW(g.cross_entropy(empty, {}), ValueError);
}

TEST(Backward, LinearAndSquare) {
    {
        Graph<double> g;
        auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4}, true);
        g.backward(g.sum(x));
        ASSERT_TRUE(x.has_grad());
        for (double v : x.grad()) EXPECT_EQ(v, 1.0);
    }
    {
        Graph<double> g;
        auto x = Tensor<double>::from({2}, {1, 2}, true);
        g.backward(g.sum(g.mul(x, x)));
        EXPECT_EQ(x.grad()[0], 2.0);
        EXPECT_EQ(x.grad()[1], 4.0);
    }
}

TEST(Backward, FrozenTensorHasNoGrad) {
    Graph<double> g;
    auto w = Tensor<double>::from({2, 2}, {1, 2, 3, 4}, false);
    auto x = Tensor<double>::from({1, 2}, {1, 1}, true);
    g.backward(g.sum(g.linear(x, w)));
    EXPECT_FALSE(w.has_grad());
    EXPECT_TRUE(x.has_grad());
}

TEST(Backward, ErrorContracts) {
    Graph<double> g;
    auto x = Tensor<double>::from({2}, {1, 2}, true);
    auto s = g.sum(x);
    EXPECT_THROW(g.backward(g.scale(x, 2.0)), GraphError);  // non-scalar
    g.backward(s);
    EXPECT_THROW(g.backward(s), GraphError);  // consumed

    Graph<double> other;
    auto s2 = other.sum(x);
    Graph<double> third;
    EXPECT_THROW(third.backward(s2), GraphError);  // detached
    Graph<double> off(GradMode::off);
    EXPECT_THROW(off.backward(off.sum(x)), GraphError);
}

TEST(Backward, VisitsNodesInReverseInsertionOrder) {
    Graph<double> g;
    std::vector<int> order;
    auto x = Tensor<double>::from({1}, {3}, true);
    auto tag = [&](Tensor<double> in, int id) {
        return g.custom("tag", {in}, in.shape(),
            [](std::vector<Tensor<double>>& ins, Tensor<double>& out) { out[0] = ins[0][0]; },
            [&order, id](std::vector<Tensor<double>>& ins, Tensor<double>& out) {
                order.push_back(id);
                ins[0].grad_mut()[0] += out.grad()[0];
            });
    };
    auto y = tag(tag(tag(x, 0), 1), 2);
    g.backward(g.sum(y));
    EXPECT_EQ(order, (std::vector<int>{2, 1, 0}));
    EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(GradCheck, QuadraticFormIsExact) {
    RngStream rng(1, "quad");
    auto x = rnd({1, 5}, rng);
    auto m = Tensor<double>::randn({5, 5}, 1.0, rng);
    auto res = grad_check([&](Graph<double>& g) { return g.sum(g.mul(g.linear(x, m), x)); }, {x});
    EXPECT_LE(res.max_rel_error, 1e-8);
    EXPECT_EQ(res.coordinates, 5u);
}

TEST(GradCheck, CorruptedRuleIsCaught) {
    RngStream rng(2, "corrupt");
    auto a = rnd({3, 3}, rng);
    auto b = rnd({3, 3}, rng);
    // matmul whose backward forgets to transpose b
    auto bad = [&](Graph<double>& g) {
        auto out = g.custom("bad_matmul", {a, b}, {3, 3},
            [](std::vector<Tensor<double>>& in, Tensor<double>& o) { o.mat() = in[0].mat() * in[1].mat(); },
            [](std::vector<Tensor<double>>& in, Tensor<double>& o) {
                auto ga = in[0].grad_mut();
                MatMap<double>(ga.data(), 3, 3) += MatMap<double>(const_cast<double*>(o.grad().data()), 3, 3) * in[1].mat();
            });
        return g.sum(g.mul(out, out));
    };
    EXPECT_GT(grad_check(bad, {a}).max_rel_error, 1e-2);
}

TEST(GradCheck, RejectsBadArguments) {
    auto x = Tensor<double>::from({1}, {1}, true);
    auto f = [&](Graph<double>& g) { return g.sum(x); };
    EXPECT_THROW(grad_check(f, {x}, 1e-9), ValueError);
    EXPECT_THROW(grad_check(f, {x}, 1e-2), ValueError);
    auto blow = [&](Graph<double>& g) { return g.scale(g.sum(x), std::numeric_limits<double>::infinity()); };
    EXPECT_THROW(grad_check(blow, {x}), ValueError);
}

// Every differentiable primitive, 64-bit, three seeds.
class PrimitiveGrad : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(PrimitiveGrad, LinearAndQuadraticOps) {
    RngStream rng(GetParam(), "prims");
    auto a = rnd({3, 4}, rng);
    auto b = rnd({3, 4}, rng);
    auto w = rnd({5, 4}, rng);
    auto bias = rnd({4}, rng);
    auto c = rnd({3, 2}, rng);
    const double tol = 1e-6;
    auto sq = [&](Graph<double>& g, Tensor<double> t) { return g.sum(g.mul(t, t)); };
    EXPECT_LE(grad_check([&](Graph<double>& g) { return sq(g, g.add(a, b)); }, {a, b}).max_rel_error, tol);
    EXPECT_LE(grad_check([&](Graph<double>& g) { return sq(g, g.add_bias(a, bias)); }, {a, bias}).max_rel_error, tol);
    EXPECT_LE(grad_check([&](Graph<double>& g) { return sq(g, g.scale(a, 0.7)); }, {a}).max_rel_error, tol);
    EXPECT_LE(grad_check([&](Graph<double>& g) { return g.sum(g.mul(a, b)); }, {a, b}).max_rel_error, tol);
    EXPECT_LE(grad_check([&](Graph<double>& g) { return sq(g, g.linear(a, w)); }, {a, w}).max_rel_error, tol);
    EXPECT_LE(grad_check([&](Graph<double>& g) { return sq(g, g.concat(a, c)); }, {a, c}).max_rel_error, tol);
    EXPECT_LE(grad_check([&](Graph<double>& g) { return sq(g, g.reshape(a, {2, 6})); }, {a}).max_rel_error, tol);
    EXPECT_LE(grad_check([&](Graph<double>& g) { return g.sum(g.mul(g.relu(a), b)); }, {a}).max_rel_error, tol);
    auto table = rnd({6, 3}, rng);
    EXPECT_LE(grad_check([&](Graph<double>& g) { return sq(g, g.embedding(table, {0, 5, 5, 2})); }, {table})
                  .max_rel_error, tol);
    auto h = rnd({6, 3}, rng);
    EXPECT_LE(grad_check([&](Graph<double>& g) { return sq(g, g.mean_pool(h, {1, 1, 0, 1, 0, 0}, 2, 3)); }, {h})
                  .max_rel_error, tol);
}

TEST_P(PrimitiveGrad, ComposedOps) {
    RngStream rng(GetParam(), "composed");
    const double tol = 1e-4;
    auto x = rnd({4, 6}, rng);
    auto gamma = rnd({6}, rng);
    auto beta = rnd({6}, rng);
    auto proj = Tensor<double>::randn({4, 6}, 1.0, rng);
    auto sm = [&](Graph<double>& g) { return g.sum(g.mul(g.softmax(x), proj)); };
    EXPECT_LE(grad_check(sm, {x}).max_rel_error, tol);
    auto ln = [&](Graph<double>& g) { return g.sum(g.mul(g.layer_norm(x, gamma, beta), proj)); };
    EXPECT_LE(grad_check(ln, {x, gamma, beta}).max_rel_error, tol);
    auto ce = [&](Graph<double>& g) { return g.cross_entropy(x, {1, kIgnore, 5, 0}); };
    EXPECT_LE(grad_check(ce, {x}).max_rel_error, tol);

    // two samples, seq 3, two heads of width 2
    auto q = rnd({6, 4}, rng);
    auto k = rnd({6, 4}, rng);
    auto v = rnd({6, 4}, rng);
    auto mix = Tensor<double>::randn({6, 4}, 1.0, rng);
    auto att = [&](Graph<double>& g) { return g.sum(g.mul(g.causal_attention(q, k, v, 2, 3, 2), mix)); };
    EXPECT_LE(grad_check(att, {q, k, v}).max_rel_error, tol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGrad, ::testing::Values(1u, 2u, 3u));

TEST(Softmax, RowsSumToOne) {
    RngStream rng(3, "sm");
    Graph<float> g(GradMode::off);
    auto x = Tensor<float>::randn({8, 11}, 3.0f, rng);
    auto y = g.softmax(x);
    for (std::size_t r = 0; r < 8; ++r) {
        float s = 0;
        for (std::size_t c = 0; c < 11; ++c) s += y[r * 11 + c];
        EXPECT_NEAR(s, 1.0f, 1e-6f);
    }
}

TEST(LayerNorm, StandardisesRows) {
    RngStream rng(4, "ln");
    Graph<double> g(GradMode::off);
    auto x = Tensor<double>::randn({5, 16}, 2.0, rng);
    auto ones = Tensor<double>::from({16}, std::vector<double>(16, 1.0));
    auto zeros = Tensor<double>::zeros({16});
    auto y = g.layer_norm(x, ones, zeros);
    for (std::size_t r = 0; r < 5; ++r) {
        double m = 0, v = 0;
        for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c];
        m /= 16;
        for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
        v /= 16;
        EXPECT_LE(std::abs(m), 1e-6);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
}

TEST(Attention, IsCausal) {
    RngStream rng(5, "causal");
    auto q = Tensor<float>::randn({4, 4}, 1.0f, rng);
    auto k = Tensor<float>::randn({4, 4}, 1.0f, rng);
    auto v = Tensor<float>::randn({4, 4}, 1.0f, rng);
    Graph<float> g(GradMode::off);
    auto before = g.causal_attention(q, k, v, 1, 4, 2);
    for (std::size_t c = 0; c < 4; ++c) {
        k[3 * 4 + c] += 5.0f;
        v[3 * 4 + c] -= 5.0f;
    }
    auto after = g.causal_attention(q, k, v, 1, 4, 2);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(Graph, ReplayIsBitExactAndDeterministic) {
    RngStream rng(6, "replay");
    auto x = Tensor<float>::randn({6, 8}, 1.0f, rng, true);
    auto w = Tensor<float>::randn({8, 8}, 0.3f, rng, true);
    auto gamma = Tensor<float>::from({8}, std::vector<float>(8, 1.0f));
    auto beta = Tensor<float>::zeros({8});
    auto build = [&](Graph<float>& g) {
        auto h = g.layer_norm(g.linear(x, w), gamma, beta);
        auto a = g.causal_attention(h, h, h, 2, 3, 2);
        return g.softmax(g.add(a, h));
    };
    Graph<float> g1, g2;
    auto y1 = build(g1);
    auto y2 = build(g2);
    EXPECT_TRUE(y1.bit_equal(y2));
    auto copy = y1.clone();
    g1.replay();
    EXPECT_TRUE(y1.bit_equal(copy));
    EXPECT_EQ(g1.nodes().size(), 5u);
    EXPECT_EQ(g1.nodes().front().kind, OpKind::linear);
}

TEST(Graph, NoBroadcastingExceptBias) {
    Graph<float> g;
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({1, 3});
    EXPECT_THROW(g.add(a, b), ShapeError);
    EXPECT_THROW(g.mul(a, b), ShapeError);
    EXPECT_THROW(g.add_bias(a, Tensor<float>::zeros({2})), ShapeError);
    EXPECT_THROW(g.embedding(Tensor<float>::zeros({3, 2}), {3}), ValueError);
    EXPECT_THROW(g.mean_pool(Tensor<float>::zeros({2, 2}), {0, 0}, 1, 2), ValueError);
}

TEST(Rng, StreamsAreIndependentAndReproducible) {
    RngStream a(42, "train"), b(42, "train"), c(42, "eval");
    EXPECT_EQ(a.next_u64(), b.next_u64());
    RngStream a2(42, "train");
    EXPECT_NE(a2.next_u64(), c.next_u64());
    RngStream at(42, "train", 5);
    RngStream walk(42, "train");
    for (int i = 0; i < 5; ++i) walk.next_u64();
    EXPECT_EQ(at.next_u64(), walk.next_u64());
    RngStream u(9, "uni");
    std::array<int, 8> counts{};
    for (int i = 0; i < 80000; ++i) ++counts[u.below(8)];
    for (int c8 : counts) EXPECT_NEAR(c8 / 80000.0, 0.125, 0.01);
}
