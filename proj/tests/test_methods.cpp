#include <cmath>
#include <memory>

#include <gtest/gtest.h>

#include "flexi/methods.hpp"

using namespace flexi;

namespace {

ModelConfig small() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 48;
    return c;
}

template <Real T>
TransformerWeights<T> base_model(std::uint64_t seed = 1) {
    auto w = TransformerWeights<T>::init(small(), seed);
    w.set_frozen(true);
    return w;
}

template <Real T>
AdapterSet<T> fresh_adapters(std::uint64_t seed = 2, int r_max = 8) {
    RngStream rng(seed, "methods.test");
    return AdapterSet<T>::init(small().n_layers, small().d_model, {Target::wq, Target::wv}, r_max, 16.0, 0.02, rng);
}

template <Real T>
RankPolicy<T> policy(const std::string& desc, std::shared_ptr<const RouterWeights<T>> router = nullptr) {
    return {parse_policy(desc), std::move(router)};
}

std::vector<Sample> train_set() {
    TaskSpec spec;
    spec.family = Family::mod_chain;
    spec.easy_knobs = {1};
    spec.hard_knobs = {3};
    spec.seed = 5;
    return make_split(spec, "train", 40);
}

// Class 0 when standardised coordinate 0 beats coordinate 1, class 1 otherwise.
template <Real T>
std::shared_ptr<const RouterWeights<T>> axis_router(std::vector<int> ranks) {
    auto r = std::make_shared<RouterWeights<T>>();
    r->w1 = Tensor<T>::from({2, 2}, {1, 0, 0, 1});
    r->b1 = Tensor<T>::zeros({2});
    r->w2 = Tensor<T>::from({2, 2}, {1, 0, 0, 1});
    r->b2 = Tensor<T>::zeros({2});
    r->class_ranks = std::move(ranks);
    return r;
}

template <Real T>
std::vector<T> flat(const AdapterSet<T>& a) {
    std::vector<T> out;
    for (const auto& p : a.pairs) {
        out.insert(out.end(), p.A.data().begin(), p.A.data().end());
        out.insert(out.end(), p.B.data().begin(), p.B.data().end());
    }
    return out;
}

}  // namespace

TEST(PolicySpec, ParseRoundTripAndLabels) {
    for (const char* d : {"lora:8", "dylora:1-8@4", "dylora+:1-8", "flexi:2/8", "flexi:1/4/8"})
        EXPECT_EQ(parse_policy(d).str(), d);
    EXPECT_EQ(parse_policy("dylora:1-8").str(), "dylora:1-8@8");
    EXPECT_EQ(parse_policy("lora:4").label(), "LoRA(4)");
    EXPECT_EQ(parse_policy("dylora:1-8@8").label(), "DyLoRA(8)");
    EXPECT_EQ(parse_policy("dylora+:1-8").label(), "DyLoRA+(1-8)");
    EXPECT_EQ(parse_policy("flexi:2/8").label(), "Flexi(2,8)");
    EXPECT_EQ(parse_policy("flexi:2/8").max_rank(), 8);
}

TEST(PolicySpec, Errors) {
    for (const char* d : {"lora", "lora:x", "lora:8x", "adalora:4", "dylora:8", "dylora:1-8@", "flexi:2/"})
        EXPECT_THROW(parse_policy(d), ConfigError) << d;
    EXPECT_THROW(parse_policy("lora:9").validate(8), ValueError);
    EXPECT_THROW(parse_policy("dylora:8-1").validate(8), ValueError);
    EXPECT_THROW(parse_policy("flexi:8/2").validate(8), ValueError);
    EXPECT_THROW(parse_policy("flexi:8").validate(8), ValueError);
    EXPECT_NO_THROW(parse_policy("flexi:1/8").validate(8));
}

TEST(AssignRanks, FixedIsConstant) {
    RngStream rng(1, "t");
    const auto ra = assign_ranks(policy<float>("lora:4"), 3, Phase::train, rng);
    EXPECT_EQ(ra.ranks, (std::vector<int>{4, 4, 4}));
    EXPECT_EQ(ra.policy, "lora:4");
    EXPECT_THROW(assign_ranks(policy<float>("lora:4"), 0, Phase::train, rng), ValueError);
}

TEST(AssignRanks, DyLoRATrainIsUniformPerBatchAndInferenceFixed) {
    const auto p = policy<float>("dylora:1-8@8");
    RngStream rng(7, "t");
    std::map<int, int> freq;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        const auto ra = assign_ranks(p, 5, Phase::train, rng);
        for (int r : ra.ranks) ASSERT_EQ(r, ra.ranks[0]);
        ++freq[ra.ranks[0]];
    }
    ASSERT_EQ(freq.size(), 8u);
    for (const auto& [r, n] : freq) {
        EXPECT_GE(n / static_cast<double>(draws), 0.105) << "rank " << r;
        EXPECT_LE(n / static_cast<double>(draws), 0.145) << "rank " << r;
    }
    RngStream untouched(7, "u"), probe(7, "u");
    for (int i = 0; i < 20; ++i)
        EXPECT_EQ(assign_ranks(policy<float>("dylora:1-8@4"), 3, Phase::inference, untouched).ranks,
                  (std::vector<int>{4, 4, 4}));
    EXPECT_EQ(untouched.next_u64(), probe.next_u64());  // fixed inference draws nothing
}

TEST(AssignRanks, DyLoRAPlusRandomInBothPhases) {
    const auto p = policy<float>("dylora+:2-5");
    RngStream rng(3, "t");
    std::map<int, int> seen;
    for (int i = 0; i < 400; ++i) {
        const auto ra = assign_ranks(p, 4, i % 2 ? Phase::train : Phase::inference, rng);
        for (int r : ra.ranks) ASSERT_EQ(r, ra.ranks[0]);
        ++seen[ra.ranks[0]];
    }
    EXPECT_EQ(seen.size(), 4u);
    EXPECT_EQ(seen.begin()->first, 2);
    EXPECT_EQ(seen.rbegin()->first, 5);
}

TEST(AssignRanks, FlexiRoutesPerSample) {
    auto p = policy<double>("flexi:2/8", axis_router<double>({2, 8}));
    const auto h = Tensor<double>::from({2, 2}, {1, -1, -1, 1});
    RngStream rng(1, "t");
    for (Phase ph : {Phase::train, Phase::inference})
        EXPECT_EQ(assign_ranks(p, 2, ph, rng, &h).ranks, (std::vector<int>{2, 8}));
    EXPECT_THROW(assign_ranks(policy<double>("flexi:2/8"), 2, Phase::train, rng, &h), ValueError);
    EXPECT_THROW(assign_ranks(p, 2, Phase::train, rng), ValueError);
    EXPECT_THROW(assign_ranks(policy<double>("flexi:1/4/8", axis_router<double>({2, 8})), 2, Phase::train, rng, &h),
                 ValueError);
}

TEST(Finetune, ZeroStepsLeavesAdaptersUnchanged) {
    const auto base = base_model<float>();
    auto a = fresh_adapters<float>();
    const auto before = flat(a);
    FinetuneConfig cfg;
    cfg.steps = 0;
    const auto rep = finetune(base, a, policy<float>("lora:8"), train_set(), cfg, 1);
    EXPECT_TRUE(rep.loss_trace.empty());
    EXPECT_EQ(flat(a), before);
}

// B starts at zero, so the first step moves B only; A follows from the second step.
TEST(Finetune, StepsAtRankTwoTouchOnlyLeadingSlices) {
    const auto base = base_model<double>();
    FinetuneConfig cfg;
    cfg.batch = 8;
    for (std::size_t steps : {1, 3}) {
        auto a = fresh_adapters<double>();
        const auto before = a.clone();
        cfg.steps = steps;
        finetune(base, a, policy<double>("lora:2"), train_set(), cfg, 1);
        bool a_moved = false, b_moved = false;
        for (std::size_t k = 0; k < a.pairs.size(); ++k) {
            const auto& p = a.pairs[k];
            const auto& q = before.pairs[k];
            const auto din = p.d_in();
            for (std::size_t i = 0; i < 8; ++i)
                for (std::size_t j = 0; j < din; ++j) {
                    if (i >= 2) EXPECT_EQ(p.A[i * din + j], q.A[i * din + j]);
                    else a_moved |= p.A[i * din + j] != q.A[i * din + j];
                }
            for (std::size_t o = 0; o < p.d_out(); ++o)
                for (std::size_t j = 0; j < 8; ++j) {
                    if (j >= 2) EXPECT_EQ(p.B[o * 8 + j], 0.0);
                    else b_moved |= p.B[o * 8 + j] != 0.0;
                }
        }
        EXPECT_TRUE(b_moved) << steps;
        EXPECT_EQ(a_moved, steps > 1);
    }
}

TEST(Finetune, BaseUntouchedTraceFiniteAndDeterministic) {
    const auto base = base_model<float>();
    const auto hash = base.content_hash();
    FinetuneConfig cfg;
    cfg.steps = 12;
    cfg.batch = 8;
    auto a = fresh_adapters<float>(), b = fresh_adapters<float>();
    const auto ra = finetune(base, a, policy<float>("dylora+:1-8"), train_set(), cfg, 3);
    const auto rb = finetune(base, b, policy<float>("dylora+:1-8"), train_set(), cfg, 3);
    EXPECT_EQ(base.content_hash(), hash);
    ASSERT_EQ(ra.loss_trace.size(), 12u);
    for (double l : ra.loss_trace) EXPECT_TRUE(std::isfinite(l));
    EXPECT_EQ(ra.loss_trace, rb.loss_trace);
    EXPECT_EQ(ra.train_rank_histogram, rb.train_rank_histogram);
    EXPECT_EQ(flat(a), flat(b));
    std::size_t seen = 0;
    for (const auto& [r, n] : ra.train_rank_histogram) seen += n;
    EXPECT_EQ(seen, 12u * 8u);
}

TEST(Finetune, RejectsUnfrozenBaseAndEmptyData) {
    auto base = TransformerWeights<float>::init(small(), 1);
    auto a = fresh_adapters<float>();
    EXPECT_THROW(finetune(base, a, policy<float>("lora:2"), train_set(), FinetuneConfig{}, 1), ValueError);
    base.set_frozen(true);
    EXPECT_THROW(finetune(base, a, policy<float>("lora:2"), {}, FinetuneConfig{}, 1), ValueError);
    EXPECT_THROW(finetune(base, a, policy<float>("lora:9"), train_set(), FinetuneConfig{}, 1), ValueError);
}

TEST(Evaluate, ZeroInitAdaptersMatchBaseZeroShot) {
    const auto base = base_model<double>();
    const auto a = fresh_adapters<double>();
    const auto data = train_set();
    const auto tok = task_tokenizer();
    std::vector<double> want;
    for (const auto& s : data) want.push_back(metric_answer_accuracy(greedy_decode(base, tok, s.prompt, 3), s.gold));
    EvalConfig cfg;
    cfg.batch = 7;
    for (const char* d : {"lora:2", "dylora:1-8@8", "dylora+:1-8"}) {
        const auto e = evaluate(base, a, policy<double>(d), data, MetricKind::answer_accuracy, cfg, 1);
        EXPECT_EQ(e.scores, want) << d;
    }
}

TEST(Evaluate, FixedHistogramIsPointMass) {
    const auto base = base_model<float>();
    const auto a = fresh_adapters<float>();
    const auto data = train_set();
    const auto e = evaluate(base, a, policy<float>("lora:4"), data, MetricKind::answer_accuracy, EvalConfig{}, 1);
    EXPECT_EQ(e.rank_histogram, (std::map<int, std::size_t>{{4, data.size()}}));
    EXPECT_EQ(e.easy.count + e.hard.count, data.size());
    const auto shapes = a.target_shapes(small().d_model);
    EXPECT_EQ(e.expected_active_params, static_cast<double>(count_params(2, shapes, 4)));
    EXPECT_THROW(evaluate(base, a, policy<float>("lora:4"), {}, MetricKind::answer_accuracy, EvalConfig{}, 1),
                 ValueError);
}

TEST(Evaluate, FiftyFiftyRoutingGivesMeanParams) {
    const auto base = base_model<double>();
    const auto a = fresh_adapters<double>();
    const auto tok = task_tokenizer();
    // pick 10 samples routed to each class by a randomly initialised router
    const auto pool = gen_kv_recall({1, 2, 3}, 400, 9);
    const auto h = pooled_embeddings(base, tok, pool);
    // hidden = relu(+-v.z) with v = z0 - z1, so samples 0 and 1 fall on opposite sides
    const auto d = small().d_model;
    Graph<double> g(GradMode::off);
    const auto z = standardize_rows(g, h);
    auto r = std::make_shared<RouterWeights<double>>(RouterWeights<double>::constant(d, 2, {2, 8}, 0));
    r->b2 = Tensor<double>::zeros({2});
    r->w2 = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    for (std::size_t j = 0; j < d; ++j) {
        r->w1[j] = z[j] - z[d + j];
        r->w1[d + j] = -(z[j] - z[d + j]);
    }
    const std::shared_ptr<const RouterWeights<double>> router = r;
    const auto cls = route_classes(*router, h);
    ASSERT_NE(cls[0], cls[1]);
    std::vector<Sample> data;
    std::size_t easy = 0, hard = 0;
    for (std::size_t i = 0; i < pool.size() && data.size() < 20; ++i)
        if (cls[i] == 0 && easy < 10) {
            data.push_back(pool[i]);
            ++easy;
        } else if (cls[i] == 1 && hard < 10) {
            data.push_back(pool[i]);
            ++hard;
        }
    ASSERT_EQ(data.size(), 20u);
    const auto e = evaluate(base, a, policy<double>("flexi:2/8", router), data, MetricKind::token_f1, EvalConfig{}, 1);
    const auto shapes = a.target_shapes(small().d_model);
    EXPECT_EQ(e.rank_histogram, (std::map<int, std::size_t>{{2, 10}, {8, 10}}));
    EXPECT_DOUBLE_EQ(e.expected_active_params,
                     (static_cast<double>(count_params(2, shapes, 2)) + static_cast<double>(count_params(2, shapes, 8))) / 2);
    EXPECT_EQ(e.capacity_params, count_params(2, shapes, 8));
}

TEST(Equivalence, ConstantRouterFlexiMatchesFixed) {
    const auto base = base_model<float>();
    FinetuneConfig cfg;
    cfg.steps = 10;
    cfg.batch = 8;
    const auto data = train_set();
    const auto d = small().d_model;
    for (auto [cls, rank] : {std::pair<std::size_t, int>{0, 2}, {1, 8}}) {
        auto router = std::make_shared<RouterWeights<float>>(RouterWeights<float>::constant(d, 32, {2, 8}, cls));
        auto fixed = fresh_adapters<float>(), routed = fresh_adapters<float>();
        const auto rf = finetune(base, fixed, policy<float>("lora:" + std::to_string(rank)), data, cfg, 4);
        const auto rr = finetune(base, routed, policy<float>("flexi:2/8", router), data, cfg, 4);
        EXPECT_EQ(rf.loss_trace, rr.loss_trace);
        EXPECT_EQ(flat(fixed), flat(routed));
        EvalConfig ec;
        ec.batch = 9;
        const auto ef = evaluate(base, fixed, policy<float>("lora:" + std::to_string(rank)), data,
                                 MetricKind::answer_accuracy, ec, 4);
        const auto er = evaluate(base, routed, policy<float>("flexi:2/8", router), data, MetricKind::answer_accuracy, ec, 4);
        EXPECT_EQ(ef.scores, er.scores);
        EXPECT_EQ(ef.predictions, er.predictions);
        EXPECT_EQ(ef.mean, er.mean);
    }
}

TEST(ConsistencyGap, SamePolicyIsZeroAndRepeatable) {
    const auto base = base_model<float>();
    auto a = fresh_adapters<float>();
    FinetuneConfig cfg;
    cfg.steps = 6;
    cfg.batch = 8;
    const auto data = train_set();
    finetune(base, a, policy<float>("dylora+:1-8"), data, cfg, 2);
    const auto p = policy<float>("dylora+:1-8"), q = policy<float>("dylora:1-8@8");
    EXPECT_EQ(consistency_gap(base, a, p, p, data, MetricKind::answer_accuracy, EvalConfig{}, 3), 0.0);
    const double g1 = consistency_gap(base, a, q, p, data, MetricKind::answer_accuracy, EvalConfig{}, 3);
    const double g2 = consistency_gap(base, a, q, p, data, MetricKind::answer_accuracy, EvalConfig{}, 3);
    EXPECT_EQ(g1, g2);
    auto small_cap = fresh_adapters<float>(2, 4);
    EXPECT_THROW(consistency_gap(base, small_cap, q, p, data, MetricKind::answer_accuracy, EvalConfig{}, 3), ValueError);
}
