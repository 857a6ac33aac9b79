#include <cmath>

#include <Eigen/SVD>
#include <gtest/gtest.h>

#include "flexi/lora.hpp"

using namespace flexi;

namespace {

LoraPair<double> random_pair(std::size_t d_in, std::size_t d_out, int r_max, std::uint64_t seed) {
    RngStream rng(seed, "adapters.test");
    auto p = LoraPair<double>::init(0, Target::wq, d_in, d_out, r_max, 16.0, 0.3, rng);
    for (auto& v : p.B.data()) v = rng.normal() * 0.3;
    return p;
}

// out_i = W h + alpha_r * B[:, :r] (A[:r, :] h), written as explicit loops.
std::vector<double> loop_reference(const std::vector<double>& x, std::size_t rows, const Tensor<double>& w,
                                   const LoraPair<double>& p, int r) {
    const auto din = p.d_in(), dout = p.d_out();
    const auto R = static_cast<std::size_t>(p.r_max);
    const double alpha = 16.0 / r;
    std::vector<double> out(rows * dout, 0.0);
    for (std::size_t t = 0; t < rows; ++t) {
        std::vector<double> z(static_cast<std::size_t>(r), 0.0);
        for (std::size_t j = 0; j < z.size(); ++j)
            for (std::size_t k = 0; k < din; ++k) z[j] += p.A[j * din + k] * x[t * din + k];
        for (std::size_t o = 0; o < dout; ++o) {
            double base = 0, delta = 0;
            for (std::size_t k = 0; k < din; ++k) base += w[o * din + k] * x[t * din + k];
            for (std::size_t j = 0; j < z.size(); ++j) delta += p.B[o * R + j] * z[j];
            out[t * dout + o] = base + alpha * delta;
        }
    }
    return out;
}

}  // namespace

TEST(TruncateView, SharesStorageAndSelectsLeadingSlices) {
    RngStream rng(1, "t");
    auto p = LoraPair<double>::init(0, Target::wv, 4, 3, 8, 16.0, 0.02, rng);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t k = 0; k < 4; ++k) p.A[i * 4 + k] = static_cast<double>(i);
    auto v = truncate_view(p, 2);
    ASSERT_EQ(v.A.rows(), 2);
    ASSERT_EQ(v.B.cols(), 2);
    for (Eigen::Index k = 0; k < 4; ++k) {
        EXPECT_EQ(v.A(0, k), 0.0);
        EXPECT_EQ(v.A(1, k), 1.0);
    }
    v.A(1, 3) = 42.0;
    v.B(2, 1) = -7.0;
    EXPECT_EQ(p.A[1 * 4 + 3], 42.0);
    EXPECT_EQ(p.B[2 * 8 + 1], -7.0);

    auto full = truncate_view(p, 8);
    EXPECT_EQ(full.A.rows(), 8);
    EXPECT_EQ(full.B.cols(), 8);
    EXPECT_THROW(truncate_view(p, 0), ValueError);
    EXPECT_THROW(truncate_view(p, 9), ValueError);
}

TEST(LoraPair, InitHasZeroBAndSmallA) {
    RngStream rng(3, "t");
    auto p = LoraPair<float>::init(0, Target::wq, 64, 64, 8, 16.0, 0.02, rng);
    for (float b : p.B.data()) EXPECT_EQ(b, 0.0f);
    double ss = 0;
    for (float a : p.A.data()) ss += static_cast<double>(a) * a;
    EXPECT_NEAR(std::sqrt(ss / static_cast<double>(p.A.numel())), 0.02, 0.002);
    EXPECT_TRUE(p.A.requires_grad());
    EXPECT_TRUE(p.B.requires_grad());
}

TEST(AlphaOf, DecreasingInRank) {
    auto p = random_pair(2, 2, 8, 1);
    EXPECT_EQ(alpha_of(p, 8), 2.0);
    EXPECT_EQ(alpha_of(p, 2), 8.0);
    for (int r = 1; r < 8; ++r) EXPECT_GT(alpha_of(p, r), alpha_of(p, r + 1));
    EXPECT_THROW(alpha_of(p, 0), ValueError);
}

TEST(LoraForward, HandExample) {
    RngStream rng(1, "t");
    auto p = LoraPair<double>::init(0, Target::wq, 2, 2, 2, 16.0, 0.02, rng);
    std::fill(p.A.data().begin(), p.A.data().end(), 0.0);
    p.A[0] = 1.0;  // A row 0 = [1, 0]
    p.B[0] = 1.0;  // B column 0 = [1, 0]^T
    auto w = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto h = Tensor<double>::from({1, 1, 2}, {1, 1});
    RankAssignment ra{{1}, Phase::inference, "test"};
    Graph<double> g(GradMode::off);
    auto out = lora_forward(g, h, w, p, ra);
    EXPECT_EQ(out[0], 17.0);
    EXPECT_EQ(out[1], 1.0);
}

TEST(LoraForward, ZeroInitEqualsBaseBitExact) {
    RngStream rng(5, "t");
    auto p = LoraPair<double>::init(0, Target::wq, 6, 5, 8, 16.0, 0.02, rng);
    auto w = Tensor<double>::randn({5, 6}, 1.0, rng);
    auto x = Tensor<double>::randn({3, 4, 6}, 1.0, rng);
    Graph<double> g(GradMode::off);
    auto base = g.linear(x, w);
    auto out = lora_forward(g, x, w, p, RankAssignment{{1, 4, 8}, Phase::train, "t"});
    for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_EQ(out[i], base[i]);
}

TEST(LoraForward, MaskedBatchMatchesPerSampleLoops) {
    const std::size_t n = 4, seq = 3, din = 7, dout = 5;
    auto p = random_pair(din, dout, 8, 11);
    RngStream rng(12, "t");
    auto w = Tensor<double>::randn({dout, din}, 1.0, rng);
    auto x = Tensor<double>::randn({n, seq, din}, 1.0, rng);
    const std::vector<int> ranks{1, 8, 2, 4};
    Graph<double> g(GradMode::off);
    auto out = lora_forward(g, x, w, p, RankAssignment{ranks, Phase::train, "t"});
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> xi(&x[i * seq * din], &x[i * seq * din] + seq * din);
        const auto want = loop_reference(xi, seq, w, p, ranks[i]);
        for (std::size_t k = 0; k < seq * dout; ++k) EXPECT_NEAR(out[i * seq * dout + k], want[k], 1e-10);
    }
}

TEST(LoraForward, AssignmentLengthMismatchIsRejected) {
    auto p = random_pair(3, 3, 4, 1);
    auto w = Tensor<double>::zeros({3, 3});
    auto x = Tensor<double>::zeros({2, 5, 3});
    Graph<double> g(GradMode::off);
    EXPECT_THROW(lora_forward(g, x, w, p, RankAssignment{{1, 2, 3}, Phase::train, "t"}), ShapeError);
    EXPECT_THROW(lora_forward(g, x, w, p, RankAssignment{{1, 5}, Phase::train, "t"}), ValueError);
}

TEST(LoraForward, TailPerturbationLeavesOutputUnchanged) {
    auto p = random_pair(6, 6, 8, 21);
    RngStream rng(22, "t");
    auto w = Tensor<double>::randn({6, 6}, 1.0, rng);
    auto x = Tensor<double>::randn({2, 3, 6}, 1.0, rng);
    const RankAssignment ra{{3, 3}, Phase::inference, "t"};
    Graph<double> g(GradMode::off);
    const auto before = lora_forward(g, x, w, p, ra).clone();
    for (std::size_t i = 3; i < 8; ++i)
        for (std::size_t k = 0; k < 6; ++k) p.A[i * 6 + k] += 100.0;
    for (std::size_t o = 0; o < 6; ++o)
        for (std::size_t j = 3; j < 8; ++j) p.B[o * 8 + j] -= 100.0;
    const auto after = lora_forward(g, x, w, p, ra);
    for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(LoraForward, GradientOnlyReachesLeadingRows) {
    auto p = random_pair(5, 4, 8, 31);
    RngStream rng(32, "t");
    auto w = Tensor<double>::randn({4, 5}, 1.0, rng);
    auto x = Tensor<double>::randn({2, 3, 5}, 1.0, rng);
    Graph<double> g;
    auto out = lora_forward(g, x, w, p, RankAssignment{{2, 2}, Phase::train, "t"});
    g.backward(g.sum(g.mul(out, out)));
    ASSERT_TRUE(p.A.has_grad());
    ASSERT_TRUE(p.B.has_grad());
    double lead = 0;
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t k = 0; k < 5; ++k) {
            const double gv = p.A.grad()[i * 5 + k];
            if (i >= 2) EXPECT_EQ(gv, 0.0) << "A row " << i;
            else lead += std::abs(gv);
        }
    EXPECT_GT(lead, 0.0);
    for (std::size_t o = 0; o < 4; ++o)
        for (std::size_t j = 2; j < 8; ++j) EXPECT_EQ(p.B.grad()[o * 8 + j], 0.0) << "B col " << j;
}

TEST(MergeDelta, RankBoundAndMergedForwardAgreement) {
    auto p = random_pair(9, 7, 8, 41);
    RngStream rng(42, "t");
    auto w = Tensor<double>::randn({7, 9}, 1.0, rng);
    auto x = Tensor<double>::randn({1, 5, 9}, 1.0, rng);
    for (int r : {1, 2, 3, 8}) {
        const auto delta = merge_delta(p, r);
        Eigen::JacobiSVD<RowMat<double>> svd(delta.mat());
        const auto& sv = svd.singularValues();
        int numerical_rank = 0;
        for (Eigen::Index i = 0; i < sv.size(); ++i) numerical_rank += sv(i) > 1e-6;
        EXPECT_LE(numerical_rank, r);

        Tensor<double> merged = w.clone();
        for (std::size_t i = 0; i < merged.numel(); ++i) merged[i] += delta[i];
        Graph<double> g(GradMode::off);
        auto via_merge = g.linear(x, merged);
        auto via_adapter = lora_forward(g, x, w, p, RankAssignment{{r}, Phase::inference, "t"});
        for (std::size_t i = 0; i < via_merge.numel(); ++i) EXPECT_NEAR(via_merge[i], via_adapter[i], 1e-5);
    }
    auto zero = random_pair(3, 3, 4, 1);
    std::fill(zero.B.data().begin(), zero.B.data().end(), 0.0);
    const auto zero_delta = merge_delta(zero, 4);
    for (double v : zero_delta.data()) EXPECT_EQ(v, 0.0);
}

TEST(CountParams, HandValuesAndRatioLaw) {
    const std::vector<TargetShape> qv{{Target::wq, 64, 64}, {Target::wv, 64, 64}};
    EXPECT_EQ(count_params(4, qv, 0), 0u);
    EXPECT_EQ(count_params(4, qv, 2), 2048u);
    EXPECT_EQ(count_params(4, qv, 8), 8192u);
    const std::vector<TargetShape> odd{{Target::wq, 17, 5}};
    for (int r = 1; r <= 16; ++r) {
        EXPECT_EQ(count_params(3, qv, 2 * r), 2 * count_params(3, qv, r));
        EXPECT_EQ(count_params(2, odd, 2 * r), 2 * count_params(2, odd, r));
    }
    EXPECT_THROW(count_params(1, qv, -1), ValueError);
}

TEST(ExpectedActiveParams, MixturesAndErrors) {
    const std::vector<TargetShape> qv{{Target::wq, 64, 64}, {Target::wv, 64, 64}};
    EXPECT_EQ(expected_active_params(4, qv, {{2, 0.5}, {8, 0.5}}), 5120.0);
    EXPECT_EQ(expected_active_params(4, qv, {{8, 1.0}}), 8192.0);
    EXPECT_THROW(expected_active_params(4, qv, {{2, 0.5}, {8, 0.4}}), ValueError);
    EXPECT_THROW(expected_active_params(4, qv, {{2, -0.5}, {8, 1.5}}), ValueError);
    RngStream rng(5, "t");
    for (int trial = 0; trial < 50; ++trial) {
        std::map<int, double> probs;
        double left = 1.0;
        for (int r = 1; r < 8; ++r) {
            const double p = left * rng.uniform();
            probs[r] = p;
            left -= p;
        }
        probs[8] = left;
        EXPECT_LE(expected_active_params(4, qv, probs), static_cast<double>(count_params(4, qv, 8)) + 1e-9);
    }
}

TEST(RankAssignment, ValidatesLengthAndRange) {
    RankAssignment ra{{1, 4, 8}, Phase::train, "t"};
    EXPECT_NO_THROW(ra.validate(8, 3));
    EXPECT_EQ(ra.max_rank(), 8);
    EXPECT_THROW(ra.validate(8, 2), ShapeError);
    EXPECT_THROW(ra.validate(4, 3), ValueError);
    EXPECT_THROW((RankAssignment{{0}, Phase::train, "t"}.validate(8, 1)), ValueError);
}
