#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "flexi/graph.hpp"

namespace flexi {

// Projection matrices that carry an adapter.
enum class Target { wq, wv };

inline std::string_view target_name(Target t) { return t == Target::wq ? "wq" : "wv"; }

enum class Phase { train, inference };

inline std::string_view phase_name(Phase p) { return p == Phase::train ? "train" : "inference"; }

// Low-rank adapter for one projection, stored at full capacity. Rank r uses
// the first r rows of A and the first r columns of B.
template <Real T>
struct LoraPair {
    Tensor<T> A;  // [r_max, d_in]
    Tensor<T> B;  // [d_out, r_max]
    int r_max = 0;
    double alpha_base = 16.0;
    int layer = 0;
    Target target = Target::wq;

    std::size_t d_in() const { return A.dim(1); }
    std::size_t d_out() const { return B.dim(0); }

    // A ~ N(0, init_std^2), B = 0, so the initial update is exactly zero.
    static LoraPair init(int layer, Target target, std::size_t d_in, std::size_t d_out, int r_max, double alpha_base,
                         double init_std, RngStream& rng) {
        if (r_max < 1) throw ValueError("LoraPair: r_max must be >= 1");
        LoraPair p;
        const auto r = static_cast<std::size_t>(r_max);
        p.A = Tensor<T>::randn({r, d_in}, static_cast<T>(init_std), rng, true);
        p.B = Tensor<T>::zeros({d_out, r}, true);
        p.r_max = r_max;
        p.alpha_base = alpha_base;
        p.layer = layer;
        p.target = target;
        return p;
    }

    std::string name() const { return "lora.layer" + std::to_string(layer) + "." + std::string(target_name(target)); }
};

inline void check_rank(int r, int r_max) {
    if (r < 1 || r > r_max)
        throw ValueError("rank " + std::to_string(r) + " outside [1," + std::to_string(r_max) + "]");
}

// alpha_r = alpha_base / r
template <Real T>
double alpha_of(const LoraPair<T>& pair, int r) {
    check_rank(r, pair.r_max);
    return pair.alpha_base / static_cast<double>(r);
}

template <Real T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <Real T>
struct TruncatedView {
    StridedMap<T> A;  // [r, d_in], first r rows of the full A
    StridedMap<T> B;  // [d_out, r], first r columns of the full B
};

// Storage-sharing views of the rank-r slices.
template <Real T>
TruncatedView<T> truncate_view(LoraPair<T>& pair, int r) {
    check_rank(r, pair.r_max);
    const auto R = static_cast<Eigen::Index>(pair.r_max);
    const auto din = static_cast<Eigen::Index>(pair.d_in());
    const auto dout = static_cast<Eigen::Index>(pair.d_out());
    return {StridedMap<T>(pair.A.data().data(), r, din, Eigen::OuterStride<>(din)),
            StridedMap<T>(pair.B.data().data(), dout, r, Eigen::OuterStride<>(R))};
}

// Per-sample ranks for one batch.
struct RankAssignment {
    std::vector<int> ranks;
    Phase phase = Phase::train;
    std::string policy;

    std::size_t size() const noexcept { return ranks.size(); }
    int max_rank() const noexcept {
        int m = 0;
        for (int r : ranks) m = std::max(m, r);
        return m;
    }
    void validate(int r_max, std::size_t batch) const {
        if (ranks.size() != batch)
            throw ShapeError("rank assignment has " + std::to_string(ranks.size()) + " entries for a batch of " +
                             std::to_string(batch));
        for (int r : ranks) check_rank(r, r_max);
    }
};

// [n*seq, r_max] multiplier: alpha_{r_i} on the first r_i columns of sample
// i's rows, zero elsewhere. One matmul then serves heterogeneous ranks.
template <Real T>
Tensor<T> rank_mask(const RankAssignment& ra, std::size_t seq, int r_max, double alpha_base) {
    const auto R = static_cast<std::size_t>(r_max);
    Tensor<T> m = Tensor<T>::zeros({ra.size() * seq, R});
    for (std::size_t i = 0; i < ra.size(); ++i) {
        const int r = ra.ranks[i];
        check_rank(r, r_max);
        const T a = static_cast<T>(alpha_base / static_cast<double>(r));
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t j = 0; j < static_cast<std::size_t>(r); ++j) m[(i * seq + t) * R + j] = a;
    }
    return m;
}

// out = x W^T + ((x A^T) * mask) B^T, rows grouped by sample.
template <Real T>
Tensor<T> lora_linear(Graph<T>& g, Tensor<T> x, Tensor<T> w, const LoraPair<T>& pair, Tensor<T> mask) {
    auto base = g.linear(x, w);
    auto z = g.linear(x, pair.A);
    if (z.numel() != mask.numel()) shape_mismatch("lora_forward", z.shape(), mask.shape());
    if (mask.shape() != z.shape()) mask = Tensor<T>::from(z.shape(), {mask.data().begin(), mask.data().end()});
    auto delta = g.linear(g.mul(z, mask), pair.B);
    return g.add(base, delta);
}

// Adapter-augmented projection of H_in [n, seq, d_in] (or [n*seq, d_in]).
template <Real T>
Tensor<T> lora_forward(Graph<T>& g, Tensor<T> h_in, Tensor<T> w, const LoraPair<T>& pair, const RankAssignment& ra) {
    const auto rows = h_in.numel() / h_in.shape().back();
    if (ra.size() == 0 || rows % ra.size() != 0)
        throw ShapeError("lora_forward: assignment of " + std::to_string(ra.size()) + " ranks for " +
                         std::to_string(rows) + " rows");
    if (h_in.rank() == 3 && h_in.dim(0) != ra.size())
        throw ShapeError("lora_forward: batch of " + std::to_string(h_in.dim(0)) + " with " +
                         std::to_string(ra.size()) + " ranks");
    ra.validate(pair.r_max, ra.size());
    return lora_linear(g, h_in, w, pair, rank_mask<T>(ra, rows / ra.size(), pair.r_max, pair.alpha_base));
}

// alpha_r * B_r A_r as a dense [d_out, d_in] matrix.
template <Real T>
Tensor<T> merge_delta(LoraPair<T>& pair, int r) {
    auto v = truncate_view(pair, r);
    Tensor<T> out = Tensor<T>::zeros({pair.d_out(), pair.d_in()});
    out.mat().noalias() = static_cast<T>(alpha_of(pair, r)) * (v.B * v.A);
    return out;
}

// ---- parameter accounting ----------------------------------------------

struct TargetShape {
    Target target;
    std::size_t d_in;
    std::size_t d_out;
};

// (d_in + d_out) * r summed over every adapted matrix of every layer.
inline std::size_t count_params(std::size_t n_layers, const std::vector<TargetShape>& targets, int r) {
    if (r < 0) throw ValueError("count_params: negative rank");
    std::size_t per_layer = 0;
    for (const auto& t : targets) per_layer += (t.d_in + t.d_out) * static_cast<std::size_t>(r);
    return n_layers * per_layer;
}

// Sum_c p_c * count_params(r_c). Probabilities must sum to one within 1e-9.
inline double expected_active_params(std::size_t n_layers, const std::vector<TargetShape>& targets,
                                     const std::map<int, double>& rank_probs) {
    double total = 0;
    double mass = 0;
    for (const auto& [r, p] : rank_probs) {
        if (p < 0) throw ValueError("expected_active_params: negative probability");
        mass += p;
        total += p * static_cast<double>(count_params(n_layers, targets, r));
    }
    if (std::abs(mass - 1.0) > 1e-9)
        throw ValueError("expected_active_params: probabilities sum to " + std::to_string(mass));
    return total;
}

// Every adapter of a model: one pair per (layer, target), layer-major.
template <Real T>
struct AdapterSet {
    std::vector<LoraPair<T>> pairs;
    std::vector<Target> targets;
    int r_max = 0;
    double alpha_base = 16.0;

    static AdapterSet init(std::size_t n_layers, std::size_t d_model, std::vector<Target> targets, int r_max,
                           double alpha_base, double init_std, RngStream& rng) {
        AdapterSet s;
        s.targets = targets;
        s.r_max = r_max;
        s.alpha_base = alpha_base;
        for (std::size_t l = 0; l < n_layers; ++l)
            for (Target t : targets)
                s.pairs.push_back(
                    LoraPair<T>::init(static_cast<int>(l), t, d_model, d_model, r_max, alpha_base, init_std, rng));
        return s;
    }

    const LoraPair<T>* find(int layer, Target t) const {
        for (const auto& p : pairs)
            if (p.layer == layer && p.target == t) return &p;
        return nullptr;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (const auto& p : pairs) {
            out.emplace_back(p.name() + ".A", p.A);
            out.emplace_back(p.name() + ".B", p.B);
        }
        return out;
    }

    AdapterSet clone() const {
        AdapterSet c = *this;
        for (auto& p : c.pairs) {
            p.A = p.A.clone();
            p.B = p.B.clone();
        }
        return c;
    }

    std::vector<TargetShape> target_shapes(std::size_t d_model) const {
        std::vector<TargetShape> out;
        for (Target t : targets) out.push_back({t, d_model, d_model});
        return out;
    }
};

}  // namespace flexi
