#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "flexi/graph.hpp"

namespace flexi {

using LossFn = std::function<Tensor<double>(Graph<double>&)>;

struct GradCheckResult {
    double max_rel_error = 0;
    std::size_t coordinates = 0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
};

// Central-difference check of reverse-mode gradients. For every coordinate p
// of every parameter: fd = (f(p+eps) - f(p-eps)) / (2 eps) against the
// backward gradient ad, scored |fd - ad| / max(1, |fd|, |ad|).
inline GradCheckResult grad_check(const LossFn& f, std::vector<Tensor<double>> params, double eps = 1e-6) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) throw ValueError("grad_check: eps must lie in [1e-7, 1e-3]");
    for (auto& p : params) {
        if (!p.requires_grad()) throw ValueError("grad_check: parameter without requires_grad");
        p.clear_grad();
    }
    {
        Graph<double> g;
        auto loss = f(g);
        if (!std::isfinite(loss.item())) throw ValueError("grad_check: non-finite loss at base point");
        g.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto& p : params) {
        if (p.has_grad())
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        else
            analytic.emplace_back(p.numel(), 0.0);
        p.clear_grad();
    }

    auto eval = [&f]() {
        Graph<double> g(GradMode::off);
        const double v = f(g).item();
        if (!std::isfinite(v)) throw ValueError("grad_check: non-finite loss at probe point");
        return v;
    };

    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto data = params[pi].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + eps;
            const double up = eval();
            data[i] = orig - eps;
            const double down = eval();
            data[i] = orig;
            const double fd = (up - down) / (2 * eps);
            const double ad = analytic[pi][i];
            const double err = std::abs(fd - ad) / std::max({1.0, std::abs(fd), std::abs(ad)});
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_param = pi;
                res.worst_index = i;
            }
            ++res.coordinates;
        }
    }
    return res;
}

}  // namespace flexi
