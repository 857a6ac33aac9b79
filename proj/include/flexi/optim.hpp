#pragma once

#include <cmath>
#include <vector>

#include "flexi/tensor.hpp"

namespace flexi {

// Global L2 norm of all present gradients, accumulated in double.
template <Real T>
double grad_norm(const std::vector<Tensor<T>>& params) {
    double s = 0;
    for (const auto& p : params)
        for (T g : p.grad()) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
}

// Rescales gradients so their global norm is at most max_norm. Returns the pre-clip norm.
template <Real T>
double clip_grad_norm(std::vector<Tensor<T>>& params, double max_norm) {
    const double n = grad_norm(params);
    if (max_norm > 0 && n > max_norm) {
        const T f = static_cast<T>(max_norm / (n + 1e-12));
        for (auto& p : params)
            if (p.has_grad())
                for (auto& g : p.grad_mut()) g *= f;
    }
    return n;
}

// Adam with bias correction; used for base-model pretraining.
template <Real T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step(double lr) {
        ++t_;
        const double c1 = 1 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            auto g = p.grad();
            auto d = p.data();
            for (std::size_t j = 0; j < d.size(); ++j) {
                const double gj = g[j];
                m_[i][j] = beta1_ * m_[i][j] + (1 - beta1_) * gj;
                v_[i][j] = beta2_ * v_[i][j] + (1 - beta2_) * gj * gj;
                d[j] -= static_cast<T>(lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.clear_grad();
    }

    std::vector<Tensor<T>>& params() { return params_; }

private:
    std::vector<Tensor<T>> params_;
    double beta1_, beta2_, eps_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

// SGD with heavy-ball momentum: v = mu v + g; p -= lr v.
//
// A parameter may be stepped on a leading block of rows and/or columns only
// (an "active window"); entries outside the window keep both their value and
// their momentum, which is what makes rank-truncated steps local.
template <Real T>
class SgdMomentum {
public:
    struct Window {
        std::size_t rows = 0;  // 0 = all
        std::size_t cols = 0;  // 0 = all
    };

    SgdMomentum(std::vector<Tensor<T>> params, double momentum) : params_(std::move(params)), mu_(momentum) {
        for (const auto& p : params_) vel_.emplace_back(p.numel(), 0.0);
    }

    void step(double lr, const std::vector<Window>& windows = {}) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            const std::size_t cols = p.rank() == 0 ? 1 : p.shape().back();
            const std::size_t rows = cols ? p.numel() / cols : 0;
            Window w = i < windows.size() ? windows[i] : Window{};
            const std::size_t nr = w.rows ? std::min(w.rows, rows) : rows;
            const std::size_t nc = w.cols ? std::min(w.cols, cols) : cols;
            auto g = p.grad();
            auto d = p.data();
            for (std::size_t r = 0; r < nr; ++r)
                for (std::size_t c = 0; c < nc; ++c) {
                    const std::size_t j = r * cols + c;
                    vel_[i][j] = mu_ * vel_[i][j] + static_cast<double>(g[j]);
                    d[j] -= static_cast<T>(lr * vel_[i][j]);
                }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.clear_grad();
    }

    std::vector<Tensor<T>>& params() { return params_; }

private:
    std::vector<Tensor<T>> params_;
    double mu_;
    std::vector<std::vector<double>> vel_;
};

}  // namespace flexi
