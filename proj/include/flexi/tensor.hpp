#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <concepts>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "flexi/error.hpp"
#include "flexi/rng.hpp"

namespace flexi {

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

enum class Precision { f32, f64 };

template <Real T>
inline constexpr Precision precision_of = std::same_as<T, float> ? Precision::f32 : Precision::f64;

inline std::string_view precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(std::string_view s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ValueError("unknown precision '" + std::string(s) + "' (expected f32 or f64)");
}

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

template <Real T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <Real T>
using MatMap = Eigen::Map<RowMat<T>>;
template <Real T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <Real T>
class Graph;

namespace detail {

template <Real T>
struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty = absent
    bool requires_grad = false;
    std::uint64_t graph_tag = 0;  // 0 for leaves, else id of the producing graph
};

}  // namespace detail

// Reference-counted handle to a dense row-major array with an optional
// gradient slot. Copies of a Tensor alias the same storage; use clone()
// for an independent copy.
template <Real T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.s_ = std::make_shared<detail::Storage<T>>();
        const auto n = numel_of(shape);
        t.s_->shape = std::move(shape);
        t.s_->data.assign(n, T(0));
        t.s_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (numel_of(shape) != values.size())
            throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                             std::to_string(numel_of(shape)) + " values, got " +
                             std::to_string(values.size()));
        Tensor t;
        t.s_ = std::make_shared<detail::Storage<T>>();
        t.s_->shape = std::move(shape);
        t.s_->data = std::move(values);
        t.s_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T v) { return from({}, {v}); }

    static Tensor randn(Shape shape, T stddev, RngStream& rng, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.s_->data) x = static_cast<T>(rng.normal() * static_cast<double>(stddev));
        return t;
    }

    bool defined() const noexcept { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
    std::size_t numel() const { return s_->data.size(); }

    std::span<T> data() { return s_->data; }
    std::span<const T> data() const { return s_->data; }
    T& operator[](std::size_t i) { return s_->data[i]; }
    const T& operator[](std::size_t i) const { return s_->data[i]; }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return s_->data[0];
    }

    // Row-major 2-D view; rank-1 tensors are a single row, rank-3 fold the leading dims.
    MatMap<T> mat() { return {s_->data.data(), rows2d(), cols2d()}; }
    ConstMatMap<T> mat() const { return {s_->data.data(), rows2d(), cols2d()}; }

    bool requires_grad() const noexcept { return s_ && s_->requires_grad; }
    void set_requires_grad(bool on) {
        s_->requires_grad = on;
        if (!on) s_->grad.clear();
    }
    bool has_grad() const noexcept { return s_ && !s_->grad.empty(); }
    std::span<const T> grad() const { return s_->grad; }
    // Allocates a zero gradient on first use. Frozen tensors never get one.
    std::span<T> grad_mut() {
        if (!s_->requires_grad) throw GraphError("gradient requested for a tensor with requires_grad=false");
        if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
        return s_->grad;
    }
    void clear_grad() { s_->grad.clear(); }

    Tensor clone() const {
        Tensor t = from(s_->shape, s_->data, s_->requires_grad);
        return t;
    }
    bool same_storage(const Tensor& o) const noexcept { return s_ == o.s_; }
    bool bit_equal(const Tensor& o) const {
        return shape() == o.shape() &&
               std::equal(s_->data.begin(), s_->data.end(), o.s_->data.begin(),
                          [](T a, T b) { return std::memcmp(&a, &b, sizeof(T)) == 0; });
    }

    std::uint64_t graph_tag() const noexcept { return s_ ? s_->graph_tag : 0; }

private:
    template <Real>
    friend class Graph;

    Eigen::Index rows2d() const {
        const auto& sh = s_->shape;
        if (sh.empty()) return 1;
        std::size_t r = 1;
        for (std::size_t i = 0; i + 1 < sh.size(); ++i) r *= sh[i];
        return static_cast<Eigen::Index>(r);
    }
    Eigen::Index cols2d() const {
        const auto& sh = s_->shape;
        return sh.empty() ? 1 : static_cast<Eigen::Index>(sh.back());
    }

    std::shared_ptr<detail::Storage<T>> s_;
};

// Checks a span for NaN/Inf.
template <Real T>
bool all_finite(std::span<const T> v) {
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <Real To, Real From>
Tensor<To> cast(const Tensor<From>& t) {
    std::vector<To> out(t.numel());
    std::transform(t.data().begin(), t.data().end(), out.begin(), [](From x) { return static_cast<To>(x); });
    return Tensor<To>::from(t.shape(), std::move(out), t.requires_grad());
}

}  // namespace flexi
