#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "flexi/tensor.hpp"

namespace flexi {

enum class OpKind {
    matmul,
    linear,
    add,
    add_bias,
    scale,
    mul,
    relu,
    softmax,
    layer_norm,
    embedding,
    causal_attention,
    concat,
    mean_pool,
    sum,
    cross_entropy,
    reshape,
    custom,
};

enum class GradMode { record, off };

// Target marker for positions excluded from the loss.
inline constexpr int kIgnore = -1;

// Tape of differentiable ops. Ops run eagerly; in record mode each one also
// appends a node (kind, inputs, output, forward, backward). Node order is the
// topological order. A graph can be differentiated once.
template <Real T>
class Graph {
public:
    using Fn = std::function<void()>;

    struct Node {
        OpKind kind;
        std::string name;
        std::vector<std::size_t> inputs;
        std::size_t output;
        Fn forward;
        Fn backward;
    };

    explicit Graph(GradMode mode = GradMode::record) : mode_(mode), tag_(next_tag()) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const noexcept { return mode_ == GradMode::record; }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    bool consumed() const noexcept { return consumed_; }

    // Re-runs every recorded forward in insertion order.
    void replay() {
        for (auto& n : nodes_) n.forward();
    }

    // ---- linear algebra -------------------------------------------------

    // a[m,k] * b[k,n]
    Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
        require_rank("matmul", a, 2);
        require_rank("matmul", b, 2);
        if (a.dim(1) != b.dim(0)) shape_mismatch("matmul", a.shape(), b.shape());
        Tensor<T> out = Tensor<T>::zeros({a.dim(0), b.dim(1)});
        return emit(OpKind::matmul, "matmul", {a, b}, out,
            [a, b, out]() mutable { out.mat().noalias() = a.mat() * b.mat(); },
            [a, b, out]() mutable {
                auto g = grad_mat(out);
                if (a.requires_grad()) grad_mat(a).noalias() += g * b.mat().transpose();
                if (b.requires_grad()) grad_mat(b).noalias() += a.mat().transpose() * g;
            });
    }

    // x[m,k] * w[n,k]^T, the projection convention used for all weights.
    Tensor<T> linear(Tensor<T> x, Tensor<T> w) {
        require_rank("linear", w, 2);
        const auto cols = x.rank() == 0 ? 1 : x.shape().back();
        if (cols != w.dim(1)) shape_mismatch("linear", x.shape(), w.shape());
        Shape os = x.shape();
        os.back() = w.dim(0);
        Tensor<T> out = Tensor<T>::zeros(os);
        return emit(OpKind::linear, "linear", {x, w}, out,
            [x, w, out]() mutable { out.mat().noalias() = x.mat() * w.mat().transpose(); },
            [x, w, out]() mutable {
                auto g = grad_mat(out);
                if (x.requires_grad()) grad_mat(x).noalias() += g * w.mat();
                if (w.requires_grad()) grad_mat(w).noalias() += g.transpose() * x.mat();
            });
    }

    // ---- elementwise ----------------------------------------------------

    Tensor<T> add(Tensor<T> a, Tensor<T> b) {
        if (a.shape() != b.shape()) shape_mismatch("add", a.shape(), b.shape());
        Tensor<T> out = Tensor<T>::zeros(a.shape());
        return emit(OpKind::add, "add", {a, b}, out,
            [a, b, out]() mutable {
                for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
            },
            [a, b, out]() mutable {
                accumulate(a, out.grad());
                accumulate(b, out.grad());
            });
    }

    // x[m,n] + bias[n] broadcast over rows; the only broadcast supported.
    Tensor<T> add_bias(Tensor<T> x, Tensor<T> bias) {
        if (bias.rank() != 1 || x.rank() == 0 || x.shape().back() != bias.dim(0))
            shape_mismatch("add_bias", x.shape(), bias.shape());
        Tensor<T> out = Tensor<T>::zeros(x.shape());
        return emit(OpKind::add_bias, "add_bias", {x, bias}, out,
            [x, bias, out]() mutable { out.mat() = x.mat().rowwise() + bias.mat().row(0); },
            [x, bias, out]() mutable {
                accumulate(x, out.grad());
                if (bias.requires_grad()) grad_mat(bias).row(0) += grad_mat(out).colwise().sum();
            });
    }

    Tensor<T> scale(Tensor<T> a, T s) {
        Tensor<T> out = Tensor<T>::zeros(a.shape());
        return emit(OpKind::scale, "scale", {a}, out,
            [a, s, out]() mutable {
                for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * s;
            },
            [a, s, out]() mutable {
                if (!a.requires_grad()) return;
                auto ga = a.grad_mut();
                auto go = out.grad();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * s;
            });
    }

    Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
        if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
        Tensor<T> out = Tensor<T>::zeros(a.shape());
        return emit(OpKind::mul, "mul", {a, b}, out,
            [a, b, out]() mutable {
                for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
            },
            [a, b, out]() mutable {
                auto go = out.grad();
                if (a.requires_grad()) {
                    auto ga = a.grad_mut();
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * b[i];
                }
                if (b.requires_grad()) {
                    auto gb = b.grad_mut();
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * a[i];
                }
            });
    }

    Tensor<T> relu(Tensor<T> a) {
        Tensor<T> out = Tensor<T>::zeros(a.shape());
        return emit(OpKind::relu, "relu", {a}, out,
            [a, out]() mutable {
                for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
            },
            [a, out]() mutable {
                if (!a.requires_grad()) return;
                auto ga = a.grad_mut();
                auto go = out.grad();
                for (std::size_t i = 0; i < ga.size(); ++i)
                    if (a[i] > T(0)) ga[i] += go[i];
            });
    }

    // ---- normalisation --------------------------------------------------

    // Softmax over the last dimension, max-subtracted.
    Tensor<T> softmax(Tensor<T> a) {
        if (a.rank() == 0) throw ShapeError("softmax: scalar input");
        Tensor<T> out = Tensor<T>::zeros(a.shape());
        return emit(OpKind::softmax, "softmax", {a}, out,
            [a, out]() mutable {
                auto x = a.mat();
                auto y = out.mat();
                for (Eigen::Index r = 0; r < x.rows(); ++r) {
                    const T mx = x.row(r).maxCoeff();
                    y.row(r) = (x.row(r).array() - mx).exp();
                    y.row(r) /= y.row(r).sum();
                }
            },
            [a, out]() mutable {
                if (!a.requires_grad()) return;
                auto y = out.mat();
                auto g = grad_mat(out);
                auto ga = grad_mat(a);
                for (Eigen::Index r = 0; r < y.rows(); ++r) {
                    const T dot = y.row(r).dot(g.row(r));
                    ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
                }
            });
    }

    // Per-row standardisation followed by gamma/beta affine.
    Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta, T eps = T(1e-5)) {
        if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
        const auto d = x.shape().back();
        if (gamma.shape() != Shape{d}) shape_mismatch("layer_norm", x.shape(), gamma.shape());
        if (beta.shape() != Shape{d}) shape_mismatch("layer_norm", x.shape(), beta.shape());
        Tensor<T> out = Tensor<T>::zeros(x.shape());
        const auto rows = x.numel() / std::max<std::size_t>(d, 1);
        auto xhat = std::make_shared<std::vector<T>>(x.numel());
        auto rstd = std::make_shared<std::vector<T>>(rows);
        return emit(OpKind::layer_norm, "layer_norm", {x, gamma, beta}, out,
            [x, gamma, beta, out, xhat, rstd, d, rows, eps]() mutable {
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* xr = &x[r * d];
                    T mean = 0;
                    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
                    mean /= static_cast<T>(d);
                    T var = 0;
                    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                    var /= static_cast<T>(d);
                    const T rs = T(1) / std::sqrt(var + eps);
                    (*rstd)[r] = rs;
                    for (std::size_t j = 0; j < d; ++j) {
                        const T h = (xr[j] - mean) * rs;
                        (*xhat)[r * d + j] = h;
                        out[r * d + j] = h * gamma[j] + beta[j];
                    }
                }
            },
            [x, gamma, beta, out, xhat, rstd, d, rows]() mutable {
                auto go = out.grad();
                if (gamma.requires_grad()) {
                    auto gg = gamma.grad_mut();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j) gg[j] += go[r * d + j] * (*xhat)[r * d + j];
                }
                if (beta.requires_grad()) {
                    auto gb = beta.grad_mut();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j) gb[j] += go[r * d + j];
                }
                if (!x.requires_grad()) return;
                auto gx = x.grad_mut();
                std::vector<T> dh(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    T mdh = 0, mdhh = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        dh[j] = go[r * d + j] * gamma[j];
                        mdh += dh[j];
                        mdhh += dh[j] * (*xhat)[r * d + j];
                    }
                    mdh /= static_cast<T>(d);
                    mdhh /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j)
                        gx[r * d + j] += (*rstd)[r] * (dh[j] - mdh - (*xhat)[r * d + j] * mdhh);
                }
            });
    }

    // ---- indexing / layout ----------------------------------------------

    // Rows of table[V,d] selected by ids; output [ids.size(), d].
    Tensor<T> embedding(Tensor<T> table, std::vector<int> ids) {
        require_rank("embedding", table, 2);
        const auto vocab = table.dim(0);
        const auto d = table.dim(1);
        for (int id : ids)
            if (id < 0 || static_cast<std::size_t>(id) >= vocab)
                throw ValueError("embedding: id " + std::to_string(id) + " out of range [0," +
                                 std::to_string(vocab) + ")");
        Tensor<T> out = Tensor<T>::zeros({ids.size(), d});
        return emit(OpKind::embedding, "embedding", {table}, out,
            [table, ids, out, d]() mutable {
                for (std::size_t i = 0; i < ids.size(); ++i)
                    std::copy_n(&table[static_cast<std::size_t>(ids[i]) * d], d, &out[i * d]);
            },
            [table, ids, out, d]() mutable {
                if (!table.requires_grad()) return;
                auto gt = table.grad_mut();
                auto go = out.grad();
                for (std::size_t i = 0; i < ids.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(ids[i]) * d + j] += go[i * d + j];
            });
    }

    // a[m,p] | b[m,q] -> [m,p+q]
    Tensor<T> concat(Tensor<T> a, Tensor<T> b) {
        require_rank("concat", a, 2);
        require_rank("concat", b, 2);
        if (a.dim(0) != b.dim(0)) shape_mismatch("concat", a.shape(), b.shape());
        const auto p = static_cast<Eigen::Index>(a.dim(1));
        const auto q = static_cast<Eigen::Index>(b.dim(1));
        Tensor<T> out = Tensor<T>::zeros({a.dim(0), a.dim(1) + b.dim(1)});
        return emit(OpKind::concat, "concat", {a, b}, out,
            [a, b, out, p, q]() mutable {
                out.mat().leftCols(p) = a.mat();
                out.mat().rightCols(q) = b.mat();
            },
            [a, b, out, p, q]() mutable {
                auto g = grad_mat(out);
                if (a.requires_grad()) grad_mat(a) += g.leftCols(p);
                if (b.requires_grad()) grad_mat(b) += g.rightCols(q);
            });
    }

    Tensor<T> reshape(Tensor<T> a, Shape shape) {
        if (numel_of(shape) != a.numel()) shape_mismatch("reshape", a.shape(), shape);
        Tensor<T> out = Tensor<T>::zeros(std::move(shape));
        return emit(OpKind::reshape, "reshape", {a}, out,
            [a, out]() mutable { std::copy(a.data().begin(), a.data().end(), out.data().begin()); },
            [a, out]() mutable { accumulate(a, out.grad()); });
    }

    // Sum of all elements -> scalar.
    Tensor<T> sum(Tensor<T> a) {
        Tensor<T> out = Tensor<T>::zeros({});
        return emit(OpKind::sum, "sum", {a}, out,
            [a, out]() mutable {
                T s = 0;
                for (T v : a.data()) s += v;
                out[0] = s;
            },
            [a, out]() mutable {
                if (!a.requires_grad()) return;
                const T g = out.grad()[0];
                for (auto& v : a.grad_mut()) v += g;
            });
    }

    // ---- sequence ops ---------------------------------------------------

    // Mask-weighted mean over positions. h[n*seq, d] with mask[n*seq] in {0,1}
    // -> [n, d]. Every sample needs at least one live position.
    Tensor<T> mean_pool(Tensor<T> h, std::vector<T> mask, std::size_t n, std::size_t seq) {
        require_rank("mean_pool", h, 2);
        if (h.dim(0) != n * seq || mask.size() != n * seq)
            throw ShapeError("mean_pool: expected " + std::to_string(n * seq) + " rows, got " +
                             std::to_string(h.dim(0)) + " rows / " + std::to_string(mask.size()) + " mask entries");
        std::vector<T> inv(n);
        for (std::size_t i = 0; i < n; ++i) {
            T s = 0;
            for (std::size_t t = 0; t < seq; ++t) s += mask[i * seq + t];
            if (!(s > T(0))) throw ValueError("mean_pool: sample " + std::to_string(i) + " has an all-zero mask");
            inv[i] = T(1) / s;
        }
        const auto d = h.dim(1);
        Tensor<T> out = Tensor<T>::zeros({n, d});
        return emit(OpKind::mean_pool, "mean_pool", {h}, out,
            [h, mask, inv, out, n, seq, d]() mutable {
                std::fill(out.data().begin(), out.data().end(), T(0));
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t t = 0; t < seq; ++t) {
                        const T m = mask[i * seq + t];
                        if (m == T(0)) continue;
                        for (std::size_t j = 0; j < d; ++j) out[i * d + j] += m * h[(i * seq + t) * d + j];
                    }
                    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= inv[i];
                }
            },
            [h, mask, inv, out, n, seq, d]() mutable {
                if (!h.requires_grad()) return;
                auto gh = h.grad_mut();
                auto go = out.grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t t = 0; t < seq; ++t) {
                        const T w = mask[i * seq + t] * inv[i];
                        if (w == T(0)) continue;
                        for (std::size_t j = 0; j < d; ++j) gh[(i * seq + t) * d + j] += w * go[i * d + j];
                    }
            });
    }

    // Multi-head scaled dot-product attention with a causal mask.
    // q, k, v: [n*seq, d] or [n, seq, d] with d = heads * head_dim. Output has q's shape.
    Tensor<T> causal_attention(Tensor<T> q, Tensor<T> k, Tensor<T> v, std::size_t n, std::size_t seq,
                               std::size_t heads) {
        if (q.rank() < 2) throw ShapeError("causal_attention: q needs rank >= 2");
        if (q.shape() != k.shape()) shape_mismatch("causal_attention", q.shape(), k.shape());
        if (q.shape() != v.shape()) shape_mismatch("causal_attention", q.shape(), v.shape());
        const auto d = q.shape().back();
        if (d == 0 || q.numel() / d != n * seq) throw ShapeError("causal_attention: rows != n*seq for " + shape_str(q.shape()));
        if (heads == 0 || d % heads != 0) throw ShapeError("causal_attention: d not divisible by heads");
        const auto hd = static_cast<Eigen::Index>(d / heads);
        const auto S = static_cast<Eigen::Index>(seq);
        const T sc = T(1) / std::sqrt(static_cast<T>(hd));
        auto probs = std::make_shared<std::vector<T>>(n * heads * seq * seq);
        Tensor<T> out = Tensor<T>::zeros(q.shape());
        return emit(OpKind::causal_attention, "causal_attention", {q, k, v}, out,
            [q, k, v, out, probs, n, heads, hd, S, sc]() mutable {
                auto Q = q.mat();
                auto K = k.mat();
                auto V = v.mat();
                auto O = out.mat();
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t h = 0; h < heads; ++h) {
                        const auto r0 = static_cast<Eigen::Index>(b) * S;
                        const auto c0 = static_cast<Eigen::Index>(h) * hd;
                        MatMap<T> P(&(*probs)[(b * heads + h) * static_cast<std::size_t>(S * S)], S, S);
                        P.noalias() = Q.block(r0, c0, S, hd) * K.block(r0, c0, S, hd).transpose();
                        for (Eigen::Index i = 0; i < S; ++i) {
                            const auto live = i + 1;
                            auto row = P.row(i);
                            const T mx = row.head(live).maxCoeff() * sc;
                            row.head(live) = (row.head(live).array() * sc - mx).exp();
                            row.head(live) /= row.head(live).sum();
                            if (live < S) row.tail(S - live).setZero();
                        }
                        O.block(r0, c0, S, hd).noalias() = P * V.block(r0, c0, S, hd);
                    }
            },
            [q, k, v, out, probs, n, heads, hd, S, sc]() mutable {
                auto Q = q.mat();
                auto K = k.mat();
                auto V = v.mat();
                auto G = grad_mat(out);
                RowMat<T> dP(S, S);
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t h = 0; h < heads; ++h) {
                        const auto r0 = static_cast<Eigen::Index>(b) * S;
                        const auto c0 = static_cast<Eigen::Index>(h) * hd;
                        ConstMatMap<T> P(&(*probs)[(b * heads + h) * static_cast<std::size_t>(S * S)], S, S);
                        const auto g = G.block(r0, c0, S, hd);
                        if (v.requires_grad()) grad_mat(v).block(r0, c0, S, hd).noalias() += P.transpose() * g;
                        if (!q.requires_grad() && !k.requires_grad()) continue;
                        dP.noalias() = g * V.block(r0, c0, S, hd).transpose();
                        for (Eigen::Index i = 0; i < S; ++i) {
                            const T dot = P.row(i).dot(dP.row(i));
                            dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot) * sc).matrix();
                        }
                        if (q.requires_grad()) grad_mat(q).block(r0, c0, S, hd).noalias() += dP * K.block(r0, c0, S, hd);
                        if (k.requires_grad())
                            grad_mat(k).block(r0, c0, S, hd).noalias() += dP.transpose() * Q.block(r0, c0, S, hd);
                    }
            });
    }

    // ---- losses ---------------------------------------------------------

    // Mean over non-ignored rows of -log softmax(logits)[label]. Leading dims fold into rows.
    Tensor<T> cross_entropy(Tensor<T> logits, std::vector<int> labels) {
        if (logits.rank() < 2) throw ShapeError("cross_entropy: logits need rank >= 2, got " + shape_str(logits.shape()));
        const auto C = logits.shape().back();
        const auto N = C ? logits.numel() / C : 0;
        if (labels.size() != N)
            throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(N) + " rows");
        std::size_t counted = 0;
        for (int y : labels) {
            if (y == kIgnore) continue;
            if (y < 0 || static_cast<std::size_t>(y) >= C)
                throw ValueError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                                 std::to_string(C) + ")");
            ++counted;
        }
        if (counted == 0) throw ValueError("cross_entropy: empty batch (no labelled rows)");
        auto probs = std::make_shared<std::vector<T>>(N * C);
        Tensor<T> out = Tensor<T>::zeros({});
        const T inv = T(1) / static_cast<T>(counted);
        return emit(OpKind::cross_entropy, "cross_entropy", {logits}, out,
            [logits, labels, probs, out, N, C, inv]() mutable {
                T total = 0;
                for (std::size_t r = 0; r < N; ++r) {
                    if (labels[r] == kIgnore) continue;
                    const T* x = &logits[r * C];
                    T mx = x[0];
                    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
                    T z = 0;
                    for (std::size_t c = 0; c < C; ++c) {
                        const T e = std::exp(x[c] - mx);
                        (*probs)[r * C + c] = e;
                        z += e;
                    }
                    for (std::size_t c = 0; c < C; ++c) (*probs)[r * C + c] /= z;
                    total += (mx + std::log(z)) - x[labels[r]];
                }
                out[0] = total * inv;
            },
            [logits, labels, probs, out, N, C, inv]() mutable {
                if (!logits.requires_grad()) return;
                const T g = out.grad()[0] * inv;
                auto gl = logits.grad_mut();
                for (std::size_t r = 0; r < N; ++r) {
                    if (labels[r] == kIgnore) continue;
                    for (std::size_t c = 0; c < C; ++c) gl[r * C + c] += g * (*probs)[r * C + c];
                    gl[r * C + static_cast<std::size_t>(labels[r])] -= g;
                }
            });
    }

    // ---- extension point ------------------------------------------------

    // User-defined op. `forward` fills `out` from `inputs`; `backward` reads
    // out.grad() and accumulates into inputs' grad_mut().
    Tensor<T> custom(std::string name, std::vector<Tensor<T>> inputs, Shape out_shape,
                     std::function<void(std::vector<Tensor<T>>&, Tensor<T>&)> forward,
                     std::function<void(std::vector<Tensor<T>>&, Tensor<T>&)> backward) {
        Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
        auto ins = inputs;
        return emit(OpKind::custom, std::move(name), std::move(inputs), out,
            [ins, out, forward]() mutable { forward(ins, out); },
            [ins, out, backward]() mutable { backward(ins, out); });
    }

    // ---- differentiation ------------------------------------------------

    void backward(Tensor<T> loss) {
        if (!recording()) throw GraphError("backward: graph was built with gradients off");
        if (consumed_) throw GraphError("backward: graph already consumed; build a new graph per step");
        if (!loss.defined() || loss.numel() != 1 || loss.rank() != 0)
            throw GraphError("backward: loss must be a scalar, got shape " +
                             (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
        if (loss.graph_tag() != tag_) throw GraphError("backward: loss was not produced by this graph (detached)");
        consumed_ = true;
        if (!loss.requires_grad()) return;
        loss.grad_mut()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto& out = tensors_[it->output];
            if (!out.requires_grad() || !out.has_grad()) continue;
            it->backward();
        }
        // Interior results hold gradients only transiently.
        for (auto& n : nodes_) tensors_[n.output].clear_grad();
    }

private:
    static std::uint64_t next_tag() {
        static std::atomic<std::uint64_t> counter{0};
        return ++counter;
    }

    static void require_rank(const char* op, const Tensor<T>& t, std::size_t r) {
        if (t.rank() != r)
            throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                             shape_str(t.shape()));
    }

    static MatMap<T> grad_mat(Tensor<T>& t) {
        auto g = t.grad_mut();
        return {g.data(), t.rows2d(), t.cols2d()};
    }

    static void accumulate(Tensor<T>& dst, std::span<const T> g) {
        if (!dst.requires_grad()) return;
        auto gd = dst.grad_mut();
        for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g[i];
    }

    std::size_t id_of(const Tensor<T>& t) {
        auto key = t.s_.get();
        auto it = ids_.find(key);
        if (it != ids_.end()) return it->second;
        tensors_.push_back(t);
        ids_.emplace(key, tensors_.size() - 1);
        return tensors_.size() - 1;
    }

    template <typename F, typename B>
    Tensor<T> emit(OpKind kind, std::string name, std::vector<Tensor<T>> inputs, Tensor<T> out, F fwd, B bwd) {
        for (auto& in : inputs)
            if (in.graph_tag() != 0 && in.graph_tag() != tag_)
                throw GraphError(name + ": input belongs to a different graph");
        fwd();
        if (!recording()) return out;
        bool needs = false;
        for (auto& in : inputs) needs = needs || in.requires_grad();
        out.s_->requires_grad = needs;
        out.s_->graph_tag = tag_;
        Node node{kind, std::move(name), {}, 0, Fn(fwd), Fn(bwd)};
        for (auto& in : inputs) node.inputs.push_back(id_of(in));
        node.output = id_of(out);
        nodes_.push_back(std::move(node));
        return out;
    }

    GradMode mode_;
    std::uint64_t tag_;
    bool consumed_ = false;
    std::vector<Tensor<T>> tensors_;
    std::unordered_map<const detail::Storage<T>*, std::size_t> ids_;
    std::vector<Node> nodes_;
};

}  // namespace flexi
