#pragma once

#include <string>

#include "flexi/checkpoint.hpp"
#include "flexi/router.hpp"

namespace flexi {

namespace detail {
inline std::size_t meta_size(const std::map<std::string, std::string>& m, const std::string& key) {
    auto it = m.find(key);
    if (it == m.end()) throw FormatError("checkpoint: missing metadata '" + key + "'");
    try {
        return static_cast<std::size_t>(std::stoull(it->second));
    } catch (const std::exception&) {
        throw FormatError("checkpoint: metadata '" + key + "' is not an integer");
    }
}

template <Real T>
Tensor<T> take(const Checkpoint<T>& ck, const std::string& name, const Shape& shape) {
    const auto& t = ck.get(name);
    if (t.shape() != shape)
        throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                          shape_str(shape));
    return t.clone();
}
}  // namespace detail

template <Real T>
Checkpoint<T> to_checkpoint(const TransformerWeights<T>& w) {
    Checkpoint<T> ck;
    ck.meta["kind"] = "base";
    const auto& c = w.config;
    ck.meta["vocab_size"] = std::to_string(c.vocab_size);
    ck.meta["d_model"] = std::to_string(c.d_model);
    ck.meta["n_layers"] = std::to_string(c.n_layers);
    ck.meta["n_heads"] = std::to_string(c.n_heads);
    ck.meta["d_ff"] = std::to_string(c.d_ff);
    ck.meta["max_seq_len"] = std::to_string(c.max_seq_len);
    for (const auto& [n, t] : w.named()) ck.tensors.emplace_back(n, t);
    return ck;
}

// Rebuilds frozen base weights; every tensor must be present with the shape the config implies.
template <Real T>
TransformerWeights<T> base_from_checkpoint(const Checkpoint<T>& ck) {
    if (ck.meta.count("kind") && ck.meta.at("kind") != "base")
        throw FormatError("checkpoint holds '" + ck.meta.at("kind") + "', expected base weights");
    ModelConfig c;
    c.vocab_size = detail::meta_size(ck.meta, "vocab_size");
    c.d_model = detail::meta_size(ck.meta, "d_model");
    c.n_layers = detail::meta_size(ck.meta, "n_layers");
    c.n_heads = detail::meta_size(ck.meta, "n_heads");
    c.d_ff = detail::meta_size(ck.meta, "d_ff");
    c.max_seq_len = detail::meta_size(ck.meta, "max_seq_len");
    auto w = TransformerWeights<T>::init(c, 0);
    for (auto& [name, t] : w.named()) {
        auto src = detail::take(ck, name, t.shape());
        std::copy(src.data().begin(), src.data().end(), t.data().begin());
    }
    w.set_frozen(true);
    return w;
}

template <Real T>
Checkpoint<T> to_checkpoint(const AdapterSet<T>& a) {
    Checkpoint<T> ck;
    ck.meta["kind"] = "adapters";
    ck.meta["r_max"] = std::to_string(a.r_max);
    std::ostringstream alpha;
    alpha.precision(17);
    alpha << a.alpha_base;
    ck.meta["alpha_base"] = alpha.str();
    std::string targets;
    for (auto t : a.targets) targets += (targets.empty() ? "" : ",") + std::string(target_name(t));
    ck.meta["targets"] = targets;
    ck.meta["n_layers"] = std::to_string(a.pairs.size() / std::max<std::size_t>(1, a.targets.size()));
    ck.meta["d_model"] = a.pairs.empty() ? "0" : std::to_string(a.pairs.front().d_in());
    for (const auto& [n, t] : a.named()) ck.tensors.emplace_back(n, t);
    return ck;
}

template <Real T>
AdapterSet<T> adapters_from_checkpoint(const Checkpoint<T>& ck) {
    if (ck.meta.count("kind") && ck.meta.at("kind") != "adapters")
        throw FormatError("checkpoint holds '" + ck.meta.at("kind") + "', expected adapters");
    std::vector<Target> targets;
    std::istringstream ts(ck.meta_at("targets"));
    for (std::string t; std::getline(ts, t, ',');) {
        if (t == "wq") targets.push_back(Target::wq);
        else if (t == "wv") targets.push_back(Target::wv);
        else throw FormatError("checkpoint: unknown adapter target '" + t + "'");
    }
    const auto r_max = static_cast<int>(detail::meta_size(ck.meta, "r_max"));
    const auto n_layers = detail::meta_size(ck.meta, "n_layers");
    const auto d = detail::meta_size(ck.meta, "d_model");
    RngStream rng(0, "unused");
    auto a = AdapterSet<T>::init(n_layers, d, targets, r_max, std::stod(ck.meta_at("alpha_base")), 0.0, rng);
    for (auto& p : a.pairs) {
        p.A = detail::take(ck, p.name() + ".A", p.A.shape());
        p.B = detail::take(ck, p.name() + ".B", p.B.shape());
    }
    return a;
}

template <Real T>
Checkpoint<T> to_checkpoint(const RouterWeights<T>& r) {
    Checkpoint<T> ck;
    ck.meta["kind"] = "router";
    std::ostringstream sigma;
    sigma.precision(17);
    sigma << r.sigma;
    ck.meta["sigma"] = sigma.str();
    std::string ranks;
    for (int x : r.class_ranks) ranks += (ranks.empty() ? "" : ",") + std::to_string(x);
    ck.meta["class_ranks"] = ranks;
    for (const auto& [n, t] : r.named()) ck.tensors.emplace_back(n, t);
    return ck;
}

template <Real T>
RouterWeights<T> router_from_checkpoint(const Checkpoint<T>& ck) {
    if (ck.meta.count("kind") && ck.meta.at("kind") != "router")
        throw FormatError("checkpoint holds '" + ck.meta.at("kind") + "', expected a router");
    RouterWeights<T> r;
    r.w1 = ck.get("router.w1").clone();
    r.b1 = ck.get("router.b1").clone();
    r.w2 = ck.get("router.w2").clone();
    r.b2 = ck.get("router.b2").clone();
    if (r.w1.rank() != 2 || r.w2.rank() != 2 || r.b1.shape() != Shape{r.w1.dim(0)} ||
        r.b2.shape() != Shape{r.w2.dim(0)} || r.w2.dim(1) != r.w1.dim(0))
        throw FormatError("checkpoint: inconsistent router tensor shapes");
    r.sigma = std::stod(ck.meta_at("sigma"));
    r.class_ranks.clear();
    std::istringstream rs(ck.meta_at("class_ranks"));
    for (std::string x; std::getline(rs, x, ',');) r.class_ranks.push_back(std::stoi(x));
    if (r.class_ranks.size() != r.n_classes()) throw FormatError("checkpoint: router class table size mismatch");
    return r;
}

}  // namespace flexi
