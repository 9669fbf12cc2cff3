#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <set>
#include <string>

#include "adamesh/autodiff.hpp"

namespace adamesh {

template <class S>
struct NamedParam;

/// One low-rank factor pair for a conv weight [m x n x k] (k=1 for linear):
/// B is [(m/r)*k x r*k] zero-initialized, A is [r*k x n*r] random. The
/// product reshapes through the 4-D view [m/r, k, n, r] back onto [m, n, k],
/// so the delta is zero at attach time and has the base weight's shape.
template <class S>
struct LoraFactor {
    std::size_t rank = 0;
    S scale = S(1);
    Tensor<S> B, A;
};

template <class S>
struct MoLoRASet {
    std::size_t m = 0, n = 0, k = 1;
    std::vector<LoraFactor<S>> factors;

    void collect(std::vector<NamedParam<S>>& out, const std::string& prefix) {
        for (std::size_t i = 0; i < factors.size(); ++i) {
            out.push_back({prefix + ".molora." + std::to_string(i) + ".A", &factors[i].A});
            out.push_back({prefix + ".molora." + std::to_string(i) + ".B", &factors[i].B});
        }
    }
};

struct MoLoRAConfig {
    std::vector<std::size_t> ranks;  // e.g. {4, 8, 16, 32}
    double scale = 1.0;
    /// Layer-name predicate; the expression adapter excludes its audio
    /// encoder through this by default.
    std::function<bool(const std::string&)> target_filter = [](const std::string&) { return true; };
};

namespace detail {

/// Flat index map from the factor product [(m/r)k x nr] onto [m x n x k].
inline std::vector<std::size_t> molora_index_map(std::size_t m, std::size_t n, std::size_t k,
                                                 std::size_t r) {
    std::vector<std::size_t> map(m * n * k);
    std::size_t cols = n * r;
    for (std::size_t i0 = 0; i0 < m / r; ++i0)
        for (std::size_t i1 = 0; i1 < k; ++i1)
            for (std::size_t i2 = 0; i2 < n; ++i2)
                for (std::size_t i3 = 0; i3 < r; ++i3) {
                    std::size_t dst = ((i0 * r + i3) * n + i2) * k + i1;
                    std::size_t src = (i0 * k + i1) * cols + i2 * r + i3;
                    map[dst] = src;
                }
    return map;
}

}  // namespace detail

template <class S>
MoLoRASet<S> make_molora_set(std::size_t m, std::size_t n, std::size_t k,
                             const MoLoRAConfig& cfg, Rng& rng, const std::string& layer_name) {
    std::set<std::size_t> seen;
    for (auto r : cfg.ranks) {
        if (r == 0) throw ConfigError("molora: rank must be positive (layer " + layer_name + ")");
        if (!seen.insert(r).second)
            throw ConfigError("molora: duplicate rank " + std::to_string(r) + " (layer " +
                              layer_name + ")");
        if (m % r != 0)
            throw ConfigError("molora: rank " + std::to_string(r) + " does not divide m=" +
                              std::to_string(m) + " (layer " + layer_name + ")");
    }
    MoLoRASet<S> set;
    set.m = m;
    set.n = n;
    set.k = k;
    for (auto r : cfg.ranks) {
        LoraFactor<S> f;
        f.rank = r;
        f.scale = S(cfg.scale);
        f.B = Tensor<S>({(m / r) * k, r * k});  // zero-init: delta vanishes at attach
        f.A = randn<S>(rng, {r * k, n * r}, 0.02);
        set.factors.push_back(std::move(f));
    }
    return set;
}

/// Numeric delta (no tape): sum_i s_i * reshape(B_i A_i), shape [m x n x k].
template <class S>
Tensor<S> delta_weight(const MoLoRASet<S>& set) {
    Tensor<S> delta({set.m, set.n, set.k});
    for (const auto& f : set.factors) {
        std::size_t rows = f.B.shape[0], inner = f.B.shape[1], cols = f.A.shape[1];
        Tensor<S> prod({rows, cols});
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t q = 0; q < inner; ++q) {
                S b = f.B(i, q);
                if (b == S(0)) continue;
                for (std::size_t j = 0; j < cols; ++j) prod(i, j) += b * f.A(q, j);
            }
        auto map = detail::molora_index_map(set.m, set.n, set.k, f.rank);
        for (std::size_t i = 0; i < delta.data.size(); ++i)
            delta.data[i] += f.scale * prod.data[map[i]];
    }
    return delta;
}

template <class S>
std::size_t count_trainable(const MoLoRASet<S>& set) {
    std::size_t total = 0;
    for (const auto& f : set.factors) total += f.B.numel() + f.A.numel();
    return total;
}

/// Tape-side effective conv weight: W0 + sum_i s_i reshape(B_i A_i).
template <class S>
typename Tape<S>::Var effective_weight_3d(Tape<S>& tape, const Tensor<S>& W,
                                          const std::optional<MoLoRASet<S>>& lora) {
    auto base = tape.param(const_cast<Tensor<S>&>(W));
    if (!lora || lora->factors.empty()) return base;
    auto acc = base;
    for (const auto& f : lora->factors) {
        auto prod = tape.matmul(tape.param(const_cast<Tensor<S>&>(f.B)),
                                tape.param(const_cast<Tensor<S>&>(f.A)));
        auto reshaped = tape.gather_flat(prod, detail::molora_index_map(lora->m, lora->n, lora->k, f.rank),
                                         {lora->m, lora->n, lora->k});
        acc = tape.add(acc, tape.scale(reshaped, f.scale));
    }
    return acc;
}

/// Same for a linear weight [m x n] (k=1 path, output reshaped to 2-D).
template <class S>
typename Tape<S>::Var effective_weight_2d(Tape<S>& tape, const Tensor<S>& W,
                                          const std::optional<MoLoRASet<S>>& lora) {
    auto base = tape.param(const_cast<Tensor<S>&>(W));
    if (!lora || lora->factors.empty()) return base;
    auto acc = base;
    for (const auto& f : lora->factors) {
        auto prod = tape.matmul(tape.param(const_cast<Tensor<S>&>(f.B)),
                                tape.param(const_cast<Tensor<S>&>(f.A)));
        auto reshaped = tape.gather_flat(prod, detail::molora_index_map(lora->m, lora->n, 1, f.rank),
                                         {lora->m, lora->n});
        acc = tape.add(acc, tape.scale(reshaped, f.scale));
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Model-level attach/merge over a registry of adaptable layers. Models expose
// their Linear/Conv1d weights through this view.
// ---------------------------------------------------------------------------

template <class S>
struct AdaptableLayer {
    std::string name;
    Tensor<S>* weight;                    // [m x n] or [m x n x k]
    std::optional<MoLoRASet<S>>* slot;
};

template <class S>
using AdaptableList = std::vector<AdaptableLayer<S>>;

template <class S>
void attach_molora(AdaptableList<S>& layers, const MoLoRAConfig& cfg, Rng& rng) {
    for (auto& l : layers) {
        if (!cfg.target_filter(l.name)) continue;
        if (l.slot->has_value()) throw DataError("molora: layer already adapted: " + l.name);
        std::size_t m = l.weight->shape[0], n = l.weight->shape[1];
        std::size_t k = l.weight->ndim() == 3 ? l.weight->shape[2] : 1;
        *l.slot = make_molora_set<S>(m, n, k, cfg, rng, l.name);
    }
}

/// Bake W <- W0 + delta into the base weights and drop the factors.
template <class S>
void merge_molora(AdaptableList<S>& layers) {
    bool any = false;
    for (auto& l : layers) {
        if (!l.slot->has_value()) continue;
        any = true;
        Tensor<S> d = delta_weight(**l.slot);
        for (std::size_t i = 0; i < l.weight->data.size(); ++i) l.weight->data[i] += d.data[i];
        l.slot->reset();
    }
    if (!any) throw DataError("molora: merge on a model with no attached factors");
}

template <class S>
std::size_t count_trainable(const AdaptableList<S>& layers) {
    std::size_t total = 0;
    for (const auto& l : layers)
        if (l.slot->has_value()) total += count_trainable(**l.slot);
    return total;
}

/// Names of every factor tensor (the trainable set during adaptation).
template <class S>
std::vector<std::string> molora_param_names(const std::vector<NamedParam<S>>& params) {
    std::vector<std::string> out;
    for (const auto& p : params)
        if (p.name.find(".molora.") != std::string::npos) out.push_back(p.name);
    return out;
}

}  // namespace adamesh
