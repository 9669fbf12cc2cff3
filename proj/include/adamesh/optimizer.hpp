#pragma once

#include <set>
#include <unordered_map>

#include "adamesh/layers.hpp"

namespace adamesh {

/// Adam with bias correction. State is keyed by parameter name so attaching
/// or dropping adapters does not disturb unrelated slots.
template <class S>
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    /// Applies one update from the gradients accumulated on `tape`.
    /// When `trainable` is given, only those names move.
    void step(const ParamList<S>& params, Tape<S>& tape,
              const std::set<std::string>* trainable = nullptr) {
        ++t_;
        double bc1 = 1.0 - std::pow(b1_, double(t_));
        double bc2 = 1.0 - std::pow(b2_, double(t_));
        for (const auto& p : params) {
            if (trainable && !trainable->count(p.name)) continue;
            if (!tape.has_grad_for(*p.tensor)) continue;
            const Tensor<S>& g = tape.grad_of(*p.tensor);
            auto& slot = state_[p.name];
            if (slot.m.numel() != g.numel()) {
                slot.m = Tensor<S>(g.shape);
                slot.v = Tensor<S>(g.shape);
            }
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                double gi = double(g.data[i]);
                if (!std::isfinite(gi))
                    throw NumericError("adam: non-finite gradient in " + p.name);
                double m = b1_ * double(slot.m.data[i]) + (1.0 - b1_) * gi;
                double v = b2_ * double(slot.v.data[i]) + (1.0 - b2_) * gi * gi;
                slot.m.data[i] = S(m);
                slot.v.data[i] = S(v);
                double update = lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
                p.tensor->data[i] = S(double(p.tensor->data[i]) - update);
            }
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    std::size_t steps_taken() const { return t_; }

private:
    struct Slot {
        Tensor<S> m, v;
    };
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::unordered_map<std::string, Slot> state_;
};

}  // namespace adamesh
