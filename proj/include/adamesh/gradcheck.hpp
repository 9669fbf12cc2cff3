#pragma once

#include <functional>

#include "adamesh/layers.hpp"

namespace adamesh {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    double tol = 1e-6;
    bool pass = true;

    const GradCheckEntry* worst() const {
        const GradCheckEntry* w = nullptr;
        for (const auto& e : entries)
            if (!w || e.max_rel_err > w->max_rel_err) w = &e;
        return w;
    }
};

/// Compares analytic gradients against central finite differences in 64-bit
/// mode. `build_loss` must construct the scalar loss on the given tape from
/// the current parameter values (it is re-invoked for every perturbation).
inline GradCheckReport grad_check(
    const std::function<Tape<double>::Var(Tape<double>&)>& build_loss,
    const ParamList<double>& params, double tol = 1e-6, double h = 1e-5) {
    GradCheckReport report;
    report.tol = tol;

    // Analytic pass.
    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        auto loss = build_loss(tape);
        tape.backward(loss);
        for (const auto& p : params) {
            if (tape.has_grad_for(*p.tensor))
                analytic.push_back(tape.grad_of(*p.tensor));
            else
                analytic.push_back(Tensor<double>(p.tensor->shape));
        }
    }

    auto eval = [&]() {
        Tape<double> tape;
        auto loss = build_loss(tape);
        return tape.val(loss).data[0];
    };

    // Per-tensor relative error: rel = |a - n| / max(|a|, |n|, 1e-8) with
    // the gradients compared as vectors under the L2 norm.
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<double>& t = *params[pi].tensor;
        GradCheckEntry entry{params[pi].name, 0.0};
        double na = 0, nn = 0, nd = 0;
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            double keep = t.data[i];
            t.data[i] = keep + h;
            double up = eval();
            t.data[i] = keep - h;
            double down = eval();
            t.data[i] = keep;
            double numeric = (up - down) / (2.0 * h);
            double a = analytic[pi].data[i];
            na += a * a;
            nn += numeric * numeric;
            nd += (a - numeric) * (a - numeric);
        }
        entry.max_rel_err =
            std::sqrt(nd) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

}  // namespace adamesh
