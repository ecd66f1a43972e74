#pragma once

// Central finite-difference check of tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "poar/rng.hpp"
#include "poar/tape.hpp"

namespace poar {

struct CoordinateCheck {
    std::string param;
    std::size_t index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_error = 0;
};

struct GradCheckReport {
    double max_rel_error = 0;
    std::size_t checked = 0;
    std::vector<CoordinateCheck> worst_per_param;  // one entry per parameter, in input order
};

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

template <class Real>
using LossBuilder = std::function<Var<Real>(Tape<Real>&)>;

struct GradCheckOptions {
    double step = 1e-5;
    std::size_t samples_per_param = 16;  // all coordinates when the tensor is smaller
    std::uint64_t seed = 0;
    // Multiplies the analytic gradient of the first parameter; 1 means no fault.
    double fault_scale = 1.0;
};

// Compares backward() against (f(p+h) − f(p−h)) / 2h at sampled coordinates.
template <class Real>
GradCheckReport grad_check(const LossBuilder<Real>& loss, const std::vector<Parameter<Real>*>& params,
                           const GradCheckOptions& opt = {}) {
    for (auto* p : params) p->zero_grad();
    {
        Tape<Real> tape;
        Var<Real> root = loss(tape);
        if (!std::isfinite(static_cast<double>(root.value().item()))) throw numeric_error("loss is not finite");
        tape.backward(root);
    }
    if (!params.empty() && opt.fault_scale != 1.0)
        for (auto& g : params.front()->grad.storage()) g *= Real(opt.fault_scale);

    auto eval = [&] {
        Tape<Real> tape(false);
        const Real v = loss(tape).value().item();
        if (!std::isfinite(static_cast<double>(v))) throw numeric_error("loss is not finite");
        return v;
    };

    GradCheckReport report;
    Rng rng(opt.seed);
    const Real h = Real(opt.step);
    for (auto* p : params) {
        const std::size_t size = p->value.size();
        std::vector<std::size_t> coords;
        if (size <= opt.samples_per_param) {
            for (std::size_t i = 0; i < size; ++i) coords.push_back(i);
        } else {
            for (std::size_t s = 0; s < opt.samples_per_param; ++s) coords.push_back(rng.below(size));
        }
        CoordinateCheck worst{p->name};
        worst.rel_error = -1;
        for (std::size_t i : coords) {
            const Real saved = p->value[i];
            p->value[i] = saved + h;
            const Real up = eval();
            p->value[i] = saved - h;
            const Real down = eval();
            p->value[i] = saved;
            const double numeric = static_cast<double>((up - down) / (Real(2) * h));
            const double analytic = static_cast<double>(p->grad[i]);
            const double rel = relative_error(analytic, numeric);
            ++report.checked;
            if (rel > worst.rel_error) worst = {p->name, i, analytic, numeric, rel};
        }
        report.max_rel_error = std::max(report.max_rel_error, worst.rel_error);
        report.worst_per_param.push_back(worst);
    }
    return report;
}

}  // namespace poar
