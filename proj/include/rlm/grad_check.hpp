#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "rlm/tensor.hpp"

namespace rlm {

// Relative error with a guarded denominator. `floor` sets the gradient
// magnitude below which the comparison turns effectively absolute: a central
// difference of step eps on a loss of size L carries ~eps_machine*L/eps of
// cancellation noise, so elements far smaller than that cannot be compared
// relatively in any step size.
inline double relative_error(Real analytic, Real numeric, Real floor = 1e-8) {
    const Real denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

// Builds a scalar loss on the given tape from the single input leaf.
using TensorFn = std::function<Tensor(Tape&, const Tensor&)>;

// Worst relative error between the analytic gradient of f at x0 and central
// finite differences (f(x+eps*e_i) - f(x-eps*e_i)) / 2eps. f must be
// deterministic (fixed masks / seeds) across evaluations.
inline double grad_check(const TensorFn& f, const Shape& shape, std::vector<Real> x0,
                         Real eps = 1e-5) {
    std::vector<Real> analytic(x0.size(), 0.0);
    {
        Tape tape;
        Tensor x = tape.tensor(shape, x0, true);
        Tensor loss = f(tape, x);
        tape.backward(loss);
        if (x.has_grad()) {
            auto g = x.grad();
            std::copy(g.begin(), g.end(), analytic.begin());
        }
    }
    auto value_at = [&](const std::vector<Real>& v) {
        Tape tape;
        Tensor x = tape.tensor(shape, v, false);
        return f(tape, x).scalar();
    };
    double worst = 0.0;
    std::vector<Real> probe = x0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const Real orig = probe[i];
        probe[i] = orig + eps;
        const Real fp = value_at(probe);
        probe[i] = orig - eps;
        const Real fm = value_at(probe);
        probe[i] = orig;
        const Real numeric = (fp - fm) / (2.0 * eps);
        worst = std::max(worst, relative_error(analytic[i], numeric));
    }
    return worst;
}

// Same check over every entry of a set of persistent parameters. The caller
// must have already populated each Param::grad with the analytic gradients
// (one forward + backward); forward_loss re-evaluates the loss for the
// current parameter values and must be deterministic.
inline double grad_check_params(std::span<Param* const> params,
                                const std::function<Real()>& forward_loss,
                                Real eps = 1e-5, Real floor = 1e-8) {
    double worst = 0.0;
    for (Param* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const Real orig = p->value[i];
            p->value[i] = orig + eps;
            const Real fp = forward_loss();
            p->value[i] = orig - eps;
            const Real fm = forward_loss();
            p->value[i] = orig;
            const Real numeric = (fp - fm) / (2.0 * eps);
            worst = std::max(worst, relative_error(p->grad[i], numeric, floor));
        }
    }
    return worst;
}

}  // namespace rlm
