#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gazemoe/tensor.hpp"

namespace gazemoe {

template <class S>
struct NamedParam {
    std::string name;
    Tensor<S> tensor;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
};

// Central-difference check of d(loss)/d(param) against the tape.
// `loss_fn` must be a pure function of the listed parameters; any discrete
// choices inside it (routing, prototype picks) have to be pinned by the caller
// so the perturbed evaluations stay on the same branch.
template <class S, class F>
GradCheckReport finite_diff_check(F&& loss_fn, const std::vector<NamedParam<S>>& params, S h) {
    for (const auto& p : params) {
        Tensor<S> t = p.tensor;
        t.zero_grad();
    }
    Tensor<S> loss = loss_fn();
    if (loss.numel() != 1) throw ContractError("finite_diff_check: loss must be scalar");
    backward(loss);

    std::vector<std::vector<S>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        if (p.tensor.has_grad())
            analytic.push_back(p.tensor.node()->grad);
        else
            analytic.emplace_back(p.tensor.numel(), S(0));
    }

    GradCheckReport rep;
    NoGradGuard no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<S> t = params[pi].tensor;
        S* v = t.data();
        const std::size_t n = t.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const S saved = v[i];
            v[i] = saved + h;
            const double lp = static_cast<double>(loss_fn().item());
            v[i] = saved - h;
            const double lm = static_cast<double>(loss_fn().item());
            v[i] = saved;
            const double num = (lp - lm) / (2.0 * static_cast<double>(h));
            const double ana = static_cast<double>(analytic[pi][i]);
            const double rel = std::abs(ana - num) / (std::abs(num) + 1e-8);
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = params[pi].name;
                rep.worst_index = i;
                rep.analytic = ana;
                rep.numeric = num;
            }
        }
    }
    return rep;
}

} // namespace gazemoe
