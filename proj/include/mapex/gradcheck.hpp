#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mapex/errors.hpp"
#include "mapex/tensor.hpp"

namespace mapex {

// Central finite differences against the analytic gradient. fn must rebuild
// the scalar loss from the current parameter values on every call. Returns
// the worst relative error, with an absolute floor of 1e-8 in the
// denominator so near-zero gradients do not blow up the ratio.
inline double grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> params,
                         double eps = 1e-5) {
    if (eps < 1e-7 || eps > 1e-3) throw ContractError("grad_check eps out of [1e-7, 1e-3]");
    for (auto& p : params) p.zero_grad();
    Tensor loss = fn();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(p.grad());

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& val = params[pi].value();
        for (std::size_t j = 0; j < val.size(); ++j) {
            double orig = val[j];
            val[j] = orig + eps;
            double fp = fn().item();
            val[j] = orig - eps;
            double fm = fn().item();
            val[j] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite perturbed loss");
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[pi][j];
            double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace mapex
