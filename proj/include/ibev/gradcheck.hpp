#pragma once

// Central finite-difference gradient checking at 64-bit precision.
// Compares the tape's analytic gradient against (f(x+eps e) - f(x-eps e))/2eps
// per coordinate and reports max |g_a - g_n| / max(1e-8, |g_a| + |g_n|).

#include <functional>
#include <string>
#include <vector>

#include "ibev/tensor.hpp"

namespace ibev {

struct GradCheckResult {
    double max_rel_err = 0.0;
    size_t worst_input = 0;
    int64_t worst_coord = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

// `f` rebuilds the graph from the current values of `inputs` and returns a
// scalar. Inputs must be leaves with requires_grad set. `stride` > 1 checks a
// deterministic subset of coordinates (used for large composite models).
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> inputs, double eps = 1e-5,
                                  int64_t stride = 1) {
    for (auto& in : inputs) {
        if (!in.requires_grad()) throw CheckError("grad_check: input does not require grad");
        in.zero_grad();
        in.ensure_grad();
    }
    Tensor<double> y = f();
    if (y.numel() != 1) throw CheckError("grad_check: f must return a scalar");
    y.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) analytic.push_back(in.grad());

    GradCheckResult res;
    for (size_t k = 0; k < inputs.size(); ++k) {
        auto& vals = inputs[k].mutable_data();
        for (int64_t i = 0; i < static_cast<int64_t>(vals.size()); i += stride) {
            const double orig = vals[i];
            vals[i] = orig + eps;
            const double fp = f().item();
            vals[i] = orig - eps;
            const double fm = f().item();
            vals[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw CheckError("grad_check: non-finite f at input " + std::to_string(k) +
                                 " coordinate " + std::to_string(i));
            const double gn = (fp - fm) / (2.0 * eps);
            const double ga = analytic[k][i];
            const double rel =
                std::fabs(ga - gn) / std::max(1e-8, std::fabs(ga) + std::fabs(gn));
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_input = k;
                res.worst_coord = i;
                res.analytic = ga;
                res.numeric = gn;
            }
        }
    }
    return res;
}

}  // namespace ibev
