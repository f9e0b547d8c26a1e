#pragma once

#include <functional>

#include "hgct/ops.hpp"

namespace hgct {

// Central-difference gradient verification in float64. `loss_fn` rebuilds the
// scalar loss from the current values of the leaves each call.
//
// Returns max over coordinates of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
inline double finite_difference_check_many(const std::function<Tensor<double>()>& loss_fn,
                                           std::vector<Tensor<double>> leaves,
                                           double h = 1e-5) {
    for (auto& l : leaves) {
        if (!l.requires_grad()) throw UsageError("finite_difference_check leaf lacks requires_grad");
        l.zero_grad();
    }
    Tensor<double> loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> g_ad;
    g_ad.reserve(leaves.size());
    for (auto& l : leaves) {
        auto g = l.grad();
        g_ad.emplace_back(g.begin(), g.end());
    }

    double max_rel = 0.0;
    NoGradGuard ng;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto vals = leaves[li].data();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double fp = loss_fn().item();
            vals[i] = orig - h;
            const double fm = loss_fn().item();
            vals[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw Error("finite_difference_check: non-finite loss at perturbed point");
            const double g_fd = (fp - fm) / (2.0 * h);
            const double ga = g_ad[li][i];
            const double rel =
                std::abs(ga - g_fd) / std::max({std::abs(ga), std::abs(g_fd), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

// Single-tensor form: f maps x to a scalar loss.
inline double finite_difference_check(
    const std::function<Tensor<double>(Tensor<double>&)>& f, Tensor<double> x,
    double h = 1e-5) {
    return finite_difference_check_many([&]() { return f(x); }, {x}, h);
}

}  // namespace hgct
