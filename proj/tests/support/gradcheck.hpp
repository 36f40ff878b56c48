#pragma once

// Central finite-difference gradient checker. Perturbs every element of the
// listed leaf tensors at h = 1e-5 and compares d(loss)/d(theta) against the
// reverse-mode gradient with a relative-error bound.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "tivat/tensor.hpp"

namespace gradcheck {

struct Result {
    bool ok = true;
    double worst_rel_err = 0.0;
    std::string detail;
};

// `loss_fn` must rebuild the whole computation from the current leaf values
// and return the scalar loss. Leaves must have requires_grad set.
inline Result check(const std::function<tivat::Tensor()>& loss_fn,
                    const std::vector<tivat::Tensor>& leaves, double h = 1e-5,
                    double tol = 1e-4) {
    Result res;
    for (const tivat::Tensor& leaf : leaves) leaf.node()->grad.clear();
    tivat::Tensor loss = loss_fn();
    tivat::backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const tivat::Tensor& leaf : leaves) analytic.push_back(leaf.grad());

    tivat::NoGradGuard no_grad;  // finite differences need values only
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const tivat::Tensor& leaf = leaves[li];
        auto& values = leaf.node()->data;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = loss_fn().item();
            values[i] = saved - h;
            const double down = loss_fn().item();
            values[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double ad = analytic[li][i];
            const double denom = std::max({std::fabs(fd), std::fabs(ad), 1e-6});
            const double rel = std::fabs(fd - ad) / denom;
            if (rel > res.worst_rel_err) res.worst_rel_err = rel;
            if (rel > tol && std::fabs(fd - ad) > 1e-8) {
                res.ok = false;
                res.detail = "leaf " + std::to_string(li) + " elem " + std::to_string(i) +
                             ": ad=" + std::to_string(ad) + " fd=" + std::to_string(fd);
                return res;
            }
        }
    }
    return res;
}

}  // namespace gradcheck
