// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "diffaug/ops.hpp"
#include "diffaug/rng.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug::ndgrad {

// Central finite-difference verification of the reverse-mode gradients.
// loss_fn must rebuild its graph from the current parameter values on every
// call (and must be deterministic, i.e. any dropout forced to rate 0).
// Returns max over sampled coordinates of |autodiff - fd| / (|fd| + 1e-8).
inline double grad_check(const std::function<Tensor<double>()>& loss_fn,
                         std::vector<Tensor<double>> params, double epsilon,
                         int64_t max_coords_per_param = 64, uint64_t seed = 0x9d5f) {
    if (epsilon <= 0.0) op_error("grad_check", "epsilon must be positive");

    Tensor<double> loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> autodiff;
    autodiff.reserve(params.size());
    for (auto& p : params) autodiff.push_back(p.grad_or_zeros());

    Rng rng(Rng::derive(seed, {1}));
    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        const int64_t n = p.numel();
        std::vector<int64_t> coords;
        if (n <= max_coords_per_param) {
            coords.resize(size_t(n));
            for (int64_t i = 0; i < n; ++i) coords[size_t(i)] = i;
        } else {
            for (int64_t i = 0; i < max_coords_per_param; ++i)
                coords.push_back(int64_t(rng.uniform_index(uint64_t(n))));
        }
        for (int64_t c : coords) {
            const double orig = p.data_mut()[size_t(c)];
            double fp, fm;
            {
                NoGradGuard ng;
                p.data_mut()[size_t(c)] = orig + epsilon;
                fp = loss_fn().item();
                p.data_mut()[size_t(c)] = orig - epsilon;
                fm = loss_fn().item();
                p.data_mut()[size_t(c)] = orig;
            }
            const double fd = (fp - fm) / (2.0 * epsilon);
            const double rel = std::fabs(autodiff[pi][size_t(c)] - fd) / (std::fabs(fd) + 1e-8);
            max_rel = std::max(max_rel, rel);
        }
        p.zero_grad();
    }
    return max_rel;
}

}  // namespace diffaug::ndgrad
