// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffaug/ops.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug {

// All closed-form diffusion coefficients. beta/sigma2 are 1-indexed by
// timestep (index 0 unused); alpha_bar[0] == 1 so t = 0 means clean data.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;
    std::vector<double> sigma2;
};

inline NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(size_t(T) + 1, 0.0);
    s.sigma2.assign(size_t(T) + 1, 0.0);
    s.alpha_bar.assign(size_t(T) + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        s.beta[size_t(t)] =
            T == 1 ? beta_min : beta_min + (beta_max - beta_min) * double(t - 1) / double(T - 1);
        s.sigma2[size_t(t)] = s.beta[size_t(t)];
        s.alpha_bar[size_t(t)] = s.alpha_bar[size_t(t) - 1] * (1.0 - s.beta[size_t(t)]);
    }
    return s;
}

// Strictly increasing subsequence of {1..T} used for deterministic
// sampling/inversion.
struct StepGrid {
    std::vector<int> taus;

    static StepGrid uniform(int T, int S) {
        if (S < 1 || S > T) throw std::invalid_argument("StepGrid: need 1 <= S <= T");
        StepGrid g;
        g.taus.resize(size_t(S));
        for (int i = 0; i < S; ++i) g.taus[size_t(i)] = int(int64_t(i + 1) * T / S);
        return g;
    }

    int steps() const { return int(taus.size()); }
};

inline void check_grid(const StepGrid& grid, const NoiseSchedule& sched) {
    if (grid.taus.empty()) throw std::invalid_argument("StepGrid: empty grid");
    if (grid.taus.front() < 1 || grid.taus.back() != sched.T)
        throw std::invalid_argument("StepGrid: must start >= 1 and end at T");
    for (size_t i = 1; i < grid.taus.size(); ++i)
        if (grid.taus[i] <= grid.taus[i - 1])
            throw std::invalid_argument("StepGrid: steps must be strictly increasing");
}

// x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps
template <typename T>
ndgrad::Tensor<T> q_sample(const ndgrad::Tensor<T>& x0, int t, const ndgrad::Tensor<T>& eps,
                           const NoiseSchedule& sched) {
    if (t < 0 || t > sched.T)
        throw std::invalid_argument("q_sample: t=" + std::to_string(t) + " out of [0," +
                                    std::to_string(sched.T) + "]");
    ndgrad::check_same_shape("q_sample", x0, eps);
    const double ab = sched.alpha_bar[size_t(t)];
    return ndgrad::add(ndgrad::scale(x0, T(std::sqrt(ab))),
                       ndgrad::scale(eps, T(std::sqrt(1.0 - ab))));
}

// Coefficient of the per-step score matching loss; its reciprocal is the
// reweighting that turns the weighted sum into the simple loss.
inline double elbo_weight(int t, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T)
        throw std::invalid_argument("elbo_weight: t=" + std::to_string(t) + " out of [1," +
                                    std::to_string(sched.T) + "]");
    const double b = sched.beta[size_t(t)];
    const double s2 = sched.sigma2[size_t(t)];
    const double ab = sched.alpha_bar[size_t(t)];
    return b * b / (2.0 * s2 * (1.0 - b) * (1.0 - ab));
}

inline double simple_reweight(int t, const NoiseSchedule& sched) {
    return 1.0 / elbo_weight(t, sched);
}

}  // namespace diffaug
