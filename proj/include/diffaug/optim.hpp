// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "diffaug/tensor.hpp"

namespace diffaug::ndgrad {

// Named parameter list; the order is part of a model's identity (used for
// checkpointing and optimizer state).
template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

inline double cosine_lr(double base, int64_t step, int64_t total_steps) {
    if (total_steps <= 0) return base;
    const double t = double(step) / double(total_steps);
    return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, t)));
}

// Plain SGD with momentum 0.9.
template <typename T>
class SgdMomentum {
public:
    SgdMomentum(std::vector<Tensor<T>> params, double momentum = 0.9)
        : params_(std::move(params)), momentum_(momentum) {
        for (auto& p : params_) velocity_.emplace_back(size_t(p.numel()), T(0));
    }

    void step(double lr) {
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            const auto& g = p.grad();
            auto& v = velocity_[i];
            auto& w = p.data_mut();
            for (size_t j = 0; j < w.size(); ++j) {
                v[j] = T(momentum_) * v[j] + g[j];
                w[j] -= T(lr) * v[j];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> velocity_;
    double momentum_;
};

}  // namespace diffaug::ndgrad
