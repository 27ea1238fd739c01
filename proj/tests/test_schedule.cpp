// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "diffaug/rng.hpp"
#include "diffaug/schedule.hpp"

using namespace diffaug;
using ndgrad::Tensor;

TEST_CASE("constant beta product") {
    auto s = make_schedule(2, 0.5, 0.5);
    CHECK(s.alpha_bar[0] == 1.0);
    CHECK(s.alpha_bar[1] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.alpha_bar[2] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("alpha_bar strictly decreasing and recurrence holds") {
    auto s = make_schedule(250, 1e-4, 0.05);
    for (int t = 1; t <= s.T; ++t) {
        CHECK(s.alpha_bar[size_t(t)] < s.alpha_bar[size_t(t) - 1]);
        const double rhs = (1.0 - s.beta[size_t(t)]) * s.alpha_bar[size_t(t) - 1];
        CHECK(std::fabs(s.alpha_bar[size_t(t)] - rhs) <= 1e-12);
    }
}

TEST_CASE("default schedule ends close to pure noise") {
    auto s = make_schedule(1000, 1e-4, 0.02);
    // independent direct product
    double prod = 1.0;
    for (int t = 1; t <= 1000; ++t) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0);
    CHECK(s.alpha_bar[1000] == doctest::Approx(prod).epsilon(1e-12));
    CHECK(s.alpha_bar[1000] < 1e-3);
}

TEST_CASE("make_schedule validates bounds") {
    CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 1.0), std::invalid_argument);
}

TEST_CASE("q_sample boundary and scaling") {
    auto s = make_schedule(4, 0.5, 0.5);
    auto x0 = Tensor<double>::full({3}, 1.0);
    auto eps = Tensor<double>::full({3}, 0.7);

    auto at0 = q_sample(x0, 0, eps, s);
    for (double v : at0.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));

    // alpha_bar[2] = 0.25, eps = 0 -> 0.5
    auto zero = Tensor<double>::zeros({3});
    auto at2 = q_sample(x0, 2, zero, s);
    for (double v : at2.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));

    CHECK_THROWS_AS(q_sample(x0, 5, eps, s), std::invalid_argument);
    CHECK_THROWS_AS(q_sample(x0, -1, eps, s), std::invalid_argument);
}

TEST_CASE("q_sample Monte Carlo moments") {
    auto s = make_schedule(10, 0.05, 0.3);
    const int t = 6;
    const double ab = s.alpha_bar[t];
    Rng rng(99);
    auto x0 = Tensor<double>::full({4}, 0.25);
    const int draws = 100000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < draws; ++i) {
        std::vector<double> ev(4);
        rng.fill_normal(ev);
        auto eps = Tensor<double>::from_data({4}, std::move(ev));
        auto xt = q_sample(x0, t, eps, s);
        for (double v : xt.data()) {
            sum += v;
            sumsq += v * v;
        }
    }
    const double n = 4.0 * draws;
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    CHECK(mean == doctest::Approx(std::sqrt(ab) * 0.25).epsilon(0.02));
    CHECK(var == doctest::Approx(1.0 - ab).epsilon(0.02));
}

TEST_CASE("elbo weight hand value and reciprocal identity") {
    auto s = make_schedule(2, 0.5, 0.5);
    // sigma^2 = beta cancels one factor: beta/(2 (1-beta)(1-alpha_bar))
    CHECK(elbo_weight(1, s) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK_THROWS_AS(elbo_weight(0, s), std::invalid_argument);
    CHECK_THROWS_AS(elbo_weight(3, s), std::invalid_argument);

    auto big = make_schedule(200, 1e-4, 0.02);
    for (int t = 1; t <= big.T; ++t) {
        CHECK(elbo_weight(t, big) > 0.0);
        CHECK(elbo_weight(t, big) * simple_reweight(t, big) == doctest::Approx(1.0).epsilon(1e-15));
    }
}

TEST_CASE("step grid uniform subsampling") {
    auto g = StepGrid::uniform(1000, 50);
    CHECK(g.steps() == 50);
    CHECK(g.taus.front() == 20);
    CHECK(g.taus.back() == 1000);
    for (size_t i = 1; i < g.taus.size(); ++i) CHECK(g.taus[i] > g.taus[i - 1]);

    auto full = StepGrid::uniform(7, 7);
    for (int i = 0; i < 7; ++i) CHECK(full.taus[size_t(i)] == i + 1);

    CHECK_THROWS_AS(StepGrid::uniform(10, 0), std::invalid_argument);
    CHECK_THROWS_AS(StepGrid::uniform(10, 11), std::invalid_argument);
}
