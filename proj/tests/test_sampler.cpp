// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "diffaug/datasets.hpp"
#include "diffaug/sampler.hpp"

using namespace diffaug;
using ndgrad::Shape;
using ndgrad::Tensor;

namespace {

// schedule with chosen coefficients for hand-value checks
NoiseSchedule fabricated(std::vector<double> beta, std::vector<double> alpha_bar,
                         std::vector<double> sigma2) {
    NoiseSchedule s;
    s.T = int(beta.size()) - 1;
    s.beta = std::move(beta);
    s.alpha_bar = std::move(alpha_bar);
    s.sigma2 = std::move(sigma2);
    return s;
}

template <typename T>
NoiseFn<T> const_predictor(T value) {
    return [value](const Tensor<T>& x, int) { return Tensor<T>::full(x.shape(), value); };
}

DenoiserConfig tiny_cfg() {
    DenoiserConfig cfg;
    cfg.resolution = 8;
    cfg.channels = {8, 12, 16};
    cfg.num_classes = 3;
    cfg.emb_dim = 16;
    return cfg;
}

}  // namespace

TEST_CASE("simple_loss with an oracle predictor is zero") {
    auto sched = make_schedule(10, 0.02, 0.2);
    Rng rng(5);
    std::vector<float> xv(2 * 16);
    rng.fill_normal(xv);
    auto x0 = Tensor<float>::from_data({2, 1, 4, 4}, xv);

    // recovers eps exactly from x_t and the schedule
    auto oracle = [&](const Tensor<float>& xt, const std::vector<int>& ts,
                      const std::vector<int>&) {
        std::vector<float> out(size_t(xt.numel()));
        const int64_t per = xt.numel() / xt.dim(0);
        for (int64_t i = 0; i < xt.dim(0); ++i) {
            const double ab = sched.alpha_bar[size_t(ts[size_t(i)])];
            for (int64_t k = 0; k < per; ++k) {
                const double x = xt.data()[size_t(i * per + k)];
                const double x0v = x0.data()[size_t(i * per + k)];
                out[size_t(i * per + k)] =
                    float((x - std::sqrt(ab) * x0v) / std::sqrt(1.0 - ab));
            }
        }
        return Tensor<float>::from_data(xt.shape(), std::move(out));
    };
    Rng lrng(7);
    auto loss = simple_loss<float>(oracle, x0, {0, 1}, sched, lrng);
    CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("simple_loss of the zero-initialized model is about one") {
    auto sched = make_schedule(50, 1e-3, 0.05);
    Rng mrng(1);
    auto model = init_denoiser<float>(tiny_cfg(), mrng);
    Rng drng(3);
    std::vector<float> xv(64 * 64);
    drng.fill_normal(xv, 0.5);
    auto x0 = Tensor<float>::from_data({64, 1, 8, 8}, std::move(xv));
    Rng lrng(9);
    auto loss = simple_loss(model, x0, std::vector<int>(64, 0), sched, lrng);
    CHECK(double(loss.item()) == doctest::Approx(1.0).epsilon(0.15));
    CHECK(loss.item() >= 0.0f);
}

TEST_CASE("simple_loss rejects an empty batch") {
    auto sched = make_schedule(10, 0.02, 0.2);
    Rng rng(1);
    Tensor<float> empty;
    CHECK_THROWS_AS(simple_loss<float>(
                        [](const Tensor<float>& x, const std::vector<int>&,
                           const std::vector<int>&) { return x; },
                        empty, {}, sched, rng),
                    std::invalid_argument);
}

TEST_CASE("ancestral step hand value") {
    // beta = 0.5, alpha_bar = 0.75, sigma2 = beta; at t=1 the noise term is
    // forced to zero
    auto s = fabricated({0, 0.5}, {1, 0.75}, {0, 0.5});
    auto x = Tensor<double>::full({1}, 1.0);
    Rng rng(2);
    auto out = ancestral_step<double>(const_predictor(0.4), x, 1, s, rng);
    CHECK(out.data()[0] == doctest::Approx(0.84852814).epsilon(1e-7));
}

TEST_CASE("ancestral step with zero predictor rescales") {
    auto s = fabricated({0, 0.36}, {1, 0.5}, {0, 0.36});
    auto x = Tensor<double>::full({4}, 2.0);
    Rng rng(2);
    auto out = ancestral_step<double>(const_predictor(0.0), x, 1, s, rng);
    for (double v : out.data()) CHECK(v == doctest::Approx(2.0 / std::sqrt(0.64)).epsilon(1e-12));
    CHECK_THROWS_AS(ancestral_step<double>(const_predictor(0.0), x, 0, s, rng),
                    std::invalid_argument);
}

TEST_CASE("ancestral step noise variance matches sigma2") {
    auto sched = make_schedule(10, 0.05, 0.3);
    const int t = 5;
    auto x = Tensor<double>::full({1}, 0.3);
    Rng rng(31);
    const int draws = 40000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < draws; ++i) {
        auto out = ancestral_step<double>(const_predictor(0.2), x, t, sched, rng);
        sum += out.data()[0];
        sumsq += out.data()[0] * out.data()[0];
    }
    const double mean = sum / draws;
    const double var = sumsq / draws - mean * mean;
    CHECK(var == doctest::Approx(sched.sigma2[t]).epsilon(0.02));
}

TEST_CASE("ddim step hand value") {
    auto s = make_schedule(2, 0.5, 0.5);  // alpha_bar = [1, 0.5, 0.25]
    auto x = Tensor<double>::full({1}, 1.0);
    auto e = Tensor<double>::full({1}, 0.6);
    auto out = ddim_step(x, e, e, 2, 1, s);
    CHECK(out.data()[0] == doctest::Approx(1.1036307).epsilon(1e-6));
    CHECK_THROWS_AS(ddim_step(x, e, e, 1, 1, s), std::invalid_argument);
    CHECK_THROWS_AS(ddim_step(x, e, e, 1, 2, s), std::invalid_argument);
}

TEST_CASE("ddim step with zero eps rescales by the alpha ratio") {
    auto s = make_schedule(2, 0.5, 0.5);
    auto x = Tensor<double>::full({3}, 0.8);
    auto z = Tensor<double>::zeros({3});
    auto out = ddim_step(x, z, z, 2, 1, s);
    for (double v : out.data())
        CHECK(v == doctest::Approx(0.8 * std::sqrt(0.5 / 0.25)).epsilon(1e-12));
}

TEST_CASE("ddim step consistency of the predicted sample") {
    auto s = make_schedule(6, 0.05, 0.3);
    Rng rng(3);
    std::vector<double> cv(8), ev(8);
    rng.fill_normal(cv);
    rng.fill_normal(ev);
    auto c = Tensor<double>::from_data({8}, cv);
    auto e = Tensor<double>::from_data({8}, ev);
    const int t = 5, tp = 2;
    auto xt = ndgrad::add(ndgrad::scale(c, std::sqrt(s.alpha_bar[t])),
                          ndgrad::scale(e, std::sqrt(1 - s.alpha_bar[t])));
    auto out = ddim_step(xt, e, e, t, tp, s);
    for (int64_t i = 0; i < 8; ++i) {
        const double expect = std::sqrt(s.alpha_bar[tp]) * cv[size_t(i)] +
                              std::sqrt(1 - s.alpha_bar[tp]) * ev[size_t(i)];
        CHECK(out.data()[size_t(i)] == doctest::Approx(expect).epsilon(1e-10));
    }
}

TEST_CASE("ddim decomposition into predicted-x0 and direction terms is exact") {
    auto s = make_schedule(8, 0.02, 0.25);
    Rng rng(4);
    std::vector<double> xv(6), e1v(6), e2v(6);
    rng.fill_normal(xv);
    rng.fill_normal(e1v);
    rng.fill_normal(e2v);
    auto x = Tensor<double>::from_data({6}, xv);
    auto e1 = Tensor<double>::from_data({6}, e1v);
    auto e2 = Tensor<double>::from_data({6}, e2v);
    const int t = 7, tp = 3;
    auto out = ddim_step(x, e1, e2, t, tp, s);
    auto sterm = ndgrad::scale(ddim_predicted_x0(x, e1, t, s), std::sqrt(s.alpha_bar[tp]));
    auto dterm = ndgrad::scale(e2, std::sqrt(1 - s.alpha_bar[tp]));
    auto recomposed = ndgrad::add(sterm, dterm);
    CHECK(out.data() == recomposed.data());  // bit-exact
}

TEST_CASE("ddim_sample single zero-predictor step and determinism") {
    auto s = make_schedule(4, 0.1, 0.4);
    StepGrid grid;
    grid.taus = {4};
    auto xT = Tensor<float>::full({1, 1, 2, 2}, 0.5f);
    auto res = ddim_sample<float>(const_predictor(0.0f), xT, grid, s);
    for (float v : res.last.data())
        CHECK(v == doctest::Approx(0.5 / std::sqrt(s.alpha_bar[4])).epsilon(1e-6));
    CHECK(res.trajectory.states.size() == 2);
    CHECK(res.trajectory.states.front().first == 4);
    CHECK(res.trajectory.states.back().first == 0);

    auto res2 = ddim_sample<float>(const_predictor(0.0f), xT, grid, s);
    CHECK(res.last.data() == res2.last.data());

    StepGrid bad;
    CHECK_THROWS_AS(ddim_sample<float>(const_predictor(0.0f), xT, bad, s),
                    std::invalid_argument);
}

TEST_CASE("ddim_invert with zero predictor is a pure rescale") {
    auto s = make_schedule(6, 0.05, 0.3);
    auto grid = StepGrid::uniform(6, 3);
    auto x0 = Tensor<float>::full({1, 1, 2, 2}, -0.7f);
    auto res = ddim_invert<float>(const_predictor(0.0f), x0, grid, s);
    for (float v : res.last.data())
        CHECK(v == doctest::Approx(-0.7 * std::sqrt(s.alpha_bar[6])).epsilon(1e-6));
    CHECK(res.trajectory.states.front().first == 0);
    CHECK(res.trajectory.states.back().first == 6);
}

TEST_CASE("one invert step then one sample step is the identity for a constant predictor") {
    auto s = make_schedule(5, 0.1, 0.3);
    StepGrid grid;
    grid.taus = {5};
    Rng rng(8);
    std::vector<float> xv(16);
    rng.fill_normal(xv, 0.5);
    for (auto& v : xv) v = std::min(1.0f, std::max(-1.0f, v));
    auto x0 = Tensor<float>::from_data({1, 1, 4, 4}, xv);
    auto inv = ddim_invert<float>(const_predictor(0.37f), x0, grid, s);
    auto back = ddim_sample<float>(const_predictor(0.37f), inv.last, grid, s);
    for (size_t i = 0; i < xv.size(); ++i)
        CHECK(back.last.data()[i] == doctest::Approx(xv[i]).epsilon(1e-6));
}

TEST_CASE("reconstruct is the identity for step-constant predictors") {
    auto s = make_schedule(40, 5e-3, 0.1);
    auto grid = StepGrid::uniform(40, 10);
    Rng rng(9);
    std::vector<float> xv(32);
    rng.fill_normal(xv, 0.4);
    for (auto& v : xv) v = std::min(1.0f, std::max(-1.0f, v));
    auto x0 = Tensor<float>::from_data({2, 1, 4, 4}, xv);

    // step-wise constant: value depends on t only
    NoiseFn<float> stepwise = [](const Tensor<float>& x, int t) {
        return Tensor<float>::full(x.shape(), 0.01f * float(t % 7) - 0.02f);
    };
    auto rec = reconstruct(stepwise, x0, grid, s);
    double max_err = 0;
    for (size_t i = 0; i < xv.size(); ++i)
        max_err = std::max(max_err, std::fabs(double(rec.data()[i]) - double(xv[i])));
    CHECK(max_err < 1e-6);
}

TEST_CASE("training reduces the validation loss") {
    auto sched = make_schedule(50, 1e-3, 0.05);
    Rng mrng(1);
    auto model = init_denoiser<float>(tiny_cfg(), mrng);
    auto data = synth_gauss2d(3, 24, 8, 5);

    auto val_loss = [&](uint64_t seed) {
        Rng r(seed);
        ndgrad::NoGradGuard ng;
        double acc = 0;
        for (int rep = 0; rep < 8; ++rep)
            acc += double(simple_loss(model, data.images, data.labels, sched, r).item());
        return acc / 8;
    };
    const double before = val_loss(123);
    DiffusionTrainOpts opts;
    opts.epochs = 25;
    opts.batch_size = 12;
    opts.lr = 5e-3;
    opts.seed = 4;
    auto losses = train_diffusion(model, data, sched, opts);
    const double after = val_loss(123);
    CHECK(losses.size() == 25);
    CHECK(after < 0.5 * before);
}
