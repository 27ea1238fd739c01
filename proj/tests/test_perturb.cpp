// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "diffaug/perturb.hpp"

using namespace diffaug;
using ndgrad::Tensor;

namespace {

struct Fixture {
    DenoiserConfig cfg;
    Denoiser<float> model;
    NoiseSchedule sched;
    StepGrid grid;
    Dataset data;

    Fixture()
        : cfg(make_cfg()),
          model(make_model(cfg)),
          sched(make_schedule(20, 0.01, 0.2)),
          grid(StepGrid::uniform(20, 5)),
          data(synth_gauss2d(3, 2, 8, 77)) {}

    static DenoiserConfig make_cfg() {
        DenoiserConfig c;
        c.resolution = 8;
        c.channels = {8, 12, 16};
        c.num_classes = 3;
        c.emb_dim = 16;
        return c;
    }
    static Denoiser<float> make_model(const DenoiserConfig& c) {
        Rng rng(3);
        auto m = init_denoiser<float>(c, rng);
        Rng wrng(11);
        for (auto& [name, p] : m.params()) wrng.fill_normal(p.data_mut(), 0.05);
        return m;
    }

    PerturbSpec spec(double sigma, int n, PerturbSite site = PerturbSite::bottleneck) const {
        PerturbSpec s;
        s.sigma_h = sigma;
        s.n_variants = n;
        s.site = site;
        s.grid = grid;
        return s;
    }
};

double slice_l2(const std::vector<float>& a, const std::vector<float>& b) {
    double d2 = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        d2 += d * d;
    }
    return d2;
}

}  // namespace

TEST_CASE("zero noise collapses to the reconstruction bit-exactly") {
    Fixture f;
    auto seed = image_at(f.data, 1);
    auto recs = generate_variants(f.model, seed, f.data.labels[1], f.spec(0.0, 3), f.sched, 99, 1);
    REQUIRE(recs.size() == 3);

    auto recon = reconstruct<float>(model_noise_fn(f.model, f.data.labels[1]), seed, f.grid,
                                    f.sched);
    std::vector<float> clamped(recon.data());
    for (auto& v : clamped) v = std::min(1.0f, std::max(-1.0f, v));
    for (const auto& r : recs) {
        REQUIRE(r.ok);
        CHECK(r.image.data() == clamped);
    }
}

TEST_CASE("perturbed variants are reproducible and pairwise distinct") {
    Fixture f;
    auto seed = image_at(f.data, 0);
    auto a = generate_variants(f.model, seed, 0, f.spec(3.0, 4), f.sched, 42, 0);
    auto b = generate_variants(f.model, seed, 0, f.spec(3.0, 4), f.sched, 42, 0);
    REQUIRE(a.size() == 4);
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].ok);
        CHECK(a[i].image.data() == b[i].image.data());
        CHECK(a[i].rng_stream == b[i].rng_stream);
    }
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = i + 1; j < a.size(); ++j)
            CHECK(slice_l2(a[i].image.data(), a[j].image.data()) > 0.0);

    auto c = generate_variants(f.model, seed, 0, f.spec(3.0, 4), f.sched, 43, 0);
    CHECK(a[0].image.data() != c[0].image.data());
}

TEST_CASE("one inversion per seed regardless of variant count") {
    Fixture f;
    auto seed = image_at(f.data, 2);
    GenerateStats s1, s8;
    generate_variants(f.model, seed, f.data.labels[2], f.spec(1.0, 1), f.sched, 7, 2, &s1);
    generate_variants(f.model, seed, f.data.labels[2], f.spec(1.0, 8), f.sched, 7, 2, &s8);
    CHECK(s1.invert_calls == 1);
    CHECK(s8.invert_calls == 1);
    CHECK(s8.pair_evals == f.grid.steps());
}

TEST_CASE("dataset expansion is independent of worker count") {
    Fixture f;
    auto spec = f.spec(2.0, 3);
    auto w1 = generate_variants_dataset(f.model, f.data, spec, f.sched, 5, 1);
    auto w3 = generate_variants_dataset(f.model, f.data, spec, f.sched, 5, 3);
    REQUIRE(w1.size() == size_t(f.data.size()) * 3);
    REQUIRE(w1.size() == w3.size());
    for (size_t i = 0; i < w1.size(); ++i) {
        CHECK(w1[i].seed_index == w3[i].seed_index);
        CHECK(w1[i].variant_index == w3[i].variant_index);
        CHECK(w1[i].image.data() == w3[i].image.data());
    }
}

TEST_CASE("perturbed step math") {
    Fixture f;
    auto seed = image_at(f.data, 0);
    auto inv = ddim_invert<float>(model_noise_fn(f.model, 0), seed, f.grid, f.sched);
    auto x = inv.last;
    const int t = f.grid.taus.back(), tp = f.grid.taus[f.grid.taus.size() - 2];

    SUBCASE("sigma 0 equals the clean step bit-exactly") {
        Rng rng(1);
        auto clean_eps = f.model.predict_noise(x, t, 0);
        auto expect = ddim_step(x, clean_eps, clean_eps, t, tp, f.sched);
        auto got = perturbed_ddim_step(f.model, x, t, tp, 0, 0.0, f.sched, rng);
        CHECK(got.data() == expect.data());
    }
    SUBCASE("sigma 3 differs from the clean step") {
        Rng rng(1);
        auto clean_eps = f.model.predict_noise(x, t, 0);
        auto expect = ddim_step(x, clean_eps, clean_eps, t, tp, f.sched);
        auto got = perturbed_ddim_step(f.model, x, t, tp, 0, 3.0, f.sched, rng);
        CHECK(slice_l2(got.data(), expect.data()) > 0.0);
    }
    SUBCASE("same stream twice is bit-identical") {
        Rng r1(9), r2(9);
        auto a = perturbed_ddim_step(f.model, x, t, tp, 0, 3.0, f.sched, r1);
        auto b = perturbed_ddim_step(f.model, x, t, tp, 0, 3.0, f.sched, r2);
        CHECK(a.data() == b.data());
    }
    SUBCASE("negative sigma rejected") {
        Rng rng(1);
        CHECK_THROWS_AS(perturbed_ddim_step(f.model, x, t, tp, 0, -1.0, f.sched, rng),
                        std::invalid_argument);
    }
}

TEST_CASE("study sites produce the full record grid") {
    Fixture f;
    for (PerturbSite site :
         {PerturbSite::latent_x0, PerturbSite::latent_xT, PerturbSite::latent_all_steps,
          PerturbSite::unet_encoder, PerturbSite::unet_decoder, PerturbSite::bottleneck}) {
        auto recs = perturb_study(f.model, f.data, f.spec(1.0, 2, site), f.sched, 11, 2);
        CHECK(recs.size() == size_t(f.data.size()) * 2);
        for (const auto& r : recs) {
            CHECK(r.ok);
            for (float v : r.image.data()) {
                CHECK(v <= 1.0f);
                CHECK(v >= -1.0f);
            }
        }
    }
}

TEST_CASE("latent_xT with zero noise is the reconstruction dataset") {
    Fixture f;
    auto recs = perturb_study(f.model, f.data, f.spec(0.0, 2, PerturbSite::latent_xT), f.sched,
                              11, 1);
    for (const auto& r : recs) {
        auto seed = image_at(f.data, r.seed_index);
        auto recon = reconstruct<float>(model_noise_fn(f.model, r.seed_label), seed, f.grid,
                                        f.sched);
        std::vector<float> clamped(recon.data());
        for (auto& v : clamped) v = std::min(1.0f, std::max(-1.0f, v));
        CHECK(r.image.data() == clamped);
    }
}

TEST_CASE("spec validation") {
    Fixture f;
    auto seed = image_at(f.data, 0);
    CHECK_THROWS_AS(
        generate_variants(f.model, seed, 0, f.spec(-0.5, 2), f.sched, 1, 0),
        std::invalid_argument);
    CHECK_THROWS_AS(
        generate_variants(f.model, seed, 0, f.spec(1.0, 0), f.sched, 1, 0),
        std::invalid_argument);
    CHECK_THROWS_AS(
        generate_variants(f.model, seed, 0, f.spec(1.0, 2, PerturbSite::latent_x0), f.sched, 1, 0),
        std::invalid_argument);
    CHECK_THROWS_AS(site_from_name("nope"), std::invalid_argument);
    CHECK(site_from_name("bottleneck") == PerturbSite::bottleneck);
}

TEST_CASE("variants_to_dataset carries provisional labels") {
    Fixture f;
    auto recs = generate_variants_dataset(f.model, f.data, f.spec(1.0, 2), f.sched, 3, 1);
    auto ds = variants_to_dataset(recs, f.data.num_classes);
    CHECK(ds.size() == f.data.size() * 2);
    for (int64_t i = 0; i < ds.size(); ++i)
        CHECK(ds.labels[size_t(i)] == f.data.labels[size_t(i / 2)]);
}
