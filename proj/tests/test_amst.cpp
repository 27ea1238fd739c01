// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "diffaug/grad_check.hpp"
#include "diffaug/selftrain.hpp"

using namespace diffaug;
using ndgrad::Tensor;

namespace {

MultiHeadConfig tiny_cfg(int classes = 3, double dropout = 0.1) {
    MultiHeadConfig cfg;
    cfg.resolution = 8;
    cfg.channels = {8, 12, 16, 16};
    cfg.num_classes = classes;
    cfg.dropout = dropout;
    return cfg;
}

// input-independent heads: zero weights, chosen biases
template <typename T>
void force_head(MultiHeadModel<T>& m, Head h, int hot, double margin) {
    auto w = m.head_params(h)[0];
    auto b = m.head_params(h)[1];
    std::fill(w.data_mut().begin(), w.data_mut().end(), T(0));
    std::fill(b.data_mut().begin(), b.data_mut().end(), T(0));
    b.data_mut()[size_t(hot)] = T(margin);
}

}  // namespace

TEST_CASE("weak augmentation is deterministic, shape and range preserving") {
    auto d = synth_gauss2d(2, 2, 8, 3);
    auto x = image_at(d, 0);
    Rng r1(5), r2(5);
    auto a = weak_aug(x, r1);
    auto b = weak_aug(x, r2);
    CHECK(a.data() == b.data());
    CHECK(a.shape() == x.shape());
    for (float v : a.data()) {
        CHECK(v <= 1.0f);
        CHECK(v >= -1.0f);
    }
}

TEST_CASE("strong augmentation changes non-constant images almost surely") {
    auto d = synth_gauss2d(2, 2, 8, 3);
    auto x = image_at(d, 1);
    Rng rng(17);
    int changed = 0;
    const int trials = 1000;
    for (int i = 0; i < trials; ++i) {
        auto s = strong_aug(x, rng);
        if (s.data() != x.data()) ++changed;
        for (float v : s.data()) {
            CHECK(v <= 1.0f);
            CHECK(v >= -1.0f);
        }
    }
    CHECK(changed == trials);
}

TEST_CASE("orthogonality penalty") {
    auto w1 = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
    CHECK(orthogonality_penalty(w1, w1).item() == doctest::Approx(2.0));

    // column-orthogonal pair
    auto a = Tensor<float>::from_data({2, 2}, {1, 0, 0, 0});
    auto b = Tensor<float>::from_data({2, 2}, {0, 0, 0, 1});
    CHECK(orthogonality_penalty(a, b).item() == doctest::Approx(0.0));

    Rng rng(3);
    std::vector<float> v1(12), v2(12);
    rng.fill_normal(v1);
    rng.fill_normal(v2);
    auto r1 = Tensor<float>::from_data({4, 3}, v1);
    auto r2 = Tensor<float>::from_data({4, 3}, v2);
    CHECK(orthogonality_penalty(r1, r2).item() >= 0.0f);

    auto bad = Tensor<float>::zeros({3, 2});
    CHECK_THROWS_AS(orthogonality_penalty(r1, bad), std::invalid_argument);
}

TEST_CASE("pretrain loss decomposes into cross entropies plus penalty") {
    Rng rng(5);
    auto model = MultiHeadModel<float>(tiny_cfg(3, 0.0), rng);
    auto d = synth_gauss2d(3, 3, 8, 7);
    std::vector<Tensor<float>> imgs;
    std::vector<int> ys;
    for (int64_t i = 0; i < d.size(); ++i) {
        imgs.push_back(image_at(d, i));
        ys.push_back(d.labels[size_t(i)]);
    }
    Rng a1(9), a2(9), a3(9);
    const double l0 = double(pretrain_loss(model, imgs, ys, 0.0, a1).item());
    const double l1 = double(pretrain_loss(model, imgs, ys, 0.001, a2).item());
    const double pen =
        double(orthogonality_penalty(model.head_weight(kWeak1), model.head_weight(kWeak2)).item()) +
        double(orthogonality_penalty(model.head_weight(kStrong1), model.head_weight(kStrong2))
                   .item());
    CHECK(l1 == doctest::Approx(l0 + 0.001 * pen).epsilon(1e-6));
    CHECK(pen > 0.0);

    Rng a4(9);
    CHECK_THROWS_AS(pretrain_loss(model, imgs, ys, -1.0, a4), std::invalid_argument);
    std::vector<Tensor<float>> none;
    CHECK_THROWS_AS(pretrain_loss(model, none, {}, 0.0, a4), std::invalid_argument);
}

TEST_CASE("oracle heads with orthogonal weights give zero loss") {
    Rng rng(5);
    auto model = MultiHeadModel<float>(tiny_cfg(3, 0.0), rng);
    for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2}) force_head(model, h, 1, 60.0);
    auto d = synth_gauss2d(3, 2, 8, 7);
    std::vector<Tensor<float>> imgs;
    std::vector<int> ys;
    for (int64_t i = 0; i < d.size(); ++i) {
        imgs.push_back(image_at(d, i));
        ys.push_back(1);  // oracle class
    }
    Rng arng(9);
    // zero weight matrices are trivially orthogonal; CE of a certain correct
    // prediction vanishes
    CHECK(double(pretrain_loss(model, imgs, ys, 10.0, arng).item()) < 1e-8);
}

TEST_CASE("mc uncertainty") {
    auto d = synth_gauss2d(3, 1, 8, 11);
    auto x = image_at(d, 0);

    SUBCASE("zero dropout gives exactly zero variance") {
        Rng rng(5);
        auto model = MultiHeadModel<float>(tiny_cfg(3, 0.0), rng);
        Rng mc(3);
        auto u = mc_uncertainty(model, x, 10, mc);
        for (double v : u) CHECK(v == 0.0);
    }
    SUBCASE("reproducible given the stream and positive with dropout") {
        Rng rng(5);
        auto model = MultiHeadModel<float>(tiny_cfg(3, 0.1), rng);
        Rng wrng(7);
        for (auto& [name, p] : model.params()) wrng.fill_normal(p.data_mut(), 1.0);
        Rng m1(3), m2(3);
        auto u1 = mc_uncertainty(model, x, 10, m1);
        auto u2 = mc_uncertainty(model, x, 10, m2);
        CHECK(u1 == u2);
        double mx = 0;
        for (double v : u1) mx = std::max(mx, v);
        CHECK(mx > 0.0);
    }
    SUBCASE("K below 2 rejected") {
        Rng rng(5);
        auto model = MultiHeadModel<float>(tiny_cfg(3, 0.1), rng);
        Rng mc(3);
        CHECK_THROWS_AS(mc_uncertainty(model, x, 1, mc), std::invalid_argument);
    }
}

TEST_CASE("pseudo-label gates") {
    auto real = synth_gauss2d(3, 2, 8, 21);
    auto synth = synth_gauss2d(3, 4, 8, 22);

    SUBCASE("agreement with zero uncertainty accepts everything") {
        Rng rng(5);
        auto model = MultiHeadModel<float>(tiny_cfg(3, 0.0), rng);
        for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2}) force_head(model, h, 2, 30.0);
        auto pools = make_pools(real, synth);
        const int64_t total = pools.labeled_size() + pools.unlabeled_size();
        auto stats = assign_pseudo_labels(model, pools, 0.01, 10, 7);
        CHECK(stats.accepted == synth.size());
        CHECK(pools.labeled_size() + pools.unlabeled_size() == total);
        CHECK(pools.unlabeled_size() == 0);
        for (int64_t i = real.size(); i < pools.labeled_size(); ++i) {
            CHECK(pools.labels[size_t(i)] == 2);
            CHECK(pools.provenance[size_t(i)] == Provenance::synthetic_accepted);
        }
    }
    SUBCASE("one disagreeing head rejects regardless of confidence") {
        Rng rng(5);
        auto model = MultiHeadModel<float>(tiny_cfg(3, 0.0), rng);
        for (Head h : {kWeak1, kWeak2, kStrong1}) force_head(model, h, 0, 30.0);
        force_head(model, kStrong2, 1, 30.0);
        auto pools = make_pools(real, synth);
        auto stats = assign_pseudo_labels(model, pools, 0.01, 10, 7);
        CHECK(stats.accepted == 0);
        CHECK(stats.rejected_consistency == synth.size());
    }
    SUBCASE("agreement but high uncertainty rejects") {
        Rng rng(5);
        auto model = MultiHeadModel<float>(tiny_cfg(3, 0.25), rng);
        // four identical huge heads: consistent argmax, dropout shakes the
        // probabilities hard
        Rng wrng(13);
        std::vector<float> shared(size_t(16 * 3));
        wrng.fill_normal(shared, 40.0);
        for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2}) {
            auto w = model.head_params(h)[0];
            w.data_mut() = shared;
            auto b = model.head_params(h)[1];
            std::fill(b.data_mut().begin(), b.data_mut().end(), 0.0f);
        }
        auto pools = make_pools(real, synth);
        auto stats = assign_pseudo_labels(model, pools, 1e-6, 10, 7);
        CHECK(stats.accepted == 0);
        CHECK(stats.rejected_confidence == synth.size());
    }
}

TEST_CASE("lowering tau never grows the accepted set") {
    auto real = synth_gauss2d(3, 2, 8, 31);
    auto synth = synth_gauss2d(3, 8, 8, 32);
    Rng rng(5);
    auto model = MultiHeadModel<float>(tiny_cfg(3, 0.1), rng);
    // shared moderate heads: consistent decisions, borderline uncertainties
    Rng wrng(13);
    std::vector<float> shared(size_t(16 * 3));
    wrng.fill_normal(shared, 6.0);
    for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2}) {
        auto w = model.head_params(h)[0];
        w.data_mut() = shared;
    }
    auto accepted_ids = [&](double tau) {
        auto pools = make_pools(real, synth);
        assign_pseudo_labels(model, pools, tau, 10, 7);
        std::set<int64_t> still;
        for (int64_t id : pools.unlabeled_ids) still.insert(id);
        std::set<int64_t> acc;
        for (int64_t id = 0; id < synth.size(); ++id)
            if (!still.count(id)) acc.insert(id);
        return acc;
    };
    auto hi = accepted_ids(0.01);
    auto lo = accepted_ids(0.001);
    for (int64_t id : lo) CHECK(hi.count(id) == 1);
    CHECK(lo.size() <= hi.size());
}

TEST_CASE("consistency decisions are invariant to positive logit scaling") {
    auto real = synth_gauss2d(3, 1, 8, 41);
    auto synth = synth_gauss2d(3, 6, 8, 42);
    Rng rng(5);
    auto model = MultiHeadModel<float>(tiny_cfg(3, 0.0), rng);
    Rng wrng(13);
    for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2})
        for (auto& p : model.head_params(h)) wrng.fill_normal(p.data_mut(), 1.0);

    auto consistent_set = [&](double scale_factor) {
        Rng r2(5);
        auto scaled = MultiHeadModel<float>(tiny_cfg(3, 0.0), r2);
        for (size_t i = 0; i < model.params().size(); ++i)
            scaled.params()[i].second.data_mut() = model.params()[i].second.data();
        for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2})
            for (auto& p : scaled.head_params(h))
                for (auto& v : p.data_mut()) v *= float(scale_factor);
        auto pools = make_pools(real, synth);
        assign_pseudo_labels(scaled, pools, 1e18, 10, 7);  // confidence gate disabled
        std::set<int64_t> still;
        for (int64_t id : pools.unlabeled_ids) still.insert(id);
        return still;
    };
    CHECK(consistent_set(1.0) == consistent_set(3.5));
}

TEST_CASE("softmatch weighting") {
    SoftMatchState st(4);
    CHECK(st.mu_hat == doctest::Approx(0.25));
    CHECK(st.sigma2_hat == 1.0);

    // c == mu_hat at the truncation boundary
    CHECK(consistency_weight(st, {0.25, 0.25, 0.25, 0.25}) == doctest::Approx(1.0));
    // saturated above the mean
    CHECK(consistency_weight(st, {0.9, 0.05, 0.03, 0.02}) == doctest::Approx(1.0));

    st.mu_hat = 0.8;
    st.sigma2_hat = 0.04;  // sigma = 0.2, c = mu - sigma
    CHECK(consistency_weight(st, {0.6, 0.4, 0.0, 0.0}) ==
          doctest::Approx(std::exp(-0.5)).epsilon(1e-12));

    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), d = rng.uniform();
        const double s = a + b + c + d;
        const double w = consistency_weight(st, {a / s, b / s, c / s, d / s});
        CHECK(w >= 0.0);
        CHECK(w <= st.lambda_max);
    }

    CHECK_THROWS_AS(consistency_weight(st, {0.5, 0.2}), std::invalid_argument);
    CHECK_THROWS_AS(consistency_weight(st, {1.5, -0.5}), std::invalid_argument);

    st.update({0.9, 0.8, 0.7});
    CHECK(st.sigma2_hat > 0.0);
    CHECK(st.mu_hat > 0.8 * 0.999 - 1e-12);
}

TEST_CASE("stage3 loss reduces to supervised loss when P_U is empty") {
    Rng rng(5);
    auto model = MultiHeadModel<float>(tiny_cfg(3, 0.1), rng);
    Rng wrng(7);
    for (auto& [name, p] : model.params()) wrng.fill_normal(p.data_mut(), 0.3);
    auto d = synth_gauss2d(3, 2, 8, 51);
    std::vector<Tensor<float>> lb;
    std::vector<int> yb;
    for (int64_t i = 0; i < d.size(); ++i) {
        lb.push_back(image_at(d, i));
        yb.push_back(d.labels[size_t(i)]);
    }
    SoftMatchState st(3);
    Rng r1(9), r2(9);
    auto total = stage3_loss(model, lb, yb, {}, st, r1, /*augment_labeled=*/false);
    auto sup = ndgrad::cross_entropy(
        model.head_logits(model.dropped_features(model.features(stack_batch(lb)), r2), kMain),
        yb);
    CHECK(total.item() == sup.item());

    // default path (with the standard weak augmentation) is deterministic
    Rng r4(9), r5(9);
    SoftMatchState st3(3), st4(3);
    auto a1 = stage3_loss(model, lb, yb, {}, st3, r4);
    auto a2 = stage3_loss(model, lb, yb, {}, st4, r5);
    CHECK(a1.item() == a2.item());

    SoftMatchState st2(3);
    Rng r3(9);
    CHECK_THROWS_AS(stage3_loss(model, {}, {}, {}, st2, r3), std::invalid_argument);
}

TEST_CASE("confident agreeing views contribute nothing to the consistency loss") {
    Rng rng(5);
    auto model = MultiHeadModel<float>(tiny_cfg(3, 0.0), rng);
    force_head(model, kMain, 1, 80.0);  // certain, input independent
    auto d = synth_gauss2d(3, 2, 8, 61);
    std::vector<Tensor<float>> ub;
    for (int64_t i = 0; i < d.size(); ++i) ub.push_back(image_at(d, i));
    SoftMatchState st(3);
    Rng r1(9);
    auto lc = stage3_loss(model, {}, {}, ub, st, r1);
    CHECK(double(lc.item()) < 1e-6);
}

TEST_CASE("stage3 gradients match finite differences with saturated weights") {
    Rng rng(5);
    MultiHeadConfig cfg = tiny_cfg(3, 0.0);  // dropout off for determinism
    auto model = MultiHeadModel<double>(cfg, rng);
    Rng wrng(7);
    for (auto& [name, p] : model.params()) wrng.fill_normal(p.data_mut(), 0.4);

    auto d = synth_gauss2d(3, 2, 8, 71);
    std::vector<Tensor<double>> lb, ub;
    std::vector<int> yb;
    for (int64_t i = 0; i < d.size(); ++i) {
        auto img = image_at(d, i);
        std::vector<double> v(img.data().begin(), img.data().end());
        auto t = Tensor<double>::from_data({1, 1, 8, 8}, std::move(v));
        if (i % 2 == 0) {
            lb.push_back(t);
            yb.push_back(d.labels[size_t(i)]);
        } else {
            ub.push_back(t);
        }
    }
    auto loss_fn = [&] {
        SoftMatchState st(3);
        st.mu_hat = 0.0;  // saturates every weight at lambda_max
        Rng r(13);
        return stage3_loss(model, lb, yb, ub, st, r);
    };
    std::vector<Tensor<double>> params;
    for (auto& p : model.head_params(kMain)) params.push_back(p);
    for (auto& p : model.backbone_params()) params.push_back(p);
    CHECK(ndgrad::grad_check(loss_fn, params, 2e-4, 24) < 1e-3);
}

TEST_CASE("aux heads receive no gradient from stage 3") {
    Rng rng(5);
    auto model = MultiHeadModel<float>(tiny_cfg(3, 0.0), rng);
    Rng wrng(7);
    for (auto& [name, p] : model.params()) wrng.fill_normal(p.data_mut(), 0.4);
    auto d = synth_gauss2d(3, 2, 8, 81);
    std::vector<Tensor<float>> lb, ub;
    std::vector<int> yb{0};
    lb.push_back(image_at(d, 0));
    ub.push_back(image_at(d, 1));
    SoftMatchState st(3);
    Rng r(9);
    auto loss = stage3_loss(model, lb, yb, ub, st, r);
    loss.backward();
    for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2})
        for (auto& p : model.head_params(h)) CHECK(!p.has_grad());
    for (auto& p : model.head_params(kMain)) CHECK(p.has_grad());
}

TEST_CASE("full self-training smoke run") {
    auto real_train = synth_gauss2d(3, 8, 8, 91);
    auto real_test = synth_gauss2d(3, 8, 8, 92);
    auto synth = synth_gauss2d(3, 6, 8, 93);

    SelfTrainConfig cfg;
    cfg.epochs_stage1 = 4;
    cfg.epochs_stage3 = 4;
    cfg.batch = 12;
    cfg.lr = 0.05;
    cfg.seed = 3;

    Rng r1(5);
    auto m1 = MultiHeadModel<float>(tiny_cfg(3, 0.1), r1);
    auto rep1 = run_self_training(m1, real_train, synth, real_test, cfg, &synth.labels);
    CHECK(rep1.pool_labeled + rep1.pool_unlabeled == real_train.size() + synth.size());
    CHECK(rep1.acceptance_rate >= 0.0);
    CHECK(rep1.acceptance_rate <= 1.0);
    CHECK(rep1.stage1_losses.size() == 4);
    CHECK(rep1.stage3_losses.size() == 4);

    Rng r2(5);
    auto m2 = MultiHeadModel<float>(tiny_cfg(3, 0.1), r2);
    auto rep2 = run_self_training(m2, real_train, synth, real_test, cfg, &synth.labels);
    CHECK(rep1.final_acc == rep2.final_acc);
    CHECK(rep1.stage1_losses == rep2.stage1_losses);
    for (size_t i = 0; i < m1.params().size(); ++i)
        CHECK(m1.params()[i].second.data() == m2.params()[i].second.data());

    // empty synthetic pool degenerates to supervised training
    Dataset empty;
    Rng r3(5);
    auto m3 = MultiHeadModel<float>(tiny_cfg(3, 0.1), r3);
    auto rep3 = run_self_training(m3, real_train, empty, real_test, cfg);
    CHECK(rep3.pool_unlabeled == 0);
    CHECK(rep3.acceptance_rate == 0.0);
    CHECK(rep3.pseudo_precision == -1.0);
}
