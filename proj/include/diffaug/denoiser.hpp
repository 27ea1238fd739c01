// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "diffaug/ops.hpp"
#include "diffaug/optim.hpp"
#include "diffaug/rng.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug {

// Feature-space noise injection sites used by the perturbation study. The
// main pipeline only ever perturbs the bottleneck, which is handled by the
// caller through the explicit bottleneck argument of decode().
enum class InjectSite { none, encoder, decoder };

struct DenoiserConfig {
    int resolution = 16;
    int in_channels = 1;
    std::array<int, 3> channels{32, 64, 128};
    int num_classes = 6;
    int emb_dim = 64;  // shared by the timestep and class embeddings
};

// Conditional noise predictor with an encoder -> bottleneck -> decoder
// structure. The bottleneck feature is exposed so callers can replace it
// before decoding; skip connections are shared across decoder runs.
template <typename T>
class Denoiser {
public:
    struct FeatureNoise {
        InjectSite site = InjectSite::none;
        double sigma = 0.0;
        Rng* rng = nullptr;
    };

    struct Encoded {
        ndgrad::Tensor<T> skip1;       // [N,c1,R,R]
        ndgrad::Tensor<T> skip2;       // [N,c2,R/2,R/2]
        ndgrad::Tensor<T> bottleneck;  // h_t, [N,c3,R/4,R/4]
        ndgrad::Tensor<T> emb;         // [N,emb_dim]
    };

    Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.resolution % 4 != 0 || cfg.resolution < 4)
            throw std::invalid_argument("Denoiser: resolution must be divisible by 4");
        const int c1 = cfg.channels[0], c2 = cfg.channels[1], c3 = cfg.channels[2];
        class_table_ = add_param("class_table", {cfg.num_classes, cfg.emb_dim},
                                 1.0 / std::sqrt(double(cfg.emb_dim)), rng);
        stem_w_ = add_conv("stem", cfg.in_channels, c1, rng);
        enc1_ = add_block("enc1", c1, c1, rng);
        enc2_ = add_block("enc2", c1, c2, rng);
        bott_ = add_block("bott", c2, c3, rng);
        up2_w_ = add_conv("up2", c3, c2, rng);
        dec2_ = add_block("dec2", 2 * c2, c2, rng);
        up1_w_ = add_conv("up1", c2, c1, rng);
        dec1_ = add_block("dec1", 2 * c1, c1, rng);
        // zero-initialized output head: the untrained model predicts 0
        out_w_ = add_param("out.w", {cfg.in_channels, c1, 3, 3}, 0.0, rng);
        out_b_ = add_param("out.b", {cfg.in_channels}, 0.0, rng);
    }

    const DenoiserConfig& config() const { return cfg_; }
    ndgrad::NamedParams<T>& params() { return params_; }
    const ndgrad::NamedParams<T>& params() const { return params_; }

    std::vector<ndgrad::Tensor<T>> param_tensors() const {
        std::vector<ndgrad::Tensor<T>> out;
        for (const auto& [name, p] : params_) out.push_back(p);
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, p] : params_) n += p.numel();
        return n;
    }

    ndgrad::Shape bottleneck_shape(int64_t batch = 1) const {
        return {batch, cfg_.channels[2], cfg_.resolution / 4, cfg_.resolution / 4};
    }

    Encoded encode(const ndgrad::Tensor<T>& x, const std::vector<int>& ts,
                   const std::vector<int>& ids, const FeatureNoise& fn = {}) const {
        using namespace ndgrad;
        if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.resolution ||
            x.dim(3) != cfg_.resolution)
            throw std::invalid_argument("Denoiser: input " + shape_str(x.shape()) +
                                        " does not match resolution " +
                                        std::to_string(cfg_.resolution));
        const int64_t N = x.dim(0);
        if (int64_t(ts.size()) != N || int64_t(ids.size()) != N)
            throw std::invalid_argument("Denoiser: need one timestep and one class id per sample");

        Encoded e;
        e.emb = add(time_embedding(ts), embedding(class_table_, ids));
        auto h = conv2d(x, stem_w_.first, stem_w_.second);
        h = run_block(enc1_, h, e.emb);
        if (fn.site == InjectSite::encoder) h = inject(h, fn);
        e.skip1 = h;
        h = run_block(enc2_, avg_pool2(h), e.emb);
        if (fn.site == InjectSite::encoder) h = inject(h, fn);
        e.skip2 = h;
        e.bottleneck = run_block(bott_, avg_pool2(h), e.emb);
        return e;
    }

    ndgrad::Tensor<T> decode(const Encoded& e, const ndgrad::Tensor<T>& bottleneck,
                             const FeatureNoise& fn = {}) const {
        using namespace ndgrad;
        auto h = conv2d(upsample2(bottleneck), up2_w_.first, up2_w_.second);
        h = run_block(dec2_, concat(h, e.skip2, 1), e.emb);
        if (fn.site == InjectSite::decoder) h = inject(h, fn);
        h = conv2d(upsample2(h), up1_w_.first, up1_w_.second);
        h = run_block(dec1_, concat(h, e.skip1, 1), e.emb);
        if (fn.site == InjectSite::decoder) h = inject(h, fn);
        return conv2d(h, out_w_, out_b_);
    }

    // Graph-building forward used by the training loss.
    ndgrad::Tensor<T> forward_train(const ndgrad::Tensor<T>& x, const std::vector<int>& ts,
                                    const std::vector<int>& ids) const {
        auto e = encode(x, ts, ids);
        return decode(e, e.bottleneck);
    }

    // Deterministic inference; no graph, no dropout anywhere in this model.
    ndgrad::Tensor<T> predict_noise(const ndgrad::Tensor<T>& x, int t, int class_id) const {
        ndgrad::NoGradGuard ng;
        const size_t n = size_t(x.dim(0));
        auto e = encode(x, std::vector<int>(n, t), std::vector<int>(n, class_id));
        return decode(e, e.bottleneck);
    }

    // Runs the encoder once and the decoder twice: once with the bottleneck
    // feature h_t and once with h_t + eps_h. An undefined eps_h is the zero
    // sentinel, which reuses h_t itself so the two outputs are bit-equal.
    std::pair<ndgrad::Tensor<T>, ndgrad::Tensor<T>> predict_noise_pair(
        const ndgrad::Tensor<T>& x, int t, int class_id,
        const ndgrad::Tensor<T>& eps_h = {}) const {
        ndgrad::NoGradGuard ng;
        const size_t n = size_t(x.dim(0));
        auto e = encode(x, std::vector<int>(n, t), std::vector<int>(n, class_id));
        auto clean = decode(e, e.bottleneck);
        if (!eps_h.defined()) return {clean, clean};
        if (eps_h.shape() != e.bottleneck.shape())
            throw std::invalid_argument("predict_noise_pair: eps_h " +
                                        ndgrad::shape_str(eps_h.shape()) +
                                        " does not match bottleneck " +
                                        ndgrad::shape_str(e.bottleneck.shape()));
        auto perturbed = decode(e, ndgrad::add(e.bottleneck, eps_h));
        return {clean, perturbed};
    }

    // Clean + perturbed prediction with noise injected at an arbitrary site
    // (the preliminary-study path). For the encoder site the encoder must run
    // twice; bottleneck/decoder sites share one encoder pass.
    std::pair<ndgrad::Tensor<T>, ndgrad::Tensor<T>> predict_noise_site(
        const ndgrad::Tensor<T>& x, int t, int class_id, InjectSite site, double sigma,
        Rng& rng) const {
        ndgrad::NoGradGuard ng;
        const size_t n = size_t(x.dim(0));
        const std::vector<int> ts(n, t), ids(n, class_id);
        auto e = encode(x, ts, ids);
        auto clean = decode(e, e.bottleneck);
        FeatureNoise fn{site, sigma, &rng};
        if (site == InjectSite::encoder) {
            auto e2 = encode(x, ts, ids, fn);
            return {clean, decode(e2, e2.bottleneck)};
        }
        return {clean, decode(e, e.bottleneck, fn)};
    }

private:
    using ConvParam = std::pair<ndgrad::Tensor<T>, ndgrad::Tensor<T>>;  // weight, bias

    struct Block {
        ndgrad::Tensor<T> w1, b1, g1, be1;  // conv + norm
        ndgrad::Tensor<T> wp, bp;           // embedding projection
        ndgrad::Tensor<T> w2, b2, g2, be2;  // conv + norm
    };

    ndgrad::Tensor<T> add_param(const std::string& name, ndgrad::Shape shape, double bound,
                                Rng& rng) {
        std::vector<T> v(size_t(ndgrad::shape_numel(shape)));
        if (bound > 0.0) rng.fill_uniform(v, -bound, bound);
        auto t = ndgrad::Tensor<T>::from_data(std::move(shape), std::move(v));
        t.set_requires_grad(true);
        params_.emplace_back(name, t);
        return t;
    }

    ndgrad::Tensor<T> add_const_param(const std::string& name, ndgrad::Shape shape, T value) {
        auto t = ndgrad::Tensor<T>::full(std::move(shape), value);
        t.set_requires_grad(true);
        params_.emplace_back(name, t);
        return t;
    }

    ConvParam add_conv(const std::string& name, int in_ch, int out_ch, Rng& rng) {
        const double bound = 1.0 / std::sqrt(double(in_ch) * 9.0);
        auto w = add_param(name + ".w", {out_ch, in_ch, 3, 3}, bound, rng);
        auto b = add_param(name + ".b", {out_ch}, bound, rng);
        return {w, b};
    }

    Block add_block(const std::string& name, int in_ch, int out_ch, Rng& rng) {
        Block blk;
        auto [w1, b1] = add_conv(name + ".conv1", in_ch, out_ch, rng);
        blk.w1 = w1;
        blk.b1 = b1;
        blk.g1 = add_const_param(name + ".norm1.g", {out_ch}, T(1));
        blk.be1 = add_const_param(name + ".norm1.b", {out_ch}, T(0));
        const double pb = 1.0 / std::sqrt(double(cfg_.emb_dim));
        blk.wp = add_param(name + ".emb.w", {cfg_.emb_dim, out_ch}, pb, rng);
        blk.bp = add_param(name + ".emb.b", {out_ch}, pb, rng);
        auto [w2, b2] = add_conv(name + ".conv2", out_ch, out_ch, rng);
        blk.w2 = w2;
        blk.b2 = b2;
        blk.g2 = add_const_param(name + ".norm2.g", {out_ch}, T(1));
        blk.be2 = add_const_param(name + ".norm2.b", {out_ch}, T(0));
        return blk;
    }

    ndgrad::Tensor<T> run_block(const Block& blk, const ndgrad::Tensor<T>& x,
                                const ndgrad::Tensor<T>& emb) const {
        using namespace ndgrad;
        auto h = affine_norm(conv2d(x, blk.w1, blk.b1), blk.g1, blk.be1);
        h = silu(add_chanvec(h, linear(emb, blk.wp, blk.bp)));
        h = affine_norm(conv2d(h, blk.w2, blk.b2), blk.g2, blk.be2);
        return silu(h);
    }

    ndgrad::Tensor<T> time_embedding(const std::vector<int>& ts) const {
        const int d = cfg_.emb_dim;
        const int half = d / 2;
        std::vector<T> v(ts.size() * size_t(d));
        for (size_t i = 0; i < ts.size(); ++i)
            for (int k = 0; k < half; ++k) {
                const double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
                v[i * size_t(d) + size_t(2 * k)] = T(std::sin(double(ts[i]) * freq));
                v[i * size_t(d) + size_t(2 * k + 1)] = T(std::cos(double(ts[i]) * freq));
            }
        return ndgrad::Tensor<T>::from_data({int64_t(ts.size()), d}, std::move(v));
    }

    ndgrad::Tensor<T> inject(const ndgrad::Tensor<T>& h, const FeatureNoise& fn) const {
        std::vector<T> noise(size_t(h.numel()));
        fn.rng->fill_normal(noise, fn.sigma);
        return ndgrad::add(h, ndgrad::Tensor<T>::from_data(h.shape(), std::move(noise)));
    }

    DenoiserConfig cfg_;
    ndgrad::NamedParams<T> params_;
    ndgrad::Tensor<T> class_table_;
    ConvParam stem_w_, up2_w_, up1_w_;
    Block enc1_, enc2_, bott_, dec2_, dec1_;
    ndgrad::Tensor<T> out_w_, out_b_;
};

template <typename T>
Denoiser<T> init_denoiser(const DenoiserConfig& cfg, Rng& rng) {
    return Denoiser<T>(cfg, rng);
}

}  // namespace diffaug
