// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "diffaug/datasets.hpp"
#include "diffaug/ops.hpp"
#include "diffaug/optim.hpp"
#include "diffaug/parallel.hpp"
#include "diffaug/rng.hpp"

namespace diffaug {

// ---------------------------------------------------------------------------
// augmentation operators (value level, inputs and outputs in [-1,1])
// ---------------------------------------------------------------------------

namespace aug {

constexpr float kBackground = -1.0f;

template <typename T>
ndgrad::Tensor<T> hflip(const ndgrad::Tensor<T>& x) {
    const int64_t H = x.shape().end()[-2], W = x.shape().back();
    std::vector<T> v(x.data());
    for (int64_t y = 0; y < H; ++y)
        for (int64_t c = 0; c < W / 2; ++c)
            std::swap(v[size_t(y * W + c)], v[size_t(y * W + (W - 1 - c))]);
    return ndgrad::Tensor<T>::from_data(x.shape(), std::move(v));
}

template <typename T>
ndgrad::Tensor<T> shift(const ndgrad::Tensor<T>& x, int dx, int dy) {
    const int64_t H = x.shape().end()[-2], W = x.shape().back();
    std::vector<T> v(size_t(x.numel()), T(kBackground));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t c = 0; c < W; ++c) {
            const int64_t sy = y - dy, sx = c - dx;
            if (sy >= 0 && sy < H && sx >= 0 && sx < W)
                v[size_t(y * W + c)] = x.data()[size_t(sy * W + sx)];
        }
    return ndgrad::Tensor<T>::from_data(x.shape(), std::move(v));
}

template <typename T>
ndgrad::Tensor<T> rotate(const ndgrad::Tensor<T>& x, double degrees) {
    const int64_t H = x.shape().end()[-2], W = x.shape().back();
    const double th = degrees * 3.14159265358979323846 / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double cy = (double(H) - 1) / 2.0, cx = (double(W) - 1) / 2.0;
    std::vector<T> v(size_t(x.numel()), T(kBackground));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx) {
            const double u = c * (xx - cx) + s * (y - cy) + cx;
            const double w = -s * (xx - cx) + c * (y - cy) + cy;
            const int64_t x0 = int64_t(std::floor(u)), y0 = int64_t(std::floor(w));
            if (x0 < -1 || x0 >= W || y0 < -1 || y0 >= H) continue;
            const double fx = u - double(x0), fy = w - double(y0);
            auto at = [&](int64_t yy, int64_t xc) -> double {
                if (yy < 0 || yy >= H || xc < 0 || xc >= W) return kBackground;
                return double(x.data()[size_t(yy * W + xc)]);
            };
            const double val = (1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x0 + 1) +
                               (1 - fx) * fy * at(y0 + 1, x0) + fx * fy * at(y0 + 1, x0 + 1);
            v[size_t(y * W + xx)] = T(val);
        }
    return ndgrad::Tensor<T>::from_data(x.shape(), std::move(v));
}

template <typename T>
ndgrad::Tensor<T> intensity_scale(const ndgrad::Tensor<T>& x, double factor) {
    std::vector<T> v(x.data());
    for (auto& e : v) {
        double u = (double(e) + 1.0) / 2.0 * factor;
        e = T(2.0 * std::min(1.0, std::max(0.0, u)) - 1.0);
    }
    return ndgrad::Tensor<T>::from_data(x.shape(), std::move(v));
}

template <typename T>
ndgrad::Tensor<T> add_noise(const ndgrad::Tensor<T>& x, double sigma, Rng& rng) {
    std::vector<T> v(x.data());
    for (auto& e : v) e = T(std::min(1.0, std::max(-1.0, double(e) + sigma * rng.normal())));
    return ndgrad::Tensor<T>::from_data(x.shape(), std::move(v));
}

template <typename T>
ndgrad::Tensor<T> random_erase(const ndgrad::Tensor<T>& x, Rng& rng, double max_area = 0.25) {
    const int64_t H = x.shape().end()[-2], W = x.shape().back();
    const double area = rng.uniform(0.05, max_area) * double(H * W);
    const double aspect = rng.uniform(0.5, 2.0);
    int64_t eh = std::max<int64_t>(1, int64_t(std::sqrt(area * aspect)));
    int64_t ew = std::max<int64_t>(1, int64_t(std::sqrt(area / aspect)));
    eh = std::min(eh, H);
    ew = std::min(ew, W);
    const int64_t y0 = int64_t(rng.uniform_index(uint64_t(H - eh + 1)));
    const int64_t x0 = int64_t(rng.uniform_index(uint64_t(W - ew + 1)));
    std::vector<T> v(x.data());
    for (int64_t y = y0; y < y0 + eh; ++y)
        for (int64_t c = x0; c < x0 + ew; ++c) v[size_t(y * W + c)] = T(kBackground);
    return ndgrad::Tensor<T>::from_data(x.shape(), std::move(v));
}

}  // namespace aug

// Stacks [1,1,R,R] tensors into [N,1,R,R]; works in either precision.
template <typename T>
ndgrad::Tensor<T> stack_batch(const std::vector<ndgrad::Tensor<T>>& imgs) {
    if (imgs.empty()) throw std::invalid_argument("stack_batch: empty list");
    std::vector<T> v;
    v.reserve(size_t(imgs[0].numel()) * imgs.size());
    for (const auto& im : imgs) {
        if (im.numel() != imgs[0].numel())
            throw std::invalid_argument("stack_batch: ragged shapes");
        v.insert(v.end(), im.data().begin(), im.data().end());
    }
    const int64_t R = imgs[0].shape().end()[-2], W = imgs[0].shape().back();
    return ndgrad::Tensor<T>::from_data({int64_t(imgs.size()), 1, R, W}, std::move(v));
}

// Horizontal flip (p = 0.5) plus a pad-and-crop shift of up to 2 px.
template <typename T>
ndgrad::Tensor<T> weak_aug(const ndgrad::Tensor<T>& x, Rng& rng) {
    auto out = rng.bernoulli(0.5) ? aug::hflip(x) : x;
    const int dx = int(rng.uniform_index(5)) - 2;
    const int dy = int(rng.uniform_index(5)) - 2;
    return aug::shift(out, dx, dy);
}

// Weak augmentation followed by two distinct heavy transforms drawn from
// {rotation <=30 deg, intensity scale 0.5-1.5, additive noise 0.1,
//  random erase <=25% area}.
template <typename T>
ndgrad::Tensor<T> strong_aug(const ndgrad::Tensor<T>& x, Rng& rng) {
    auto out = weak_aug(x, rng);
    const int first = int(rng.uniform_index(4));
    int second = int(rng.uniform_index(3));
    if (second >= first) ++second;
    for (int op : {first, second}) {
        switch (op) {
            case 0: out = aug::rotate(out, rng.uniform(-30.0, 30.0)); break;
            case 1: out = aug::intensity_scale(out, rng.uniform(0.5, 1.5)); break;
            case 2: out = aug::add_noise(out, 0.1, rng); break;
            default: out = aug::random_erase(out, rng); break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// model: shared backbone, four auxiliary heads, one main head
// ---------------------------------------------------------------------------

enum Head { kWeak1 = 0, kWeak2 = 1, kStrong1 = 2, kStrong2 = 3, kMain = 4 };

struct MultiHeadConfig {
    int resolution = 16;
    int in_channels = 1;
    int num_classes = 6;
    std::array<int, 4> channels{16, 32, 64, 64};
    double dropout = 0.1;
};

template <typename T>
class MultiHeadModel {
public:
    MultiHeadModel(const MultiHeadConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.resolution % 8 != 0)
            throw std::invalid_argument("MultiHeadModel: resolution must be divisible by 8");
        int in = cfg.in_channels;
        for (int b = 0; b < 4; ++b) {
            const int out = cfg.channels[size_t(b)];
            const std::string nm = "block" + std::to_string(b + 1);
            const double bound = 1.0 / std::sqrt(double(in) * 9.0);
            blocks_[size_t(b)].w = add_param(nm + ".w", {out, in, 3, 3}, bound, rng);
            blocks_[size_t(b)].b = add_param(nm + ".b", {out}, bound, rng);
            blocks_[size_t(b)].g = add_const_param(nm + ".norm.g", {out}, T(1));
            blocks_[size_t(b)].be = add_const_param(nm + ".norm.b", {out}, T(0));
            in = out;
        }
        const double hb = 1.0 / std::sqrt(double(feature_dim()));
        for (int h = 0; h < 5; ++h) {
            const std::string nm = "head" + std::to_string(h);
            heads_[size_t(h)].w =
                add_param(nm + ".w", {feature_dim(), cfg.num_classes}, hb, rng);
            heads_[size_t(h)].b = add_param(nm + ".b", {cfg.num_classes}, hb, rng);
        }
    }

    const MultiHeadConfig& config() const { return cfg_; }
    int feature_dim() const { return cfg_.channels[3]; }
    ndgrad::NamedParams<T>& params() { return params_; }
    const ndgrad::NamedParams<T>& params() const { return params_; }

    std::vector<ndgrad::Tensor<T>> backbone_params() const {
        std::vector<ndgrad::Tensor<T>> out;
        for (const auto& blk : blocks_) {
            out.push_back(blk.w);
            out.push_back(blk.b);
            out.push_back(blk.g);
            out.push_back(blk.be);
        }
        return out;
    }
    std::vector<ndgrad::Tensor<T>> head_params(Head h) const {
        return {heads_[size_t(h)].w, heads_[size_t(h)].b};
    }
    ndgrad::Tensor<T> head_weight(Head h) const { return heads_[size_t(h)].w; }

    // Backbone features before dropout: [N, feature_dim].
    ndgrad::Tensor<T> features(const ndgrad::Tensor<T>& x) const {
        using namespace ndgrad;
        if (x.rank() != 4 || x.dim(2) != cfg_.resolution || x.dim(3) != cfg_.resolution)
            throw std::invalid_argument("MultiHeadModel: input " + shape_str(x.shape()) +
                                        " does not match resolution " +
                                        std::to_string(cfg_.resolution));
        auto h = x;
        for (int b = 0; b < 4; ++b) {
            const auto& blk = blocks_[size_t(b)];
            h = silu(affine_norm(conv2d(h, blk.w, blk.b), blk.g, blk.be));
            // keep at least 2x2 so the per-channel normalization stays informative
            if (b < 3 && h.dim(2) > 2) h = avg_pool2(h);
        }
        // global average over the remaining spatial extent
        const int64_t N = h.dim(0), C = h.dim(1);
        while (h.dim(2) > 1) h = avg_pool2(h);
        return reshape(h, {N, C});
    }

    ndgrad::Tensor<T> dropped_features(const ndgrad::Tensor<T>& feats, Rng& rng) const {
        return ndgrad::dropout(feats, cfg_.dropout, rng);
    }

    ndgrad::Tensor<T> head_logits(const ndgrad::Tensor<T>& feats, Head h) const {
        return ndgrad::linear(feats, heads_[size_t(h)].w, heads_[size_t(h)].b);
    }

    // Deterministic main-head prediction (dropout off, no graph).
    std::vector<int> predict(const ndgrad::Tensor<T>& x, Head h = kMain) const {
        ndgrad::NoGradGuard ng;
        auto logits = head_logits(features(x), h);
        return argmax_rows(logits);
    }

    static std::vector<int> argmax_rows(const ndgrad::Tensor<T>& logits) {
        const int64_t B = logits.dim(0), C = logits.dim(1);
        std::vector<int> out(static_cast<size_t>(B));
        for (int64_t i = 0; i < B; ++i) {
            const T* row = logits.data().data() + i * C;
            int best = 0;
            for (int c = 1; c < C; ++c)
                if (row[c] > row[best]) best = c;
            out[size_t(i)] = best;
        }
        return out;
    }

private:
    struct ConvBlock {
        ndgrad::Tensor<T> w, b, g, be;
    };
    struct HeadParam {
        ndgrad::Tensor<T> w, b;
    };

    ndgrad::Tensor<T> add_param(const std::string& name, ndgrad::Shape shape, double bound,
                                Rng& rng) {
        std::vector<T> v(size_t(ndgrad::shape_numel(shape)));
        rng.fill_uniform(v, -bound, bound);
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

    MultiHeadConfig cfg_;
    ndgrad::NamedParams<T> params_;
    std::array<ConvBlock, 4> blocks_;
    std::array<HeadParam, 5> heads_;
};

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Entrywise L1 norm of W1^T W2; zero when the heads' columns are orthogonal.
template <typename T>
ndgrad::Tensor<T> orthogonality_penalty(const ndgrad::Tensor<T>& w1, const ndgrad::Tensor<T>& w2) {
    if (w1.shape() != w2.shape())
        throw std::invalid_argument("orthogonality_penalty: shape mismatch " +
                                    ndgrad::shape_str(w1.shape()) + " vs " +
                                    ndgrad::shape_str(w2.shape()));
    return ndgrad::sum(ndgrad::abs(ndgrad::matmul(w1, w2, true, false)));
}

// Stage-1 objective: cross entropy of the two weak heads on the weakly
// augmented view plus the two strong heads on the strongly augmented view,
// plus the weighted orthogonality penalties. The main head is untouched.
template <typename T>
ndgrad::Tensor<T> pretrain_loss(const MultiHeadModel<T>& model, const ndgrad::Tensor<T>& x_weak,
                                const ndgrad::Tensor<T>& x_strong, const std::vector<int>& labels,
                                double lambda, Rng& rng) {
    using namespace ndgrad;
    if (!x_weak.defined() || x_weak.dim(0) == 0)
        throw std::invalid_argument("pretrain_loss: empty batch");
    if (lambda < 0.0) throw std::invalid_argument("pretrain_loss: lambda must be >= 0");
    auto hw = model.dropped_features(model.features(x_weak), rng);
    auto hs = model.dropped_features(model.features(x_strong), rng);
    auto loss = add(cross_entropy(model.head_logits(hw, kWeak1), labels),
                    cross_entropy(model.head_logits(hw, kWeak2), labels));
    loss = add(loss, add(cross_entropy(model.head_logits(hs, kStrong1), labels),
                         cross_entropy(model.head_logits(hs, kStrong2), labels)));
    auto pen = add(orthogonality_penalty(model.head_weight(kWeak1), model.head_weight(kWeak2)),
                   orthogonality_penalty(model.head_weight(kStrong1), model.head_weight(kStrong2)));
    return add(loss, scale(pen, T(lambda)));
}

// Convenience overload that augments the raw batch itself.
template <typename T>
ndgrad::Tensor<T> pretrain_loss(const MultiHeadModel<T>& model,
                                const std::vector<ndgrad::Tensor<T>>& images,
                                const std::vector<int>& labels, double lambda, Rng& rng) {
    if (images.empty()) throw std::invalid_argument("pretrain_loss: empty batch");
    std::vector<ndgrad::Tensor<T>> weak, strong;
    weak.reserve(images.size());
    strong.reserve(images.size());
    for (const auto& im : images) {
        weak.push_back(weak_aug(im, rng));
        strong.push_back(strong_aug(im, rng));
    }
    return pretrain_loss(model, stack_batch(weak), stack_batch(strong), labels, lambda, rng);
}

// ---------------------------------------------------------------------------
// stage 2: pseudo-labeling
// ---------------------------------------------------------------------------

enum class Provenance { real, synthetic_accepted };

struct LabelPools {
    std::vector<ndgrad::Tensor<float>> labeled;  // P_L
    std::vector<int> labels;
    std::vector<Provenance> provenance;
    std::vector<ndgrad::Tensor<float>> unlabeled;  // P_U
    std::vector<int64_t> unlabeled_ids;            // stable identity of each P_U entry

    int64_t labeled_size() const { return int64_t(labeled.size()); }
    int64_t unlabeled_size() const { return int64_t(unlabeled.size()); }
};

inline LabelPools make_pools(const Dataset& real, const Dataset& synthetic) {
    LabelPools p;
    for (int64_t i = 0; i < real.size(); ++i) {
        p.labeled.push_back(image_at(real, i));
        p.labels.push_back(real.labels[size_t(i)]);
        p.provenance.push_back(Provenance::real);
    }
    for (int64_t i = 0; i < synthetic.size(); ++i) {
        p.unlabeled.push_back(image_at(synthetic, i));
        p.unlabeled_ids.push_back(i);
    }
    return p;
}

// Per-class variance of the mean auxiliary-head softmax over K
// dropout-enabled passes. The convolutional features are dropout-free, so
// they are computed once and only the feature dropout is resampled.
template <typename T>
std::vector<double> mc_uncertainty(const MultiHeadModel<T>& model, const ndgrad::Tensor<T>& x,
                                   int K, Rng& rng) {
    if (K < 2) throw std::invalid_argument("mc_uncertainty: K must be >= 2");
    ndgrad::NoGradGuard ng;
    const int C = model.config().num_classes;
    auto feats = model.features(x);
    std::vector<double> sum(size_t(C), 0.0), sumsq(size_t(C), 0.0);
    for (int k = 0; k < K; ++k) {
        auto dropped = model.dropped_features(feats, rng);
        std::vector<double> prob(size_t(C), 0.0);
        for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2}) {
            auto p = ndgrad::softmax(model.head_logits(dropped, h));
            for (int c = 0; c < C; ++c) prob[size_t(c)] += double(p.data()[size_t(c)]) / 4.0;
        }
        for (int c = 0; c < C; ++c) {
            sum[size_t(c)] += prob[size_t(c)];
            sumsq[size_t(c)] += prob[size_t(c)] * prob[size_t(c)];
        }
    }
    std::vector<double> var(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        const double m = sum[size_t(c)] / K;
        var[size_t(c)] = std::max(0.0, sumsq[size_t(c)] / K - m * m);
    }
    return var;
}

struct PseudoLabelStats {
    int64_t accepted = 0;
    int64_t rejected_consistency = 0;
    int64_t rejected_confidence = 0;
};

// Moves every unlabeled image whose four auxiliary heads agree and whose MC
// uncertainty stays below tau into the labeled pool. Decisions are pure per
// image given the frozen model and the image's derived stream.
template <typename T>
PseudoLabelStats assign_pseudo_labels(const MultiHeadModel<T>& model, LabelPools& pools,
                                      double tau, int K, uint64_t seed, int workers = 1) {
    ndgrad::NoGradGuard ng;
    const int64_t n = pools.unlabeled_size();
    std::vector<int> decision(size_t(n), -1);  // accepted label or -1
    std::vector<int> reject_kind(size_t(n), 0);
    parallel_for(n, workers, [&](int64_t i) {
        const auto& x = pools.unlabeled[size_t(i)];
        auto feats = model.features(x);
        int agreed = -1;
        bool consistent = true;
        for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2}) {
            const int lab = MultiHeadModel<T>::argmax_rows(model.head_logits(feats, h))[0];
            if (agreed == -1) agreed = lab;
            else if (lab != agreed) consistent = false;
        }
        if (!consistent) {
            reject_kind[size_t(i)] = 1;
            return;
        }
        Rng rng(Rng::derive(seed, {0x3c, uint64_t(pools.unlabeled_ids[size_t(i)])}));
        auto u = mc_uncertainty(model, x, K, rng);
        double umax = 0.0;
        for (double v : u) umax = std::max(umax, v);
        if (umax < tau) decision[size_t(i)] = agreed;
        else reject_kind[size_t(i)] = 2;
    });

    PseudoLabelStats stats;
    LabelPools next;
    next.labeled = std::move(pools.labeled);
    next.labels = std::move(pools.labels);
    next.provenance = std::move(pools.provenance);
    for (int64_t i = 0; i < n; ++i) {
        if (decision[size_t(i)] >= 0) {
            next.labeled.push_back(pools.unlabeled[size_t(i)]);
            next.labels.push_back(decision[size_t(i)]);
            next.provenance.push_back(Provenance::synthetic_accepted);
            stats.accepted++;
        } else {
            next.unlabeled.push_back(pools.unlabeled[size_t(i)]);
            next.unlabeled_ids.push_back(pools.unlabeled_ids[size_t(i)]);
            if (reject_kind[size_t(i)] == 1) stats.rejected_consistency++;
            else stats.rejected_confidence++;
        }
    }
    pools = std::move(next);
    return stats;
}

// ---------------------------------------------------------------------------
// stage 3: consistency-regularized training of the main head
// ---------------------------------------------------------------------------

struct SoftMatchState {
    double mu_hat;
    double sigma2_hat;
    double momentum = 0.999;
    double lambda_max = 1.0;

    explicit SoftMatchState(int num_classes)
        : mu_hat(1.0 / double(num_classes)), sigma2_hat(1.0) {}

    void update(const std::vector<double>& confidences) {
        if (confidences.empty()) return;
        double m = 0.0;
        for (double c : confidences) m += c;
        m /= double(confidences.size());
        double v = 0.0;
        for (double c : confidences) v += (c - m) * (c - m);
        v = confidences.size() > 1 ? v / double(confidences.size() - 1) : 0.0;
        mu_hat = momentum * mu_hat + (1.0 - momentum) * m;
        sigma2_hat = momentum * sigma2_hat + (1.0 - momentum) * v;
    }
};

// Truncated-Gaussian confidence weighting.
inline double consistency_weight(const SoftMatchState& state, const std::vector<double>& p_w) {
    double s = 0.0, c = 0.0;
    for (double p : p_w) {
        if (p < -1e-6 || p > 1.0 + 1e-6)
            throw std::invalid_argument("consistency_weight: invalid probability vector");
        s += p;
        c = std::max(c, p);
    }
    if (std::fabs(s - 1.0) > 1e-4)
        throw std::invalid_argument("consistency_weight: probabilities must sum to 1");
    if (c >= state.mu_hat) return state.lambda_max;
    const double d = c - state.mu_hat;
    return state.lambda_max * std::exp(-d * d / (2.0 * state.sigma2_hat));
}

// Supervised cross entropy on the labeled batch (under the standard weak
// augmentation, like every other classifier training pass here) plus the
// weighted consistency loss on the unlabeled batch. The weak-view prediction
// is the target: computed dropout-free under no-grad and hardened to an
// argmax, so no gradient flows through the weak branch.
template <typename T>
ndgrad::Tensor<T> stage3_loss(const MultiHeadModel<T>& model,
                              const std::vector<ndgrad::Tensor<T>>& labeled_images,
                              const std::vector<int>& labels,
                              const std::vector<ndgrad::Tensor<T>>& unlabeled_images,
                              SoftMatchState& state, Rng& rng, bool augment_labeled = true) {
    using namespace ndgrad;
    if (labeled_images.empty() && unlabeled_images.empty())
        throw std::invalid_argument("stage3_loss: both batches empty");

    Tensor<T> total;
    if (!labeled_images.empty()) {
        std::vector<Tensor<T>> lb;
        if (augment_labeled)
            for (const auto& im : labeled_images) lb.push_back(weak_aug(im, rng));
        auto x = stack_batch(augment_labeled ? lb : labeled_images);
        auto h = model.dropped_features(model.features(x), rng);
        total = cross_entropy(model.head_logits(h, kMain), labels);
    }
    if (!unlabeled_images.empty()) {
        std::vector<Tensor<T>> weak, strong;
        for (const auto& im : unlabeled_images) {
            weak.push_back(weak_aug(im, rng));
            strong.push_back(strong_aug(im, rng));
        }
        std::vector<int> targets;
        std::vector<T> weights;
        {
            NoGradGuard ng;
            auto pw = softmax(model.head_logits(model.features(stack_batch(weak)), kMain));
            const int C = model.config().num_classes;
            std::vector<double> confidences;
            for (int64_t i = 0; i < pw.dim(0); ++i) {
                const T* row = pw.data().data() + i * C;
                int best = 0;
                for (int c = 1; c < C; ++c)
                    if (row[c] > row[best]) best = c;
                targets.push_back(best);
                confidences.push_back(double(row[best]));
            }
            state.update(confidences);
            for (int64_t i = 0; i < pw.dim(0); ++i) {
                const T* row = pw.data().data() + i * C;
                std::vector<double> p(row, row + C);
                weights.push_back(T(consistency_weight(state, p)));
            }
        }
        auto hs = model.dropped_features(model.features(stack_batch(strong)), rng);
        auto ce_vec = scale(gather_rows(log_softmax(model.head_logits(hs, kMain)), targets),
                            T(-1));
        const int64_t nw = int64_t(weights.size());
        auto w = Tensor<T>::from_data({nw}, std::move(weights));
        auto lc = mean(mul(ce_vec, w));
        total = total.defined() ? add(total, lc) : lc;
    }
    return total;
}

// ---------------------------------------------------------------------------
// the full three-stage procedure
// ---------------------------------------------------------------------------

struct SelfTrainConfig {
    double lambda = 0.001;
    double tau = 0.01;
    int mc_passes = 10;
    int epochs_stage1 = 30;
    int epochs_stage3 = 30;
    int batch = 64;
    double lr = 0.02;
    double momentum = 0.9;
    uint64_t seed = 0;
    int workers = 1;
};

struct SelfTrainReport {
    double stage1_acc = 0.0;
    double acceptance_rate = 0.0;
    double pseudo_precision = -1.0;  // -1 when no ground truth available
    double final_acc = 0.0;
    int64_t pool_labeled = 0;
    int64_t pool_unlabeled = 0;
    std::vector<double> stage1_losses;
    std::vector<double> stage3_losses;
};

namespace detail {

template <typename T>
double dataset_accuracy(const MultiHeadModel<T>& model, const Dataset& data, Head head) {
    if (data.size() == 0) return 0.0;
    ndgrad::NoGradGuard ng;
    int64_t correct = 0;
    const int64_t bs = 128;
    for (int64_t at = 0; at < data.size(); at += bs) {
        const int64_t n = std::min(bs, data.size() - at);
        std::vector<ndgrad::Tensor<float>> imgs;
        for (int64_t i = 0; i < n; ++i) imgs.push_back(image_at(data, at + i));
        auto pred = model.predict(stack_images(imgs), head);
        for (int64_t i = 0; i < n; ++i)
            if (pred[size_t(i)] == data.labels[size_t(at + i)]) ++correct;
    }
    return double(correct) / double(data.size());
}

// Accuracy with the per-sample probability averaged over the four auxiliary
// heads (used to report the stage-1 state before f_5 exists).
template <typename T>
double aux_ensemble_accuracy(const MultiHeadModel<T>& model, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    ndgrad::NoGradGuard ng;
    int64_t correct = 0;
    for (int64_t i = 0; i < data.size(); ++i) {
        auto feats = model.features(image_at(data, i));
        const int C = model.config().num_classes;
        std::vector<double> prob(size_t(C), 0.0);
        for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2}) {
            auto p = ndgrad::softmax(model.head_logits(feats, h));
            for (int c = 0; c < C; ++c) prob[size_t(c)] += double(p.data()[size_t(c)]);
        }
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (prob[size_t(c)] > prob[size_t(best)]) best = c;
        if (best == data.labels[size_t(i)]) ++correct;
    }
    return double(correct) / double(data.size());
}

}  // namespace detail

// Plain supervised baseline: backbone + main head trained with cross
// entropy on weakly augmented images (the study and ablation cells that
// trust provisional labels use this).
template <typename T>
std::vector<double> train_supervised(MultiHeadModel<T>& model, const Dataset& data, int epochs,
                                     int batch, double lr, double momentum, uint64_t seed) {
    static_assert(std::is_same_v<T, float>, "pipeline runs in real32");
    if (data.size() == 0) throw std::invalid_argument("train_supervised: empty dataset");
    std::vector<ndgrad::Tensor<T>> images;
    for (int64_t i = 0; i < data.size(); ++i) images.push_back(image_at(data, i));
    auto trainable = model.backbone_params();
    for (auto& p : model.head_params(kMain)) trainable.push_back(p);
    ndgrad::SgdMomentum<T> opt(trainable, momentum);
    Rng rng(Rng::derive(seed, {0x50b1}));
    const int64_t N = data.size();
    std::vector<int64_t> order(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i) order[size_t(i)] = i;
    const int64_t steps_per_epoch = (N + batch - 1) / batch;
    int64_t step = 0;
    std::vector<double> losses;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (int64_t i = N - 1; i > 0; --i)
            std::swap(order[size_t(i)], order[size_t(rng.uniform_index(uint64_t(i + 1)))]);
        double esum = 0.0;
        int64_t nb = 0;
        for (int64_t at = 0; at < N; at += batch, ++nb) {
            const int64_t bs = std::min<int64_t>(batch, N - at);
            std::vector<ndgrad::Tensor<T>> xb;
            std::vector<int> yb;
            for (int64_t j = 0; j < bs; ++j) {
                xb.push_back(weak_aug(images[size_t(order[size_t(at + j)])], rng));
                yb.push_back(data.labels[size_t(order[size_t(at + j)])]);
            }
            opt.zero_grad();
            auto h = model.dropped_features(model.features(stack_batch(xb)), rng);
            auto loss = ndgrad::cross_entropy(model.head_logits(h, kMain), yb);
            loss.backward();
            opt.step(ndgrad::cosine_lr(lr, step++, steps_per_epoch * epochs));
            esum += double(loss.item());
        }
        losses.push_back(esum / double(nb));
    }
    return losses;
}

// Three stages: pre-train backbone + auxiliary heads on real data,
// pseudo-label the synthetic pool once, then train backbone + main head on
// the labeled pool with consistency regularization from the rest.
template <typename T>
SelfTrainReport run_self_training(MultiHeadModel<T>& model, const Dataset& real_train,
                                  const Dataset& synthetic, const Dataset& real_test,
                                  const SelfTrainConfig& cfg,
                                  const std::vector<int>* synthetic_truth = nullptr) {
    static_assert(std::is_same_v<T, float>, "pipeline runs in real32");
    SelfTrainReport report;
    Rng rng(Rng::derive(cfg.seed, {0xa571}));

    // ---- stage 1
    {
        std::vector<ndgrad::Tensor<T>> images;
        for (int64_t i = 0; i < real_train.size(); ++i) images.push_back(image_at(real_train, i));
        auto head_params = model.backbone_params();
        for (Head h : {kWeak1, kWeak2, kStrong1, kStrong2})
            for (auto& p : model.head_params(h)) head_params.push_back(p);
        ndgrad::SgdMomentum<T> opt(head_params, cfg.momentum);
        const int64_t N = real_train.size();
        std::vector<int64_t> order(static_cast<size_t>(N));
        for (int64_t i = 0; i < N; ++i) order[size_t(i)] = i;
        const int64_t steps_per_epoch = (N + cfg.batch - 1) / cfg.batch;
        int64_t step = 0;
        for (int epoch = 0; epoch < cfg.epochs_stage1; ++epoch) {
            for (int64_t i = N - 1; i > 0; --i)
                std::swap(order[size_t(i)], order[size_t(rng.uniform_index(uint64_t(i + 1)))]);
            double esum = 0.0;
            int64_t nb = 0;
            for (int64_t at = 0; at < N; at += cfg.batch, ++nb) {
                const int64_t bs = std::min<int64_t>(cfg.batch, N - at);
                std::vector<ndgrad::Tensor<T>> batch;
                std::vector<int> ybatch;
                for (int64_t j = 0; j < bs; ++j) {
                    batch.push_back(images[size_t(order[size_t(at + j)])]);
                    ybatch.push_back(real_train.labels[size_t(order[size_t(at + j)])]);
                }
                opt.zero_grad();
                auto loss = pretrain_loss(model, batch, ybatch, cfg.lambda, rng);
                loss.backward();
                opt.step(ndgrad::cosine_lr(cfg.lr, step++,
                                           steps_per_epoch * cfg.epochs_stage1));
                esum += double(loss.item());
            }
            report.stage1_losses.push_back(esum / double(nb));
        }
        report.stage1_acc = detail::aux_ensemble_accuracy(model, real_test);
    }

    // ---- stage 2
    LabelPools pools = make_pools(real_train, synthetic);
    const int64_t total = pools.labeled_size() + pools.unlabeled_size();
    std::vector<int> accepted_label_of(size_t(synthetic.size()), -1);
    {
        auto stats = assign_pseudo_labels(model, pools, cfg.tau, cfg.mc_passes,
                                          Rng::derive(cfg.seed, {0x51a2}), cfg.workers);
        report.acceptance_rate =
            synthetic.size() > 0 ? double(stats.accepted) / double(synthetic.size()) : 0.0;
        if (pools.labeled_size() + pools.unlabeled_size() != total)
            throw std::runtime_error("run_self_training: pool conservation violated");
        if (synthetic_truth) {
            int64_t hits = 0, n = 0;
            // accepted synthetics sit after the real prefix of P_L, in original
            // unlabeled order; remaining ids are tracked in unlabeled_ids
            std::vector<bool> still_unlabeled(size_t(synthetic.size()), false);
            for (int64_t id : pools.unlabeled_ids) still_unlabeled[size_t(id)] = true;
            int64_t li = real_train.size();
            for (int64_t id = 0; id < synthetic.size(); ++id) {
                if (still_unlabeled[size_t(id)]) continue;
                const int lab = pools.labels[size_t(li)];
                accepted_label_of[size_t(id)] = lab;
                if (lab == (*synthetic_truth)[size_t(id)]) ++hits;
                ++n;
                ++li;
            }
            report.pseudo_precision = n > 0 ? double(hits) / double(n) : -1.0;
        }
    }
    report.pool_labeled = pools.labeled_size();
    report.pool_unlabeled = pools.unlabeled_size();

    // ---- stage 3
    {
        auto trainable = model.backbone_params();
        for (auto& p : model.head_params(kMain)) trainable.push_back(p);
        ndgrad::SgdMomentum<T> opt(trainable, cfg.momentum);
        SoftMatchState state(model.config().num_classes);
        const int64_t NL = pools.labeled_size();
        const int64_t NU = pools.unlabeled_size();
        std::vector<int64_t> lorder(static_cast<size_t>(NL));
        for (int64_t i = 0; i < NL; ++i) lorder[size_t(i)] = i;
        std::vector<int64_t> uorder(static_cast<size_t>(NU));
        for (int64_t i = 0; i < NU; ++i) uorder[size_t(i)] = i;
        const int64_t steps_per_epoch = (NL + cfg.batch - 1) / cfg.batch;
        int64_t step = 0;
        for (int epoch = 0; epoch < cfg.epochs_stage3; ++epoch) {
            for (int64_t i = NL - 1; i > 0; --i)
                std::swap(lorder[size_t(i)], lorder[size_t(rng.uniform_index(uint64_t(i + 1)))]);
            for (int64_t i = NU - 1; i > 0; --i)
                std::swap(uorder[size_t(i)], uorder[size_t(rng.uniform_index(uint64_t(i + 1)))]);
            double esum = 0.0;
            int64_t nb = 0;
            int64_t uat = 0;
            for (int64_t at = 0; at < NL; at += cfg.batch, ++nb) {
                const int64_t bs = std::min<int64_t>(cfg.batch, NL - at);
                std::vector<ndgrad::Tensor<T>> lb, ub;
                std::vector<int> yb;
                for (int64_t j = 0; j < bs; ++j) {
                    lb.push_back(pools.labeled[size_t(lorder[size_t(at + j)])]);
                    yb.push_back(pools.labels[size_t(lorder[size_t(at + j)])]);
                }
                const int64_t ubs = std::min<int64_t>(cfg.batch, NU);
                for (int64_t j = 0; j < ubs; ++j) {
                    ub.push_back(pools.unlabeled[size_t(uorder[size_t(uat % NU)])]);
                    ++uat;
                }
                opt.zero_grad();
                auto loss = stage3_loss(model, lb, yb, ub, state, rng);
                loss.backward();
                opt.step(ndgrad::cosine_lr(cfg.lr, step++,
                                           steps_per_epoch * cfg.epochs_stage3));
                esum += double(loss.item());
            }
            report.stage3_losses.push_back(esum / double(nb));
        }
    }
    report.final_acc = detail::dataset_accuracy(model, real_test, kMain);
    return report;
}

}  // namespace diffaug
