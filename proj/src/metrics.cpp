// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#include "diffaug/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace diffaug {

namespace {

constexpr int64_t kMaxKernelSamples = 10000;

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double d2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        d2 += d * d;
    }
    return d2;
}

void check_features(const FeatureSet& x, const char* who) {
    if (int64_t(x.size()) > kMaxKernelSamples)
        throw std::invalid_argument(std::string(who) + ": feature set exceeds the 10^4 cap");
    for (const auto& f : x)
        if (f.size() != x.front().size())
            throw std::invalid_argument(std::string(who) + ": ragged feature set");
}

}  // namespace

void symmetric_eigen(std::vector<double> a, int64_t n, std::vector<double>& w,
                     std::vector<double>& v) {
    v.assign(size_t(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) v[size_t(i * n + i)] = 1.0;

    auto off_norm = [&] {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) s += a[size_t(i * n + j)] * a[size_t(i * n + j)];
        return std::sqrt(2.0 * s);
    };
    double scale = 0.0;
    for (double x : a) scale = std::max(scale, std::fabs(x));
    const double tol = std::max(1e-300, 1e-14 * std::max(1.0, scale));

    for (int sweep = 0; sweep < 128 && off_norm() > tol; ++sweep) {
        for (int64_t p = 0; p < n - 1; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = a[size_t(p * n + q)];
                if (std::fabs(apq) <= 1e-300) continue;
                const double app = a[size_t(p * n + p)], aqq = a[size_t(q * n + q)];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    const double akp = a[size_t(k * n + p)], akq = a[size_t(k * n + q)];
                    a[size_t(k * n + p)] = c * akp - s * akq;
                    a[size_t(k * n + q)] = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double apk = a[size_t(p * n + k)], aqk = a[size_t(q * n + k)];
                    a[size_t(p * n + k)] = c * apk - s * aqk;
                    a[size_t(q * n + k)] = s * apk + c * aqk;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double vkp = v[size_t(k * n + p)], vkq = v[size_t(k * n + q)];
                    v[size_t(k * n + p)] = c * vkp - s * vkq;
                    v[size_t(k * n + q)] = s * vkp + c * vkq;
                }
            }
    }
    w.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) w[size_t(i)] = a[size_t(i * n + i)];
}

GaussianSummary fit_gaussian(const FeatureSet& feats) {
    if (feats.size() < 2) throw std::invalid_argument("fit_gaussian: need at least 2 samples");
    check_features(feats, "fit_gaussian");
    const int64_t n = int64_t(feats.size());
    const int64_t d = int64_t(feats.front().size());
    GaussianSummary g;
    g.mean.assign(size_t(d), 0.0);
    for (const auto& f : feats)
        for (int64_t k = 0; k < d; ++k) g.mean[size_t(k)] += f[size_t(k)];
    for (auto& m : g.mean) m /= double(n);
    g.cov.assign(size_t(d * d), 0.0);
    for (const auto& f : feats)
        for (int64_t i = 0; i < d; ++i) {
            const double di = f[size_t(i)] - g.mean[size_t(i)];
            for (int64_t j = 0; j < d; ++j)
                g.cov[size_t(i * d + j)] += di * (f[size_t(j)] - g.mean[size_t(j)]);
        }
    for (auto& c : g.cov) c /= double(n - 1);
    return g;
}

namespace {

// V diag(sqrt(max(w,0))) V^T
std::vector<double> sqrtm_psd(const std::vector<double>& m, int64_t d) {
    std::vector<double> w, v;
    symmetric_eigen(m, d, w, v);
    std::vector<double> out(size_t(d * d), 0.0);
    for (int64_t k = 0; k < d; ++k) {
        const double s = std::sqrt(std::max(0.0, w[size_t(k)]));
        if (s == 0.0) continue;
        for (int64_t i = 0; i < d; ++i) {
            const double vik = v[size_t(i * d + k)] * s;
            for (int64_t j = 0; j < d; ++j) out[size_t(i * d + j)] += vik * v[size_t(j * d + k)];
        }
    }
    return out;
}

std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b,
                              int64_t d) {
    std::vector<double> out(size_t(d * d), 0.0);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t k = 0; k < d; ++k) {
            const double aik = a[size_t(i * d + k)];
            for (int64_t j = 0; j < d; ++j) out[size_t(i * d + j)] += aik * b[size_t(k * d + j)];
        }
    return out;
}

}  // namespace

double frechet(const GaussianSummary& a, const GaussianSummary& b) {
    if (a.dim() != b.dim())
        throw std::invalid_argument("frechet: dimension mismatch " + std::to_string(a.dim()) +
                                    " vs " + std::to_string(b.dim()));
    const int64_t d = a.dim();
    double mean_term = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        const double dm = a.mean[size_t(i)] - b.mean[size_t(i)];
        mean_term += dm * dm;
    }
    // trace(S1 + S2 - 2 (S1 S2)^{1/2}) with the square root evaluated through
    // the symmetric form (S2^{1/2} S1 S2^{1/2})^{1/2}
    auto s2h = sqrtm_psd(b.cov, d);
    auto inner = matmul_sq(matmul_sq(s2h, a.cov, d), s2h, d);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = i + 1; j < d; ++j) {
            const double s = 0.5 * (inner[size_t(i * d + j)] + inner[size_t(j * d + i)]);
            inner[size_t(i * d + j)] = s;
            inner[size_t(j * d + i)] = s;
        }
    std::vector<double> w, v;
    symmetric_eigen(inner, d, w, v);
    double tr = 0.0;
    for (int64_t i = 0; i < d; ++i)
        tr += a.cov[size_t(i * d + i)] + b.cov[size_t(i * d + i)] -
              2.0 * std::sqrt(std::max(0.0, w[size_t(i)]));
    return mean_term + tr;
}

double median_bandwidth(const FeatureSet& x, const FeatureSet& y) {
    std::vector<const std::vector<double>*> all;
    for (const auto& f : x) all.push_back(&f);
    for (const auto& f : y) all.push_back(&f);
    std::vector<double> dists;
    for (size_t i = 0; i < all.size(); ++i)
        for (size_t j = i + 1; j < all.size(); ++j)
            dists.push_back(std::sqrt(sq_dist(*all[i], *all[j])));
    if (dists.empty()) throw std::invalid_argument("median_bandwidth: not enough samples");
    std::nth_element(dists.begin(), dists.begin() + long(dists.size() / 2), dists.end());
    return dists[dists.size() / 2];
}

double mmd2(const FeatureSet& x_in, const FeatureSet& y_in, std::optional<double> bandwidth) {
    if (x_in.size() < 2 || y_in.size() < 2)
        throw std::invalid_argument("mmd2: need at least 2 samples per set");
    check_features(x_in, "mmd2");
    check_features(y_in, "mmd2");
    if (x_in.front().size() != y_in.front().size())
        throw std::invalid_argument("mmd2: feature dimension mismatch");

    // canonical operand order makes mmd2(X,Y) == mmd2(Y,X) bit-exact
    const bool swap_sets = y_in < x_in;
    const FeatureSet& x = swap_sets ? y_in : x_in;
    const FeatureSet& y = swap_sets ? x_in : y_in;

    const double bw = bandwidth.has_value() ? *bandwidth : median_bandwidth(x, y);
    if (bw <= 0.0) throw std::invalid_argument("mmd2: degenerate bandwidth (0)");
    const double inv = 1.0 / (2.0 * bw * bw);
    auto kern = [&](const std::vector<double>& a, const std::vector<double>& b) {
        return std::exp(-sq_dist(a, b) * inv);
    };

    const int64_t m = int64_t(x.size()), n = int64_t(y.size());
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < m; ++j)
            if (i != j) kxx += kern(x[size_t(i)], x[size_t(j)]);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            if (i != j) kyy += kern(y[size_t(i)], y[size_t(j)]);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) kxy += kern(x[size_t(i)], y[size_t(j)]);
    return kxx / double(m * (m - 1)) + kyy / double(n * (n - 1)) - 2.0 * kxy / double(m * n);
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (labels.empty()) throw std::invalid_argument("accuracy: empty dataset");
    if (predictions.size() != labels.size())
        throw std::invalid_argument("accuracy: prediction/label count mismatch");
    int64_t hit = 0;
    for (size_t i = 0; i < labels.size(); ++i)
        if (predictions[i] == labels[i]) ++hit;
    return double(hit) / double(labels.size());
}

double accuracy(const MultiHeadModel<float>& model, Head head, const Dataset& data) {
    if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
    ndgrad::NoGradGuard ng;
    std::vector<int> preds;
    const int64_t bs = 256;
    for (int64_t at = 0; at < data.size(); at += bs) {
        const int64_t n = std::min(bs, data.size() - at);
        std::vector<ndgrad::Tensor<float>> imgs;
        for (int64_t i = 0; i < n; ++i) imgs.push_back(image_at(data, at + i));
        auto p = model.predict(stack_images(imgs), head);
        preds.insert(preds.end(), p.begin(), p.end());
    }
    return accuracy(preds, data.labels);
}

FeatureSet extract_features(const MultiHeadModel<float>& model, const Dataset& data) {
    ndgrad::NoGradGuard ng;
    FeatureSet out;
    out.reserve(size_t(data.size()));
    const int64_t bs = 256;
    for (int64_t at = 0; at < data.size(); at += bs) {
        const int64_t n = std::min(bs, data.size() - at);
        std::vector<ndgrad::Tensor<float>> imgs;
        for (int64_t i = 0; i < n; ++i) imgs.push_back(image_at(data, at + i));
        auto f = model.features(stack_images(imgs));
        const int64_t d = f.dim(1);
        for (int64_t i = 0; i < n; ++i) {
            std::vector<double> row(static_cast<size_t>(d));
            for (int64_t k = 0; k < d; ++k) row[size_t(k)] = double(f.data()[size_t(i * d + k)]);
            out.push_back(std::move(row));
        }
    }
    return out;
}

}  // namespace diffaug
