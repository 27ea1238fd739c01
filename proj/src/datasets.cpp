// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#include "diffaug/datasets.hpp"

#include <cmath>
#include <stdexcept>

#include "diffaug/rng.hpp"

namespace diffaug {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct ShapeParams {
    int cls;
    double cx, cy;      // center, pixels
    double size;        // scale factor in [size_min, size_max]
    double rot;         // radians
    double intensity;   // in [intensity_min, intensity_max]
};

// Indicator of the class shape at local (rotated, centered) coordinates
// measured in units of the resolution.
// Geometry constants chosen so a raw-pixel nearest-centroid classifier
// stays above 90% under the default jitter (verified over several seeds).
bool inside_shape(int cls, double u, double v, double s, double R) {
    const double r = std::sqrt(u * u + v * v);
    switch (cls % 6) {
        case 0:  // disk
            return r <= 0.187 * s * R;
        case 1: {  // ring
            const double outer = 0.408 * s * R;
            return r <= outer && r >= 0.64 * outer;
        }
        case 2: {  // cross
            const double w = 0.079 * s * R, L = 0.605 * s * R;
            return (std::fabs(u) <= w && std::fabs(v) <= L) ||
                   (std::fabs(v) <= w && std::fabs(u) <= L);
        }
        case 3: {  // horizontal bar
            const double w = 0.165 * s * R, L = 0.531 * s * R;
            return std::fabs(v) <= w && std::fabs(u) <= L;
        }
        case 4: {  // vertical bar
            const double w = 0.165 * s * R, L = 0.531 * s * R;
            return std::fabs(u) <= w && std::fabs(v) <= L;
        }
        default: {  // triangle (equilateral, point up)
            const double rho = 0.574 * s * R;
            // three half planes through vertex pairs
            const double x1 = 0.0, y1 = -rho;
            const double x2 = rho * std::cos(kPi / 6.0), y2 = rho * 0.5;
            const double x3 = -x2, y3 = y2;
            auto side = [](double ax, double ay, double bx, double by, double px, double py) {
                return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
            };
            const double d1 = side(x1, y1, x2, y2, u, v);
            const double d2 = side(x2, y2, x3, y3, u, v);
            const double d3 = side(x3, y3, x1, y1, u, v);
            return (d1 >= 0 && d2 >= 0 && d3 >= 0) || (d1 <= 0 && d2 <= 0 && d3 <= 0);
        }
    }
}

void render_shape(float* img, int R, const ShapeParams& p, Rng& noise_rng, double bg_noise) {
    const double c = std::cos(p.rot), sn = std::sin(p.rot);
    for (int y = 0; y < R; ++y)
        for (int x = 0; x < R; ++x) {
            // 3x3 supersampling for soft edges
            int hits = 0;
            for (int sy = 0; sy < 3; ++sy)
                for (int sx = 0; sx < 3; ++sx) {
                    const double px = x + (sx + 0.5) / 3.0 - p.cx;
                    const double py = y + (sy + 0.5) / 3.0 - p.cy;
                    const double u = c * px + sn * py;
                    const double v = -sn * px + c * py;
                    if (inside_shape(p.cls, u, v, p.size, double(R))) ++hits;
                }
            const double coverage = hits / 9.0;
            double val = -1.0 + 2.0 * p.intensity * coverage + bg_noise * noise_rng.normal();
            val = std::min(1.0, std::max(-1.0, val));
            img[y * R + x] = float(val);
        }
}

}  // namespace

Dataset synth_shapes(const ShapeSetSpec& spec) {
    if (spec.resolution < 8) throw std::invalid_argument("synth_shapes: resolution must be >= 8");
    if (spec.num_classes < 1 || spec.num_classes > 6)
        throw std::invalid_argument("synth_shapes: num_classes must be in [1,6]");
    if (spec.per_class < 1) throw std::invalid_argument("synth_shapes: per_class must be >= 1");

    const int R = spec.resolution;
    const int64_t N = int64_t(spec.num_classes) * spec.per_class;
    std::vector<float> images(size_t(N) * R * R);
    std::vector<int> labels(static_cast<size_t>(N));

    int64_t idx = 0;
    for (int cls = 0; cls < spec.num_classes; ++cls)
        for (int k = 0; k < spec.per_class; ++k, ++idx) {
            Rng rng(Rng::derive(spec.seed, {uint64_t(cls), uint64_t(k)}));
            ShapeParams p;
            p.cls = cls;
            p.cx = R / 2.0 + rng.uniform(-spec.pos_jitter, spec.pos_jitter);
            p.cy = R / 2.0 + rng.uniform(-spec.pos_jitter, spec.pos_jitter);
            p.size = rng.uniform(spec.size_min, spec.size_max);
            p.rot = rng.uniform(-spec.rot_jitter_deg, spec.rot_jitter_deg) * kPi / 180.0;
            p.intensity = rng.uniform(spec.intensity_min, spec.intensity_max);
            render_shape(images.data() + idx * R * R, R, p, rng, spec.bg_noise);
            labels[size_t(idx)] = cls;
        }

    Dataset d;
    d.images = ndgrad::Tensor<float>::from_data({N, 1, R, R}, std::move(images));
    d.labels = std::move(labels);
    d.num_classes = spec.num_classes;
    return d;
}

Dataset synth_gauss2d(int num_classes, int per_class, int resolution, uint64_t seed) {
    if (resolution < 8) throw std::invalid_argument("synth_gauss2d: resolution must be >= 8");
    const int R = resolution;
    const int64_t N = int64_t(num_classes) * per_class;
    std::vector<float> images(size_t(N) * R * R);
    std::vector<int> labels(static_cast<size_t>(N));

    int64_t idx = 0;
    for (int cls = 0; cls < num_classes; ++cls)
        for (int k = 0; k < per_class; ++k, ++idx) {
            Rng rng(Rng::derive(seed, {0xb10b, uint64_t(cls), uint64_t(k)}));
            const double ang = 2.0 * kPi * cls / num_classes;
            const double mx = R / 2.0 + 0.28 * R * std::cos(ang) + rng.uniform(-1.0, 1.0);
            const double my = R / 2.0 + 0.28 * R * std::sin(ang) + rng.uniform(-1.0, 1.0);
            const double amp = rng.uniform(0.7, 1.0);
            const double sig = 0.09 * R;
            float* img = images.data() + idx * R * R;
            for (int y = 0; y < R; ++y)
                for (int x = 0; x < R; ++x) {
                    const double d2 = (x + 0.5 - mx) * (x + 0.5 - mx) +
                                      (y + 0.5 - my) * (y + 0.5 - my);
                    double val = -1.0 + 2.0 * amp * std::exp(-d2 / (2.0 * sig * sig)) +
                                 0.02 * rng.normal();
                    img[y * R + x] = float(std::min(1.0, std::max(-1.0, val)));
                }
            labels[size_t(idx)] = cls;
        }

    Dataset d;
    d.images = ndgrad::Tensor<float>::from_data({N, 1, R, R}, std::move(images));
    d.labels = std::move(labels);
    d.num_classes = num_classes;
    return d;
}

ndgrad::Tensor<float> image_at(const Dataset& d, int64_t i) {
    const int64_t R = d.images.dim(2), W = d.images.dim(3);
    std::vector<float> v(size_t(R * W));
    std::copy_n(d.images.data().data() + i * R * W, R * W, v.data());
    return ndgrad::Tensor<float>::from_data({1, 1, R, W}, std::move(v));
}

ndgrad::Tensor<float> stack_images(const std::vector<ndgrad::Tensor<float>>& imgs) {
    if (imgs.empty()) throw std::invalid_argument("stack_images: empty list");
    const int64_t per = imgs[0].numel();
    std::vector<float> v;
    v.reserve(size_t(per) * imgs.size());
    for (const auto& im : imgs) {
        if (im.numel() != per) throw std::invalid_argument("stack_images: ragged shapes");
        v.insert(v.end(), im.data().begin(), im.data().end());
    }
    const int64_t R = imgs[0].shape().end()[-2], W = imgs[0].shape().back();
    return ndgrad::Tensor<float>::from_data({int64_t(imgs.size()), 1, R, W}, std::move(v));
}

Dataset concat_datasets(const Dataset& a, const Dataset& b) {
    if (a.size() == 0) return b;
    if (b.size() == 0) return a;
    if (a.resolution() != b.resolution())
        throw std::invalid_argument("concat_datasets: resolution mismatch");
    std::vector<float> v(a.images.data());
    v.insert(v.end(), b.images.data().begin(), b.images.data().end());
    Dataset d;
    d.images = ndgrad::Tensor<float>::from_data(
        {a.size() + b.size(), 1, a.images.dim(2), a.images.dim(3)}, std::move(v));
    d.labels = a.labels;
    d.labels.insert(d.labels.end(), b.labels.begin(), b.labels.end());
    d.num_classes = std::max(a.num_classes, b.num_classes);
    return d;
}

}  // namespace diffaug
