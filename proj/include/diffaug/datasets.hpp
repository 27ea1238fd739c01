// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffaug/tensor.hpp"

namespace diffaug {

// Procedural shape dataset: six visually separable classes rendered with
// per-sample jitter. Images are single channel in [-1,1].
struct ShapeSetSpec {
    int num_classes = 6;  // disk, ring, cross, bar-horizontal, bar-vertical, triangle
    int per_class = 100;
    int resolution = 16;
    double pos_jitter = 1.5;  // pixels
    double size_min = 0.6, size_max = 1.0;
    double rot_jitter_deg = 20.0;
    double intensity_min = 0.6, intensity_max = 1.0;
    double bg_noise = 0.05;
    uint64_t seed = 1;
};

struct Dataset {
    ndgrad::Tensor<float> images;  // [N,1,R,R]
    std::vector<int> labels;       // [N]
    int num_classes = 0;

    int64_t size() const { return images.defined() ? images.dim(0) : 0; }
    int resolution() const { return int(images.dim(2)); }
};

Dataset synth_shapes(const ShapeSetSpec& spec);

// Rendered Gaussian blobs, one blob position per class; ultra fast smoke
// dataset.
Dataset synth_gauss2d(int num_classes, int per_class, int resolution, uint64_t seed);

// Copies image i as a [1,1,R,R] tensor.
ndgrad::Tensor<float> image_at(const Dataset& d, int64_t i);

// Stacks a list of [1,1,R,R] (or [1,R,R]) tensors into [N,1,R,R].
ndgrad::Tensor<float> stack_images(const std::vector<ndgrad::Tensor<float>>& imgs);

Dataset concat_datasets(const Dataset& a, const Dataset& b);

}  // namespace diffaug
