// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "diffaug/datasets.hpp"
#include "diffaug/selftrain.hpp"

namespace diffaug {

using FeatureSet = std::vector<std::vector<double>>;

// Gaussian fit of a feature set: mean vector and covariance with the n-1
// denominator.
struct GaussianSummary {
    std::vector<double> mean;
    std::vector<double> cov;  // row-major [d,d]

    int64_t dim() const { return int64_t(mean.size()); }
};

GaussianSummary fit_gaussian(const FeatureSet& feats);

// Squared Frechet distance between two Gaussian summaries. The matrix square
// root uses symmetric eigendecomposition with negative eigenvalues clipped
// at zero.
double frechet(const GaussianSummary& a, const GaussianSummary& b);

// Unbiased RBF-kernel MMD^2 (U-statistic). bandwidth omitted -> median
// pairwise distance of X ∪ Y; a degenerate bandwidth of 0 is an error.
double mmd2(const FeatureSet& x, const FeatureSet& y,
            std::optional<double> bandwidth = std::nullopt);

double median_bandwidth(const FeatureSet& x, const FeatureSet& y);

// Fraction of argmax matches.
double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);
double accuracy(const MultiHeadModel<float>& model, Head head, const Dataset& data);

// Penultimate backbone features of the frozen model (the embedding used for
// the Frechet comparison).
FeatureSet extract_features(const MultiHeadModel<float>& model, const Dataset& data);

// Cyclic Jacobi eigendecomposition of a symmetric matrix, a = V diag(w) V^T.
// V is row-major with eigenvectors in columns.
void symmetric_eigen(std::vector<double> a, int64_t n, std::vector<double>& w,
                     std::vector<double>& v);

}  // namespace diffaug
