// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "clusterup/matrix.hpp"

namespace clusterup {

/// Result of spherical k-means. `centroids` live in the space the clustering
/// ran in (the PCA space when `pca_projection` is set); `input_centroids` are
/// the matching unit centroids recovered in the original activation space.
struct ClusterModel {
    Matrix centroids;                       // n_clusters x p, unit rows
    std::vector<std::size_t> assignments;   // length M
    std::vector<double> objective_trace;    // one entry per assignment pass
    std::optional<Matrix> pca_projection;   // p x d
    std::vector<double> pca_mean;           // d, empty without PCA
    Matrix input_centroids;                 // n_clusters x d, unit rows
    std::uint64_t seed = 0;

    [[nodiscard]] std::size_t num_clusters() const noexcept { return centroids.rows(); }
    [[nodiscard]] std::vector<std::size_t> cluster_sizes() const;
};

struct NormalizedRows {
    Matrix values;
    std::size_t zero_rows = 0;
};

inline constexpr double kZeroNorm = 1e-12;
inline constexpr std::size_t kDefaultKmeansIters = 100;

NormalizedRows normalize_rows(const Matrix& x);
/// Column-wise variant for d x M activation batches.
NormalizedRows normalize_columns(const Matrix& x);

/// Spherical k-means on unit-norm columns of x (d x M). k-means++ seeding on
/// cosine distance; stops at an assignment fixpoint or after max_iters.
ClusterModel spherical_kmeans(const Matrix& x, std::size_t n_clusters, std::size_t max_iters, std::uint64_t seed);

/// argmax_i centroids_i . x, ties to the lowest index.
std::size_t assign_cluster(const Matrix& centroids, std::span<const double> x);

/// Sum over columns of max_i centroids_i . x_j.
double spherical_objective(const Matrix& centroids, const Matrix& x);

}  // namespace clusterup
