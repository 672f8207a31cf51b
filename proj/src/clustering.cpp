// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "clusterup/error.hpp"
#include "clusterup/random.hpp"

namespace clusterup {

namespace {

double column_dot(const Matrix& centroids, std::size_t i, const Matrix& x, std::size_t j) {
    double s = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) s += centroids(i, r) * x(r, j);
    return s;
}

struct Assignment {
    std::vector<std::size_t> labels;
    std::vector<double> best;   // cosine to the assigned centroid
};

Assignment assign_all(const Matrix& centroids, const Matrix& x) {
    Assignment a;
    a.labels.resize(x.cols());
    a.best.resize(x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
        std::size_t arg = 0;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < centroids.rows(); ++i) {
            const double s = column_dot(centroids, i, x, j);
            if (s > best) {
                best = s;
                arg = i;
            }
        }
        a.labels[j] = arg;
        a.best[j] = best;
    }
    return a;
}

void set_centroid_from_column(Matrix& centroids, std::size_t i, const Matrix& x, std::size_t j) {
    const double n = norm(x.column(j));
    for (std::size_t r = 0; r < x.rows(); ++r) centroids(i, r) = n > kZeroNorm ? x(r, j) / n : 0.0;
}

Matrix plus_plus_seeding(const Matrix& x, std::size_t k, Rng& rng) {
    const std::size_t m = x.cols();
    Matrix centroids(k, x.rows());
    set_centroid_from_column(centroids, 0, x, rng.uniform_index(m));
    std::vector<double> best_cos(m, -std::numeric_limits<double>::infinity());
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        std::vector<double> weight(m);
        for (std::size_t j = 0; j < m; ++j) {
            best_cos[j] = std::max(best_cos[j], column_dot(centroids, c - 1, x, j));
            const double dist = std::max(0.0, 1.0 - best_cos[j]);
            weight[j] = dist * dist;
            total += weight[j];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            double u = rng.uniform() * total;
            pick = m - 1;
            for (std::size_t j = 0; j < m; ++j) {
                if (weight[j] <= 0.0) continue;
                if (u < weight[j]) {
                    pick = j;
                    break;
                }
                u -= weight[j];
            }
            while (weight[pick] <= 0.0 && pick > 0) --pick;
        } else {
            pick = rng.uniform_index(m);
        }
        set_centroid_from_column(centroids, c, x, pick);
    }
    return centroids;
}

// Re-seeds empty clusters from the worst-assigned point of a cluster that can
// spare one, then reassigns. Bounded so duplicate points cannot loop forever.
void repair_empty_clusters(Matrix& centroids, const Matrix& x, Assignment& a) {
    const std::size_t k = centroids.rows();
    for (std::size_t attempt = 0; attempt < x.cols(); ++attempt) {
        std::vector<std::size_t> sizes(k, 0);
        for (std::size_t label : a.labels) ++sizes[label];
        const auto empty = std::find(sizes.begin(), sizes.end(), std::size_t{0});
        if (empty == sizes.end()) return;
        const auto e = static_cast<std::size_t>(empty - sizes.begin());
        std::size_t worst = x.cols();
        double worst_cos = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < x.cols(); ++j) {
            if (sizes[a.labels[j]] < 2) continue;
            if (a.best[j] < worst_cos) {
                worst_cos = a.best[j];
                worst = j;
            }
        }
        if (worst == x.cols()) return;
        set_centroid_from_column(centroids, e, x, worst);
        a = assign_all(centroids, x);
    }
}

}  // namespace

std::vector<std::size_t> ClusterModel::cluster_sizes() const {
    std::vector<std::size_t> sizes(num_clusters(), 0);
    for (std::size_t label : assignments) ++sizes.at(label);
    return sizes;
}

NormalizedRows normalize_rows(const Matrix& x) {
    NormalizedRows out{x, 0};
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = out.values.row(r);
        const double n = norm(row);
        if (n > kZeroNorm) {
            for (double& v : row) v /= n;
        } else {
            std::fill(row.begin(), row.end(), 0.0);
            ++out.zero_rows;
        }
    }
    return out;
}

NormalizedRows normalize_columns(const Matrix& x) {
    NormalizedRows t = normalize_rows(transpose(x));
    return {transpose(t.values), t.zero_rows};
}

std::size_t assign_cluster(const Matrix& centroids, std::span<const double> x) {
    if (centroids.cols() != x.size()) throw Error(ErrorCode::ShapeMismatch, "assign_cluster: dimension mismatch");
    std::size_t arg = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < centroids.rows(); ++i) {
        const double s = dot(centroids.row(i), x);
        if (s > best) {
            best = s;
            arg = i;
        }
    }
    return arg;
}

double spherical_objective(const Matrix& centroids, const Matrix& x) {
    const Assignment a = assign_all(centroids, x);
    double total = 0.0;
    for (double b : a.best) total += b;
    return total;
}

ClusterModel spherical_kmeans(const Matrix& x, std::size_t n_clusters, std::size_t max_iters, std::uint64_t seed) {
    const std::size_t m = x.cols();
    if (n_clusters == 0) throw Error(ErrorCode::InvalidArgument, "spherical_kmeans: n_clusters must be >= 1");
    if (m < n_clusters) {
        throw Error(ErrorCode::InsufficientData, "spherical_kmeans: " + std::to_string(m) +
                                                     " points for " + std::to_string(n_clusters) + " clusters");
    }
    if (max_iters == 0) throw Error(ErrorCode::InvalidArgument, "spherical_kmeans: max_iters must be >= 1");

    Rng rng(seed, "kmeans");
    ClusterModel model;
    model.seed = seed;
    model.centroids = plus_plus_seeding(x, n_clusters, rng);

    auto run_assignment = [&] {
        Assignment a = assign_all(model.centroids, x);
        repair_empty_clusters(model.centroids, x, a);
        double objective = 0.0;
        for (double b : a.best) objective += b;
        model.objective_trace.push_back(objective);
        return a;
    };

    Assignment current = run_assignment();
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        // Centroid update: normalized sum of the assigned vectors.
        Matrix sums(n_clusters, x.rows());
        for (std::size_t j = 0; j < m; ++j) {
            auto row = sums.row(current.labels[j]);
            for (std::size_t r = 0; r < x.rows(); ++r) row[r] += x(r, j);
        }
        for (std::size_t i = 0; i < n_clusters; ++i) {
            auto row = sums.row(i);
            const double n = norm(row);
            if (n > kZeroNorm) {
                auto c = model.centroids.row(i);
                for (std::size_t r = 0; r < x.rows(); ++r) c[r] = row[r] / n;
            }
        }
        Assignment next = run_assignment();
        const bool fixpoint = next.labels == current.labels;
        current = std::move(next);
        if (fixpoint) break;
    }
    model.assignments = std::move(current.labels);
    return model;
}

}  // namespace clusterup
