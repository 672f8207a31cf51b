// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "clusterup/clustering.hpp"
#include "clusterup/linalg.hpp"
#include "clusterup/matrix.hpp"
#include "clusterup/model.hpp"
#include "clusterup/moe.hpp"

#include "json.hpp"

namespace clusterup {

/// FFN-input activations recorded from the dense model, keyed by block index.
struct ActivationBank {
    std::map<std::size_t, Matrix> per_site;   // d x M each
    std::size_t token_cap = 0;
};

struct WhiteningFactor {
    Matrix s;                 // d x d, lower triangular
    double jitter_used = 0.0;
};

enum class InitMethod { sparse, drop, drop_svd, cluster_aware };

std::string to_string(InitMethod method);
/// Accepts "sparse", "drop", "drop-svd"/"drop_svd", "cluster"/"cluster_aware".
InitMethod parse_init_method(const std::string& name);

struct InitReport {
    InitMethod method = InitMethod::sparse;
    std::vector<std::size_t> per_expert_rank;
    std::vector<std::size_t> per_expert_full_rank;
    std::vector<double> per_expert_retained_energy;
    /// Measured ||W X_i - W~_i X_i||_F^2 on each cluster.
    std::vector<double> per_expert_truncation_loss;
    /// Sum of squared discarded singular values of W S_i.
    std::vector<double> per_expert_discarded_energy;
    std::vector<double> per_expert_jitter;
    std::vector<std::size_t> cluster_sizes;
    /// max |E_i(X_i) - FFN(X_i)| over each expert's own cluster.
    std::vector<double> per_expert_cluster_max_deviation;
    std::vector<std::vector<double>> per_expert_sigma;
    double joint_objective = 0.0;
    double gamma = 0.0;
};

nlohmann::json to_json(const InitReport& report);

/// Routing settings applied to freshly upcycled layers.
struct RoutingOptions {
    std::size_t k = 2;
    double capacity_factor = 1.5;
    double router_scale = 0.0;   // <= 0 selects 1/sqrt(d)
};

struct ClusterAwareOptions {
    RoutingOptions routing;
    std::size_t pca_factor = 8;
    std::size_t max_kmeans_iters = kDefaultKmeansIters;
    JitterPolicy jitter;
};

struct ClusterAwareResult {
    MoeLayer layer;
    ClusterModel clusters;
    InitReport report;
};

/// Runs the dense model on `data` and records the residual stream entering
/// each requested block, subsampled to at most token_cap columns.
ActivationBank capture_activations(const ToyModel& model, const Matrix& data, std::span<const std::size_t> sites,
                                   std::size_t token_cap, std::uint64_t seed);

/// Gaussian router, entries N(0, scale^2), drawn from the "router" stream of `seed`.
Matrix random_router(std::size_t n_experts, std::size_t d, std::uint64_t seed, double scale);

MoeLayer sparse_init(const DenseFfn& dense, std::size_t n_experts, std::uint64_t router_seed, double router_scale,
                     const RoutingOptions& routing = {});

/// Per expert, floor(ratio * h) intermediate channels get their w1 row, b1
/// entry and w2 column resampled from per-tensor gaussian statistics.
MoeLayer drop_init(const DenseFfn& dense, std::size_t n_experts, double ratio, std::uint64_t seed,
                   const RoutingOptions& routing = {});

/// Per expert, keeps the top ceil((1 - fraction) * r) singular triplets of w1
/// and swaps the rest for random orthonormal directions with the same
/// singular values.
MoeLayer drop_svd_init(const DenseFfn& dense, std::size_t n_experts, double fraction, std::uint64_t seed,
                       const RoutingOptions& routing = {});

/// Cholesky factor S with S S^T = X X^T (+ jitter I when X X^T is singular).
WhiteningFactor whitening_matrix(const Matrix& x_cluster, const JitterPolicy& policy = {});

/// Clusters the site activations, whitens each cluster, truncates w1 * S_i at
/// the effective rank and maps back with S_i^{-1}. Router rows are the unit
/// cluster centroids in activation space. Only w1 is replaced.
ClusterAwareResult cluster_aware_init(const DenseFfn& dense, const Matrix& bank_site, std::size_t n_experts, double tau,
                                      std::uint64_t seed, const ClusterAwareOptions& options = {});

/// sum_i [ ||W X_i - W_i X_i||^2 - gamma * sum_{j != i} ||W X_i - W_j X_i||^2 ].
double joint_objective_eval(std::span<const Matrix> experts_w1, const Matrix& dense_w1, std::span<const Matrix> clusters,
                            double gamma);

}  // namespace clusterup
