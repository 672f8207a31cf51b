// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/upcycle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "clusterup/error.hpp"
#include "clusterup/random.hpp"

namespace clusterup {

namespace {

struct TensorStats {
    double mean = 0.0;
    double stddev = 0.0;
};

TensorStats stats_of(std::span<const double> v) {
    TensorStats s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(v.size()));
    return s;
}

double draw(Rng& rng, const TensorStats& s) { return s.stddev > 0.0 ? rng.normal(s.mean, s.stddev) : s.mean; }

double resolve_router_scale(double scale, std::size_t d) {
    return scale > 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(d));
}

MoeLayer copies_with_router(const DenseFfn& dense, std::size_t n_experts, std::uint64_t seed, const RoutingOptions& routing) {
    dense.validate();
    if (n_experts == 0) throw Error(ErrorCode::InvalidArgument, "upcycling needs at least one expert");
    MoeLayer layer;
    layer.experts.assign(n_experts, dense);
    layer.router = random_router(n_experts, dense.input_dim(), seed,
                                 resolve_router_scale(routing.router_scale, dense.input_dim()));
    layer.k = std::min(routing.k, n_experts);
    layer.capacity_factor = routing.capacity_factor;
    return layer;
}

}  // namespace

std::string to_string(InitMethod method) {
    switch (method) {
        case InitMethod::sparse: return "sparse";
        case InitMethod::drop: return "drop";
        case InitMethod::drop_svd: return "drop_svd";
        case InitMethod::cluster_aware: return "cluster_aware";
    }
    return "unknown";
}

InitMethod parse_init_method(const std::string& name) {
    if (name == "sparse") return InitMethod::sparse;
    if (name == "drop") return InitMethod::drop;
    if (name == "drop-svd" || name == "drop_svd") return InitMethod::drop_svd;
    if (name == "cluster" || name == "cluster_aware" || name == "cluster-aware") return InitMethod::cluster_aware;
    throw Error(ErrorCode::InvalidArgument, "unknown init method '" + name + "'");
}

nlohmann::json to_json(const InitReport& r) {
    nlohmann::json j;
    j["method"] = to_string(r.method);
    j["per_expert_rank"] = r.per_expert_rank;
    j["per_expert_full_rank"] = r.per_expert_full_rank;
    j["per_expert_retained_energy"] = r.per_expert_retained_energy;
    j["per_expert_truncation_loss"] = r.per_expert_truncation_loss;
    j["per_expert_discarded_energy"] = r.per_expert_discarded_energy;
    j["per_expert_jitter"] = r.per_expert_jitter;
    j["per_expert_cluster_max_deviation"] = r.per_expert_cluster_max_deviation;
    j["per_expert_sigma"] = r.per_expert_sigma;
    j["cluster_sizes"] = r.cluster_sizes;
    j["joint_objective"] = r.joint_objective;
    j["gamma"] = r.gamma;
    return j;
}

ActivationBank capture_activations(const ToyModel& model, const Matrix& data, std::span<const std::size_t> sites,
                                   std::size_t token_cap, std::uint64_t seed) {
    if (data.cols() == 0) throw Error(ErrorCode::EmptyCalibration, "capture_activations: calibration data has no tokens");
    if (token_cap == 0) throw Error(ErrorCode::InvalidArgument, "capture_activations: token_cap must be >= 1");
    for (std::size_t site : sites) {
        if (site >= model.blocks.size())
            throw Error(ErrorCode::InvalidArgument, "capture_activations: site " + std::to_string(site) + " out of range");
    }
    const ForwardTrace trace = forward(model, data);
    ActivationBank bank;
    bank.token_cap = token_cap;
    for (std::size_t site : sites) {
        const Matrix& inputs = trace.block_inputs[site];
        if (inputs.cols() <= token_cap) {
            bank.per_site[site] = inputs;
            continue;
        }
        std::vector<std::size_t> all(inputs.cols());
        std::iota(all.begin(), all.end(), std::size_t{0});
        std::vector<std::size_t> picked;
        picked.reserve(token_cap);
        Rng rng(seed, "capture", site);
        std::sample(all.begin(), all.end(), std::back_inserter(picked), static_cast<std::ptrdiff_t>(token_cap),
                    rng.engine());
        bank.per_site[site] = select_columns(inputs, picked);
    }
    return bank;
}

Matrix random_router(std::size_t n_experts, std::size_t d, std::uint64_t seed, double scale) {
    Rng rng(seed, "router");
    return rng.normal_matrix(n_experts, d, scale);
}

MoeLayer sparse_init(const DenseFfn& dense, std::size_t n_experts, std::uint64_t router_seed, double router_scale,
                     const RoutingOptions& routing) {
    RoutingOptions opts = routing;
    opts.router_scale = router_scale;
    return copies_with_router(dense, n_experts, router_seed, opts);
}

MoeLayer drop_init(const DenseFfn& dense, std::size_t n_experts, double ratio, std::uint64_t seed,
                   const RoutingOptions& routing) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error(ErrorCode::InvalidArgument, "drop_init: ratio must be in [0, 1]");
    MoeLayer layer = copies_with_router(dense, n_experts, seed, routing);
    const std::size_t h = dense.hidden_dim();
    const std::size_t d = dense.input_dim();
    const auto n_drop = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(h) + 1e-9));
    if (n_drop == 0) return layer;

    const TensorStats w1_stats = stats_of(dense.w1.values());
    const TensorStats b1_stats = stats_of(dense.b1);
    const TensorStats w2_stats = stats_of(dense.w2.values());

    std::vector<std::size_t> channels(h);
    std::iota(channels.begin(), channels.end(), std::size_t{0});
    for (std::size_t e = 0; e < n_experts; ++e) {
        Rng pick_rng(seed, "drop_channels", e);
        std::vector<std::size_t> picked;
        std::sample(channels.begin(), channels.end(), std::back_inserter(picked), static_cast<std::ptrdiff_t>(n_drop),
                    pick_rng.engine());
        Rng value_rng(seed, "drop_values", e);
        DenseFfn& ex = layer.experts[e];
        for (std::size_t c : picked) {
            for (std::size_t j = 0; j < d; ++j) ex.w1(c, j) = draw(value_rng, w1_stats);
            ex.b1[c] = draw(value_rng, b1_stats);
            for (std::size_t r = 0; r < d; ++r) ex.w2(r, c) = draw(value_rng, w2_stats);
        }
    }
    return layer;
}

MoeLayer drop_svd_init(const DenseFfn& dense, std::size_t n_experts, double fraction, std::uint64_t seed,
                       const RoutingOptions& routing) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw Error(ErrorCode::InvalidArgument, "drop_svd_init: fraction must be in [0, 1)");
    MoeLayer layer = copies_with_router(dense, n_experts, seed, routing);
    const SvdFactors f = svd_full(dense.w1);
    const std::size_t r = f.sigma.size();
    const std::size_t h = f.u.rows();
    const std::size_t d = f.v_t.cols();
    const auto keep = std::min(r, static_cast<std::size_t>(std::ceil((1.0 - fraction) * static_cast<double>(r) - 1e-9)));

    for (std::size_t e = 0; e < n_experts; ++e) {
        Rng rng(seed, "drop_svd", e);
        Matrix u = f.u;
        Matrix v = transpose(f.v_t);   // d x r
        for (std::size_t k = keep; k < r; ++k) {
            for (Matrix* basis : {&u, &v}) {
                const std::size_t dim = basis->rows();
                bool placed = false;
                for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
                    std::vector<double> cand(dim);
                    for (double& x : cand) x = rng.normal();
                    placed = orthonormalize_against(cand, *basis, k);
                    if (placed) basis->set_column(k, cand);
                }
                if (!placed) throw Error(ErrorCode::NoConvergence, "drop_svd_init: could not draw an orthogonal direction");
            }
        }
        Matrix w1(h, d);
        for (std::size_t k = 0; k < r; ++k) {
            for (std::size_t i = 0; i < h; ++i) {
                const double us = u(i, k) * f.sigma[k];
                for (std::size_t j = 0; j < d; ++j) w1(i, j) += us * v(j, k);
            }
        }
        layer.experts[e].w1 = std::move(w1);
    }
    return layer;
}

WhiteningFactor whitening_matrix(const Matrix& x_cluster, const JitterPolicy& policy) {
    if (x_cluster.cols() == 0) throw Error(ErrorCode::InsufficientData, "whitening_matrix: empty cluster");
    JitterPolicy p = policy;
    // A Gram of fewer tokens than dimensions is singular; skip the exact attempt.
    p.try_exact_first = policy.try_exact_first && x_cluster.cols() >= x_cluster.rows();
    const JitteredCholesky c = cholesky_with_escalation(matmul_nt(x_cluster, x_cluster), p);
    return {c.lower, c.jitter};
}

double joint_objective_eval(std::span<const Matrix> experts_w1, const Matrix& dense_w1, std::span<const Matrix> clusters,
                            double gamma) {
    if (experts_w1.size() != clusters.size())
        throw Error(ErrorCode::ShapeMismatch, "joint_objective_eval: expert and cluster counts differ");
    double total = 0.0;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
        const Matrix reference = matmul(dense_w1, clusters[i]);
        total += frobenius_norm_sq(reference - matmul(experts_w1[i], clusters[i]));
        double cross = 0.0;
        for (std::size_t j = 0; j < experts_w1.size(); ++j) {
            if (j == i) continue;
            cross += frobenius_norm_sq(reference - matmul(experts_w1[j], clusters[i]));
        }
        total -= gamma * cross;
    }
    return total;
}

ClusterAwareResult cluster_aware_init(const DenseFfn& dense, const Matrix& bank_site, std::size_t n_experts, double tau,
                                      std::uint64_t seed, const ClusterAwareOptions& options) {
    dense.validate();
    const std::size_t d = dense.input_dim();
    if (bank_site.rows() != d) throw Error(ErrorCode::ShapeMismatch, "cluster_aware_init: activation width != d");
    if (n_experts == 0) throw Error(ErrorCode::InvalidArgument, "cluster_aware_init: n_experts must be >= 1");
    if (bank_site.cols() < n_experts)
        throw Error(ErrorCode::InsufficientData, "cluster_aware_init: fewer calibration tokens than experts");
    if (!(tau > 0.0 && tau <= 1.0)) throw Error(ErrorCode::InvalidArgument, "cluster_aware_init: tau must be in (0, 1]");

    // (1) cluster unit activations, in a PCA-reduced space when that is smaller.
    const Matrix unit = normalize_columns(bank_site).values;
    const std::size_t factor = std::max<std::size_t>(1, options.pca_factor);
    const std::size_t reduced = std::max<std::size_t>(2, (d + factor - 1) / factor);
    ClusterAwareResult result;
    if (reduced < d) {
        PcaResult pca = pca_fit_transform(unit, reduced);
        const Matrix space = normalize_columns(pca.projected).values;
        result.clusters = spherical_kmeans(space, n_experts, options.max_kmeans_iters, seed);
        result.clusters.pca_projection = std::move(pca.projection);
        result.clusters.pca_mean = std::move(pca.mean);
    } else {
        result.clusters = spherical_kmeans(unit, n_experts, options.max_kmeans_iters, seed);
    }
    ClusterModel& km = result.clusters;

    // (2) unit centroids in activation space.
    std::vector<std::vector<std::size_t>> members(n_experts);
    for (std::size_t j = 0; j < km.assignments.size(); ++j) members[km.assignments[j]].push_back(j);
    km.input_centroids = Matrix(n_experts, d);
    for (std::size_t i = 0; i < n_experts; ++i) {
        auto row = km.input_centroids.row(i);
        for (std::size_t j : members[i])
            for (std::size_t r = 0; r < d; ++r) row[r] += unit(r, j);
        const double n = norm(row);
        if (n > kZeroNorm) {
            for (double& v : row) v /= n;
        }
    }

    // (3) whitened truncated SVD of w1 per cluster.
    InitReport& report = result.report;
    report.method = InitMethod::cluster_aware;
    report.gamma = n_experts > 1 ? 1.0 / static_cast<double>(n_experts - 1) : 0.0;
    MoeLayer& layer = result.layer;
    layer.k = std::min(options.routing.k, n_experts);
    layer.capacity_factor = options.routing.capacity_factor;
    std::vector<Matrix> cluster_data;
    std::vector<Matrix> expert_w1;
    for (std::size_t i = 0; i < n_experts; ++i) {
        Matrix xi = select_columns(bank_site, members[i]);
        DenseFfn expert = dense;
        report.cluster_sizes.push_back(members[i].size());
        if (members[i].empty()) {
            // Only reachable with duplicate points; the expert stays a dense copy.
            report.per_expert_rank.push_back(std::min(dense.hidden_dim(), d));
            report.per_expert_full_rank.push_back(std::min(dense.hidden_dim(), d));
            report.per_expert_retained_energy.push_back(1.0);
            report.per_expert_truncation_loss.push_back(0.0);
            report.per_expert_discarded_energy.push_back(0.0);
            report.per_expert_jitter.push_back(0.0);
            report.per_expert_cluster_max_deviation.push_back(0.0);
            report.per_expert_sigma.emplace_back();
            layer.experts.push_back(std::move(expert));
            cluster_data.push_back(std::move(xi));
            expert_w1.push_back(dense.w1);
            continue;
        }
        const WhiteningFactor white = whitening_matrix(xi, options.jitter);
        const SvdFactors f = svd_full(matmul(dense.w1, white.s));
        const std::size_t full_rank = f.sigma.size();
        std::size_t rank = full_rank;
        double retained = 1.0;
        bool zero_spectrum = false;
        try {
            const SpectralProfile profile = effective_rank(f.sigma, tau, full_rank);
            rank = profile.chosen_rank;
            retained = profile.retained_energy;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::AllZeroSpectrum) throw;
            zero_spectrum = true;
        }
        double discarded = 0.0;
        for (std::size_t j = rank; j < full_rank; ++j) discarded += f.sigma[j] * f.sigma[j];

        // A zero w1 * S_i keeps the dense weights.
        if (!zero_spectrum) expert.w1 = solve_right_lower(truncated_product(f, rank), white.s);

        report.per_expert_rank.push_back(rank);
        report.per_expert_full_rank.push_back(full_rank);
        report.per_expert_retained_energy.push_back(retained);
        report.per_expert_discarded_energy.push_back(discarded);
        report.per_expert_truncation_loss.push_back(
            frobenius_norm_sq(matmul(dense.w1, xi) - matmul(expert.w1, xi)));
        report.per_expert_jitter.push_back(white.jitter_used);
        report.per_expert_sigma.push_back(f.sigma);
        report.per_expert_cluster_max_deviation.push_back(max_abs_diff(ffn_forward(expert, xi), ffn_forward(dense, xi)));
        expert_w1.push_back(expert.w1);
        cluster_data.push_back(std::move(xi));
        layer.experts.push_back(std::move(expert));
    }

    // (4) router rows are the activation-space centroids.
    layer.router = km.input_centroids;
    report.joint_objective = joint_objective_eval(expert_w1, dense.w1, cluster_data, report.gamma);
    return result;
}

}  // namespace clusterup
