// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>

#include "clusterup/analysis.hpp"
#include "clusterup/error.hpp"
#include "clusterup/model.hpp"
#include "clusterup/upcycle.hpp"
#include "test_util.hpp"

namespace clusterup {
namespace {

using testing::gaussian;
using testing::max_abs;
using testing::naive_product;
using testing::naive_transpose;
using testing::sum_sq;

DenseFfn random_ffn(std::size_t d, std::size_t h, std::uint32_t seed) {
    DenseFfn f{gaussian(h, d, seed), {}, gaussian(d, h, seed + 1), {}, Activation::relu};
    const Matrix b1 = gaussian(1, h, seed + 2), b2 = gaussian(1, d, seed + 3);
    f.b1.assign(b1.values().begin(), b1.values().end());
    f.b2.assign(b2.values().begin(), b2.values().end());
    return f;
}

Eigen::MatrixXd to_eigen(const Matrix& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
    return e;
}

// Squared singular values of a, largest first, from Eigen.
std::vector<double> oracle_sigma_sq(const Matrix& a) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(a));
    std::vector<double> s;
    for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) s.push_back(svd.singularValues()(i) * svd.singularValues()(i));
    return s;
}

Matrix oracle_left_basis(const Matrix& a, std::size_t cols) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(a), Eigen::ComputeThinU);
    Matrix u(a.rows(), cols);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < cols; ++j) u(i, j) = svd.matrixU()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return u;
}

TEST(Capture, ShapeAccounting) {
    const ToyModel model = make_dense_model(6, 8, 2, 2, 1);
    const std::vector<std::size_t> sites{1};
    const ActivationBank bank = capture_activations(model, gaussian(6, 100, 2), sites, 1000, 3);
    ASSERT_EQ(bank.per_site.size(), 1u);
    EXPECT_EQ(bank.per_site.at(1).rows(), 6u);
    EXPECT_EQ(bank.per_site.at(1).cols(), 100u);
}

TEST(Capture, SubsampleIsExactAndReproducible) {
    const ToyModel model = make_dense_model(6, 8, 2, 2, 1);
    const std::vector<std::size_t> sites{1};
    const Matrix data = gaussian(6, 100, 2);
    const ActivationBank a = capture_activations(model, data, sites, 50, 3);
    const ActivationBank b = capture_activations(model, data, sites, 50, 3);
    EXPECT_EQ(a.per_site.at(1).cols(), 50u);
    EXPECT_EQ(a.per_site.at(1), b.per_site.at(1));
    const ActivationBank c = capture_activations(model, data, sites, 50, 4);
    EXPECT_NE(a.per_site.at(1), c.per_site.at(1));
}

TEST(Capture, FirstBlockSeesRawInputs) {
    const ToyModel model = make_dense_model(6, 8, 3, 2, 1);
    const std::vector<std::size_t> sites{0};
    const Matrix data = gaussian(6, 40, 5);
    const ActivationBank bank = capture_activations(model, data, sites, 1000, 3);
    EXPECT_LT(max_abs(bank.per_site.at(0), data), 1e-10);
}

TEST(Capture, SecondBlockIsResidualStream) {
    const ToyModel model = make_dense_model(6, 8, 3, 2, 1);
    const std::vector<std::size_t> sites{1};
    const Matrix data = gaussian(6, 10, 6);
    const ActivationBank bank = capture_activations(model, data, sites, 1000, 3);
    Matrix expected = data;
    expected += ffn_forward(model.dense(0), data);
    EXPECT_LT(max_abs(bank.per_site.at(1), expected), 1e-12);
}

TEST(Capture, EmptyCalibration) {
    const ToyModel model = make_dense_model(6, 8, 2, 2, 1);
    const std::vector<std::size_t> sites{1};
    try {
        capture_activations(model, Matrix(6, 0), sites, 10, 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyCalibration);
    }
}

TEST(SparseInit, ExactCopiesAndDeterministicRouter) {
    const DenseFfn f = random_ffn(5, 7, 10);
    const MoeLayer a = sparse_init(f, 8, 42, 0.1);
    const MoeLayer b = sparse_init(f, 8, 42, 0.1);
    for (const DenseFfn& e : a.experts) EXPECT_EQ(e, f);
    EXPECT_EQ(a.router, b.router);
    const Matrix sim = expert_weight_similarity(a);
    for (double v : sim.values()) EXPECT_EQ(v, 1.0);
}

TEST(SparseInit, RouterScale) {
    const MoeLayer layer = sparse_init(random_ffn(64, 4, 1), 64, 7, 0.5);
    double s = 0.0;
    for (double v : layer.router.values()) s += v * v;
    EXPECT_NEAR(std::sqrt(s / 4096.0), 0.5, 0.02);
}

TEST(SparseInit, FunctionallyEquivalentAtInit) {
    const DenseFfn f = random_ffn(6, 9, 11);
    RoutingOptions routing;
    routing.capacity_factor = kUnlimitedCapacity;
    const MoeLayer layer = sparse_init(f, 8, 3, 1.0, routing);
    const Matrix x = gaussian(6, 200, 12);
    EXPECT_LT(max_abs(moe_forward(layer, x).y, ffn_forward(f, x)), 1e-6);
}

TEST(DropInit, RatioZeroIsSparse) {
    const DenseFfn f = random_ffn(5, 8, 13);
    const MoeLayer drop = drop_init(f, 4, 0.0, 9);
    const MoeLayer sparse = sparse_init(f, 4, 9, 1.0 / std::sqrt(5.0));
    for (const DenseFfn& e : drop.experts) EXPECT_EQ(e, f);
    EXPECT_EQ(drop.num_experts(), sparse.num_experts());
}

TEST(DropInit, HalfOfTheChannelsChange) {
    const DenseFfn f = random_ffn(16, 64, 14);
    const MoeLayer layer = drop_init(f, 4, 0.5, 10);
    for (const DenseFfn& e : layer.experts) {
        std::size_t rows = 0, b1 = 0, cols = 0;
        for (std::size_t i = 0; i < 64; ++i) {
            bool row_diff = false, col_diff = false;
            for (std::size_t j = 0; j < 16; ++j) row_diff = row_diff || e.w1(i, j) != f.w1(i, j);
            for (std::size_t j = 0; j < 16; ++j) col_diff = col_diff || e.w2(j, i) != f.w2(j, i);
            rows += row_diff;
            cols += col_diff;
            b1 += e.b1[i] != f.b1[i];
            // The same channels are resampled in w1 and w2.
            EXPECT_EQ(row_diff, col_diff);
        }
        EXPECT_EQ(rows, 32u);
        EXPECT_EQ(cols, 32u);
        EXPECT_EQ(b1, 32u);
        EXPECT_EQ(e.b2, f.b2);
    }
    // Independent selections per expert.
    EXPECT_NE(layer.experts[0].w1, layer.experts[1].w1);
}

TEST(DropInit, FullResampleMatchesMoments) {
    DenseFfn f = random_ffn(64, 64, 15);
    for (double& v : f.w1.values()) v = 0.3 + 2.0 * v;   // mean 0.3, sd 2
    const MoeLayer layer = drop_init(f, 2, 1.0, 11);
    auto moments = [](std::span<const double> v) {
        double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::pair{m, std::sqrt(s / static_cast<double>(v.size() - 1))};
    };
    const auto [dm, ds] = moments(f.w1.values());
    const double n = static_cast<double>(f.w1.size());
    for (const DenseFfn& e : layer.experts) {
        const auto [m, s] = moments(e.w1.values());
        EXPECT_LT(std::abs(m - dm), 3.0 * ds / std::sqrt(n));
        EXPECT_LT(std::abs(s - ds), 3.0 * ds / std::sqrt(2.0 * n));
    }
}

TEST(DropSvdInit, FractionZeroKeepsWeights) {
    const DenseFfn f = random_ffn(8, 12, 16);
    const MoeLayer layer = drop_svd_init(f, 3, 0.0, 5);
    for (const DenseFfn& e : layer.experts) {
        EXPECT_LT(max_abs(e.w1, f.w1), 1e-6);
        EXPECT_EQ(e.w2, f.w2);
        EXPECT_EQ(e.b1, f.b1);
    }
}

TEST(DropSvdInit, KeepsTopSubspaceAndSpectrum) {
    const DenseFfn f = random_ffn(8, 12, 17);   // w1 is 12 x 8, rank 8
    const MoeLayer layer = drop_svd_init(f, 2, 0.25, 6);
    const std::size_t keep = 6;                 // ceil(0.75 * 8)
    const Matrix u = oracle_left_basis(f.w1, keep);
    const Matrix proj = naive_product(u, naive_transpose(u));
    const Matrix dense_proj = naive_product(proj, f.w1);
    const std::vector<double> dense_sigma = oracle_sigma_sq(f.w1);
    for (const DenseFfn& e : layer.experts) {
        EXPECT_LT(max_abs(naive_product(proj, e.w1), dense_proj), 1e-6);
        const std::vector<double> s = oracle_sigma_sq(e.w1);
        for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], dense_sigma[i], 1e-8 * dense_sigma[0]);
    }
    Matrix diff = layer.experts[0].w1;
    diff -= layer.experts[1].w1;
    EXPECT_GT(sum_sq(diff), 0.0);
}

TEST(Whitening, IdentityData) {
    const WhiteningFactor w = whitening_matrix(Matrix::identity(4));
    EXPECT_LT(max_abs(w.s, Matrix::identity(4)), 1e-15);
    EXPECT_EQ(w.jitter_used, 0.0);
}

TEST(Whitening, ReproducesGram) {
    const Matrix x = gaussian(6, 40, 18);
    const WhiteningFactor w = whitening_matrix(x);
    const Matrix gram = naive_product(x, naive_transpose(x));
    Matrix diff = naive_product(w.s, naive_transpose(w.s));
    diff -= gram;
    EXPECT_LT(std::sqrt(sum_sq(diff)), 1e-5 * std::sqrt(sum_sq(gram)));
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = i + 1; j < 6; ++j) EXPECT_EQ(w.s(i, j), 0.0);
}

TEST(Whitening, RankDeficientUsesJitter) {
    const WhiteningFactor w = whitening_matrix(gaussian(6, 3, 19));
    EXPECT_GT(w.jitter_used, 0.0);
}

struct ClusterFixture {
    DenseFfn dense;
    SyntheticDataset data;
};

ClusterFixture cluster_fixture(std::size_t d, std::size_t h, std::size_t n_clusters, std::size_t n, std::uint64_t seed) {
    return {random_ffn(d, h, static_cast<std::uint32_t>(seed) + 100),
            make_synthetic_dataset(d, 2, n_clusters, n, 3.0, seed)};
}

std::vector<Matrix> cluster_members(const ClusterAwareResult& r, const Matrix& bank) {
    std::vector<std::vector<std::size_t>> idx(r.clusters.num_clusters());
    for (std::size_t j = 0; j < r.clusters.assignments.size(); ++j) idx[r.clusters.assignments[j]].push_back(j);
    std::vector<Matrix> out;
    for (const auto& ids : idx) out.push_back(select_columns(bank, ids));
    return out;
}

TEST(ClusterAwareInit, FullEnergyIsLosslessOnClusters) {
    const ClusterFixture fx = cluster_fixture(8, 6, 4, 400, 1);
    const ClusterAwareResult r = cluster_aware_init(fx.dense, fx.data.inputs, 4, 1.0, 7);
    const std::vector<Matrix> xs = cluster_members(r, fx.data.inputs);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_LT(max_abs(naive_product(r.layer.experts[i].w1, xs[i]), naive_product(fx.dense.w1, xs[i])), 1e-5);
        EXPECT_EQ(r.layer.experts[i].w2, fx.dense.w2);
        EXPECT_EQ(r.layer.experts[i].b1, fx.dense.b1);
        EXPECT_EQ(r.layer.experts[i].b2, fx.dense.b2);
    }
}

TEST(ClusterAwareInit, TruncationLossIsDiscardedEnergy) {
    const ClusterFixture fx = cluster_fixture(8, 6, 4, 400, 2);
    const ClusterAwareResult r = cluster_aware_init(fx.dense, fx.data.inputs, 4, 0.9, 8);
    const std::vector<Matrix> xs = cluster_members(r, fx.data.inputs);
    for (std::size_t i = 0; i < 4; ++i) {
        ASSERT_EQ(r.report.per_expert_jitter[i], 0.0);
        Matrix diff = naive_product(fx.dense.w1, xs[i]);
        diff -= naive_product(r.layer.experts[i].w1, xs[i]);
        const double loss = sum_sq(diff);
        // Whitened spectrum from Eigen: singular values of w1 * S equal those of w1 * X.
        const std::vector<double> s = oracle_sigma_sq(naive_product(fx.dense.w1, xs[i]));
        const double total = std::accumulate(s.begin(), s.end(), 0.0);
        double tail = 0.0;
        for (std::size_t j = r.report.per_expert_rank[i]; j < s.size(); ++j) tail += s[j];
        EXPECT_LE(std::abs(loss - tail), 1e-5 * total) << "expert " << i;
        EXPECT_LE(std::abs(r.report.per_expert_truncation_loss[i] - tail), 1e-5 * total);
        EXPECT_GT(r.report.per_expert_rank[i], 3u);   // floor: 6 / 2 + 1
    }
}

TEST(ClusterAwareInit, RouterMatchesCentroidAssignment) {
    const ClusterFixture fx = cluster_fixture(16, 12, 4, 400, 3);
    const ClusterAwareResult r = cluster_aware_init(fx.dense, fx.data.inputs, 4, 0.95, 9);
    EXPECT_EQ(r.layer.router, r.clusters.input_centroids);
    for (std::size_t i = 0; i < 4; ++i) {
        const Matrix x = testing::naive_transpose(select_columns(testing::naive_transpose(r.clusters.input_centroids),
                                                                 std::vector<std::size_t>{i}));
        const Matrix p = router_probs(r.layer.router, naive_transpose(x));
        const auto row = p.row(0);
        EXPECT_EQ(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()), i);
        EXPECT_EQ(assign_cluster(r.clusters.input_centroids, x.row(0)), i);
    }
}

TEST(ClusterAwareInit, BreaksSymmetry) {
    const ClusterFixture fx = cluster_fixture(16, 12, 4, 400, 4);
    const ClusterAwareResult r = cluster_aware_init(fx.dense, fx.data.inputs, 4, 0.95, 10);
    EXPECT_LT(mean_pairwise_similarity(expert_w1_similarity(r.layer)), 1.0 - 1e-3);
}

TEST(ClusterAwareInit, CrossClusterErrorExceedsOwnError) {
    const ClusterFixture fx = cluster_fixture(16, 12, 4, 800, 5);
    const ClusterAwareResult r = cluster_aware_init(fx.dense, fx.data.inputs, 4, 0.8, 11);
    const std::vector<Matrix> xs = cluster_members(r, fx.data.inputs);
    for (std::size_t i = 0; i < 4; ++i) {
        const Matrix target = naive_product(fx.dense.w1, xs[i]);
        auto err = [&](std::size_t e) {
            Matrix d = target;
            d -= naive_product(r.layer.experts[e].w1, xs[i]);
            return sum_sq(d);
        };
        for (std::size_t j = 0; j < 4; ++j)
            if (j != i) EXPECT_GE(err(j), err(i)) << "cluster " << i << " expert " << j;
    }
}

TEST(ClusterAwareInit, ReportShapesAndGamma) {
    const ClusterFixture fx = cluster_fixture(16, 12, 4, 400, 6);
    const ClusterAwareResult r = cluster_aware_init(fx.dense, fx.data.inputs, 4, 0.95, 12);
    EXPECT_DOUBLE_EQ(r.report.gamma, 1.0 / 3.0);
    EXPECT_EQ(r.report.per_expert_rank.size(), 4u);
    EXPECT_EQ(std::accumulate(r.report.cluster_sizes.begin(), r.report.cluster_sizes.end(), std::size_t{0}), 400u);
    ASSERT_TRUE(r.clusters.pca_projection.has_value());
    EXPECT_EQ(r.clusters.pca_projection->rows(), 2u);   // ceil(16 / 8)
    const std::vector<Matrix> xs = cluster_members(r, fx.data.inputs);
    std::vector<Matrix> w1s;
    for (const DenseFfn& e : r.layer.experts) w1s.push_back(e.w1);
    EXPECT_NEAR(r.report.joint_objective, joint_objective_eval(w1s, fx.dense.w1, xs, 1.0 / 3.0), 1e-9);
    const nlohmann::json j = to_json(r.report);
    EXPECT_EQ(j.at("method"), "cluster_aware");
}

TEST(ClusterAwareInit, Deterministic) {
    const ClusterFixture fx = cluster_fixture(16, 12, 4, 300, 7);
    const ClusterAwareResult a = cluster_aware_init(fx.dense, fx.data.inputs, 4, 0.95, 13);
    const ClusterAwareResult b = cluster_aware_init(fx.dense, fx.data.inputs, 4, 0.95, 13);
    EXPECT_EQ(a.layer, b.layer);
}

TEST(JointObjective, DenseCopiesGiveZero) {
    const Matrix w = gaussian(3, 4, 20);
    const std::vector<Matrix> experts{w, w, w};
    const std::vector<Matrix> xs{gaussian(4, 5, 21), gaussian(4, 6, 22), gaussian(4, 2, 23)};
    EXPECT_EQ(joint_objective_eval(experts, w, xs, 0.5), 0.0);
}

TEST(JointObjective, SingleExpert) {
    const Matrix w = gaussian(3, 4, 24);
    const std::vector<Matrix> experts{w};
    const std::vector<Matrix> xs{gaussian(4, 5, 25)};
    EXPECT_EQ(joint_objective_eval(experts, w, xs, 0.0), 0.0);
}

TEST(JointObjective, ScalarHandComputation) {
    // W = 2, W1 = 1, W2 = 4, X1 = [1 2], X2 = [3].
    // Cluster 1: (2-1)^2 * 5 - g * (2-4)^2 * 5 = 5 - 20 g
    // Cluster 2: (2-4)^2 * 9 - g * (2-1)^2 * 9 = 36 - 9 g
    const std::vector<Matrix> experts{Matrix::from_rows({{1}}), Matrix::from_rows({{4}})};
    const std::vector<Matrix> xs{Matrix::from_rows({{1, 2}}), Matrix::from_rows({{3}})};
    EXPECT_DOUBLE_EQ(joint_objective_eval(experts, Matrix::from_rows({{2}}), xs, 1.0), 12.0);
    EXPECT_DOUBLE_EQ(joint_objective_eval(experts, Matrix::from_rows({{2}}), xs, 0.5), 26.5);
}

TEST(InitMethodNames, RoundTrip) {
    for (InitMethod m : {InitMethod::sparse, InitMethod::drop, InitMethod::drop_svd, InitMethod::cluster_aware})
        EXPECT_EQ(parse_init_method(to_string(m)), m);
    EXPECT_EQ(parse_init_method("cluster"), InitMethod::cluster_aware);
    EXPECT_EQ(parse_init_method("drop-svd"), InitMethod::drop_svd);
    EXPECT_THROW(parse_init_method("nope"), Error);
}

}  // namespace
}  // namespace clusterup
