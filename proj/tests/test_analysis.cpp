// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "clusterup/analysis.hpp"
#include "clusterup/error.hpp"
#include "clusterup/upcycle.hpp"
#include "test_util.hpp"

namespace clusterup {
namespace {

using testing::gaussian;

Matrix from_columns(const std::vector<std::vector<double>>& cols) {
    Matrix m(cols.front().size(), cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j)
        for (std::size_t i = 0; i < cols[j].size(); ++i) m(i, j) = cols[j][i];
    return m;
}

Matrix columns(std::initializer_list<std::vector<double>> cols) { return from_columns(cols); }

TEST(RelativeCompactness, IdentityCovariances) {
    // Means at (+-c, +-c) with c^2 = 3/4: unweighted covariance I.
    // Offsets (+-b, 0), (0, +-b) with b^2 = 3/2: pooled over 16 - 4 gives I.
    const double c = std::sqrt(0.75), b = std::sqrt(1.5);
    std::vector<Matrix> outputs;
    for (double sx : {-1.0, 1.0})
        for (double sy : {-1.0, 1.0}) {
            const double mx = sx * c, my = sy * c;
            outputs.push_back(columns({{mx + b, my}, {mx - b, my}, {mx, my + b}, {mx, my - b}}));
        }
    const auto rc = relative_compactness(outputs);
    ASSERT_TRUE(rc.has_value());
    EXPECT_NEAR(*rc, 2.0, 1e-10);
}

TEST(RelativeCompactness, OrthogonalSubspaces) {
    std::vector<Matrix> outputs;
    for (double m : {-2.0, 0.5, 3.0}) outputs.push_back(columns({{1, m}, {-1, m}, {0.3, m}}));
    const auto rc = relative_compactness(outputs);
    ASSERT_TRUE(rc.has_value());
    EXPECT_NEAR(*rc, 0.0, 1e-8);
}

TEST(RelativeCompactness, IdenticalConstantsAreUndefined) {
    const std::vector<Matrix> outputs{columns({{1, 2}, {1, 2}}), columns({{1, 2}, {1, 2}, {1, 2}})};
    EXPECT_FALSE(relative_compactness(outputs).has_value());
}

TEST(RelativeCompactness, NeedsTwoExperts) {
    const std::vector<Matrix> outputs{gaussian(3, 10, 1), gaussian(3, 1, 2)};
    try {
        relative_compactness(outputs);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientTokens);
    }
}

TEST(RelativeCompactness, RotationInvariant) {
    std::vector<Matrix> outputs;
    for (std::uint32_t e = 0; e < 5; ++e) {
        Matrix m = gaussian(4, 12 + e, 10 + e, 0.5);
        for (std::size_t j = 0; j < m.cols(); ++j) m(e % 4, j) += 2.0 + e;
        outputs.push_back(m);
    }
    const Matrix q = testing::random_rotation(4, 3);
    std::vector<Matrix> rotated;
    for (const Matrix& m : outputs) rotated.push_back(testing::naive_product(q, m));
    EXPECT_NEAR(*relative_compactness(outputs), *relative_compactness(rotated), 1e-6);
}

MoeLayer two_expert_layer(const Matrix& w1a, const Matrix& w1b) {
    MoeLayer layer;
    const std::size_t h = w1a.rows(), d = w1a.cols();
    layer.experts.push_back({w1a, std::vector<double>(h), Matrix(d, h), std::vector<double>(d), Activation::relu});
    layer.experts.push_back({w1b, std::vector<double>(h), Matrix(d, h), std::vector<double>(d), Activation::relu});
    layer.router = Matrix(2, d);
    layer.k = 1;
    return layer;
}

TEST(Similarity, SparseCopies) {
    const DenseFfn f{gaussian(5, 4, 1), std::vector<double>(5, 0.2), gaussian(4, 5, 2), std::vector<double>(4, 1.0),
                     Activation::relu};
    const Matrix s = expert_weight_similarity(sparse_init(f, 6, 3, 0.5));
    for (double v : s.values()) EXPECT_EQ(v, 1.0);
    EXPECT_EQ(mean_pairwise_similarity(s), 1.0);
}

TEST(Similarity, OrthogonalExperts) {
    const Matrix s = expert_weight_similarity(two_expert_layer(Matrix::from_rows({{1, 0}}), Matrix::from_rows({{0, 3}})));
    EXPECT_EQ(s(0, 1), 0.0);
    EXPECT_EQ(s(1, 0), 0.0);
    EXPECT_EQ(s(0, 0), 1.0);
}

TEST(Similarity, PositiveScaling) {
    const Matrix a = gaussian(3, 4, 4);
    Matrix b = a;
    for (double& v : b.values()) v *= 2.0;
    EXPECT_NEAR(expert_weight_similarity(two_expert_layer(a, b))(0, 1), 1.0, 1e-15);
}

TEST(Similarity, RescalingOneExpertKeepsMatrix) {
    const DenseFfn f{gaussian(5, 4, 5), std::vector<double>(5, 0.2), gaussian(4, 5, 6), std::vector<double>(4, 1.0),
                     Activation::relu};
    MoeLayer layer = drop_init(f, 4, 0.5, 7);
    const Matrix before = expert_weight_similarity(layer);
    for (auto& v : layer_tensors(layer, ""))
        if (v.name.rfind("experts.2.", 0) == 0)
            for (double& x : v.values) x *= 3.5;
    EXPECT_LT(testing::max_abs(before, expert_weight_similarity(layer)), 1e-12);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(before(i, j), before(j, i), 1e-15);
}

TEST(Similarity, ZeroExpert) {
    try {
        expert_weight_similarity(two_expert_layer(Matrix(1, 2), Matrix::from_rows({{0, 3}})));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ZeroWeights);
    }
}

TEST(Similarity, W1OnlyVariant) {
    MoeLayer layer = two_expert_layer(Matrix::from_rows({{1, 0}}), Matrix::from_rows({{0, 3}}));
    layer.experts[0].b2 = {5.0, 0.0};
    layer.experts[1].b2 = {5.0, 0.0};
    EXPECT_EQ(expert_w1_similarity(layer)(0, 1), 0.0);
    EXPECT_GT(expert_weight_similarity(layer)(0, 1), 0.0);
}

TEST(RoutingEntropy, Examples) {
    Matrix uniform(3, 8);
    for (double& v : uniform.values()) v = 0.125;
    EXPECT_NEAR(routing_entropy(uniform), std::log(8.0), 1e-12);
    EXPECT_EQ(routing_entropy(Matrix::from_rows({{1, 0, 0}, {0, 0, 1}})), 0.0);
    EXPECT_NEAR(routing_entropy(Matrix::from_rows({{0.75, 0.25}})), 0.5623, 5e-5);
    EXPECT_NEAR(routing_entropy(Matrix::from_rows({{0.75, 0.25}})), -0.75 * std::log(0.75) - 0.25 * std::log(0.25), 1e-15);
}

TEST(RoutingEntropy, BoundedByLogExperts) {
    for (std::uint32_t seed = 0; seed < 20; ++seed) {
        const Matrix p = router_probs(gaussian(6, 5, seed, 2.0), gaussian(5, 30, seed + 100));
        const double h = routing_entropy(p);
        EXPECT_GE(h, 0.0);
        EXPECT_LT(h, std::log(6.0) - 1e-9);
    }
}

RoutingRecord route(const Matrix& router, const Matrix& x, std::size_t k) {
    MoeLayer layer;
    const std::size_t d = router.cols();
    for (std::size_t e = 0; e < router.rows(); ++e)
        layer.experts.push_back({Matrix(1, d, 1.0), {0.0}, Matrix(d, 1), std::vector<double>(d), Activation::relu});
    layer.router = router;
    layer.k = k;
    layer.capacity_factor = 1.0;
    return route_tokens(layer, x);
}

TEST(Utilization, Concentrated) {
    const Matrix router = Matrix::from_rows({{5, 0}, {0, 0}, {-5, 0}});
    const RoutingRecord r = route(router, columns({{1, 0}, {2, 1}, {1, -1}, {3, 0}}), 1);
    const std::vector<double> u = expert_utilization(r);
    EXPECT_EQ(u, (std::vector<double>{1.0, 0.0, 0.0}));
    // Dropped slots still count toward the router's assignment.
    EXPECT_GT(r.drop_rate(), 0.0);
}

TEST(Utilization, SlotCounting) {
    const Matrix router = Matrix::from_rows({{10, 0, 0, 0}, {0, 9, 0, 0}, {0, 0, 10, 0}, {0, 0, 0, 9}});
    const RoutingRecord r = route(router, columns({{1, 1, 0, 0}, {1, 1, 0, 0}, {0, 0, 1, 1}, {0, 0, 1, 1}}), 2);
    EXPECT_EQ(expert_utilization(r), (std::vector<double>{0.25, 0.25, 0.25, 0.25}));
}

TEST(Utilization, BalancedTopTwo) {
    Matrix router(8, 8);
    for (std::size_t i = 0; i < 8; ++i) router(i, i) = 10.0;
    std::vector<std::vector<double>> xs;
    for (std::size_t t = 0; t < 4; ++t) {
        std::vector<double> x(8, 0.0);
        x[2 * t] = 1.0;
        x[2 * t + 1] = 0.9;
        xs.push_back(x);
    }
    const RoutingRecord r = route(router, from_columns(xs), 2);
    for (double u : expert_utilization(r)) EXPECT_EQ(u, 0.125);
}

TEST(AnalyzeModel, SparseSitesAndCsvSchema) {
    ToyModel model = make_dense_model(6, 8, 4, 3, 1);
    for (std::size_t b : {1u, 3u}) model.blocks[b] = sparse_init(model.dense(b), 4, b, 0.0);
    const AnalysisReport report = analyze_model(model, gaussian(6, 80, 2));
    ASSERT_EQ(report.per_site.size(), 2u);
    for (const auto& [site, a] : report.per_site) {
        EXPECT_EQ(a.mean_pairwise_similarity, 1.0);
        EXPECT_NEAR(std::accumulate(a.utilization.begin(), a.utilization.end(), 0.0), 1.0, 1e-8);
        EXPECT_LE(a.mean_routing_entropy, std::log(4.0));
    }
    std::ostringstream csv;
    write_analysis_csv(csv, report);
    std::istringstream in(csv.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "site,metric,i,j,value");
    std::size_t similarity_rows = 0, rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 4) << line;
        if (line.find(",similarity,") != std::string::npos) {
            ++similarity_rows;
            EXPECT_EQ(line.substr(line.rfind(',') + 1), "1");
        }
    }
    EXPECT_EQ(similarity_rows, 32u);
    EXPECT_GT(rows, similarity_rows);
    const nlohmann::json j = to_json(report);
    EXPECT_TRUE(j.at("per_site").contains("1"));
    EXPECT_TRUE(j.at("per_site").contains("3"));
}

TEST(AnalyzeModel, ClusterRouterIsMoreConfident) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const SyntheticDataset ds = make_synthetic_dataset(16, 4, 8, 800, 3.0, seed);
        const DenseFfn f{gaussian(12, 16, 1 + seed), std::vector<double>(12), gaussian(16, 12, 2 + seed),
                         std::vector<double>(16), Activation::relu};
        const ClusterAwareResult r = cluster_aware_init(f, ds.inputs, 8, 0.95, seed);
        const Matrix random = random_router(8, 16, seed, 1.0 / std::sqrt(16.0));
        EXPECT_LT(routing_entropy(router_probs(r.layer.router, ds.inputs)),
                  routing_entropy(router_probs(random, ds.inputs)));
    }
}

}  // namespace
}  // namespace clusterup
