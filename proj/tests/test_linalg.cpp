// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "clusterup/error.hpp"
#include "clusterup/linalg.hpp"
#include "test_util.hpp"

namespace clusterup {
namespace {

using testing::gaussian;
using testing::max_abs;
using testing::naive_product;
using testing::naive_transpose;
using testing::sum_sq;

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected clusterup::Error";
    return ErrorCode::Io;
}

TEST(Cholesky, IdentityFactorsToIdentity) {
    EXPECT_EQ(cholesky_lower(Matrix::identity(3), 0.0), Matrix::identity(3));
}

TEST(Cholesky, TwoByTwoHandExample) {
    const Matrix l = cholesky_lower(Matrix::from_rows({{4, 2}, {2, 5}}), 0.0);
    EXPECT_LT(max_abs(l, Matrix::from_rows({{2, 0}, {1, 2}})), 1e-15);
}

TEST(Cholesky, RankDeficientNeedsJitter) {
    const Matrix g = Matrix::from_rows({{1, 1}, {1, 1}});
    EXPECT_EQ(code_of([&] { cholesky_lower(g, 0.0); }), ErrorCode::NotPositiveDefinite);
    const Matrix l = cholesky_lower(g, 1e-6);
    Matrix expected = g;
    expected(0, 0) += 1e-6;
    expected(1, 1) += 1e-6;
    EXPECT_LT(max_abs(naive_product(l, naive_transpose(l)), expected), 1e-12);
    EXPECT_GT(l(1, 1), 0.0);
}

TEST(Cholesky, RejectsAsymmetricInput) {
    EXPECT_EQ(code_of([] { cholesky_lower(Matrix::from_rows({{1, 0.5}, {0, 1}}), 0.0); }), ErrorCode::InvalidArgument);
}

TEST(Cholesky, RecoversRandomLowerFactor) {
    for (std::uint32_t seed = 0; seed < 10; ++seed) {
        Matrix l = gaussian(6, 6, seed);
        for (std::size_t i = 0; i < 6; ++i) {
            for (std::size_t j = i + 1; j < 6; ++j) l(i, j) = 0.0;
            l(i, i) = std::abs(l(i, i)) + 0.5;
        }
        const Matrix recovered = cholesky_lower(naive_product(l, naive_transpose(l)), 0.0);
        EXPECT_LT(max_abs(recovered, l), 1e-6) << "seed " << seed;
    }
}

TEST(Cholesky, EscalationStartsAtExactThenScalesWithTrace) {
    const JitteredCholesky exact = cholesky_with_escalation(Matrix::from_rows({{4, 2}, {2, 5}}));
    EXPECT_EQ(exact.jitter, 0.0);
    // Rank one with trace 2 in 2-D: first nonzero jitter is 1e-8 * trace / d.
    const JitteredCholesky j = cholesky_with_escalation(Matrix::from_rows({{1, 1}, {1, 1}}));
    EXPECT_GT(j.jitter, 0.0);
    EXPECT_LE(j.jitter, 1e-2 * 1.0 * (1 + 1e-12));
    const double ratio = j.jitter / 1e-8;
    EXPECT_NEAR(std::log10(ratio), std::round(std::log10(ratio)), 1e-9);
}

TEST(Cholesky, EscalationOnZeroGramUsesUnitScale) {
    const JitteredCholesky j = cholesky_with_escalation(Matrix(3, 3));
    EXPECT_DOUBLE_EQ(j.jitter, 1e-8);
    EXPECT_LT(max_abs(j.lower, Matrix::identity(3) * 1e-4), 1e-18);
}

TEST(Cholesky, EscalationGivesUpOnIndefiniteGram) {
    EXPECT_EQ(code_of([] { cholesky_with_escalation(Matrix::from_rows({{1, 0}, {0, -1}})); }),
              ErrorCode::NotPositiveDefinite);
}

void expect_orthonormal_columns(const Matrix& u, double tol) {
    const Matrix g = naive_product(naive_transpose(u), u);
    EXPECT_LT(max_abs(g, Matrix::identity(u.cols())), tol);
}

void expect_valid_svd(const Matrix& w, const SvdFactors& f) {
    const std::size_t r = std::min(w.rows(), w.cols());
    ASSERT_EQ(f.sigma.size(), r);
    ASSERT_EQ(f.u.rows(), w.rows());
    ASSERT_EQ(f.u.cols(), r);
    ASSERT_EQ(f.v_t.rows(), r);
    ASSERT_EQ(f.v_t.cols(), w.cols());
    for (std::size_t i = 0; i < r; ++i) {
        EXPECT_GE(f.sigma[i], 0.0);
        if (i > 0) EXPECT_LE(f.sigma[i], f.sigma[i - 1]);
    }
    expect_orthonormal_columns(f.u, 1e-8);
    expect_orthonormal_columns(naive_transpose(f.v_t), 1e-8);
    Matrix us = f.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < r; ++j) us(i, j) *= f.sigma[j];
    const Matrix rebuilt = naive_product(us, f.v_t);
    Matrix diff = rebuilt;
    diff -= w;
    EXPECT_LE(std::sqrt(sum_sq(diff)), 1e-6 * std::max(1.0, std::sqrt(sum_sq(w))));
    // First non-negligible entry of every left vector is positive.
    for (std::size_t j = 0; j < r; ++j) {
        for (std::size_t i = 0; i < f.u.rows(); ++i) {
            if (std::abs(f.u(i, j)) > 1e-12) {
                EXPECT_GT(f.u(i, j), 0.0);
                break;
            }
        }
    }
}

TEST(Svd, DiagonalInput) {
    const Matrix w = Matrix::from_rows({{3, 0}, {0, 1}});
    const SvdFactors f = svd_full(w);
    EXPECT_NEAR(f.sigma[0], 3.0, 1e-14);
    EXPECT_NEAR(f.sigma[1], 1.0, 1e-14);
    EXPECT_LT(max_abs(f.u, Matrix::identity(2)), 1e-14);
    EXPECT_LT(max_abs(f.v_t, Matrix::identity(2)), 1e-14);
}

TEST(Svd, ZeroMatrix) {
    const SvdFactors f = svd_full(Matrix(2, 3));
    ASSERT_EQ(f.sigma.size(), 2u);
    EXPECT_EQ(f.sigma[0], 0.0);
    EXPECT_EQ(f.sigma[1], 0.0);
    expect_valid_svd(Matrix(2, 3), f);
}

TEST(Svd, RandomShapesSatisfyInvariants) {
    const std::pair<std::size_t, std::size_t> shapes[] = {{5, 4}, {4, 5}, {1, 6}, {6, 1}, {8, 8}, {64, 32}, {32, 64}};
    std::uint32_t seed = 100;
    for (auto [m, n] : shapes) {
        const Matrix w = gaussian(m, n, seed++);
        const SvdFactors f = svd_full(w);
        expect_valid_svd(w, f);
        const double energy = std::accumulate(f.sigma.begin(), f.sigma.end(), 0.0, [](double a, double s) { return a + s * s; });
        EXPECT_NEAR(energy, sum_sq(w), 1e-6 * sum_sq(w));
    }
}

TEST(Svd, RankDeficientInputKeepsOrthonormalU) {
    const Matrix a = gaussian(6, 2, 7);
    const Matrix w = naive_product(a, gaussian(2, 5, 8));
    const SvdFactors f = svd_full(w);
    expect_valid_svd(w, f);
    EXPECT_LT(f.sigma[2], 1e-10 * f.sigma[0]);
}

TEST(Svd, IsDeterministic) {
    const Matrix w = gaussian(9, 7, 3);
    const SvdFactors a = svd_full(w);
    const SvdFactors b = svd_full(w);
    EXPECT_EQ(a.u, b.u);
    EXPECT_EQ(a.sigma, b.sigma);
    EXPECT_EQ(a.v_t, b.v_t);
}

TEST(Svd, TruncatedProductErrorIsTailEnergy) {
    const Matrix w = gaussian(7, 5, 11);
    const SvdFactors f = svd_full(w);
    for (std::size_t r = 0; r <= 5; ++r) {
        Matrix diff = truncated_product(f, r);
        diff -= w;
        double tail = 0.0;
        for (std::size_t j = r; j < f.sigma.size(); ++j) tail += f.sigma[j] * f.sigma[j];
        EXPECT_NEAR(sum_sq(diff), tail, 1e-9 * sum_sq(w));
    }
}

TEST(EffectiveRank, HandCumulativeEnergy) {
    const std::vector<double> s{2, 1, 1};
    const SpectralProfile p = effective_rank(s, 0.95, 3);
    EXPECT_EQ(p.chosen_rank, 3u);
    EXPECT_DOUBLE_EQ(p.retained_energy, 1.0);
}

TEST(EffectiveRank, FloorAboveHalf) {
    const std::vector<double> s{1, 0, 0, 0};
    const SpectralProfile p = effective_rank(s, 0.95, 4);
    EXPECT_EQ(p.chosen_rank, 3u);
    EXPECT_DOUBLE_EQ(p.retained_energy, 1.0);
}

TEST(EffectiveRank, EnergyRankAboveFloor) {
    // Energies 64, 16, 9, 4, 1 of 94: cumulative 0.681, 0.851, 0.947, 0.989.
    const std::vector<double> s{8, 4, 3, 2, 1};
    EXPECT_EQ(effective_rank(s, 0.95, 5).chosen_rank, 4u);
    EXPECT_EQ(effective_rank(s, 0.94, 5).chosen_rank, 3u);
    EXPECT_EQ(effective_rank(s, 0.5, 5).chosen_rank, 3u);   // floor 5/2 + 1
    EXPECT_NEAR(effective_rank(s, 0.95, 5).retained_energy, 93.0 / 94.0, 1e-15);
}

TEST(EffectiveRank, TauOneIsFullRank) {
    const std::vector<double> s{5, 4, 1e-20, 0};
    EXPECT_EQ(effective_rank(s, 1.0, 4).chosen_rank, 4u);
}

TEST(EffectiveRank, MonotoneInTau) {
    const Matrix w = gaussian(16, 16, 21);
    const SvdFactors f = svd_full(w);
    std::size_t prev = 0;
    for (double tau = 0.05; tau <= 1.0 + 1e-12; tau += 0.05) {
        const SpectralProfile p = effective_rank(f.sigma, std::min(tau, 1.0), 16);
        EXPECT_GE(p.chosen_rank, prev);
        EXPECT_GT(p.chosen_rank, 8u);
        EXPECT_TRUE(p.retained_energy >= std::min(tau, 1.0) - 1e-12 || p.chosen_rank == 16u);
        prev = p.chosen_rank;
    }
}

TEST(EffectiveRank, Errors) {
    const std::vector<double> zeros{0, 0, 0};
    EXPECT_EQ(code_of([&] { effective_rank(zeros, 0.9, 3); }), ErrorCode::AllZeroSpectrum);
    const std::vector<double> s{1, 2};
    EXPECT_EQ(code_of([&] { effective_rank(s, 0.9, 2); }), ErrorCode::InvalidArgument);
    const std::vector<double> t{2, 1};
    EXPECT_EQ(code_of([&] { effective_rank(t, 0.0, 2); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([&] { effective_rank(t, 1.5, 2); }), ErrorCode::InvalidArgument);
}

TEST(Pca, FactorOfEightReduction) {
    const Matrix x = gaussian(64, 200, 5);
    const PcaResult p = pca_fit_transform(x, 8);
    EXPECT_EQ(p.projection.rows(), 8u);
    EXPECT_EQ(p.projected.rows(), 8u);
    EXPECT_EQ(p.projected.cols(), 200u);
    EXPECT_LT(max_abs(naive_product(p.projection, naive_transpose(p.projection)), Matrix::identity(8)), 1e-8);
}

TEST(Pca, FullDimensionIsAnIsometry) {
    const Matrix x = gaussian(5, 40, 6);
    const PcaResult p = pca_fit_transform(x, 5);
    for (std::size_t a = 0; a < 40; a += 7) {
        for (std::size_t b = a + 1; b < 40; b += 5) {
            double dx = 0.0, dp = 0.0;
            for (std::size_t r = 0; r < 5; ++r) dx += std::pow(x(r, a) - x(r, b), 2);
            for (std::size_t r = 0; r < 5; ++r) dp += std::pow(p.projected(r, a) - p.projected(r, b), 2);
            EXPECT_NEAR(std::sqrt(dx), std::sqrt(dp), 1e-6);
        }
    }
}

TEST(Pca, PlanarDataReconstructsExactly) {
    // Points c + a*u + b*v in 5-D.
    const Matrix basis = naive_transpose(testing::random_rotation(5, 9));
    const Matrix coeffs = gaussian(2, 30, 10);
    Matrix x(5, 30);
    for (std::size_t j = 0; j < 30; ++j)
        for (std::size_t r = 0; r < 5; ++r) x(r, j) = 0.3 * r + coeffs(0, j) * basis(0, r) + coeffs(1, j) * basis(1, r);
    const PcaResult p = pca_fit_transform(x, 2);
    const Matrix back = naive_product(naive_transpose(p.projection), p.projected);
    double worst = 0.0;
    for (std::size_t j = 0; j < 30; ++j)
        for (std::size_t r = 0; r < 5; ++r) worst = std::max(worst, std::abs(back(r, j) + p.mean[r] - x(r, j)));
    EXPECT_LT(worst, 1e-8);
}

TEST(Pca, RotationEquivariantSubspace) {
    Matrix x = gaussian(6, 80, 12);
    for (std::size_t j = 0; j < 80; ++j) x(0, j) *= 5.0, x(1, j) *= 3.0;   // well separated spectrum
    const Matrix q = testing::random_rotation(6, 13);
    const PcaResult a = pca_fit_transform(x, 2);
    const PcaResult b = pca_fit_transform(naive_product(q, x), 2);
    // Projector onto the rotated subspace must equal Q P Q^T.
    const Matrix pa = naive_product(naive_product(q, naive_product(naive_transpose(a.projection), a.projection)),
                                    naive_transpose(q));
    const Matrix pb = naive_product(naive_transpose(b.projection), b.projection);
    EXPECT_LT(max_abs(pa, pb), 1e-6);
}

TEST(Pca, Errors) {
    EXPECT_EQ(code_of([] { pca_fit_transform(Matrix(3, 5, 1.0), 2); }), ErrorCode::DegenerateData);
    EXPECT_EQ(code_of([] { pca_fit_transform(Matrix(3, 1, 1.0), 2); }), ErrorCode::InsufficientData);
    EXPECT_EQ(code_of([] { pca_fit_transform(gaussian(3, 5, 1), 4); }), ErrorCode::InvalidArgument);
}

TEST(Pseudoinverse, Identity) { EXPECT_LT(max_abs(pseudoinverse(Matrix::identity(3)), Matrix::identity(3)), 1e-15); }

TEST(Pseudoinverse, DiagonalTruncation) {
    const Matrix p = pseudoinverse(Matrix::from_rows({{2, 0}, {0, 0}}));
    EXPECT_LT(max_abs(p, Matrix::from_rows({{0.5, 0}, {0, 0}})), 1e-15);
}

TEST(Pseudoinverse, ZeroMatrix) { EXPECT_EQ(pseudoinverse(Matrix(2, 3)), Matrix(3, 2)); }

TEST(Pseudoinverse, PenroseConditionsOnRankTwo) {
    const Matrix a = naive_product(gaussian(4, 2, 14), gaussian(2, 4, 15));
    const Matrix p = pseudoinverse(a);
    EXPECT_LT(max_abs(naive_product(naive_product(a, p), a), a), 1e-6);
    EXPECT_LT(max_abs(naive_product(naive_product(p, a), p), p), 1e-6);
}

TEST(SolveRightLower, InvertsMultiplication) {
    Matrix l = gaussian(5, 5, 16);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = i + 1; j < 5; ++j) l(i, j) = 0.0;
        l(i, i) = std::abs(l(i, i)) + 1.0;
    }
    const Matrix x = gaussian(3, 5, 17);
    EXPECT_LT(max_abs(solve_right_lower(naive_product(x, l), l), x), 1e-10);
}

}  // namespace
}  // namespace clusterup
