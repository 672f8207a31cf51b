// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "clusterup/matrix.hpp"

namespace clusterup {

/// Thin SVD, w = u * diag(sigma) * v_t with r = min(m, n). Sigma is sorted
/// non-increasing and the first nonzero entry of every column of u is positive.
struct SvdFactors {
    Matrix u;                    // m x r
    std::vector<double> sigma;   // r
    Matrix v_t;                  // r x n
};

struct SpectralProfile {
    std::vector<double> sigma;
    double tau = 0.0;
    std::size_t full_rank = 0;
    std::size_t chosen_rank = 0;
    double retained_energy = 0.0;
};

struct PcaResult {
    Matrix projection;          // target_dim x d, orthonormal rows
    Matrix projected;           // target_dim x M
    std::vector<double> mean;   // d
};

/// Escalation schedule for factorizing possibly singular Gram matrices. The
/// jitter is relative to trace(gram)/d.
struct JitterPolicy {
    double start = 1e-8;
    double limit = 1e-2;
    double factor = 10.0;
    bool try_exact_first = true;
};

struct JitteredCholesky {
    Matrix lower;
    double jitter = 0.0;   // absolute jitter added to the diagonal
};

/// Lower Cholesky factor of gram + jitter * I. Throws NotPositiveDefinite when
/// a pivot is not safely positive.
Matrix cholesky_lower(const Matrix& gram, double jitter);

/// Tries jitter 0 (if allowed) and then the policy's schedule.
JitteredCholesky cholesky_with_escalation(const Matrix& gram, const JitterPolicy& policy = {});

/// One-sided Jacobi SVD. Deterministic for a fixed input.
SvdFactors svd_full(const Matrix& w);

/// Rank-`rank` reconstruction u_r * diag(sigma_r) * v_t_r.
Matrix truncated_product(const SvdFactors& f, std::size_t rank);

/// Smallest rank retaining `tau` of the squared spectral energy, raised to at
/// least floor(full_rank / 2) + 1. tau == 1 keeps the full rank.
SpectralProfile effective_rank(std::span<const double> sigma, double tau, std::size_t full_rank);

/// PCA on the columns of x (d x M).
PcaResult pca_fit_transform(const Matrix& x, std::size_t target_dim);

/// Moore-Penrose pseudoinverse; singular values below 1e-10 * sigma_max are dropped.
Matrix pseudoinverse(const Matrix& a);

/// Solves X * lower = b for X, where `lower` is lower triangular with nonzero
/// diagonal (i.e. X = b * lower^{-1}, via back substitution against lower^T).
Matrix solve_right_lower(const Matrix& b, const Matrix& lower);

/// Orthonormalizes `candidate` against the columns of `basis` (m x p) with two
/// passes of classical Gram-Schmidt. Returns false if the remainder vanishes.
bool orthonormalize_against(std::vector<double>& candidate, const Matrix& basis, std::size_t basis_cols);

}  // namespace clusterup
