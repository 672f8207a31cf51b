// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "clusterup/error.hpp"

namespace clusterup {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr int kMaxJacobiSweeps = 80;
// Relative pivot floor below which a Cholesky pivot counts as non-positive.
constexpr double kPivotFloor = 1e-14;

// Orthogonalizes the columns of a (m x n, m >= n) in place; returns v (n x n).
Matrix jacobi_columns(Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    Matrix v = Matrix::identity(n);
    const double tol = static_cast<double>(std::max<std::size_t>(m, 1)) * kEps;
    for (int sweep = 0; sweep < kMaxJacobiSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double ap = a(i, p), aq = a(i, q);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double ap = a(i, p), aq = a(i, q);
                    a(i, p) = c * ap - s * aq;
                    a(i, q) = s * ap + c * aq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) return v;
    }
    throw Error(ErrorCode::NoConvergence, "Jacobi SVD did not converge");
}

// SVD of a tall (m >= n) matrix.
SvdFactors svd_tall(const Matrix& w) {
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    Matrix a = w;
    Matrix v = jacobi_columns(a);

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += a(i, j) * a(i, j);
        norms[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    SvdFactors f;
    f.sigma.resize(n);
    f.u = Matrix(m, n);
    f.v_t = Matrix(n, n);
    const double sigma_max = norms.empty() ? 0.0 : norms[order[0]];
    const double negligible = sigma_max * static_cast<double>(std::max(m, n)) * kEps;

    std::vector<bool> needs_completion(n, false);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        f.sigma[k] = norms[j];
        for (std::size_t i = 0; i < n; ++i) f.v_t(k, i) = v(i, j);
        if (norms[j] > negligible && norms[j] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) f.u(i, k) = a(i, j) / norms[j];
        } else {
            needs_completion[k] = true;
        }
    }

    // Columns of u for (numerically) zero singular values carry no information;
    // complete them to an orthonormal set from the standard basis.
    std::size_t next_basis = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (!needs_completion[k]) continue;
        std::vector<std::size_t> filled;
        for (std::size_t c = 0; c < n; ++c)
            if (!needs_completion[c] || c < k) filled.push_back(c);
        const Matrix basis = select_columns(f.u, filled);
        bool placed = false;
        while (!placed && next_basis < m) {
            std::vector<double> e(m, 0.0);
            e[next_basis++] = 1.0;
            if (orthonormalize_against(e, basis, basis.cols())) {
                f.u.set_column(k, e);
                placed = true;
            }
        }
        if (!placed) throw Error(ErrorCode::NoConvergence, "failed to complete left singular basis");
    }

    // Sign convention: first nonzero entry of each left singular vector positive.
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < m; ++i) {
            const double x = f.u(i, k);
            if (std::abs(x) > 1e-12) {
                if (x < 0.0) {
                    for (std::size_t r = 0; r < m; ++r) f.u(r, k) = -f.u(r, k);
                    for (std::size_t c = 0; c < n; ++c) f.v_t(k, c) = -f.v_t(k, c);
                }
                break;
            }
        }
    }
    return f;
}

}  // namespace

bool orthonormalize_against(std::vector<double>& candidate, const Matrix& basis, std::size_t basis_cols) {
    const double original = norm(candidate);
    if (original == 0.0) return false;
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t c = 0; c < basis_cols; ++c) {
            double proj = 0.0;
            for (std::size_t i = 0; i < candidate.size(); ++i) proj += basis(i, c) * candidate[i];
            for (std::size_t i = 0; i < candidate.size(); ++i) candidate[i] -= proj * basis(i, c);
        }
    }
    const double remaining = norm(candidate);
    if (remaining <= 1e-10 * original) return false;
    for (double& x : candidate) x /= remaining;
    return true;
}

Matrix cholesky_lower(const Matrix& gram, double jitter) {
    const std::size_t d = gram.rows();
    if (d == 0 || gram.cols() != d) throw Error(ErrorCode::ShapeMismatch, "cholesky_lower: gram must be square");
    if (jitter < 0.0) throw Error(ErrorCode::InvalidArgument, "cholesky_lower: negative jitter");
    double scale = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        scale = std::max(scale, std::abs(gram(i, i)));
        for (std::size_t j = 0; j < i; ++j) {
            const double tol = 1e-8 * std::max(1.0, std::max(std::abs(gram(i, j)), std::abs(gram(j, i))));
            if (std::abs(gram(i, j) - gram(j, i)) > tol)
                throw Error(ErrorCode::InvalidArgument, "cholesky_lower: gram is not symmetric");
        }
    }
    scale += jitter;

    Matrix l(d, d);
    for (std::size_t j = 0; j < d; ++j) {
        double pivot = gram(j, j) + jitter;
        for (std::size_t k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
        if (!(pivot > kPivotFloor * scale)) {
            throw Error(ErrorCode::NotPositiveDefinite,
                        "cholesky_lower: non-positive pivot at index " + std::to_string(j));
        }
        const double ljj = std::sqrt(pivot);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < d; ++i) {
            double s = 0.5 * (gram(i, j) + gram(j, i));
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / ljj;
        }
    }
    return l;
}

JitteredCholesky cholesky_with_escalation(const Matrix& gram, const JitterPolicy& policy) {
    if (policy.try_exact_first) {
        try {
            return {cholesky_lower(gram, 0.0), 0.0};
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NotPositiveDefinite) throw;
        }
    }
    const double d = static_cast<double>(gram.rows());
    double mean_diag = trace(gram) / d;
    if (!(mean_diag > 0.0)) mean_diag = 1.0;
    for (double rel = policy.start; rel <= policy.limit * (1.0 + 1e-12); rel *= policy.factor) {
        const double jitter = rel * mean_diag;
        try {
            return {cholesky_lower(gram, jitter), jitter};
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NotPositiveDefinite) throw;
        }
    }
    throw Error(ErrorCode::NotPositiveDefinite, "Cholesky failed after exhausting the jitter schedule");
}

SvdFactors svd_full(const Matrix& w) {
    if (w.rows() == 0 || w.cols() == 0) throw Error(ErrorCode::ShapeMismatch, "svd_full: empty matrix");
    if (!w.all_finite()) throw Error(ErrorCode::InvalidArgument, "svd_full: non-finite entries");
    if (w.rows() >= w.cols()) return svd_tall(w);

    // w^T = u' s v'^T  =>  w = v' s u'^T. Re-apply the sign rule on the new u.
    SvdFactors ft = svd_tall(transpose(w));
    SvdFactors f;
    f.sigma = std::move(ft.sigma);
    f.u = transpose(ft.v_t);
    f.v_t = transpose(ft.u);
    const std::size_t m = f.u.rows();
    const std::size_t r = f.u.cols();
    for (std::size_t k = 0; k < r; ++k) {
        for (std::size_t i = 0; i < m; ++i) {
            const double x = f.u(i, k);
            if (std::abs(x) > 1e-12) {
                if (x < 0.0) {
                    for (std::size_t row = 0; row < m; ++row) f.u(row, k) = -f.u(row, k);
                    for (std::size_t c = 0; c < f.v_t.cols(); ++c) f.v_t(k, c) = -f.v_t(k, c);
                }
                break;
            }
        }
    }
    return f;
}

Matrix truncated_product(const SvdFactors& f, std::size_t rank) {
    rank = std::min(rank, f.sigma.size());
    Matrix out(f.u.rows(), f.v_t.cols());
    for (std::size_t k = 0; k < rank; ++k) {
        const double s = f.sigma[k];
        if (s == 0.0) continue;
        for (std::size_t i = 0; i < out.rows(); ++i) {
            const double us = f.u(i, k) * s;
            if (us == 0.0) continue;
            double* row = out.row(i).data();
            for (std::size_t j = 0; j < out.cols(); ++j) row[j] += us * f.v_t(k, j);
        }
    }
    return out;
}

SpectralProfile effective_rank(std::span<const double> sigma, double tau, std::size_t full_rank) {
    if (!(tau > 0.0 && tau <= 1.0)) throw Error(ErrorCode::InvalidArgument, "effective_rank: tau must be in (0, 1]");
    if (full_rank == 0 || full_rank > sigma.size())
        throw Error(ErrorCode::InvalidArgument, "effective_rank: full_rank must be in [1, len(sigma)]");
    for (std::size_t j = 0; j < sigma.size(); ++j) {
        if (sigma[j] < 0.0 || (j > 0 && sigma[j] > sigma[j - 1]))
            throw Error(ErrorCode::InvalidArgument, "effective_rank: sigma must be non-negative and non-increasing");
    }

    std::vector<double> cumulative(full_rank);
    double running = 0.0;
    for (std::size_t j = 0; j < full_rank; ++j) {
        running += sigma[j] * sigma[j];
        cumulative[j] = running;
    }
    const double total = running;
    if (total == 0.0) throw Error(ErrorCode::AllZeroSpectrum, "effective_rank: all singular values are zero");

    std::size_t rank = full_rank;
    if (tau < 1.0) {
        for (std::size_t j = 0; j < full_rank; ++j) {
            if (cumulative[j] >= tau * total) {
                rank = j + 1;
                break;
            }
        }
    }
    const std::size_t floor_rank = std::min(full_rank, full_rank / 2 + 1);
    rank = std::max(rank, floor_rank);

    SpectralProfile p;
    p.sigma.assign(sigma.begin(), sigma.begin() + static_cast<std::ptrdiff_t>(full_rank));
    p.tau = tau;
    p.full_rank = full_rank;
    p.chosen_rank = rank;
    p.retained_energy = cumulative[rank - 1] / total;
    return p;
}

PcaResult pca_fit_transform(const Matrix& x, std::size_t target_dim) {
    const std::size_t d = x.rows();
    const std::size_t m = x.cols();
    if (m < 2) throw Error(ErrorCode::InsufficientData, "pca_fit_transform: need at least two columns");
    if (target_dim == 0 || target_dim > d)
        throw Error(ErrorCode::InvalidArgument, "pca_fit_transform: target_dim must be in [1, d]");

    PcaResult out;
    out.mean.assign(d, 0.0);
    for (std::size_t r = 0; r < d; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < m; ++c) s += x(r, c);
        out.mean[r] = s / static_cast<double>(m);
    }
    Matrix centered(d, m);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < m; ++c) centered(r, c) = x(r, c) - out.mean[r];

    if (frobenius_norm_sq(centered) == 0.0)
        throw Error(ErrorCode::DegenerateData, "pca_fit_transform: all columns identical");

    const SvdFactors f = svd_full(centered);
    out.projection = Matrix(target_dim, d);
    for (std::size_t k = 0; k < target_dim; ++k)
        for (std::size_t r = 0; r < d; ++r) out.projection(k, r) = f.u(r, k);
    out.projected = matmul(out.projection, centered);
    return out;
}

Matrix pseudoinverse(const Matrix& a) {
    if (a.empty()) return Matrix(a.cols(), a.rows());
    const SvdFactors f = svd_full(a);
    const double sigma_max = f.sigma.empty() ? 0.0 : f.sigma[0];
    Matrix out(a.cols(), a.rows());
    if (sigma_max == 0.0) return out;
    const double cutoff = 1e-10 * sigma_max;
    // a^+ = v * diag(1/s) * u^T
    for (std::size_t k = 0; k < f.sigma.size(); ++k) {
        if (f.sigma[k] <= cutoff) continue;
        const double inv = 1.0 / f.sigma[k];
        for (std::size_t i = 0; i < out.rows(); ++i) {
            const double vi = f.v_t(k, i) * inv;
            if (vi == 0.0) continue;
            for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += vi * f.u(j, k);
        }
    }
    return out;
}

Matrix solve_right_lower(const Matrix& b, const Matrix& lower) {
    const std::size_t d = lower.rows();
    if (lower.cols() != d || b.cols() != d) throw Error(ErrorCode::ShapeMismatch, "solve_right_lower: shape mismatch");
    // Row by row: x * L = b_row  <=>  L^T x^T = b_row^T, upper-triangular back substitution.
    Matrix x(b.rows(), d);
    for (std::size_t r = 0; r < b.rows(); ++r) {
        for (std::size_t jj = d; jj-- > 0;) {
            double s = b(r, jj);
            for (std::size_t k = jj + 1; k < d; ++k) s -= x(r, k) * lower(k, jj);
            x(r, jj) = s / lower(jj, jj);
        }
    }
    return x;
}

}  // namespace clusterup
