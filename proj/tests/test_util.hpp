// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "clusterup/matrix.hpp"

namespace clusterup::testing {

// Test data comes from its own engine so fixtures never share state with the
// library's seeded streams.
inline Matrix gaussian(std::size_t rows, std::size_t cols, std::uint32_t seed, double sd = 1.0) {
    std::mt19937 gen(seed);
    std::normal_distribution<double> dist(0.0, sd);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = dist(gen);
    return m;
}

// Triple-loop product, kept separate from the library's matmul.
inline Matrix naive_product(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            long double s = 0.0L;
            for (std::size_t p = 0; p < a.cols(); ++p) s += static_cast<long double>(a(i, p)) * b(p, j);
            c(i, j) = static_cast<double>(s);
        }
    return c;
}

inline Matrix naive_transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline double sum_sq(const Matrix& a) {
    long double s = 0.0L;
    for (double v : a.values()) s += static_cast<long double>(v) * v;
    return static_cast<double>(s);
}

inline double max_abs(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

// Random orthogonal matrix from Gram-Schmidt on gaussian columns.
inline Matrix random_rotation(std::size_t n, std::uint32_t seed) {
    Matrix g = gaussian(n, n, seed);
    Matrix q(n, n);
    for (std::size_t c = 0; c < n; ++c) {
        std::vector<double> v(n);
        for (std::size_t r = 0; r < n; ++r) v[r] = g(r, c);
        for (std::size_t p = 0; p < c; ++p) {
            double d = 0.0;
            for (std::size_t r = 0; r < n; ++r) d += v[r] * q(r, p);
            for (std::size_t r = 0; r < n; ++r) v[r] -= d * q(r, p);
        }
        double nrm = 0.0;
        for (double x : v) nrm += x * x;
        nrm = std::sqrt(nrm);
        for (std::size_t r = 0; r < n; ++r) q(r, c) = v[r] / nrm;
    }
    return q;
}

}  // namespace clusterup::testing
