// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "clusterup/matrix.hpp"

namespace clusterup {

/// Seeded random stream. Independent streams are derived from one root seed by
/// name (and an optional index) so that, e.g., the router draw of one init
/// method never shifts the data draw of another.
class Rng {
public:
    explicit Rng(std::uint64_t seed);
    Rng(std::uint64_t root_seed, std::string_view stream, std::uint64_t index = 0);

    double normal(double mean = 0.0, double stddev = 1.0);
    double uniform();
    std::size_t uniform_index(std::size_t n);

    Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev);

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};

/// Stable 64-bit FNV-1a, used to turn stream names into seeds.
std::uint64_t fnv1a(std::string_view text) noexcept;

}  // namespace clusterup
