// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <vector>

#include "clusterup/matrix.hpp"

namespace clusterup {

enum class Activation { relu };

/// Two-layer feed-forward block: w2 * relu(w1 * x + b1) + b2.
struct DenseFfn {
    Matrix w1;                 // h x d
    std::vector<double> b1;    // h
    Matrix w2;                 // d x h
    std::vector<double> b2;    // d
    Activation activation = Activation::relu;

    [[nodiscard]] std::size_t input_dim() const noexcept { return w1.cols(); }
    [[nodiscard]] std::size_t hidden_dim() const noexcept { return w1.rows(); }
    void validate() const;

    friend bool operator==(const DenseFfn&, const DenseFfn&) = default;
};

inline constexpr double kUnlimitedCapacity = std::numeric_limits<double>::infinity();

struct MoeLayer {
    std::vector<DenseFfn> experts;
    Matrix router;             // n_experts x d, no bias
    std::size_t k = 2;
    double capacity_factor = 1.5;

    [[nodiscard]] std::size_t num_experts() const noexcept { return experts.size(); }
    [[nodiscard]] std::size_t input_dim() const noexcept { return router.cols(); }
    void validate() const;

    friend bool operator==(const MoeLayer&, const MoeLayer&) = default;
};

/// Token-choice routing decisions for one batch. Slot s of token t is stored at
/// t * k + s, ordered from the highest to the lowest routing probability.
struct RoutingRecord {
    Matrix probs;                          // T x n_experts
    std::size_t k = 0;
    std::vector<std::size_t> topk_indices; // T * k
    std::vector<double> gates;             // T * k, renormalized over the k selected
    std::vector<std::uint8_t> dropped;     // T * k
    std::vector<double> per_expert_fraction;   // slots selecting i / (T * k), incl. dropped
    std::vector<double> per_expert_mean_prob;  // mean_t probs(t, i)
    std::size_t capacity = 0;              // slots accepted per expert

    [[nodiscard]] std::size_t tokens() const noexcept { return probs.rows(); }
    [[nodiscard]] std::size_t num_experts() const noexcept { return probs.cols(); }
    [[nodiscard]] std::size_t dropped_slots() const;
    /// Dropped / selected slots per expert (0 for unselected experts).
    [[nodiscard]] std::vector<double> per_expert_drop_rate() const;
    [[nodiscard]] double drop_rate() const;
};

struct TopK {
    std::vector<std::size_t> indices;
    std::vector<double> gates;
};

struct MoeOutput {
    Matrix y;
    RoutingRecord routing;
};

Matrix ffn_forward(const DenseFfn& ffn, const Matrix& x);

/// Row t = softmax(router * x_t), max-subtracted.
Matrix router_probs(const Matrix& router, const Matrix& x);

/// Top-k of one probability row (ties to the lowest index), gates renormalized.
TopK top_k_gates(std::span<const double> probs_row, std::size_t k);

/// ceil(capacity_factor * tokens * k / n_experts); SIZE_MAX when unlimited.
std::size_t expert_capacity(double capacity_factor, std::size_t tokens, std::size_t k, std::size_t n_experts);

/// Routing only: probabilities, top-k, and token-order capacity fill.
RoutingRecord route_tokens(const MoeLayer& layer, const Matrix& x);

/// Sparse top-k output. Dropped slots contribute zero and their gate mass is
/// not redistributed.
MoeOutput moe_forward(const MoeLayer& layer, const Matrix& x);

/// Full-softmax mixture over every expert, no top-k and no capacity.
Matrix dense_ensemble_forward(const MoeLayer& layer, const Matrix& x);

/// sum_i a_i * mean_t g_i(x_t).
double load_balance_loss(const RoutingRecord& routing);

/// CSV with columns expert,fraction,mean_prob,drop_rate.
void write_routing_summary_csv(std::ostream& out, const RoutingRecord& routing);

}  // namespace clusterup
