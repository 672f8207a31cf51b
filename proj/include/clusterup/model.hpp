// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "clusterup/matrix.hpp"
#include "clusterup/moe.hpp"

namespace clusterup {

/// A residual block: output = input + ffn(input).
using Block = std::variant<DenseFfn, MoeLayer>;

/// Residual stack of FFN / MoE blocks followed by a linear classification head.
struct ToyModel {
    std::size_t input_dim = 0;
    std::vector<Block> blocks;
    Matrix head;   // n_classes x d

    [[nodiscard]] std::size_t num_classes() const noexcept { return head.rows(); }
    [[nodiscard]] std::vector<std::size_t> moe_sites() const;
    [[nodiscard]] bool is_moe(std::size_t block) const { return std::holds_alternative<MoeLayer>(blocks.at(block)); }
    [[nodiscard]] MoeLayer& moe(std::size_t block) { return std::get<MoeLayer>(blocks.at(block)); }
    [[nodiscard]] const MoeLayer& moe(std::size_t block) const { return std::get<MoeLayer>(blocks.at(block)); }
    [[nodiscard]] const DenseFfn& dense(std::size_t block) const { return std::get<DenseFfn>(blocks.at(block)); }
    void validate() const;

    friend bool operator==(const ToyModel&, const ToyModel&) = default;
};

struct SyntheticDataset {
    Matrix inputs;                       // d x N
    std::vector<std::size_t> labels;     // class per column
    std::vector<std::size_t> clusters;   // generating cluster per column
    Matrix directions;                   // n_clusters x d, unit rows
    std::size_t n_classes = 0;
    std::size_t n_clusters = 0;
    double separation = 0.0;
    std::uint64_t seed = 0;

    [[nodiscard]] std::size_t size() const noexcept { return inputs.cols(); }
    /// Columns `indices` as a new dataset sharing the generating metadata.
    [[nodiscard]] SyntheticDataset subset(std::span<const std::size_t> indices) const;
};

/// Per-site forward trace used for calibration capture and routing analysis.
struct ForwardTrace {
    Matrix logits;                          // n_classes x T
    std::vector<Matrix> block_inputs;       // residual stream entering each block
    std::vector<RoutingRecord> routing;     // one per MoE site, in site order
};

/// Dense residual model with He-scaled first layers and damped second layers.
ToyModel make_dense_model(std::size_t d, std::size_t h, std::size_t n_blocks, std::size_t n_classes, std::uint64_t seed);

ForwardTrace forward(const ToyModel& model, const Matrix& x);

/// Unit cluster directions with pairwise cosine < 1/separation; each point is
/// its direction plus isotropic gaussian noise of expected norm 1/separation.
/// Class = cluster mod n_classes. separation may be +inf (noiseless).
SyntheticDataset make_synthetic_dataset(std::size_t d, std::size_t n_classes, std::size_t n_clusters, std::size_t n,
                                        double separation, std::uint64_t seed);

/// Named, shaped view of one parameter tensor. Biases are 1 x n.
struct TensorView {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::span<double> values;
};

struct ConstTensorView {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::span<const double> values;
};

/// Every trainable tensor in a stable order ("blocks.<b>.w1", "blocks.<b>.experts.<e>.w1",
/// "blocks.<b>.router", "head", ...).
std::vector<TensorView> parameter_tensors(ToyModel& model, const std::string& prefix = "");
std::vector<ConstTensorView> parameter_tensors(const ToyModel& model, const std::string& prefix = "");
std::vector<TensorView> layer_tensors(MoeLayer& layer, const std::string& prefix);
std::vector<ConstTensorView> layer_tensors(const MoeLayer& layer, const std::string& prefix);

/// Same structure, every parameter zero.
ToyModel zeros_like(const ToyModel& model);
MoeLayer zeros_like(const MoeLayer& layer);

double mean_cross_entropy(const Matrix& logits, std::span<const std::size_t> labels);
double accuracy(const Matrix& logits, std::span<const std::size_t> labels);

}  // namespace clusterup
