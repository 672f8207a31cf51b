// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clusterup/distill.hpp"
#include "clusterup/matrix.hpp"
#include "clusterup/model.hpp"
#include "clusterup/moe.hpp"

#include "json.hpp"

namespace clusterup {

inline constexpr double kDefaultLambdaLb = 0.001;

struct LossWeights {
    double lb = kDefaultLambdaLb;
    double eesd = kDefaultLambdaEesd;
};

/// total = task + lambda_lb * lb + lambda_eesd * eesd.
struct LossReport {
    double task = 0.0;
    double lb = 0.0;     // summed over MoE sites
    double eesd = 0.0;   // averaged over MoE sites; 0 without a teacher
    double lambda_lb = 0.0;
    double lambda_eesd = 0.0;
    double total = 0.0;
};

nlohmann::json to_json(const LossReport& report);

/// One EMA teacher per MoE site, in ToyModel::moe_sites() order.
using TeacherSet = std::vector<EmaTeacher>;

TeacherSet make_teachers(const ToyModel& model, double beta);

/// Teacher predictions per MoE site. Held constant during differentiation.
struct TeacherTargets {
    std::vector<Matrix> per_site;
};

struct LossResult {
    LossReport report;
    ToyModel grad;                          // same structure as the model
    std::vector<MoeLayer> teacher_grad;     // stop-gradient: always zero
    std::vector<RoutingRecord> routing;     // per MoE site
    TeacherTargets targets;
    Matrix logits;
};

/// Combined objective and its reverse-mode gradient. Top-k selections and
/// capacity drops are treated as constants; gates carry gradient through the
/// softmax. When `frozen` is given it replaces the teacher forward pass.
LossResult total_loss(const ToyModel& model, const TeacherSet* teachers, const Matrix& inputs,
                      std::span<const std::size_t> labels, const LossWeights& weights,
                      const TeacherTargets* frozen = nullptr);

/// Loss only, no gradient.
LossReport evaluate_loss(const ToyModel& model, const TeacherSet* teachers, const Matrix& inputs,
                         std::span<const std::size_t> labels, const LossWeights& weights,
                         const TeacherTargets* frozen = nullptr);

/// p <- p - lr * g.
void sgd_update(std::span<double> params, std::span<const double> grads, double lr);

/// One SGD step over every trainable tensor, then an EMA update of the
/// teachers from the updated student. lr = 0 leaves the student untouched.
/// Throws NonFiniteLoss. `routing`, if given, receives the step's routing.
LossReport train_step(ToyModel& model, TeacherSet* teachers, const Matrix& inputs, std::span<const std::size_t> labels,
                      double lr, const LossWeights& weights, std::vector<RoutingRecord>* routing = nullptr);

struct GradCheckOptions {
    double epsilon = 1e-6;
    std::size_t samples_per_tensor = 50;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    std::size_t checked = 0;
    std::size_t skipped = 0;   // perturbation flipped a routing, capacity or ReLU decision
    double teacher_analytic_max_abs = 0.0;
    double teacher_numeric_max_abs = 0.0;
    std::size_t teacher_checked = 0;
};

nlohmann::json to_json(const GradCheckResult& result);

/// Central differences on a random subsample of each tensor, compared against
/// total_loss gradients as max |analytic - numeric| / max(1, |numeric|).
GradCheckResult grad_check(const ToyModel& model, const TeacherSet* teachers, const Matrix& inputs,
                           std::span<const std::size_t> labels, const LossWeights& weights,
                           const GradCheckOptions& options = {});

void set_capacity_factor(ToyModel& model, double capacity_factor);

}  // namespace clusterup
