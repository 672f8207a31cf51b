// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "clusterup/matrix.hpp"
#include "clusterup/moe.hpp"

namespace clusterup {

inline constexpr double kDefaultEmaBeta = 0.999;
inline constexpr double kDefaultLambdaEesd = 1.0;

/// EMA mirror of one MoE layer. Its forward pass is the dense all-expert
/// ensemble under its own router.
struct EmaTeacher {
    MoeLayer mirror;
    double beta = kDefaultEmaBeta;
    std::size_t step_count = 0;
};

/// Teacher starting as an exact copy of the student.
EmaTeacher make_teacher(const MoeLayer& student, double beta = kDefaultEmaBeta);

/// p_teacher <- beta * p_teacher + (1 - beta) * p_student for every parameter.
void ema_update(EmaTeacher& teacher, const MoeLayer& student);

/// Teacher prediction for a batch; treated as a constant by the loss.
Matrix teacher_forward(const EmaTeacher& teacher, const Matrix& x);

/// (1 / T_valid) * sum over unmasked t of ||teacher_y_t - student_y_t||^2.
/// mask[t] == true marks a valid token; an empty mask means all valid.
double eesd_loss(const Matrix& student_y, const Matrix& teacher_y, std::span<const bool> mask = {});

/// d eesd_loss / d student_y. The teacher side has no gradient.
Matrix eesd_loss_grad(const Matrix& student_y, const Matrix& teacher_y, std::span<const bool> mask = {});

}  // namespace clusterup
