// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/distill.hpp"

#include "clusterup/error.hpp"
#include "clusterup/model.hpp"

namespace clusterup {

namespace {

std::size_t valid_tokens(const Matrix& student_y, const Matrix& teacher_y, std::span<const bool> mask) {
    if (!student_y.same_shape(teacher_y)) throw Error(ErrorCode::ShapeMismatch, "eesd_loss: student/teacher shapes differ");
    if (!mask.empty() && mask.size() != student_y.cols())
        throw Error(ErrorCode::ShapeMismatch, "eesd_loss: mask length != token count");
    std::size_t valid = 0;
    for (std::size_t t = 0; t < student_y.cols(); ++t)
        if (mask.empty() || mask[t]) ++valid;
    if (valid == 0) throw Error(ErrorCode::AllMasked, "eesd_loss: every token is masked");
    return valid;
}

}  // namespace

EmaTeacher make_teacher(const MoeLayer& student, double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw Error(ErrorCode::InvalidArgument, "EMA beta must be in [0, 1]");
    return {student, beta, 0};
}

void ema_update(EmaTeacher& teacher, const MoeLayer& student) {
    auto dst = layer_tensors(teacher.mirror, "");
    const auto src = layer_tensors(student, "");
    if (dst.size() != src.size()) throw Error(ErrorCode::ShapeMismatch, "ema_update: expert counts differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].rows != src[i].rows || dst[i].cols != src[i].cols)
            throw Error(ErrorCode::ShapeMismatch, "ema_update: tensor " + dst[i].name + " shape differs");
    }
    const double beta = teacher.beta;
    const double alpha = 1.0 - beta;
    for (std::size_t i = 0; i < dst.size(); ++i) {
        auto& out = dst[i].values;
        const auto& in = src[i].values;
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = beta * out[j] + alpha * in[j];
    }
    ++teacher.step_count;
}

Matrix teacher_forward(const EmaTeacher& teacher, const Matrix& x) { return dense_ensemble_forward(teacher.mirror, x); }

double eesd_loss(const Matrix& student_y, const Matrix& teacher_y, std::span<const bool> mask) {
    const std::size_t valid = valid_tokens(student_y, teacher_y, mask);
    double total = 0.0;
    for (std::size_t t = 0; t < student_y.cols(); ++t) {
        if (!mask.empty() && !mask[t]) continue;
        for (std::size_t r = 0; r < student_y.rows(); ++r) {
            const double diff = teacher_y(r, t) - student_y(r, t);
            total += diff * diff;
        }
    }
    return total / static_cast<double>(valid);
}

Matrix eesd_loss_grad(const Matrix& student_y, const Matrix& teacher_y, std::span<const bool> mask) {
    const std::size_t valid = valid_tokens(student_y, teacher_y, mask);
    const double scale = 2.0 / static_cast<double>(valid);
    Matrix g(student_y.rows(), student_y.cols());
    for (std::size_t t = 0; t < student_y.cols(); ++t) {
        if (!mask.empty() && !mask[t]) continue;
        for (std::size_t r = 0; r < student_y.rows(); ++r) g(r, t) = scale * (student_y(r, t) - teacher_y(r, t));
    }
    return g;
}

}  // namespace clusterup
