// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace clusterup {

enum class ErrorCode {
    ShapeMismatch,
    InvalidArgument,
    NotPositiveDefinite,
    NoConvergence,
    AllZeroSpectrum,
    DegenerateData,
    InsufficientData,
    EmptyCalibration,
    AllMasked,
    SeparationInfeasible,
    NonFiniteLoss,
    InsufficientTokens,
    ZeroWeights,
    InvalidConfig,
    MissingInput,
    Io,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::NotPositiveDefinite: return "NotPositiveDefinite";
        case ErrorCode::NoConvergence: return "NoConvergence";
        case ErrorCode::AllZeroSpectrum: return "AllZeroSpectrum";
        case ErrorCode::DegenerateData: return "DegenerateData";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::EmptyCalibration: return "EmptyCalibration";
        case ErrorCode::AllMasked: return "AllMasked";
        case ErrorCode::SeparationInfeasible: return "SeparationInfeasible";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::InsufficientTokens: return "InsufficientTokens";
        case ErrorCode::ZeroWeights: return "ZeroWeights";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::MissingInput: return "MissingInput";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// CLI can report it in machine-readable form.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace clusterup
