// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "clusterup/model.hpp"
#include "clusterup/train.hpp"
#include "clusterup/upcycle.hpp"

#include "json.hpp"

namespace clusterup {

inline constexpr int kCheckpointFormatVersion = 1;

struct NamedTensor {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> values;   // row-major
};

/// A checkpoint lives in two files: `<stem>.json` (manifest) and `<stem>.bin`
/// (little-endian float32 tensors concatenated in manifest order).
struct Checkpoint {
    std::string kind;
    nlohmann::json config;   // snapshot of the producing configuration
    nlohmann::json seeds;
    nlohmann::json meta;     // kind-specific structure description
    std::vector<NamedTensor> tensors;

    [[nodiscard]] const NamedTensor& tensor(const std::string& name) const;
    [[nodiscard]] bool has_tensor(const std::string& name) const;
};

nlohmann::json manifest(const Checkpoint& ckpt, const std::string& blob_name);
void save_checkpoint(const std::string& stem, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& stem);
bool checkpoint_exists(const std::string& stem);

/// Model (and optional per-site teachers) <-> checkpoint. Parameters are
/// stored as float32, so a loaded model is the float-rounded original.
Checkpoint model_checkpoint(const ToyModel& model, const TeacherSet* teachers, const std::string& kind);
ToyModel model_from_checkpoint(const Checkpoint& ckpt);
std::optional<TeacherSet> teachers_from_checkpoint(const Checkpoint& ckpt);

Checkpoint bank_checkpoint(const ActivationBank& bank);
ActivationBank bank_from_checkpoint(const Checkpoint& ckpt);

Matrix to_matrix(const NamedTensor& t);
NamedTensor from_matrix(std::string name, const Matrix& m);

}  // namespace clusterup
