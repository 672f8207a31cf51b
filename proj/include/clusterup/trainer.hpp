// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "clusterup/model.hpp"
#include "clusterup/train.hpp"

#include "json.hpp"

namespace clusterup {

struct TrainOptions {
    std::size_t steps = 2000;
    double lr = 0.05;
    std::size_t batch = 64;
    LossWeights weights;
    std::uint64_t seed = 0;
    std::string batch_stream = "batches";   // Rng sub-stream for minibatch sampling
};

/// One line of the JSON-lines training log.
struct StepLog {
    std::size_t step = 0;
    LossReport loss;
    double routing_entropy = 0.0;     // averaged over MoE sites
    std::vector<double> drop_rate;    // per MoE site
};

nlohmann::json to_json(const StepLog& entry);

/// Minibatch SGD for `options.steps` steps; minibatches are drawn without
/// replacement from Rng(seed, batch_stream, step). Teachers may be null.
/// `on_step` sees every log entry as it is produced.
std::vector<StepLog> train_model(ToyModel& model, TeacherSet* teachers, const SyntheticDataset& data,
                                 const TrainOptions& options, const std::function<void(const StepLog&)>& on_step = {});

}  // namespace clusterup
