// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/trainer.hpp"

#include <algorithm>
#include <iterator>
#include <numeric>

#include "clusterup/analysis.hpp"
#include "clusterup/error.hpp"
#include "clusterup/random.hpp"

namespace clusterup {

nlohmann::json to_json(const StepLog& entry) {
    return {{"step", entry.step},
            {"task", entry.loss.task},
            {"lb", entry.loss.lb},
            {"eesd", entry.loss.eesd},
            {"lambda_lb", entry.loss.lambda_lb},
            {"lambda_eesd", entry.loss.lambda_eesd},
            {"total", entry.loss.total},
            {"routing_entropy", entry.routing_entropy},
            {"drop_rate", entry.drop_rate}};
}

std::vector<StepLog> train_model(ToyModel& model, TeacherSet* teachers, const SyntheticDataset& data,
                                 const TrainOptions& options, const std::function<void(const StepLog&)>& on_step) {
    if (options.batch == 0) throw Error(ErrorCode::InvalidArgument, "train_model: batch must be positive");
    if (data.size() == 0) throw Error(ErrorCode::InvalidArgument, "train_model: empty dataset");
    const std::size_t batch = std::min(options.batch, data.size());
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});

    std::vector<StepLog> log;
    log.reserve(options.steps);
    std::vector<std::size_t> picked;
    std::vector<RoutingRecord> routing;
    for (std::size_t step = 0; step < options.steps; ++step) {
        picked.clear();
        Rng rng(options.seed, options.batch_stream, step);
        std::sample(all.begin(), all.end(), std::back_inserter(picked), static_cast<std::ptrdiff_t>(batch), rng.engine());
        const Matrix x = select_columns(data.inputs, picked);
        std::vector<std::size_t> y(picked.size());
        for (std::size_t i = 0; i < picked.size(); ++i) y[i] = data.labels[picked[i]];

        StepLog entry;
        entry.step = step;
        entry.loss = train_step(model, teachers, x, y, options.lr, options.weights, &routing);
        for (const RoutingRecord& r : routing) {
            entry.routing_entropy += routing_entropy(r.probs);
            entry.drop_rate.push_back(r.drop_rate());
        }
        if (!routing.empty()) entry.routing_entropy /= static_cast<double>(routing.size());
        if (on_step) on_step(entry);
        log.push_back(std::move(entry));
    }
    return log;
}

}  // namespace clusterup
