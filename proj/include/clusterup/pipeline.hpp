// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "clusterup/clustering.hpp"
#include "clusterup/config.hpp"
#include "clusterup/model.hpp"
#include "clusterup/trainer.hpp"
#include "clusterup/upcycle.hpp"

#include "json.hpp"

namespace clusterup {

struct DataSplit {
    SyntheticDataset train;
    SyntheticDataset eval;
};

/// n + n_eval points from one generator; the first n are the training split.
DataSplit make_data(const PipelineConfig& config);

/// Blocks converted to MoE: every other block, starting at block 1.
std::vector<std::size_t> upcycle_sites(std::size_t n_blocks);

/// Per-site seed derived from the root seed.
std::uint64_t site_seed(std::uint64_t root, std::size_t site);

ToyModel pretrain_dense(const PipelineConfig& config, const SyntheticDataset& train,
                        const std::function<void(const StepLog&)>& on_step = {});

ActivationBank capture_bank(const PipelineConfig& config, const ToyModel& dense, const SyntheticDataset& train);

struct UpcycleOutcome {
    ToyModel model;
    std::map<std::size_t, InitReport> reports;      // per site
    std::map<std::size_t, ClusterModel> clusters;   // cluster-aware only
};

/// `bank` is required for the cluster-aware method only.
UpcycleOutcome upcycle_model(const PipelineConfig& config, const ToyModel& dense, const ActivationBank* bank,
                             InitMethod method);

struct MoeTrainOutcome {
    std::optional<TeacherSet> teachers;
    std::vector<StepLog> log;
};

/// Trains at capacity_train. With `eesd` an EMA teacher per site is created
/// from the starting model and the EESD term is enabled.
MoeTrainOutcome train_moe(const PipelineConfig& config, ToyModel& model, const SyntheticDataset& train, bool eesd,
                          const std::function<void(const StepLog&)>& on_step = {});

struct EvalMetrics {
    double task_loss = 0.0;
    double accuracy = 0.0;
    double mean_similarity = 0.0;
    double mean_routing_entropy = 0.0;
    double min_utilization = 0.0;
    double max_utilization = 0.0;
    double drop_rate = 0.0;
    double rc_mean = 0.0;   // NaN when undefined at every site
};

/// Held-out metrics at capacity_eval, averaged over MoE sites.
EvalMetrics evaluate_model(const PipelineConfig& config, const ToyModel& model, const SyntheticDataset& eval);
nlohmann::json to_json(const EvalMetrics& m);

struct CompareRow {
    std::uint64_t seed = 0;
    std::string method;
    EvalMetrics metrics;
};

/// For seeds config.seed .. config.seed + n_seeds - 1: pretrain, capture,
/// upcycle with each of the four methods and train. Seeds run on up to
/// `threads` threads; results do not depend on the thread count.
std::vector<CompareRow> run_compare(const PipelineConfig& config, std::size_t n_seeds, std::size_t threads);
void write_compare_csv(std::ostream& out, const std::vector<CompareRow>& rows);

struct CommandArgs {
    std::string command;
    std::string config_path;   // empty: defaults
    std::string method;        // empty: config init.method
    bool eesd = false;
    std::optional<std::size_t> steps;
    std::string checkpoint;    // stem relative to the output directory
    double epsilon = 1e-6;
    std::size_t seeds = 5;
    std::size_t threads = 1;
};

inline constexpr const char* kOutputDirEnv = "CLUSTERUP_OUTPUT_DIR";

/// Loads the configuration (applying the output-dir environment override),
/// runs one command and writes its artifacts. Prints a JSON summary to `out`.
/// Failures are thrown as clusterup::Error.
void execute(const CommandArgs& args, std::ostream& out);

}  // namespace clusterup
