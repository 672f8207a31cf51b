// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "json.hpp"

namespace clusterup {

struct ModelConfig {
    std::size_t d = 32;
    std::size_t h = 64;
    std::size_t blocks = 4;
    std::size_t n_classes = 4;
};

struct DataConfig {
    std::size_t n = 16384;
    std::size_t n_eval = 8192;
    std::size_t n_clusters = 8;
    double separation = 1.0;
};

struct MoeConfig {
    std::size_t n_experts = 8;
    std::size_t k = 2;
    double capacity_train = 1.5;
    double capacity_eval = 2.0;
    double router_scale = 0.0;   // <= 0 selects 1/sqrt(d)
};

struct InitConfig {
    std::string method = "cluster";
    double drop_ratio = 0.5;
    double drop_svd_fraction = 0.25;
    double tau = 0.95;
    std::size_t max_kmeans_iters = 100;
    std::size_t pca_factor = 8;
};

struct StageConfig {
    std::size_t steps = 2000;
    double lr = 0.02;
    std::size_t batch = 64;
};

struct TrainConfig {
    std::size_t steps = 2000;
    double lr = 0.02;
    std::size_t batch = 64;
    double lambda_lb = 0.001;
    double lambda_eesd = 1.0;
    double beta = 0.999;
    bool eesd = false;
};

struct CalibrationConfig {
    std::size_t token_cap = 4096;
};

/// Everything a pipeline run depends on. Loaded from strict JSON: unknown keys
/// and out-of-range values are rejected, missing keys keep their defaults.
struct PipelineConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    DataConfig data;
    MoeConfig moe;
    InitConfig init;
    StageConfig dense_train;
    TrainConfig train;
    CalibrationConfig calibration;
    std::string output_dir = "out";

    void validate() const;
};

nlohmann::json to_json(const PipelineConfig& config);
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig load_config(const std::string& path);

}  // namespace clusterup
