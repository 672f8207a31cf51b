// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "clusterup/matrix.hpp"
#include "clusterup/model.hpp"
#include "clusterup/moe.hpp"

#include "json.hpp"

namespace clusterup {

/// Tr(Sigma_W * pinv(Sigma_B)) over per-expert output matrices (d x T_i).
/// Sigma_W pools token deviations from each expert's own mean over (N - K)
/// degrees of freedom; Sigma_B is the unweighted covariance of the expert
/// means. Experts with fewer than two tokens are ignored. Returns nullopt when
/// Sigma_B vanishes.
std::optional<double> relative_compactness(std::span<const Matrix> expert_outputs);

/// Cosine similarity between flattened (w1, b1, w2, b2) of each expert pair.
Matrix expert_weight_similarity(const MoeLayer& layer);
/// Same, restricted to w1.
Matrix expert_w1_similarity(const MoeLayer& layer);
double mean_pairwise_similarity(const Matrix& similarity);

/// Mean per-token Shannon entropy of routing probabilities (T x N_e), in nats.
double routing_entropy(const Matrix& probs);

/// Fraction of top-k slots choosing each expert, dropped slots included.
std::vector<double> expert_utilization(const RoutingRecord& routing);

struct SiteAnalysis {
    std::optional<double> rc;
    double mean_pairwise_similarity = 0.0;
    Matrix similarity_matrix;
    Matrix similarity_w1;
    double mean_routing_entropy = 0.0;
    std::vector<double> utilization;
    double drop_rate = 0.0;
};

struct AnalysisReport {
    std::map<std::size_t, SiteAnalysis> per_site;   // keyed by block index
};

/// Runs `inputs` (d x T) through the model and analyzes every MoE site.
/// Expert outputs for RC are those of the slots each expert actually served.
AnalysisReport analyze_model(const ToyModel& model, const Matrix& inputs);

/// Long format, header `site,metric,i,j,value`. Scalars use i = j = 0;
/// utilization uses i = expert; matrices use (i, j). An undefined RC is "nan".
void write_analysis_csv(std::ostream& out, const AnalysisReport& report);
nlohmann::json to_json(const AnalysisReport& report);

}  // namespace clusterup
