// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/analysis.hpp"

#include <cmath>
#include <iomanip>
#include <limits>

#include "clusterup/error.hpp"
#include "clusterup/linalg.hpp"

namespace clusterup {

namespace {

std::vector<double> column_mean(const Matrix& x) {
    std::vector<double> mean(x.rows(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (double v : x.row(r)) mean[r] += v;
        mean[r] /= static_cast<double>(x.cols());
    }
    return mean;
}

// Flattened parameter vectors, one per expert.
std::vector<std::vector<double>> flatten_experts(const MoeLayer& layer, bool w1_only) {
    std::vector<std::vector<double>> out;
    for (const DenseFfn& e : layer.experts) {
        std::vector<double> v(e.w1.values().begin(), e.w1.values().end());
        if (!w1_only) {
            v.insert(v.end(), e.b1.begin(), e.b1.end());
            v.insert(v.end(), e.w2.values().begin(), e.w2.values().end());
            v.insert(v.end(), e.b2.begin(), e.b2.end());
        }
        out.push_back(std::move(v));
    }
    return out;
}

Matrix cosine_matrix(const std::vector<std::vector<double>>& vecs) {
    const std::size_t n = vecs.size();
    if (n < 2) throw Error(ErrorCode::InvalidArgument, "expert_weight_similarity: need at least 2 experts");
    std::vector<double> sq(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (double v : vecs[i]) sq[i] += v * v;
        if (!(sq[i] > 0.0)) throw Error(ErrorCode::ZeroWeights, "expert " + std::to_string(i) + " has zero norm");
    }
    Matrix sim = Matrix::identity(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double d = 0.0;
            for (std::size_t p = 0; p < vecs[i].size(); ++p) d += vecs[i][p] * vecs[j][p];
            // sqrt of the product keeps identical vectors at exactly 1.
            const double c = d / std::sqrt(sq[i] * sq[j]);
            sim(i, j) = c;
            sim(j, i) = c;
        }
    }
    return sim;
}

}  // namespace

std::optional<double> relative_compactness(std::span<const Matrix> expert_outputs) {
    std::vector<const Matrix*> used;
    std::size_t d = 0;
    for (const Matrix& m : expert_outputs) {
        if (m.cols() < 2) continue;
        if (d == 0) d = m.rows();
        if (m.rows() != d) throw Error(ErrorCode::ShapeMismatch, "relative_compactness: inconsistent output dims");
        used.push_back(&m);
    }
    if (used.size() < 2) throw Error(ErrorCode::InsufficientTokens, "relative_compactness: need 2 experts with >= 2 tokens");

    Matrix within(d, d);
    Matrix means(d, used.size());
    std::size_t total = 0;
    for (std::size_t e = 0; e < used.size(); ++e) {
        const Matrix& x = *used[e];
        const std::vector<double> mu = column_mean(x);
        Matrix centered = x;
        for (std::size_t r = 0; r < d; ++r)
            for (double& v : centered.row(r)) v -= mu[r];
        within += matmul_nt(centered, centered);
        for (std::size_t r = 0; r < d; ++r) means(r, e) = mu[r];
        total += x.cols();
    }
    within *= 1.0 / static_cast<double>(total - used.size());

    const std::vector<double> grand = column_mean(means);
    for (std::size_t r = 0; r < d; ++r)
        for (double& v : means.row(r)) v -= grand[r];
    Matrix between = matmul_nt(means, means);
    between *= 1.0 / static_cast<double>(used.size() - 1);

    if (frobenius_norm(between) <= 1e-12 * std::max(1.0, frobenius_norm(within))) return std::nullopt;
    return trace(matmul(within, pseudoinverse(between)));
}

Matrix expert_weight_similarity(const MoeLayer& layer) { return cosine_matrix(flatten_experts(layer, false)); }

Matrix expert_w1_similarity(const MoeLayer& layer) { return cosine_matrix(flatten_experts(layer, true)); }

double mean_pairwise_similarity(const Matrix& similarity) {
    const std::size_t n = similarity.rows();
    if (n < 2) return 1.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) sum += similarity(i, j);
    return sum / static_cast<double>(n * (n - 1) / 2);
}

double routing_entropy(const Matrix& probs) {
    if (probs.rows() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t t = 0; t < probs.rows(); ++t) {
        double h = 0.0;
        for (double p : probs.row(t))
            if (p > 0.0) h -= p * std::log(p);
        total += h;
    }
    return total / static_cast<double>(probs.rows());
}

std::vector<double> expert_utilization(const RoutingRecord& routing) { return routing.per_expert_fraction; }

AnalysisReport analyze_model(const ToyModel& model, const Matrix& inputs) {
    const ForwardTrace trace_out = forward(model, inputs);
    const std::vector<std::size_t> sites = model.moe_sites();
    AnalysisReport report;
    for (std::size_t s = 0; s < sites.size(); ++s) {
        const MoeLayer& layer = model.moe(sites[s]);
        const RoutingRecord& rec = trace_out.routing[s];
        const Matrix& x = trace_out.block_inputs[sites[s]];
        SiteAnalysis site;
        site.similarity_matrix = expert_weight_similarity(layer);
        site.similarity_w1 = expert_w1_similarity(layer);
        site.mean_pairwise_similarity = mean_pairwise_similarity(site.similarity_matrix);
        site.mean_routing_entropy = routing_entropy(rec.probs);
        site.utilization = expert_utilization(rec);
        site.drop_rate = rec.drop_rate();

        std::vector<std::vector<std::size_t>> served(layer.num_experts());
        for (std::size_t slot = 0; slot < rec.topk_indices.size(); ++slot)
            if (!rec.dropped[slot]) served[rec.topk_indices[slot]].push_back(slot / rec.k);
        std::vector<Matrix> outputs;
        for (std::size_t e = 0; e < served.size(); ++e) {
            if (served[e].empty()) continue;
            outputs.push_back(ffn_forward(layer.experts[e], select_columns(x, served[e])));
        }
        try {
            site.rc = relative_compactness(outputs);
        } catch (const Error& err) {
            if (err.code() != ErrorCode::InsufficientTokens) throw;
            site.rc = std::nullopt;
        }
        report.per_site.emplace(sites[s], std::move(site));
    }
    return report;
}

void write_analysis_csv(std::ostream& out, const AnalysisReport& report) {
    out << "site,metric,i,j,value\n";
    out << std::setprecision(17);
    for (const auto& [site, a] : report.per_site) {
        auto row = [&](const char* metric, std::size_t i, std::size_t j, double v) {
            out << site << ',' << metric << ',' << i << ',' << j << ',';
            if (std::isnan(v)) out << "nan";
            else out << v;
            out << '\n';
        };
        row("rc", 0, 0, a.rc ? *a.rc : std::numeric_limits<double>::quiet_NaN());
        row("mean_pairwise_similarity", 0, 0, a.mean_pairwise_similarity);
        row("mean_routing_entropy", 0, 0, a.mean_routing_entropy);
        row("drop_rate", 0, 0, a.drop_rate);
        for (std::size_t i = 0; i < a.utilization.size(); ++i) row("utilization", i, 0, a.utilization[i]);
        for (std::size_t i = 0; i < a.similarity_matrix.rows(); ++i)
            for (std::size_t j = 0; j < a.similarity_matrix.cols(); ++j) row("similarity", i, j, a.similarity_matrix(i, j));
        for (std::size_t i = 0; i < a.similarity_w1.rows(); ++i)
            for (std::size_t j = 0; j < a.similarity_w1.cols(); ++j) row("similarity_w1", i, j, a.similarity_w1(i, j));
    }
}

nlohmann::json to_json(const AnalysisReport& report) {
    auto matrix_json = [](const Matrix& m) {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
        return rows;
    };
    nlohmann::json sites = nlohmann::json::object();
    for (const auto& [site, a] : report.per_site) {
        sites[std::to_string(site)] = {
            {"rc", a.rc ? nlohmann::json(*a.rc) : nlohmann::json(nullptr)},
            {"mean_pairwise_similarity", a.mean_pairwise_similarity},
            {"similarity_matrix", matrix_json(a.similarity_matrix)},
            {"similarity_w1", matrix_json(a.similarity_w1)},
            {"mean_routing_entropy", a.mean_routing_entropy},
            {"utilization", a.utilization},
            {"drop_rate", a.drop_rate},
        };
    }
    return {{"per_site", sites}};
}

}  // namespace clusterup
