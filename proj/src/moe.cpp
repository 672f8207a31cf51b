// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

#include "clusterup/error.hpp"

namespace clusterup {

void DenseFfn::validate() const {
    const std::size_t h = w1.rows();
    const std::size_t d = w1.cols();
    if (h == 0 || d == 0 || b1.size() != h || w2.rows() != d || w2.cols() != h || b2.size() != d) {
        throw Error(ErrorCode::ShapeMismatch, "DenseFfn: inconsistent shapes (w1 " + std::to_string(h) + "x" +
                                                  std::to_string(d) + ", w2 " + std::to_string(w2.rows()) + "x" +
                                                  std::to_string(w2.cols()) + ")");
    }
}

void MoeLayer::validate() const {
    if (experts.empty()) throw Error(ErrorCode::InvalidArgument, "MoeLayer: no experts");
    if (k < 1 || k > experts.size()) throw Error(ErrorCode::InvalidArgument, "MoeLayer: k must be in [1, n_experts]");
    if (!(capacity_factor > 0.0)) throw Error(ErrorCode::InvalidArgument, "MoeLayer: capacity_factor must be > 0");
    for (const auto& e : experts) {
        e.validate();
        if (e.input_dim() != experts[0].input_dim() || e.hidden_dim() != experts[0].hidden_dim())
            throw Error(ErrorCode::ShapeMismatch, "MoeLayer: experts disagree on (d, h)");
    }
    if (router.rows() != experts.size() || router.cols() != experts[0].input_dim())
        throw Error(ErrorCode::ShapeMismatch, "MoeLayer: router must be n_experts x d");
}

std::size_t RoutingRecord::dropped_slots() const {
    return static_cast<std::size_t>(std::count(dropped.begin(), dropped.end(), std::uint8_t{1}));
}

std::vector<double> RoutingRecord::per_expert_drop_rate() const {
    std::vector<double> selected(num_experts(), 0.0), lost(num_experts(), 0.0);
    for (std::size_t s = 0; s < topk_indices.size(); ++s) {
        selected[topk_indices[s]] += 1.0;
        if (dropped[s]) lost[topk_indices[s]] += 1.0;
    }
    std::vector<double> rate(num_experts(), 0.0);
    for (std::size_t i = 0; i < rate.size(); ++i) rate[i] = selected[i] > 0.0 ? lost[i] / selected[i] : 0.0;
    return rate;
}

double RoutingRecord::drop_rate() const {
    return dropped.empty() ? 0.0 : static_cast<double>(dropped_slots()) / static_cast<double>(dropped.size());
}

Matrix ffn_forward(const DenseFfn& ffn, const Matrix& x) {
    ffn.validate();
    if (x.rows() != ffn.input_dim()) {
        throw Error(ErrorCode::ShapeMismatch, "ffn_forward: input has " + std::to_string(x.rows()) +
                                                  " rows, expected " + std::to_string(ffn.input_dim()));
    }
    Matrix hidden = matmul(ffn.w1, x);
    for (std::size_t r = 0; r < hidden.rows(); ++r)
        for (double& v : hidden.row(r)) v = std::max(0.0, v + ffn.b1[r]);
    Matrix out = matmul(ffn.w2, hidden);
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (double& v : out.row(r)) v += ffn.b2[r];
    return out;
}

Matrix router_probs(const Matrix& router, const Matrix& x) {
    if (router.cols() != x.rows()) throw Error(ErrorCode::ShapeMismatch, "router_probs: router/input mismatch");
    const Matrix logits = matmul_tn(x, transpose(router));   // T x n_experts
    Matrix probs(logits.rows(), logits.cols());
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        const auto in = logits.row(t);
        auto out = probs.row(t);
        const double mx = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (std::size_t i = 0; i < in.size(); ++i) {
            out[i] = std::exp(in[i] - mx);
            total += out[i];
        }
        for (double& p : out) p /= total;
    }
    return probs;
}

TopK top_k_gates(std::span<const double> probs_row, std::size_t k) {
    if (k < 1 || k > probs_row.size()) throw Error(ErrorCode::InvalidArgument, "top_k_gates: k out of range");
    std::vector<std::size_t> order(probs_row.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probs_row[a] > probs_row[b]; });
    TopK out;
    out.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    double mass = 0.0;
    for (std::size_t i : out.indices) mass += probs_row[i];
    out.gates.reserve(k);
    for (std::size_t i : out.indices) out.gates.push_back(mass > 0.0 ? probs_row[i] / mass : 1.0 / static_cast<double>(k));
    return out;
}

std::size_t expert_capacity(double capacity_factor, std::size_t tokens, std::size_t k, std::size_t n_experts) {
    if (!std::isfinite(capacity_factor)) return std::numeric_limits<std::size_t>::max();
    const double slots = capacity_factor * static_cast<double>(tokens) * static_cast<double>(k) /
                         static_cast<double>(n_experts);
    return static_cast<std::size_t>(std::ceil(slots));
}

RoutingRecord route_tokens(const MoeLayer& layer, const Matrix& x) {
    layer.validate();
    if (x.rows() != layer.input_dim()) throw Error(ErrorCode::ShapeMismatch, "route_tokens: input dimension mismatch");
    const std::size_t tokens = x.cols();
    const std::size_t n = layer.num_experts();
    const std::size_t k = layer.k;

    RoutingRecord rec;
    rec.probs = router_probs(layer.router, x);
    rec.k = k;
    rec.topk_indices.resize(tokens * k);
    rec.gates.resize(tokens * k);
    rec.dropped.assign(tokens * k, 0);
    rec.capacity = expert_capacity(layer.capacity_factor, tokens, k, n);

    std::vector<std::size_t> load(n, 0);
    std::vector<double> counts(n, 0.0);
    for (std::size_t t = 0; t < tokens; ++t) {
        const TopK top = top_k_gates(rec.probs.row(t), k);
        for (std::size_t s = 0; s < k; ++s) {
            const std::size_t e = top.indices[s];
            rec.topk_indices[t * k + s] = e;
            rec.gates[t * k + s] = top.gates[s];
            counts[e] += 1.0;
            if (load[e] >= rec.capacity) {
                rec.dropped[t * k + s] = 1;
            } else {
                ++load[e];
            }
        }
    }
    const double slots = static_cast<double>(tokens * k);
    rec.per_expert_fraction.assign(n, 0.0);
    rec.per_expert_mean_prob.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        rec.per_expert_fraction[i] = tokens > 0 ? counts[i] / slots : 0.0;
        double s = 0.0;
        for (std::size_t t = 0; t < tokens; ++t) s += rec.probs(t, i);
        rec.per_expert_mean_prob[i] = tokens > 0 ? s / static_cast<double>(tokens) : 0.0;
    }
    return rec;
}

MoeOutput moe_forward(const MoeLayer& layer, const Matrix& x) {
    MoeOutput out;
    out.routing = route_tokens(layer, x);
    const RoutingRecord& rec = out.routing;
    const std::size_t k = rec.k;
    out.y = Matrix(x.rows(), x.cols());

    for (std::size_t e = 0; e < layer.num_experts(); ++e) {
        std::vector<std::size_t> slots;
        std::vector<std::size_t> tokens;
        for (std::size_t slot = 0; slot < rec.topk_indices.size(); ++slot) {
            if (rec.topk_indices[slot] == e && !rec.dropped[slot]) {
                slots.push_back(slot);
                tokens.push_back(slot / k);
            }
        }
        if (slots.empty()) continue;
        const Matrix expert_out = ffn_forward(layer.experts[e], select_columns(x, tokens));
        for (std::size_t j = 0; j < slots.size(); ++j) {
            const double g = rec.gates[slots[j]];
            for (std::size_t r = 0; r < out.y.rows(); ++r) out.y(r, tokens[j]) += g * expert_out(r, j);
        }
    }
    return out;
}

Matrix dense_ensemble_forward(const MoeLayer& layer, const Matrix& x) {
    layer.validate();
    if (x.rows() != layer.input_dim())
        throw Error(ErrorCode::ShapeMismatch, "dense_ensemble_forward: input dimension mismatch");
    const Matrix probs = router_probs(layer.router, x);
    Matrix y(x.rows(), x.cols());
    for (std::size_t e = 0; e < layer.num_experts(); ++e) {
        const Matrix expert_out = ffn_forward(layer.experts[e], x);
        for (std::size_t r = 0; r < y.rows(); ++r)
            for (std::size_t t = 0; t < y.cols(); ++t) y(r, t) += probs(t, e) * expert_out(r, t);
    }
    return y;
}

double load_balance_loss(const RoutingRecord& routing) {
    double loss = 0.0;
    for (std::size_t i = 0; i < routing.per_expert_fraction.size(); ++i)
        loss += routing.per_expert_fraction[i] * routing.per_expert_mean_prob[i];
    return loss;
}

void write_routing_summary_csv(std::ostream& out, const RoutingRecord& routing) {
    const auto drop = routing.per_expert_drop_rate();
    out << "expert,fraction,mean_prob,drop_rate\n";
    for (std::size_t i = 0; i < routing.num_experts(); ++i) {
        out << i << ',' << routing.per_expert_fraction[i] << ',' << routing.per_expert_mean_prob[i] << ','
            << drop[i] << '\n';
    }
}

}  // namespace clusterup
