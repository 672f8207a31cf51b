// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "clusterup/error.hpp"
#include "clusterup/random.hpp"

namespace clusterup {

namespace {

struct FfnCache {
    Matrix input;    // d x n
    Matrix pre;      // h x n, w1 x + b1
    Matrix hidden;   // h x n, relu(pre)
};

struct MoeCache {
    Matrix input;
    RoutingRecord routing;
    std::vector<std::vector<std::size_t>> slots;   // undropped slot ids per expert
    std::vector<FfnCache> experts;
    std::vector<Matrix> outputs;                   // d x n_e per expert
    Matrix y;
};

struct BlockCache {
    FfnCache dense;
    MoeCache moe;
};

struct ForwardState {
    std::vector<BlockCache> blocks;
    Matrix final_stream;
    Matrix logits;
    TeacherTargets targets;
    LossReport report;
    // Every discrete decision of the forward pass: top-k picks, capacity drops
    // and ReLU gates. Finite differences are only valid while it is unchanged.
    std::vector<std::size_t> signature;
};

Matrix ffn_forward_cached(const DenseFfn& f, const Matrix& x, FfnCache& cache) {
    cache.input = x;
    cache.pre = matmul(f.w1, x);
    for (std::size_t r = 0; r < cache.pre.rows(); ++r)
        for (double& v : cache.pre.row(r)) v += f.b1[r];
    cache.hidden = cache.pre;
    for (double& v : cache.hidden.values()) v = std::max(0.0, v);
    Matrix out = matmul(f.w2, cache.hidden);
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (double& v : out.row(r)) v += f.b2[r];
    return out;
}

void row_sums_into(const Matrix& m, std::vector<double>& out) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        double s = 0.0;
        for (double v : m.row(r)) s += v;
        out[r] += s;
    }
}

// Accumulates parameter gradients into `g` and returns d loss / d input.
Matrix ffn_backward(const DenseFfn& f, const FfnCache& cache, const Matrix& dout, DenseFfn& g) {
    g.w2 += matmul_nt(dout, cache.hidden);
    row_sums_into(dout, g.b2);
    Matrix dpre = matmul_tn(f.w2, dout);
    for (std::size_t i = 0; i < dpre.size(); ++i)
        if (!(cache.pre.values()[i] > 0.0)) dpre.values()[i] = 0.0;
    g.w1 += matmul_nt(dpre, cache.input);
    row_sums_into(dpre, g.b1);
    return matmul_tn(f.w1, dpre);
}

Matrix moe_forward_cached(const MoeLayer& layer, const Matrix& x, MoeCache& cache) {
    cache.input = x;
    cache.routing = route_tokens(layer, x);
    const RoutingRecord& rec = cache.routing;
    const std::size_t n = layer.num_experts();
    cache.slots.assign(n, {});
    cache.experts.assign(n, {});
    cache.outputs.assign(n, {});
    for (std::size_t slot = 0; slot < rec.topk_indices.size(); ++slot)
        if (!rec.dropped[slot]) cache.slots[rec.topk_indices[slot]].push_back(slot);

    cache.y = Matrix(x.rows(), x.cols());
    for (std::size_t e = 0; e < n; ++e) {
        if (cache.slots[e].empty()) continue;
        std::vector<std::size_t> tokens;
        tokens.reserve(cache.slots[e].size());
        for (std::size_t slot : cache.slots[e]) tokens.push_back(slot / rec.k);
        cache.outputs[e] = ffn_forward_cached(layer.experts[e], select_columns(x, tokens), cache.experts[e]);
        for (std::size_t j = 0; j < tokens.size(); ++j) {
            const double gate = rec.gates[cache.slots[e][j]];
            for (std::size_t r = 0; r < x.rows(); ++r) cache.y(r, tokens[j]) += gate * cache.outputs[e](r, j);
        }
    }
    return cache.y;
}

// dy: gradient w.r.t. the layer output; lb_scale multiplies this site's
// load-balancing term.
Matrix moe_backward(const MoeLayer& layer, const MoeCache& cache, const Matrix& dy, double lb_scale, MoeLayer& g) {
    const RoutingRecord& rec = cache.routing;
    const std::size_t tokens = rec.tokens();
    const std::size_t n = layer.num_experts();
    const std::size_t k = rec.k;
    Matrix dx(dy.rows(), dy.cols());
    std::vector<double> dgate(tokens * k, 0.0);

    for (std::size_t e = 0; e < n; ++e) {
        const auto& slots = cache.slots[e];
        if (slots.empty()) continue;
        Matrix dout(dy.rows(), slots.size());
        for (std::size_t j = 0; j < slots.size(); ++j) {
            const std::size_t t = slots[j] / k;
            const double gate = rec.gates[slots[j]];
            double dg = 0.0;
            for (std::size_t r = 0; r < dy.rows(); ++r) {
                dout(r, j) = gate * dy(r, t);
                dg += dy(r, t) * cache.outputs[e](r, j);
            }
            dgate[slots[j]] = dg;
        }
        const Matrix dxe = ffn_backward(layer.experts[e], cache.experts[e], dout, g.experts[e]);
        for (std::size_t j = 0; j < slots.size(); ++j) {
            const std::size_t t = slots[j] / k;
            for (std::size_t r = 0; r < dx.rows(); ++r) dx(r, t) += dxe(r, j);
        }
    }

    // Gates -> probabilities through the renormalization over the selected
    // set, plus the load-balancing term, then back through the softmax.
    Matrix dlogits(n, tokens);
    std::vector<double> dp(n);
    for (std::size_t t = 0; t < tokens; ++t) {
        std::fill(dp.begin(), dp.end(), 0.0);
        const auto p = rec.probs.row(t);
        double mass = 0.0;
        for (std::size_t s = 0; s < k; ++s) mass += p[rec.topk_indices[t * k + s]];
        if (mass > 0.0) {
            double weighted = 0.0;
            for (std::size_t s = 0; s < k; ++s) weighted += dgate[t * k + s] * p[rec.topk_indices[t * k + s]];
            for (std::size_t s = 0; s < k; ++s) {
                const std::size_t i = rec.topk_indices[t * k + s];
                dp[i] += dgate[t * k + s] / mass - weighted / (mass * mass);
            }
        }
        if (lb_scale != 0.0) {
            for (std::size_t i = 0; i < n; ++i)
                dp[i] += lb_scale * rec.per_expert_fraction[i] / static_cast<double>(tokens);
        }
        double inner = 0.0;
        for (std::size_t i = 0; i < n; ++i) inner += p[i] * dp[i];
        for (std::size_t i = 0; i < n; ++i) dlogits(i, t) = p[i] * (dp[i] - inner);
    }
    g.router += matmul_nt(dlogits, cache.input);
    dx += matmul_tn(layer.router, dlogits);
    return dx;
}

void append_signature(const FfnCache& c, std::vector<std::size_t>& sig) {
    for (double v : c.pre.values()) sig.push_back(v > 0.0 ? 1 : 0);
}

ForwardState run_forward(const ToyModel& model, const TeacherSet* teachers, const Matrix& inputs,
                         std::span<const std::size_t> labels, const LossWeights& weights, const TeacherTargets* frozen,
                         bool want_signature) {
    model.validate();
    if (inputs.rows() != model.input_dim) throw Error(ErrorCode::ShapeMismatch, "total_loss: input dimension mismatch");
    if (labels.size() != inputs.cols()) throw Error(ErrorCode::ShapeMismatch, "total_loss: label count mismatch");
    if (inputs.cols() == 0) throw Error(ErrorCode::InvalidArgument, "total_loss: empty batch");
    const std::vector<std::size_t> sites = model.moe_sites();
    if (teachers && teachers->size() != sites.size())
        throw Error(ErrorCode::ShapeMismatch, "total_loss: one teacher per MoE site required");
    if (frozen && frozen->per_site.size() != sites.size())
        throw Error(ErrorCode::ShapeMismatch, "total_loss: one frozen target per MoE site required");
    const bool distill = teachers != nullptr || frozen != nullptr;

    ForwardState st;
    st.blocks.resize(model.blocks.size());
    st.report.lambda_lb = weights.lb;
    st.report.lambda_eesd = weights.eesd;
    Matrix stream = inputs;
    std::size_t site = 0;
    double eesd_sum = 0.0;
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        BlockCache& cache = st.blocks[b];
        if (const auto* dense = std::get_if<DenseFfn>(&model.blocks[b])) {
            stream += ffn_forward_cached(*dense, stream, cache.dense);
            if (want_signature) append_signature(cache.dense, st.signature);
            continue;
        }
        const MoeLayer& layer = std::get<MoeLayer>(model.blocks[b]);
        if (distill) {
            st.targets.per_site.push_back(frozen ? frozen->per_site[site]
                                                 : teacher_forward((*teachers)[site], stream));
        }
        const Matrix& y = moe_forward_cached(layer, stream, cache.moe);
        st.report.lb += load_balance_loss(cache.moe.routing);
        if (distill) eesd_sum += eesd_loss(y, st.targets.per_site.back());
        if (want_signature) {
            const RoutingRecord& rec = cache.moe.routing;
            st.signature.insert(st.signature.end(), rec.topk_indices.begin(), rec.topk_indices.end());
            st.signature.insert(st.signature.end(), rec.dropped.begin(), rec.dropped.end());
            for (const FfnCache& c : cache.moe.experts) append_signature(c, st.signature);
        }
        stream += y;
        ++site;
    }
    st.final_stream = stream;
    st.logits = matmul(model.head, stream);
    st.report.task = mean_cross_entropy(st.logits, labels);
    st.report.eesd = distill && !sites.empty() ? eesd_sum / static_cast<double>(sites.size()) : 0.0;
    st.report.total = st.report.task + weights.lb * st.report.lb + weights.eesd * st.report.eesd;
    return st;
}

}  // namespace

nlohmann::json to_json(const LossReport& r) {
    return {{"task", r.task},           {"lb", r.lb},       {"eesd", r.eesd},
            {"lambda_lb", r.lambda_lb}, {"lambda_eesd", r.lambda_eesd}, {"total", r.total}};
}

nlohmann::json to_json(const GradCheckResult& r) {
    return {{"max_rel_error", r.max_rel_error},
            {"worst_tensor", r.worst_tensor},
            {"checked", r.checked},
            {"skipped", r.skipped},
            {"teacher_analytic_max_abs", r.teacher_analytic_max_abs},
            {"teacher_numeric_max_abs", r.teacher_numeric_max_abs},
            {"teacher_checked", r.teacher_checked}};
}

TeacherSet make_teachers(const ToyModel& model, double beta) {
    TeacherSet teachers;
    for (std::size_t site : model.moe_sites()) teachers.push_back(make_teacher(model.moe(site), beta));
    return teachers;
}

void set_capacity_factor(ToyModel& model, double capacity_factor) {
    for (std::size_t site : model.moe_sites()) model.moe(site).capacity_factor = capacity_factor;
}

LossReport evaluate_loss(const ToyModel& model, const TeacherSet* teachers, const Matrix& inputs,
                         std::span<const std::size_t> labels, const LossWeights& weights, const TeacherTargets* frozen) {
    return run_forward(model, teachers, inputs, labels, weights, frozen, false).report;
}

LossResult total_loss(const ToyModel& model, const TeacherSet* teachers, const Matrix& inputs,
                      std::span<const std::size_t> labels, const LossWeights& weights, const TeacherTargets* frozen) {
    ForwardState st = run_forward(model, teachers, inputs, labels, weights, frozen, false);
    const std::vector<std::size_t> sites = model.moe_sites();
    const bool distill = !st.targets.per_site.empty();

    LossResult out;
    out.report = st.report;
    out.grad = zeros_like(model);
    if (teachers) {
        for (const EmaTeacher& t : *teachers) out.teacher_grad.push_back(zeros_like(t.mirror));
    }

    // Cross-entropy over the head.
    const double batch = static_cast<double>(inputs.cols());
    Matrix dlogits(st.logits.rows(), st.logits.cols());
    for (std::size_t t = 0; t < st.logits.cols(); ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < st.logits.rows(); ++c) mx = std::max(mx, st.logits(c, t));
        double z = 0.0;
        for (std::size_t c = 0; c < st.logits.rows(); ++c) z += std::exp(st.logits(c, t) - mx);
        for (std::size_t c = 0; c < st.logits.rows(); ++c) dlogits(c, t) = std::exp(st.logits(c, t) - mx) / z / batch;
        dlogits(labels[t], t) -= 1.0 / batch;
    }
    out.grad.head += matmul_nt(dlogits, st.final_stream);
    Matrix dstream = matmul_tn(model.head, dlogits);

    const double eesd_scale = sites.empty() ? 0.0 : weights.eesd / static_cast<double>(sites.size());
    std::size_t site = sites.size();
    for (std::size_t b = model.blocks.size(); b-- > 0;) {
        const BlockCache& cache = st.blocks[b];
        if (const auto* dense = std::get_if<DenseFfn>(&model.blocks[b])) {
            dstream += ffn_backward(*dense, cache.dense, dstream, std::get<DenseFfn>(out.grad.blocks[b]));
            continue;
        }
        --site;
        const MoeLayer& layer = std::get<MoeLayer>(model.blocks[b]);
        Matrix dy = dstream;
        if (distill && eesd_scale != 0.0) {
            // The teacher target is a constant: only the student side receives gradient.
            Matrix g = eesd_loss_grad(cache.moe.y, st.targets.per_site[site]);
            g *= eesd_scale;
            dy += g;
        }
        dstream += moe_backward(layer, cache.moe, dy, weights.lb, std::get<MoeLayer>(out.grad.blocks[b]));
    }

    for (BlockCache& c : st.blocks) {
        if (!c.moe.routing.probs.empty()) out.routing.push_back(std::move(c.moe.routing));
    }
    out.targets = std::move(st.targets);
    out.logits = std::move(st.logits);
    return out;
}

void sgd_update(std::span<double> params, std::span<const double> grads, double lr) {
    if (params.size() != grads.size()) throw Error(ErrorCode::ShapeMismatch, "sgd_update: length mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

LossReport train_step(ToyModel& model, TeacherSet* teachers, const Matrix& inputs, std::span<const std::size_t> labels,
                      double lr, const LossWeights& weights, std::vector<RoutingRecord>* routing) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::InvalidArgument, "train_step: lr must be finite and >= 0");
    LossResult res = total_loss(model, teachers, inputs, labels, weights);
    if (!std::isfinite(res.report.total)) {
        throw Error(ErrorCode::NonFiniteLoss, "non-finite loss: " + to_json(res.report).dump());
    }
    if (lr > 0.0) {
        auto params = parameter_tensors(model);
        const auto grads = parameter_tensors(std::as_const(res.grad));
        for (std::size_t i = 0; i < params.size(); ++i) sgd_update(params[i].values, grads[i].values, lr);
    }
    if (teachers) {
        const auto sites = model.moe_sites();
        for (std::size_t s = 0; s < sites.size(); ++s) ema_update((*teachers)[s], model.moe(sites[s]));
    }
    if (routing) *routing = std::move(res.routing);
    return res.report;
}

GradCheckResult grad_check(const ToyModel& model, const TeacherSet* teachers, const Matrix& inputs,
                           std::span<const std::size_t> labels, const LossWeights& weights,
                           const GradCheckOptions& options) {
    if (!(options.epsilon >= 1e-6 * (1 - 1e-12) && options.epsilon <= 1e-3))
        throw Error(ErrorCode::InvalidArgument, "grad_check: epsilon must be in [1e-6, 1e-3]");

    const LossResult analytic = total_loss(model, teachers, inputs, labels, weights);
    const TeacherTargets* frozen = analytic.targets.per_site.empty() ? nullptr : &analytic.targets;
    const ForwardState base = run_forward(model, nullptr, inputs, labels, weights, frozen, true);

    GradCheckResult result;
    auto sample_indices = [&](std::size_t size, std::uint64_t stream) {
        std::vector<std::size_t> all(size);
        std::iota(all.begin(), all.end(), std::size_t{0});
        if (size <= options.samples_per_tensor) return all;
        std::vector<std::size_t> picked;
        Rng rng(options.seed, "gradcheck", stream);
        std::sample(all.begin(), all.end(), std::back_inserter(picked),
                    static_cast<std::ptrdiff_t>(options.samples_per_tensor), rng.engine());
        return picked;
    };

    ToyModel probe = model;
    auto params = parameter_tensors(probe);
    const auto grads = parameter_tensors(analytic.grad);
    const double eps = options.epsilon;
    for (std::size_t ti = 0; ti < params.size(); ++ti) {
        for (std::size_t idx : sample_indices(params[ti].values.size(), ti)) {
            double& p = params[ti].values[idx];
            const double saved = p;
            p = saved + eps;
            const ForwardState plus = run_forward(probe, nullptr, inputs, labels, weights, frozen, true);
            p = saved - eps;
            const ForwardState minus = run_forward(probe, nullptr, inputs, labels, weights, frozen, true);
            p = saved;
            if (plus.signature != base.signature || minus.signature != base.signature) {
                ++result.skipped;
                continue;
            }
            const double numeric = (plus.report.total - minus.report.total) / (2.0 * eps);
            const double err = std::abs(grads[ti].values[idx] - numeric) / std::max(1.0, std::abs(numeric));
            ++result.checked;
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_tensor = params[ti].name;
            }
        }
    }

    // Stop-gradient contract: the loss sees the teacher only through its
    // (constant) targets, so perturbing teacher parameters must not move it.
    if (teachers) {
        for (const MoeLayer& g : analytic.teacher_grad) {
            for (const auto& v : layer_tensors(g, ""))
                for (double x : v.values) result.teacher_analytic_max_abs = std::max(result.teacher_analytic_max_abs, std::abs(x));
        }
        TeacherSet teacher_probe = *teachers;
        const double reference = base.report.total;
        for (std::size_t s = 0; s < teacher_probe.size(); ++s) {
            auto views = layer_tensors(teacher_probe[s].mirror, "");
            for (std::size_t ti = 0; ti < views.size(); ++ti) {
                for (std::size_t idx : sample_indices(views[ti].values.size(), 1'000'000 + s * 1000 + ti)) {
                    double& p = views[ti].values[idx];
                    const double saved = p;
                    p = saved + eps;
                    const double up = evaluate_loss(model, &teacher_probe, inputs, labels, weights, frozen).total;
                    p = saved - eps;
                    const double down = evaluate_loss(model, &teacher_probe, inputs, labels, weights, frozen).total;
                    p = saved;
                    const double numeric = std::max(std::abs(up - reference), std::abs(down - reference)) / eps;
                    result.teacher_numeric_max_abs = std::max(result.teacher_numeric_max_abs, numeric);
                    ++result.teacher_checked;
                }
            }
        }
    }
    return result;
}

}  // namespace clusterup
