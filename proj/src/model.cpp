// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "clusterup/error.hpp"
#include "clusterup/random.hpp"

namespace clusterup {

namespace {

constexpr int kDirectionRetries = 1000;
constexpr int kDatasetRestarts = 50;

void add_ffn_views(DenseFfn& f, const std::string& p, std::vector<TensorView>& out) {
    out.push_back({p + "w1", f.w1.rows(), f.w1.cols(), f.w1.values()});
    out.push_back({p + "b1", 1, f.b1.size(), f.b1});
    out.push_back({p + "w2", f.w2.rows(), f.w2.cols(), f.w2.values()});
    out.push_back({p + "b2", 1, f.b2.size(), f.b2});
}

template <typename View>
std::vector<ConstTensorView> to_const(const std::vector<View>& views) {
    std::vector<ConstTensorView> out;
    out.reserve(views.size());
    for (const auto& v : views) out.push_back({v.name, v.rows, v.cols, v.values});
    return out;
}

DenseFfn zero_ffn(const DenseFfn& f) {
    DenseFfn z;
    z.w1 = Matrix(f.w1.rows(), f.w1.cols());
    z.b1.assign(f.b1.size(), 0.0);
    z.w2 = Matrix(f.w2.rows(), f.w2.cols());
    z.b2.assign(f.b2.size(), 0.0);
    z.activation = f.activation;
    return z;
}

}  // namespace

std::vector<std::size_t> ToyModel::moe_sites() const {
    std::vector<std::size_t> sites;
    for (std::size_t b = 0; b < blocks.size(); ++b)
        if (std::holds_alternative<MoeLayer>(blocks[b])) sites.push_back(b);
    return sites;
}

void ToyModel::validate() const {
    if (head.cols() != input_dim || head.rows() < 2) throw Error(ErrorCode::ShapeMismatch, "ToyModel: head must be n_classes x d");
    for (const Block& b : blocks) {
        std::visit(
            [&](const auto& layer) {
                layer.validate();
                if (layer.input_dim() != input_dim) throw Error(ErrorCode::ShapeMismatch, "ToyModel: block width mismatch");
            },
            b);
    }
}

SyntheticDataset SyntheticDataset::subset(std::span<const std::size_t> indices) const {
    SyntheticDataset s;
    s.inputs = select_columns(inputs, indices);
    for (std::size_t i : indices) {
        s.labels.push_back(labels.at(i));
        s.clusters.push_back(clusters.at(i));
    }
    s.directions = directions;
    s.n_classes = n_classes;
    s.n_clusters = n_clusters;
    s.separation = separation;
    s.seed = seed;
    return s;
}

ToyModel make_dense_model(std::size_t d, std::size_t h, std::size_t n_blocks, std::size_t n_classes, std::uint64_t seed) {
    if (d == 0 || h == 0 || n_classes < 2) throw Error(ErrorCode::InvalidArgument, "make_dense_model: bad dimensions");
    ToyModel model;
    model.input_dim = d;
    for (std::size_t b = 0; b < n_blocks; ++b) {
        Rng rng(seed, "dense_init", b);
        DenseFfn f;
        f.w1 = rng.normal_matrix(h, d, std::sqrt(2.0 / static_cast<double>(d)));
        f.b1.assign(h, 0.0);
        f.w2 = rng.normal_matrix(d, h, 0.5 / std::sqrt(static_cast<double>(h)));
        f.b2.assign(d, 0.0);
        model.blocks.emplace_back(std::move(f));
    }
    Rng head_rng(seed, "head_init");
    model.head = head_rng.normal_matrix(n_classes, d, 1.0 / std::sqrt(static_cast<double>(d)));
    return model;
}

ForwardTrace forward(const ToyModel& model, const Matrix& x) {
    if (x.rows() != model.input_dim) throw Error(ErrorCode::ShapeMismatch, "forward: input dimension mismatch");
    ForwardTrace trace;
    Matrix stream = x;
    for (const Block& block : model.blocks) {
        trace.block_inputs.push_back(stream);
        if (const auto* dense = std::get_if<DenseFfn>(&block)) {
            stream += ffn_forward(*dense, stream);
        } else {
            MoeOutput out = moe_forward(std::get<MoeLayer>(block), stream);
            stream += out.y;
            trace.routing.push_back(std::move(out.routing));
        }
    }
    trace.logits = matmul(model.head, stream);
    return trace;
}

SyntheticDataset make_synthetic_dataset(std::size_t d, std::size_t n_classes, std::size_t n_clusters, std::size_t n,
                                        double separation, std::uint64_t seed) {
    if (n_classes < 2 || n_clusters < n_classes)
        throw Error(ErrorCode::InvalidArgument, "make_synthetic_dataset: need n_clusters >= n_classes >= 2");
    if (d == 0 || !(separation > 0.0))
        throw Error(ErrorCode::InvalidArgument, "make_synthetic_dataset: need d >= 1 and separation > 0");

    const double max_cos = 1.0 / separation;
    Rng dir_rng(seed, "data_directions");
    Matrix directions(n_clusters, d);
    bool placed_all = false;
    for (int restart = 0; restart < kDatasetRestarts && !placed_all; ++restart) {
        placed_all = true;
        for (std::size_t c = 0; c < n_clusters && placed_all; ++c) {
            bool placed = false;
            for (int attempt = 0; attempt < kDirectionRetries && !placed; ++attempt) {
                std::vector<double> v(d);
                for (double& x : v) x = dir_rng.normal();
                const double nv = norm(v);
                if (nv == 0.0) continue;
                for (double& x : v) x /= nv;
                placed = true;
                for (std::size_t prev = 0; prev < c; ++prev) {
                    if (dot(directions.row(prev), v) >= max_cos) {
                        placed = false;
                        break;
                    }
                }
                if (placed) std::copy(v.begin(), v.end(), directions.row(c).begin());
            }
            placed_all = placed;
        }
    }
    if (!placed_all) {
        throw Error(ErrorCode::SeparationInfeasible,
                    "could not place " + std::to_string(n_clusters) + " directions with pairwise cosine < " +
                        std::to_string(max_cos));
    }

    SyntheticDataset ds;
    ds.directions = directions;
    ds.n_classes = n_classes;
    ds.n_clusters = n_clusters;
    ds.separation = separation;
    ds.seed = seed;
    ds.inputs = Matrix(d, n);
    ds.labels.resize(n);
    ds.clusters.resize(n);

    Rng point_rng(seed, "data_points");
    const double noise = std::isfinite(separation) ? 1.0 / (separation * std::sqrt(static_cast<double>(d))) : 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t c = point_rng.uniform_index(n_clusters);
        ds.clusters[j] = c;
        ds.labels[j] = c % n_classes;
        for (std::size_t r = 0; r < d; ++r) {
            const double eps = noise > 0.0 ? point_rng.normal(0.0, noise) : 0.0;
            ds.inputs(r, j) = directions(c, r) + eps;
        }
    }
    return ds;
}

std::vector<TensorView> layer_tensors(MoeLayer& layer, const std::string& prefix) {
    std::vector<TensorView> out;
    out.push_back({prefix + "router", layer.router.rows(), layer.router.cols(), layer.router.values()});
    for (std::size_t e = 0; e < layer.experts.size(); ++e)
        add_ffn_views(layer.experts[e], prefix + "experts." + std::to_string(e) + ".", out);
    return out;
}

std::vector<ConstTensorView> layer_tensors(const MoeLayer& layer, const std::string& prefix) {
    return to_const(layer_tensors(const_cast<MoeLayer&>(layer), prefix));
}

std::vector<TensorView> parameter_tensors(ToyModel& model, const std::string& prefix) {
    std::vector<TensorView> out;
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        const std::string p = prefix + "blocks." + std::to_string(b) + ".";
        if (auto* dense = std::get_if<DenseFfn>(&model.blocks[b])) {
            add_ffn_views(*dense, p, out);
        } else {
            auto views = layer_tensors(std::get<MoeLayer>(model.blocks[b]), p);
            out.insert(out.end(), views.begin(), views.end());
        }
    }
    out.push_back({prefix + "head", model.head.rows(), model.head.cols(), model.head.values()});
    return out;
}

std::vector<ConstTensorView> parameter_tensors(const ToyModel& model, const std::string& prefix) {
    return to_const(parameter_tensors(const_cast<ToyModel&>(model), prefix));
}

MoeLayer zeros_like(const MoeLayer& layer) {
    MoeLayer z;
    z.router = Matrix(layer.router.rows(), layer.router.cols());
    z.k = layer.k;
    z.capacity_factor = layer.capacity_factor;
    for (const auto& e : layer.experts) z.experts.push_back(zero_ffn(e));
    return z;
}

ToyModel zeros_like(const ToyModel& model) {
    ToyModel z;
    z.input_dim = model.input_dim;
    z.head = Matrix(model.head.rows(), model.head.cols());
    for (const Block& b : model.blocks) {
        if (const auto* dense = std::get_if<DenseFfn>(&b)) {
            z.blocks.emplace_back(zero_ffn(*dense));
        } else {
            z.blocks.emplace_back(zeros_like(std::get<MoeLayer>(b)));
        }
    }
    return z;
}

double mean_cross_entropy(const Matrix& logits, std::span<const std::size_t> labels) {
    if (logits.cols() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "mean_cross_entropy: label count mismatch");
    double total = 0.0;
    for (std::size_t t = 0; t < logits.cols(); ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < logits.rows(); ++c) mx = std::max(mx, logits(c, t));
        double z = 0.0;
        for (std::size_t c = 0; c < logits.rows(); ++c) z += std::exp(logits(c, t) - mx);
        total += mx + std::log(z) - logits(labels[t], t);
    }
    return total / static_cast<double>(logits.cols());
}

double accuracy(const Matrix& logits, std::span<const std::size_t> labels) {
    std::size_t correct = 0;
    for (std::size_t t = 0; t < logits.cols(); ++t) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < logits.rows(); ++c)
            if (logits(c, t) > logits(arg, t)) arg = c;
        if (arg == labels[t]) ++correct;
    }
    return logits.cols() ? static_cast<double>(correct) / static_cast<double>(logits.cols()) : 0.0;
}

}  // namespace clusterup
