// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "clusterup/error.hpp"
#include "clusterup/upcycle.hpp"

namespace clusterup {

namespace {

using nlohmann::json;

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); }

// Reads a JSON object field by field, remembering which keys were consumed so
// that anything left over can be reported.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) invalid(path_ + ": expected an object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
                if (!it->is_number_integer() || it->template get<std::int64_t>() < 0) invalid(where(key) + ": expected a non-negative integer");
            } else if constexpr (std::is_same_v<T, double>) {
                if (!it->is_number()) invalid(where(key) + ": expected a number");
            } else if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) invalid(where(key) + ": expected a boolean");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string()) invalid(where(key) + ": expected a string");
            }
            out = it->get<T>();
        } catch (const json::exception& e) {
            invalid(where(key) + ": " + e.what());
        }
    }

    Section child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        static const json empty = json::object();
        return Section(it == j_.end() ? empty : *it, where(key));
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) invalid("unknown key '" + where(key) + "'");
        }
    }

private:
    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void require(bool ok, const std::string& what) {
    if (!ok) invalid(what);
}

}  // namespace

void PipelineConfig::validate() const {
    require(model.d >= 2, "model.d must be >= 2");
    require(model.h >= 1, "model.h must be >= 1");
    require(model.blocks >= 2, "model.blocks must be >= 2");
    require(model.n_classes >= 2, "model.n_classes must be >= 2");
    require(data.n_clusters >= model.n_classes, "data.n_clusters must be >= model.n_classes");
    require(data.n >= 1 && data.n_eval >= 1, "data.n and data.n_eval must be positive");
    require(data.separation > 0.0, "data.separation must be > 0");
    require(moe.n_experts >= 2, "moe.n_experts must be >= 2");
    require(moe.k >= 1 && moe.k <= moe.n_experts, "moe.k must be in [1, n_experts]");
    require(moe.capacity_train > 0.0 && moe.capacity_eval > 0.0, "moe capacity factors must be > 0");
    require(std::isfinite(moe.router_scale), "moe.router_scale must be finite");
    try {
        (void)parse_init_method(init.method);
    } catch (const Error&) {
        invalid("init.method must be one of sparse, drop, drop-svd, cluster");
    }
    require(init.drop_ratio >= 0.0 && init.drop_ratio <= 1.0, "init.drop_ratio must be in [0, 1]");
    require(init.drop_svd_fraction >= 0.0 && init.drop_svd_fraction < 1.0, "init.drop_svd_fraction must be in [0, 1)");
    require(init.tau > 0.0 && init.tau <= 1.0, "init.tau must be in (0, 1]");
    require(init.max_kmeans_iters >= 1, "init.max_kmeans_iters must be >= 1");
    require(init.pca_factor >= 1, "init.pca_factor must be >= 1");
    require(dense_train.lr >= 0.0 && std::isfinite(dense_train.lr), "dense_train.lr must be finite and >= 0");
    require(dense_train.batch >= 1, "dense_train.batch must be >= 1");
    require(train.lr >= 0.0 && std::isfinite(train.lr), "train.lr must be finite and >= 0");
    require(train.batch >= 1, "train.batch must be >= 1");
    require(train.lambda_lb >= 0.0 && train.lambda_eesd >= 0.0, "train lambdas must be >= 0");
    require(train.beta >= 0.0 && train.beta <= 1.0, "train.beta must be in [0, 1]");
    require(calibration.token_cap >= moe.n_experts, "calibration.token_cap must be >= moe.n_experts");
    require(!output_dir.empty(), "output_dir must not be empty");
}

nlohmann::json to_json(const PipelineConfig& c) {
    return {
        {"seed", c.seed},
        {"model", {{"d", c.model.d}, {"h", c.model.h}, {"blocks", c.model.blocks}, {"n_classes", c.model.n_classes}}},
        {"data",
         {{"n", c.data.n}, {"n_eval", c.data.n_eval}, {"n_clusters", c.data.n_clusters}, {"separation", c.data.separation}}},
        {"moe",
         {{"n_experts", c.moe.n_experts},
          {"k", c.moe.k},
          {"capacity_train", c.moe.capacity_train},
          {"capacity_eval", c.moe.capacity_eval},
          {"router_scale", c.moe.router_scale}}},
        {"init",
         {{"method", c.init.method},
          {"drop_ratio", c.init.drop_ratio},
          {"drop_svd_fraction", c.init.drop_svd_fraction},
          {"tau", c.init.tau},
          {"max_kmeans_iters", c.init.max_kmeans_iters},
          {"pca_factor", c.init.pca_factor}}},
        {"dense_train", {{"steps", c.dense_train.steps}, {"lr", c.dense_train.lr}, {"batch", c.dense_train.batch}}},
        {"train",
         {{"steps", c.train.steps},
          {"lr", c.train.lr},
          {"batch", c.train.batch},
          {"lambda_lb", c.train.lambda_lb},
          {"lambda_eesd", c.train.lambda_eesd},
          {"beta", c.train.beta},
          {"eesd", c.train.eesd}}},
        {"calibration", {{"token_cap", c.calibration.token_cap}}},
        {"output_dir", c.output_dir},
    };
}

PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    Section root(j, "");
    root.read("seed", c.seed);
    root.read("output_dir", c.output_dir);

    Section model = root.child("model");
    model.read("d", c.model.d);
    model.read("h", c.model.h);
    model.read("blocks", c.model.blocks);
    model.read("n_classes", c.model.n_classes);
    model.finish();

    Section data = root.child("data");
    data.read("n", c.data.n);
    data.read("n_eval", c.data.n_eval);
    data.read("n_clusters", c.data.n_clusters);
    data.read("separation", c.data.separation);
    data.finish();

    Section moe = root.child("moe");
    moe.read("n_experts", c.moe.n_experts);
    moe.read("k", c.moe.k);
    moe.read("capacity_train", c.moe.capacity_train);
    moe.read("capacity_eval", c.moe.capacity_eval);
    moe.read("router_scale", c.moe.router_scale);
    moe.finish();

    Section init = root.child("init");
    init.read("method", c.init.method);
    init.read("drop_ratio", c.init.drop_ratio);
    init.read("drop_svd_fraction", c.init.drop_svd_fraction);
    init.read("tau", c.init.tau);
    init.read("max_kmeans_iters", c.init.max_kmeans_iters);
    init.read("pca_factor", c.init.pca_factor);
    init.finish();

    Section dense = root.child("dense_train");
    dense.read("steps", c.dense_train.steps);
    dense.read("lr", c.dense_train.lr);
    dense.read("batch", c.dense_train.batch);
    dense.finish();

    Section train = root.child("train");
    train.read("steps", c.train.steps);
    train.read("lr", c.train.lr);
    train.read("batch", c.train.batch);
    train.read("lambda_lb", c.train.lambda_lb);
    train.read("lambda_eesd", c.train.lambda_eesd);
    train.read("beta", c.train.beta);
    train.read("eesd", c.train.eesd);
    train.finish();

    Section cal = root.child("calibration");
    cal.read("token_cap", c.calibration.token_cap);
    cal.finish();

    root.finish();
    c.validate();
    return c;
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingInput, "cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/false);
    } catch (const nlohmann::json::parse_error& e) {
        invalid(path + ": " + e.what());
    }
    return config_from_json(j);
}

}  // namespace clusterup
