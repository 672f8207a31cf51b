// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <mutex>
#include <thread>

#include "clusterup/analysis.hpp"
#include "clusterup/checkpoint.hpp"
#include "clusterup/error.hpp"
#include "clusterup/random.hpp"

namespace clusterup {

namespace {

using nlohmann::json;

RoutingOptions routing_options(const PipelineConfig& c) {
    return RoutingOptions{c.moe.k, c.moe.capacity_train, c.moe.router_scale};
}

double router_scale(const PipelineConfig& c) {
    return c.moe.router_scale > 0.0 ? c.moe.router_scale : 1.0 / std::sqrt(static_cast<double>(c.model.d));
}

json seeds_json(const PipelineConfig& c) {
    json sites = json::object();
    for (std::size_t s : upcycle_sites(c.model.blocks)) sites[std::to_string(s)] = site_seed(c.seed, s);
    return {{"root", c.seed}, {"sites", sites}};
}

std::string method_key(InitMethod m) { return to_string(m); }

InitMethod method_of(const PipelineConfig& c, const CommandArgs& args) {
    return parse_init_method(args.method.empty() ? c.init.method : args.method);
}

std::string stem_in(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

Checkpoint require_checkpoint(const std::string& stem, const std::string& hint) {
    if (!checkpoint_exists(stem)) throw Error(ErrorCode::MissingInput, "missing " + stem + ".json/.bin (run " + hint + " first)");
    return load_checkpoint(stem);
}

// Trained checkpoint if present, else the freshly upcycled one.
std::string default_moe_stem(const std::string& dir, InitMethod m) {
    const std::string trained = stem_in(dir, "moe_" + method_key(m) + "_trained");
    return checkpoint_exists(trained) ? trained : stem_in(dir, "moe_" + method_key(m));
}

class JsonLinesWriter {
public:
    explicit JsonLinesWriter(const std::string& path) : out_(path, std::ios::trunc) {
        if (!out_) throw Error(ErrorCode::Io, "cannot write '" + path + "'");
    }
    void operator()(const StepLog& entry) { out_ << to_json(entry).dump() << '\n'; }

private:
    std::ofstream out_;
};

}  // namespace

DataSplit make_data(const PipelineConfig& c) {
    const SyntheticDataset all = make_synthetic_dataset(c.model.d, c.model.n_classes, c.data.n_clusters,
                                                        c.data.n + c.data.n_eval, c.data.separation, c.seed);
    std::vector<std::size_t> train(c.data.n), eval(c.data.n_eval);
    std::iota(train.begin(), train.end(), std::size_t{0});
    std::iota(eval.begin(), eval.end(), c.data.n);
    return {all.subset(train), all.subset(eval)};
}

std::vector<std::size_t> upcycle_sites(std::size_t n_blocks) {
    std::vector<std::size_t> sites;
    for (std::size_t b = 1; b < n_blocks; b += 2) sites.push_back(b);
    return sites;
}

std::uint64_t site_seed(std::uint64_t root, std::size_t site) {
    Rng rng(root, "site", site);
    return rng.engine()();
}

ToyModel pretrain_dense(const PipelineConfig& c, const SyntheticDataset& train,
                        const std::function<void(const StepLog&)>& on_step) {
    ToyModel model = make_dense_model(c.model.d, c.model.h, c.model.blocks, c.model.n_classes, c.seed);
    TrainOptions o;
    o.steps = c.dense_train.steps;
    o.lr = c.dense_train.lr;
    o.batch = c.dense_train.batch;
    o.weights = {0.0, 0.0};
    o.seed = c.seed;
    o.batch_stream = "dense_batches";
    train_model(model, nullptr, train, o, on_step);
    return model;
}

ActivationBank capture_bank(const PipelineConfig& c, const ToyModel& dense, const SyntheticDataset& train) {
    const std::vector<std::size_t> sites = upcycle_sites(dense.blocks.size());
    return capture_activations(dense, train.inputs, sites, c.calibration.token_cap, c.seed);
}

UpcycleOutcome upcycle_model(const PipelineConfig& c, const ToyModel& dense, const ActivationBank* bank,
                             InitMethod method) {
    UpcycleOutcome out;
    out.model = dense;
    const RoutingOptions routing = routing_options(c);
    for (std::size_t site : upcycle_sites(dense.blocks.size())) {
        if (dense.is_moe(site)) throw Error(ErrorCode::InvalidArgument, "upcycle: model is already upcycled");
        const DenseFfn& ffn = dense.dense(site);
        const std::uint64_t seed = site_seed(c.seed, site);
        InitReport report;
        report.method = method;
        switch (method) {
            case InitMethod::sparse:
                out.model.blocks[site] = sparse_init(ffn, c.moe.n_experts, seed, router_scale(c), routing);
                break;
            case InitMethod::drop:
                out.model.blocks[site] = drop_init(ffn, c.moe.n_experts, c.init.drop_ratio, seed, routing);
                break;
            case InitMethod::drop_svd:
                out.model.blocks[site] = drop_svd_init(ffn, c.moe.n_experts, c.init.drop_svd_fraction, seed, routing);
                break;
            case InitMethod::cluster_aware: {
                if (!bank) throw Error(ErrorCode::MissingInput, "cluster-aware upcycling needs an activation bank");
                auto it = bank->per_site.find(site);
                if (it == bank->per_site.end())
                    throw Error(ErrorCode::MissingInput, "activation bank has no site " + std::to_string(site));
                ClusterAwareOptions options;
                options.routing = routing;
                options.pca_factor = c.init.pca_factor;
                options.max_kmeans_iters = c.init.max_kmeans_iters;
                ClusterAwareResult r = cluster_aware_init(ffn, it->second, c.moe.n_experts, c.init.tau, seed, options);
                out.model.blocks[site] = std::move(r.layer);
                report = std::move(r.report);
                out.clusters.emplace(site, std::move(r.clusters));
                break;
            }
        }
        out.reports.emplace(site, std::move(report));
    }
    out.model.validate();
    return out;
}

MoeTrainOutcome train_moe(const PipelineConfig& c, ToyModel& model, const SyntheticDataset& train, bool eesd,
                          const std::function<void(const StepLog&)>& on_step) {
    MoeTrainOutcome out;
    set_capacity_factor(model, c.moe.capacity_train);
    if (eesd) out.teachers = make_teachers(model, c.train.beta);
    TrainOptions o;
    o.steps = c.train.steps;
    o.lr = c.train.lr;
    o.batch = c.train.batch;
    o.weights = {c.train.lambda_lb, eesd ? c.train.lambda_eesd : 0.0};
    o.seed = c.seed;
    o.batch_stream = "moe_batches";
    out.log = train_model(model, out.teachers ? &*out.teachers : nullptr, train, o, on_step);
    return out;
}

EvalMetrics evaluate_model(const PipelineConfig& c, const ToyModel& trained, const SyntheticDataset& eval) {
    ToyModel model = trained;
    set_capacity_factor(model, c.moe.capacity_eval);
    EvalMetrics m;
    const ForwardTrace trace = forward(model, eval.inputs);
    m.task_loss = mean_cross_entropy(trace.logits, eval.labels);
    m.accuracy = accuracy(trace.logits, eval.labels);
    if (model.moe_sites().empty()) return m;

    const AnalysisReport report = analyze_model(model, eval.inputs);
    m.min_utilization = std::numeric_limits<double>::infinity();
    m.max_utilization = 0.0;
    double rc_sum = 0.0;
    std::size_t rc_count = 0;
    for (const auto& [site, a] : report.per_site) {
        m.mean_similarity += a.mean_pairwise_similarity;
        m.mean_routing_entropy += a.mean_routing_entropy;
        m.drop_rate += a.drop_rate;
        for (double u : a.utilization) {
            m.min_utilization = std::min(m.min_utilization, u);
            m.max_utilization = std::max(m.max_utilization, u);
        }
        if (a.rc) {
            rc_sum += *a.rc;
            ++rc_count;
        }
    }
    const auto n = static_cast<double>(report.per_site.size());
    m.mean_similarity /= n;
    m.mean_routing_entropy /= n;
    m.drop_rate /= n;
    m.rc_mean = rc_count ? rc_sum / static_cast<double>(rc_count) : std::numeric_limits<double>::quiet_NaN();
    return m;
}

json to_json(const EvalMetrics& m) {
    return {{"task_loss", m.task_loss},
            {"accuracy", m.accuracy},
            {"mean_similarity", m.mean_similarity},
            {"mean_routing_entropy", m.mean_routing_entropy},
            {"min_utilization", m.min_utilization},
            {"max_utilization", m.max_utilization},
            {"drop_rate", m.drop_rate},
            {"rc_mean", std::isnan(m.rc_mean) ? json(nullptr) : json(m.rc_mean)}};
}

std::vector<CompareRow> run_compare(const PipelineConfig& base, std::size_t n_seeds, std::size_t threads) {
    static constexpr InitMethod kMethods[] = {InitMethod::sparse, InitMethod::drop, InitMethod::drop_svd,
                                              InitMethod::cluster_aware};
    std::vector<std::vector<CompareRow>> per_seed(n_seeds);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < n_seeds; i = next++) {
            try {
                PipelineConfig c = base;
                c.seed = base.seed + i;
                const DataSplit data = make_data(c);
                const ToyModel dense = pretrain_dense(c, data.train);
                const ActivationBank bank = capture_bank(c, dense, data.train);
                for (InitMethod method : kMethods) {
                    UpcycleOutcome up = upcycle_model(c, dense, &bank, method);
                    train_moe(c, up.model, data.train, c.train.eesd);
                    per_seed[i].push_back({c.seed, method_key(method), evaluate_model(c, up.model, data.eval)});
                }
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n_seeds, 1));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    std::vector<CompareRow> rows;
    for (auto& group : per_seed) rows.insert(rows.end(), group.begin(), group.end());
    return rows;
}

void write_compare_csv(std::ostream& out, const std::vector<CompareRow>& rows) {
    out << "seed,method,task_loss,accuracy,mean_similarity,mean_routing_entropy,min_utilization,max_utilization,"
           "drop_rate,rc_mean\n";
    out << std::setprecision(17);
    for (const CompareRow& r : rows) {
        const EvalMetrics& m = r.metrics;
        out << r.seed << ',' << r.method << ',' << m.task_loss << ',' << m.accuracy << ',' << m.mean_similarity << ','
            << m.mean_routing_entropy << ',' << m.min_utilization << ',' << m.max_utilization << ',' << m.drop_rate << ',';
        if (std::isnan(m.rc_mean)) out << "nan";
        else out << m.rc_mean;
        out << '\n';
    }
}

void execute(const CommandArgs& args, std::ostream& out) {
    PipelineConfig c = args.config_path.empty() ? PipelineConfig{} : load_config(args.config_path);
    if (const char* dir = std::getenv(kOutputDirEnv); dir && *dir) c.output_dir = dir;
    c.validate();
    const std::string dir = c.output_dir;
    std::filesystem::create_directories(dir);
    const json config_json = to_json(c);

    auto save_model = [&](const std::string& name, const ToyModel& model, const TeacherSet* teachers,
                          const std::string& kind) {
        Checkpoint ckpt = model_checkpoint(model, teachers, kind);
        ckpt.config = config_json;
        ckpt.seeds = seeds_json(c);
        save_checkpoint(stem_in(dir, name), ckpt);
        return stem_in(dir, name);
    };

    if (args.command == "train-dense") {
        const DataSplit data = make_data(c);
        JsonLinesWriter log(stem_in(dir, "dense_train.jsonl"));
        const ToyModel dense = pretrain_dense(c, data.train, std::ref(log));
        const std::string stem = save_model("dense", dense, nullptr, "dense_model");
        const EvalMetrics m = evaluate_model(c, dense, data.eval);
        out << json{{"checkpoint", stem}, {"eval", {{"task_loss", m.task_loss}, {"accuracy", m.accuracy}}}}.dump() << '\n';
        return;
    }

    if (args.command == "capture") {
        const ToyModel dense = model_from_checkpoint(require_checkpoint(stem_in(dir, "dense"), "train-dense"));
        const DataSplit data = make_data(c);
        Checkpoint ckpt = bank_checkpoint(capture_bank(c, dense, data.train));
        ckpt.config = config_json;
        ckpt.seeds = seeds_json(c);
        save_checkpoint(stem_in(dir, "bank"), ckpt);
        out << json{{"checkpoint", stem_in(dir, "bank")}}.dump() << '\n';
        return;
    }

    if (args.command == "upcycle") {
        const InitMethod method = method_of(c, args);
        const ToyModel dense = model_from_checkpoint(require_checkpoint(stem_in(dir, "dense"), "train-dense"));
        std::optional<ActivationBank> bank;
        if (method == InitMethod::cluster_aware)
            bank = bank_from_checkpoint(require_checkpoint(stem_in(dir, "bank"), "capture"));
        const UpcycleOutcome up = upcycle_model(c, dense, bank ? &*bank : nullptr, method);
        const std::string stem = save_model("moe_" + method_key(method), up.model, nullptr, "moe_model");

        json reports = json::object();
        for (const auto& [site, r] : up.reports) reports[std::to_string(site)] = to_json(r);
        const std::string report_path = stem_in(dir, "init_report_" + method_key(method) + ".json");
        write_json(report_path, {{"method", method_key(method)}, {"sites", reports}, {"config", config_json}});

        if (!up.clusters.empty()) {
            Checkpoint ck;
            ck.kind = "cluster_model";
            ck.config = config_json;
            ck.seeds = seeds_json(c);
            json sites = json::array();
            for (const auto& [site, cm] : up.clusters) {
                const std::string p = "site." + std::to_string(site) + ".";
                sites.push_back(site);
                ck.tensors.push_back(from_matrix(p + "centroids", cm.centroids));
                ck.tensors.push_back(from_matrix(p + "input_centroids", cm.input_centroids));
                Matrix assign(1, cm.assignments.size());
                for (std::size_t i = 0; i < cm.assignments.size(); ++i) assign(0, i) = static_cast<double>(cm.assignments[i]);
                ck.tensors.push_back(from_matrix(p + "assignments", assign));
            }
            ck.meta = {{"sites", sites}};
            save_checkpoint(stem_in(dir, "clusters_" + method_key(method)), ck);
        }
        out << json{{"checkpoint", stem}, {"init_report", report_path}}.dump() << '\n';
        return;
    }

    if (args.command == "train-moe") {
        const InitMethod method = method_of(c, args);
        const std::string name = "moe_" + method_key(method);
        ToyModel model = model_from_checkpoint(require_checkpoint(stem_in(dir, name), "upcycle --method " + method_key(method)));
        if (args.steps) c.train.steps = *args.steps;
        const bool eesd = args.eesd || c.train.eesd;
        const DataSplit data = make_data(c);
        JsonLinesWriter log(stem_in(dir, "train_" + method_key(method) + ".jsonl"));
        const MoeTrainOutcome run = train_moe(c, model, data.train, eesd, std::ref(log));
        const std::string stem = save_model(name + "_trained", model, run.teachers ? &*run.teachers : nullptr, "moe_model");
        out << json{{"checkpoint", stem}, {"steps", c.train.steps}, {"eesd", eesd},
                    {"eval", to_json(evaluate_model(c, model, data.eval))}}.dump()
            << '\n';
        return;
    }

    if (args.command == "analyze") {
        const std::string stem = args.checkpoint.empty() ? default_moe_stem(dir, method_of(c, args))
                                                         : stem_in(dir, args.checkpoint);
        const ToyModel model = model_from_checkpoint(require_checkpoint(stem, "upcycle"));
        ToyModel eval_model = model;
        set_capacity_factor(eval_model, c.moe.capacity_eval);
        const DataSplit data = make_data(c);
        const AnalysisReport report = analyze_model(eval_model, data.eval.inputs);
        const std::string base = stem_in(dir, "analysis_" + std::filesystem::path(stem).filename().string());
        std::ofstream csv(base + ".csv", std::ios::trunc);
        if (!csv) throw Error(ErrorCode::Io, "cannot write '" + base + ".csv'");
        write_analysis_csv(csv, report);
        json j = to_json(report);
        j["config"] = config_json;
        write_json(base + ".json", j);
        out << json{{"csv", base + ".csv"}, {"json", base + ".json"}}.dump() << '\n';
        return;
    }

    if (args.command == "gradcheck") {
        const std::string stem = args.checkpoint.empty() ? default_moe_stem(dir, method_of(c, args))
                                                         : stem_in(dir, args.checkpoint);
        const Checkpoint ckpt = require_checkpoint(stem, "upcycle");
        const ToyModel model = model_from_checkpoint(ckpt);
        std::optional<TeacherSet> teachers = teachers_from_checkpoint(ckpt);
        if (!teachers && !model.moe_sites().empty()) teachers = make_teachers(model, c.train.beta);
        const DataSplit data = make_data(c);
        std::vector<std::size_t> picked;
        std::vector<std::size_t> all(data.train.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        Rng rng(c.seed, "gradcheck_batch");
        std::sample(all.begin(), all.end(), std::back_inserter(picked),
                    static_cast<std::ptrdiff_t>(std::min(c.train.batch, all.size())), rng.engine());
        const SyntheticDataset batch = data.train.subset(picked);
        GradCheckOptions options;
        options.epsilon = args.epsilon;
        options.seed = c.seed;
        const GradCheckResult r = grad_check(model, teachers ? &*teachers : nullptr, batch.inputs, batch.labels,
                                             {c.train.lambda_lb, c.train.lambda_eesd}, options);
        json j = to_json(r);
        j["checkpoint"] = stem;
        j["epsilon"] = args.epsilon;
        j["config"] = config_json;
        write_json(stem_in(dir, "gradcheck.json"), j);
        out << to_json(r).dump() << '\n';
        return;
    }

    if (args.command == "compare") {
        if (args.seeds == 0) throw Error(ErrorCode::InvalidArgument, "compare: --seeds must be positive");
        const std::vector<CompareRow> rows = run_compare(c, args.seeds, args.threads);
        const std::string path = stem_in(dir, "compare.csv");
        std::ofstream csv(path, std::ios::trunc);
        if (!csv) throw Error(ErrorCode::Io, "cannot write '" + path + "'");
        write_compare_csv(csv, rows);
        out << json{{"csv", path}, {"rows", rows.size()}}.dump() << '\n';
        return;
    }

    throw Error(ErrorCode::InvalidArgument, "unknown command '" + args.command + "'");
}

}  // namespace clusterup
