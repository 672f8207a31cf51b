// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include <exception>
#include <iostream>
#include <string>
#include <string_view>

#include "CLI11.hpp"
#include "clusterup/config.hpp"
#include "clusterup/error.hpp"
#include "clusterup/pipeline.hpp"
#include "json.hpp"

namespace {

int report_error(std::string_view code, const std::string& message) {
    std::cerr << nlohmann::json{{"error", code}, {"message", message}}.dump() << '\n';
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cluster-aware upcycling of dense FFNs into mixture-of-experts layers (toy scale)"};
    app.require_subcommand(1);
    clusterup::CommandArgs args;
    app.add_option("-c,--config", args.config_path, "JSON configuration file")->check(CLI::ExistingFile);

    app.add_subcommand("train-dense", "Pretrain the dense toy model");
    app.add_subcommand("capture", "Record FFN-input activations of the dense model");
    auto* upcycle = app.add_subcommand("upcycle", "Convert every other dense block into an MoE layer");
    upcycle->add_option("--method", args.method, "sparse | drop | drop-svd | cluster");
    auto* train = app.add_subcommand("train-moe", "Continue training an upcycled model");
    train->add_option("--method", args.method, "which upcycled checkpoint to train");
    train->add_flag("--eesd", args.eesd, "enable the expert-ensemble self-distillation term");
    train->add_option("--steps", args.steps, "override train.steps");
    auto* analyze = app.add_subcommand("analyze", "Specialization diagnostics on held-out data");
    analyze->add_option("--method", args.method, "which MoE checkpoint to analyze");
    analyze->add_option("--checkpoint", args.checkpoint, "checkpoint stem inside the output directory");
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the training gradients");
    gradcheck->add_option("--method", args.method, "which MoE checkpoint to check");
    gradcheck->add_option("--checkpoint", args.checkpoint, "checkpoint stem inside the output directory");
    gradcheck->add_option("--epsilon", args.epsilon, "central-difference step")->check(CLI::Range(1e-6, 1e-3));
    auto* compare = app.add_subcommand("compare", "Run all initialization methods over several seeds");
    compare->add_option("--seeds", args.seeds, "number of seeds")->check(CLI::PositiveNumber);
    compare->add_option("--threads", args.threads, "worker threads")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("InvalidArgument", e.what());
    }
    args.command = app.get_subcommands().front()->get_name();

    try {
        clusterup::execute(args, std::cout);
    } catch (const clusterup::Error& e) {
        return report_error(clusterup::to_string(e.code()), e.what());
    } catch (const std::exception& e) {
        return report_error("Internal", e.what());
    }
    return 0;
}
