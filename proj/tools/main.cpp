#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stgncde/cli.hpp"
#include "stgncde/errors.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string seed;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args, const std::string& default_out) {
    cmd->add_option("--config", args.config_path, "run configuration JSON")->required();
    cmd->add_option("--set", args.overrides, "override a config key, e.g. --set lr=5e-4")
        ->take_all();
    cmd->add_option("--seed", args.seed, "override the config seed");
    args.out_dir = default_out;
    cmd->add_option("--out", args.out_dir, "output directory");
}

stgncde::cli::RunConfig resolve_config(const CommonArgs& args) {
    auto cfg = stgncde::cli::load_run_config(args.config_path);
    for (const std::string& kv : args.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw stgncde::ConfigError("--set expects key=value, got '" + kv + "'");
        }
        stgncde::cli::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!args.seed.empty()) stgncde::cli::apply_override(cfg, "seed", args.seed);
    stgncde::cli::validate(cfg);
    return cfg;
}

std::string config_key_footer() {
    std::string footer = "Config keys (flat JSON; every key overridable with --set key=value):\n";
    for (const auto& doc : stgncde::cli::config_key_docs()) {
        char line[256];
        std::snprintf(line, sizeof(line), "  %-20s default %-12s %s\n", doc.key.c_str(),
                      doc.default_value.empty() ? "\"\"" : doc.default_value.c_str(),
                      doc.description.c_str());
        footer += line;
    }
    return footer;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stgncde: spatio-temporal graph neural CDE traffic forecasting"};
    app.require_subcommand(1);
    app.footer(config_key_footer());

    CommonArgs train_args;
    auto* train = app.add_subcommand("train", "train a model, write checkpoint + log");
    add_common(train, train_args, "runs/train");

    CommonArgs eval_args;
    std::string eval_checkpoint, eval_split = "test";
    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a split");
    add_common(evaluate, eval_args, "");
    evaluate->add_option("--checkpoint", eval_checkpoint, "checkpoint directory")->required();
    evaluate->add_option("--split", eval_split, "train | val | test");

    CommonArgs predict_args;
    std::string predict_checkpoint;
    int predict_window = 0;
    auto* predict = app.add_subcommand("predict", "predict one test window");
    add_common(predict, predict_args, "");
    predict->add_option("--checkpoint", predict_checkpoint, "checkpoint directory")->required();
    predict->add_option("--window", predict_window, "test window index");

    CommonArgs mask_args;
    std::string mask_checkpoint;
    std::vector<double> mask_rates{0.1, 0.3, 0.5};
    std::vector<std::string> mask_variants{"full", "temporal_only", "spatial_only"};
    auto* mask_eval = app.add_subcommand("mask-eval", "irregular-observation protocol sweep");
    add_common(mask_eval, mask_args, "runs/mask_eval");
    mask_eval->add_option("--rates", mask_rates, "missing rates to sweep")->take_all();
    mask_eval->add_option("--variants", mask_variants, "variants to train (train-from-scratch mode)")
        ->take_all();
    mask_eval->add_option("--checkpoint", mask_checkpoint,
                          "evaluate this checkpoint instead of training from scratch");

    CommonArgs export_args;
    std::string export_checkpoint;
    std::vector<int> export_nodes{0};
    int export_horizon = 1;
    auto* exp = app.add_subcommand("export", "per-node prediction curves + per-horizon errors");
    add_common(exp, export_args, "runs/export");
    exp->add_option("--checkpoint", export_checkpoint, "checkpoint directory")->required();
    exp->add_option("--nodes", export_nodes, "node ids to export")->take_all();
    exp->add_option("--horizon", export_horizon, "forecast step for the per-node curves");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*train) {
            stgncde::cli::cmd_train(resolve_config(train_args), train_args.out_dir);
        } else if (*evaluate) {
            stgncde::cli::cmd_evaluate(resolve_config(eval_args), eval_checkpoint, eval_split,
                                       eval_args.out_dir);
        } else if (*predict) {
            stgncde::cli::cmd_predict(resolve_config(predict_args), predict_checkpoint,
                                      predict_window, predict_args.out_dir);
        } else if (*mask_eval) {
            stgncde::cli::cmd_mask_eval(resolve_config(mask_args), mask_rates, mask_variants,
                                        mask_checkpoint, mask_args.out_dir);
        } else if (*exp) {
            stgncde::cli::cmd_export(resolve_config(export_args), export_checkpoint, export_nodes,
                                     export_horizon, export_args.out_dir);
        }
    } catch (const stgncde::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const stgncde::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const stgncde::DivergenceError& e) {
        std::cerr << "numerical divergence: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
