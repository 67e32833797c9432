#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stgncde/data.hpp"
#include "stgncde/model.hpp"
#include "stgncde/train.hpp"

namespace stgncde::cli {

/// Flat run configuration: one JSON object, overridable with --set key=value.
struct RunConfig {
    std::string name = "run";
    std::string values_csv;
    std::string meta_json;

    std::string variant = "full";
    int k_layers = 1;
    int embed_dim = 2;
    int hidden_dim = 64;
    int state_dim = 0;  // 0 = same as hidden_dim
    int input_len = 12;
    int horizon = 12;
    int output_dim = 1;
    int target_feature = 0;

    bool time_channel = false;

    std::string solver = "rk4";
    int steps_per_unit = 1;

    int epochs = 200;
    int batch_size = 64;
    double lr = 1e-3;
    double weight_decay = 1e-3;
    bool decoupled_decay = false;
    double clip_norm = 0.0;
    int patience = 15;
    std::uint64_t seed = 0;
    bool log_timing = true;
    bool loss_on_normalized = false;
    double target_train_loss = 0.0;
    int eval_batch = 256;

    ModelVariant model_variant() const;
    SolverConfig solver_config() const;
    TrainConfig train_config() const;
    int resolved_state_dim() const { return state_dim > 0 ? state_dim : hidden_dim; }
};

struct ConfigKeyDoc {
    std::string key, default_value, description;
};

/// Every config key with its default, for --help and validation messages.
std::vector<ConfigKeyDoc> config_key_docs();

RunConfig load_run_config(const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
void validate(const RunConfig& cfg);
std::string run_config_json(const RunConfig& cfg);

/// Dataset loaded, split 6:2:2 and wrapped into window batches.
struct Pipeline {
    DatasetMeta meta;
    WindowBatch train, val, test;
    ModelConfig model_config;
};

Pipeline load_pipeline(const RunConfig& cfg);

void cmd_train(const RunConfig& cfg, const std::string& out_dir);
void cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint_dir, const std::string& split,
                  const std::string& out_dir);
void cmd_predict(const RunConfig& cfg, const std::string& checkpoint_dir, int window,
                 const std::string& out_dir);
void cmd_mask_eval(const RunConfig& cfg, const std::vector<double>& rates,
                   const std::vector<std::string>& variants, const std::string& checkpoint_dir,
                   const std::string& out_dir);
void cmd_export(const RunConfig& cfg, const std::string& checkpoint_dir,
                const std::vector<int>& nodes, int horizon, const std::string& out_dir);

}  // namespace stgncde::cli
