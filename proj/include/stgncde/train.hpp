#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stgncde/data.hpp"
#include "stgncde/model.hpp"
#include "stgncde/solver.hpp"
#include "stgncde/tensor.hpp"

namespace stgncde {

struct TrainConfig {
    int epochs = 200;
    int batch_size = 64;
    double lr = 1e-3;
    double weight_decay = 1e-3;
    // false = decay folded into the gradient before the moment update
    // (classic Adam + L2); true = AdamW-style decoupled decay.
    bool decoupled_decay = false;
    double clip_norm = 0.0;  // 0 disables gradient clipping
    int patience = 15;
    std::uint64_t seed = 0;
    SolverConfig solver;
    bool log_timing = true;        // false writes 0.000 seconds for bitwise-stable logs
    bool loss_on_normalized = false;
    double target_train_loss = 0.0;  // stop once train loss dips below; 0 disables
    int eval_batch = 256;

    void validate() const;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_mae = 0.0, val_rmse = 0.0, val_mape = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    ModelParams best_params;
    int best_epoch = 0;
    double best_val_mae = 0.0;
    std::vector<EpochLog> log;
    bool stopped_early = false;
};

/// Mean absolute error over every entry, recorded on the active tape.
Tensor l1_loss(const Tensor& pred, const Tensor& target);

class AdamOptimizer {
  public:
    explicit AdamOptimizer(std::vector<Tensor*> params, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8);

    void step(std::span<const Tensor> grads, double lr, double weight_decay,
              bool decoupled_decay = false, double clip_norm = 0.0);

    std::int64_t step_count() const { return t_; }

  private:
    std::vector<Tensor*> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

/// Prediction per window, [V x horizon] each, in original target units.
std::vector<Tensor> predict_windows(const Model& model, const WindowBatch& windows,
                                    const SolverConfig& solver, int eval_batch = 256,
                                    bool loss_on_normalized = false);

struct EvalResult {
    Metrics overall;
    std::vector<Metrics> per_horizon;  // one entry per forecasting step
};

EvalResult evaluate(const Model& model, const WindowBatch& windows, const SolverConfig& solver,
                    int eval_batch = 256, bool loss_on_normalized = false);

/// Mini-batch training with seeded shuffling, validation-MAE early stopping
/// and best-checkpoint tracking. on_epoch (if set) fires after each epoch;
/// returning false stops training after that epoch.
TrainResult train_loop(Model& model, const WindowBatch& train, const WindowBatch& val,
                       const TrainConfig& cfg,
                       const std::function<bool(const EpochLog&)>& on_epoch = {});

void write_train_log_csv(const std::vector<EpochLog>& log, const std::string& path);

void save_checkpoint(const std::string& manifest_path, const std::string& bin_path,
                     const ModelConfig& cfg, const ModelParams& params, int epoch,
                     double best_val_mae, const std::string& config_json = "");

struct LoadedCheckpoint {
    ModelConfig config;
    ModelParams params;
    int epoch = 0;
    double best_val_mae = 0.0;
    std::string config_json;
};

LoadedCheckpoint load_checkpoint(const std::string& manifest_path, const std::string& bin_path);

}  // namespace stgncde
