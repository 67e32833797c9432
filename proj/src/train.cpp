#include "stgncde/train.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "stgncde/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are unsupported");

namespace stgncde {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
    if (solver.steps_per_unit < 1) throw ConfigError("steps_per_unit must be >= 1");
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) {
        throw std::invalid_argument("l1_loss: shape mismatch: " + detail::shape_str(pred.shape()) +
                                    " vs " + detail::shape_str(target.shape()));
    }
    return scale(sum(abs(sub(pred, target))), 1.0 / static_cast<double>(pred.size()));
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor*> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor* p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p->size()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p->size()), 0.0);
    }
}

void AdamOptimizer::step(std::span<const Tensor> grads, double lr, double weight_decay,
                         bool decoupled_decay, double clip_norm) {
    if (grads.size() != params_.size()) {
        throw std::invalid_argument("AdamOptimizer: got " + std::to_string(grads.size()) +
                                    " gradients for " + std::to_string(params_.size()) + " parameters");
    }
    double clip_factor = 1.0;
    if (clip_norm > 0.0) {
        double sq = 0.0;
        for (const Tensor& g : grads)
            for (double v : g.data()) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > clip_norm) clip_factor = clip_norm / norm;
    }

    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto theta = params_[i]->raw();
        const auto g = grads[i].data();
        if (g.size() != theta.size()) {
            throw std::invalid_argument("AdamOptimizer: gradient/parameter size mismatch");
        }
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < theta.size(); ++j) {
            double gj = g[j] * clip_factor;
            if (!decoupled_decay) gj += weight_decay * theta[j];
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
            if (decoupled_decay) theta[j] *= 1.0 - lr * weight_decay;
            theta[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
        }
    }
}

namespace {

struct ShuffleRng {
    std::uint64_t state;
    std::uint64_t next() {
        state = detail::splitmix64(state);
        return state;
    }
    std::uint32_t below(std::uint32_t n) {
        return static_cast<std::uint32_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }
};

void fisher_yates(std::vector<int>& order, ShuffleRng& rng) {
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = rng.below(static_cast<std::uint32_t>(i));
        std::swap(order[i - 1], order[j]);
    }
}

Tensor stack_targets(const WindowBatch& windows, std::span<const int> idx, bool normalized) {
    const int v = windows.num_nodes(), s = windows.horizon();
    Tensor out = Tensor::zeros({static_cast<int>(idx.size()) * v, s});
    auto buf = out.raw();
    std::size_t off = 0;
    const double mean = windows.stats().mean[static_cast<std::size_t>(windows.target_feature())];
    const double sd = windows.stats().stddev[static_cast<std::size_t>(windows.target_feature())];
    for (int w : idx) {
        const Tensor t = windows.target(w);
        for (double x : t.data()) buf[off++] = normalized ? (x - mean) / sd : x;
    }
    return out;
}

}  // namespace

std::vector<Tensor> predict_windows(const Model& model, const WindowBatch& windows,
                                    const SolverConfig& solver, int eval_batch,
                                    bool loss_on_normalized) {
    const int v = windows.num_nodes(), s = windows.horizon();
    const double mean = windows.stats().mean[static_cast<std::size_t>(windows.target_feature())];
    const double sd = windows.stats().stddev[static_cast<std::size_t>(windows.target_feature())];
    std::vector<Tensor> preds;
    preds.reserve(static_cast<std::size_t>(windows.num_windows()));
    for (int start = 0; start < windows.num_windows(); start += eval_batch) {
        const int n = std::min(eval_batch, windows.num_windows() - start);
        std::vector<ControlPath> paths;
        paths.reserve(static_cast<std::size_t>(n));
        std::vector<const ControlPath*> ptrs;
        for (int i = 0; i < n; ++i) {
            paths.push_back(windows.path(start + i));
            ptrs.push_back(&paths.back());
        }
        const Tensor block = model.forward(std::span<const ControlPath* const>(ptrs), solver);
        const auto src = block.data();
        for (int i = 0; i < n; ++i) {
            Tensor p = Tensor::zeros({v, s});
            auto dst = p.raw();
            const std::size_t off = static_cast<std::size_t>(i) * v * s;
            for (std::size_t j = 0; j < dst.size(); ++j) {
                const double raw = src[off + j];
                dst[j] = loss_on_normalized ? raw * sd + mean : raw;
            }
            preds.push_back(std::move(p));
        }
    }
    return preds;
}

EvalResult evaluate(const Model& model, const WindowBatch& windows, const SolverConfig& solver,
                    int eval_batch, bool loss_on_normalized) {
    const auto preds = predict_windows(model, windows, solver, eval_batch, loss_on_normalized);
    const int s = windows.horizon();
    std::vector<MetricSums> horizon_sums(static_cast<std::size_t>(s));
    for (int w = 0; w < windows.num_windows(); ++w) {
        const Tensor truth = windows.target(w);
        const auto p = preds[static_cast<std::size_t>(w)].data();
        const auto t = truth.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            horizon_sums[i % static_cast<std::size_t>(s)].add(p[i], t[i]);
        }
    }
    EvalResult result;
    MetricSums total;
    result.per_horizon.reserve(horizon_sums.size());
    for (const auto& hs : horizon_sums) {
        result.per_horizon.push_back(hs.finalize());
        total.merge(hs);
    }
    result.overall = total.finalize();
    return result;
}

TrainResult train_loop(Model& model, const WindowBatch& train, const WindowBatch& val,
                       const TrainConfig& cfg, const std::function<bool(const EpochLog&)>& on_epoch) {
    cfg.validate();
    if (train.num_windows() < 1) throw ConfigError("train_loop: training split yields no windows");

    auto named = model.params().named();
    std::vector<Tensor*> params;
    params.reserve(named.size());
    for (auto& [name, t] : named) params.push_back(t);
    AdamOptimizer opt(params);

    ShuffleRng shuffle_rng{detail::splitmix64(cfg.seed ^ 0x9e3779b97f4a7c15ULL)};
    std::vector<int> order(static_cast<std::size_t>(train.num_windows()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    TrainResult result;
    result.best_val_mae = std::numeric_limits<double>::infinity();
    int epochs_without_improvement = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t_start = std::chrono::steady_clock::now();
        fisher_yates(order, shuffle_rng);

        double loss_sum = 0.0;
        for (int start = 0; start < train.num_windows(); start += cfg.batch_size) {
            const int n = std::min(cfg.batch_size, train.num_windows() - start);
            const std::span<const int> batch_idx(order.data() + start, static_cast<std::size_t>(n));

            std::vector<ControlPath> paths;
            paths.reserve(static_cast<std::size_t>(n));
            std::vector<const ControlPath*> ptrs;
            for (int w : batch_idx) {
                paths.push_back(train.path(w));
                ptrs.push_back(&paths.back());
            }
            const Tensor targets = stack_targets(train, batch_idx, cfg.loss_on_normalized);

            Tape tape;
            Tensor loss;
            {
                Tape::Activate scope(tape);
                const Tensor pred = model.forward(std::span<const ControlPath* const>(ptrs), cfg.solver);
                loss = l1_loss(pred, targets);
                if (!std::isfinite(loss.value())) {
                    throw DivergenceError("train_loop: non-finite loss at epoch " +
                                          std::to_string(epoch) + ", batch " +
                                          std::to_string(start / cfg.batch_size));
                }
                tape.backward(loss);
            }
            std::vector<Tensor> grads;
            grads.reserve(params.size());
            for (Tensor* p : params) {
                grads.push_back(tape.recorded(*p) ? tape.grad(*p) : Tensor::zeros(p->shape()));
            }
            opt.step(grads, cfg.lr, cfg.weight_decay, cfg.decoupled_decay, cfg.clip_norm);
            loss_sum += loss.value() * n;
        }

        const EvalResult val_eval =
            evaluate(model, val, cfg.solver, cfg.eval_batch, cfg.loss_on_normalized);
        const auto t_stop = std::chrono::steady_clock::now();

        EpochLog row;
        row.epoch = epoch;
        row.train_loss = loss_sum / train.num_windows();
        row.val_mae = val_eval.overall.mae;
        row.val_rmse = val_eval.overall.rmse;
        row.val_mape = val_eval.overall.mape;
        row.seconds = cfg.log_timing ? std::chrono::duration<double>(t_stop - t_start).count() : 0.0;
        result.log.push_back(row);
        bool keep_going = true;
        if (on_epoch) keep_going = on_epoch(row);

        if (row.val_mae < result.best_val_mae) {
            result.best_val_mae = row.val_mae;
            result.best_epoch = epoch;
            result.best_params = model.params().clone();
            epochs_without_improvement = 0;
        } else {
            ++epochs_without_improvement;
        }
        if (epochs_without_improvement >= cfg.patience) {
            result.stopped_early = true;
            break;
        }
        if (!keep_going) break;
        if (cfg.target_train_loss > 0.0 && row.train_loss < cfg.target_train_loss) break;
    }
    return result;
}

void write_train_log_csv(const std::vector<EpochLog>& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write training log: " + path);
    out << "epoch,train_loss,val_mae,val_rmse,val_mape,seconds\n";
    char buf[256];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.3f\n", row.epoch,
                      row.train_loss, row.val_mae, row.val_rmse, row.val_mape, row.seconds);
        out << buf;
    }
}

namespace {

nlohmann::json model_config_json(const ModelConfig& cfg) {
    return nlohmann::json{{"num_nodes", cfg.num_nodes},   {"input_dim", cfg.input_dim},
                          {"hidden_dim", cfg.hidden_dim}, {"state_dim", cfg.state_dim},
                          {"embed_dim", cfg.embed_dim},   {"k_layers", cfg.k_layers},
                          {"horizon", cfg.horizon},       {"output_dim", cfg.output_dim},
                          {"variant", variant_name(cfg.variant)},
                          {"time_channel", cfg.time_channel}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.num_nodes = j.at("num_nodes").get<int>();
    cfg.input_dim = j.at("input_dim").get<int>();
    cfg.hidden_dim = j.at("hidden_dim").get<int>();
    cfg.state_dim = j.at("state_dim").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.k_layers = j.at("k_layers").get<int>();
    cfg.horizon = j.at("horizon").get<int>();
    cfg.output_dim = j.at("output_dim").get<int>();
    cfg.variant = parse_variant(j.at("variant").get<std::string>());
    cfg.time_channel = j.value("time_channel", false);
    return cfg;
}

}  // namespace

void save_checkpoint(const std::string& manifest_path, const std::string& bin_path,
                     const ModelConfig& cfg, const ModelParams& params, int epoch,
                     double best_val_mae, const std::string& config_json) {
    nlohmann::json manifest;
    manifest["format"] = "stgncde-checkpoint-v1";
    manifest["model"] = model_config_json(cfg);
    manifest["epoch"] = epoch;
    manifest["best_val_mae"] = best_val_mae;
    if (!config_json.empty()) manifest["run_config"] = nlohmann::json::parse(config_json);

    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw DataError("cannot write checkpoint data: " + bin_path);
    nlohmann::json tensors = nlohmann::json::array();
    std::int64_t offset = 0;
    for (const auto& [name, t] : params.named()) {
        const auto data = t->data();
        bin.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size() * sizeof(double)));
        tensors.push_back({{"name", name},
                           {"shape", t->shape()},
                           {"offset_bytes", offset},
                           {"count", static_cast<std::int64_t>(data.size())}});
        offset += static_cast<std::int64_t>(data.size() * sizeof(double));
    }
    if (!bin) throw DataError("short write to checkpoint data: " + bin_path);
    manifest["tensors"] = tensors;
    manifest["data_bytes"] = offset;

    std::ofstream out(manifest_path);
    if (!out) throw DataError("cannot write checkpoint manifest: " + manifest_path);
    out << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::string& manifest_path, const std::string& bin_path) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open checkpoint manifest: " + manifest_path);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("invalid checkpoint manifest " + manifest_path + ": " + e.what());
    }
    if (manifest.value("format", "") != "stgncde-checkpoint-v1") {
        throw DataError("unrecognized checkpoint format in " + manifest_path);
    }

    LoadedCheckpoint loaded;
    loaded.config = model_config_from_json(manifest.at("model"));
    loaded.epoch = manifest.value("epoch", 0);
    loaded.best_val_mae = manifest.value("best_val_mae", 0.0);
    if (manifest.contains("run_config")) loaded.config_json = manifest["run_config"].dump();

    // Build the parameter skeleton, then overwrite every tensor from the file.
    Model skeleton(loaded.config, 0);
    auto named = skeleton.params().named();

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw DataError("cannot open checkpoint data: " + bin_path);
    std::size_t found = 0;
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<int>>();
        const auto offset = entry.at("offset_bytes").get<std::int64_t>();
        const auto count = entry.at("count").get<std::int64_t>();
        Tensor* target = nullptr;
        for (auto& [n, t] : named) {
            if (n == name) {
                target = t;
                break;
            }
        }
        if (!target) throw DataError("checkpoint tensor '" + name + "' does not fit the model layout");
        if (target->shape() != shape || target->size() != count) {
            throw DataError("checkpoint tensor '" + name + "' has shape " + detail::shape_str(shape) +
                            ", expected " + detail::shape_str(target->shape()));
        }
        bin.seekg(offset);
        bin.read(reinterpret_cast<char*>(target->raw().data()),
                 static_cast<std::streamsize>(count * static_cast<std::int64_t>(sizeof(double))));
        if (!bin) throw DataError("checkpoint data truncated while reading '" + name + "'");
        ++found;
    }
    if (found != named.size()) {
        throw DataError("checkpoint holds " + std::to_string(found) + " tensors, model needs " +
                        std::to_string(named.size()));
    }
    loaded.params = std::move(skeleton.params());
    return loaded;
}

}  // namespace stgncde
