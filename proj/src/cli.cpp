#include "stgncde/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "stgncde/errors.hpp"

namespace fs = std::filesystem;

namespace stgncde::cli {

ModelVariant RunConfig::model_variant() const { return parse_variant(variant); }

SolverConfig RunConfig::solver_config() const {
    SolverConfig s;
    s.method = parse_solver_method(solver);
    s.steps_per_unit = steps_per_unit;
    return s;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.lr = lr;
    t.weight_decay = weight_decay;
    t.decoupled_decay = decoupled_decay;
    t.clip_norm = clip_norm;
    t.patience = patience;
    t.seed = seed;
    t.solver = solver_config();
    t.log_timing = log_timing;
    t.loss_on_normalized = loss_on_normalized;
    t.target_train_loss = target_train_loss;
    t.eval_batch = eval_batch;
    return t;
}

namespace {

// Key table drives load, --set, the resolved snapshot and --help, so the four
// views can never drift apart.
struct KeyBinding {
    std::string key;
    std::string description;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

std::string bool_str(bool v) { return v ? "true" : "false"; }

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const std::uint64_t out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    }
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

const std::vector<KeyBinding>& key_bindings() {
    static const std::vector<KeyBinding> bindings = [] {
        std::vector<KeyBinding> b;
        auto str = [&](const std::string& key, std::string RunConfig::* field, const char* desc) {
            b.push_back({key, desc, [field](const RunConfig& c) { return c.*field; },
                         [field](RunConfig& c, const std::string& v) { c.*field = v; }});
        };
        auto num = [&](const std::string& key, int RunConfig::* field, const char* desc) {
            b.push_back({key, desc, [field](const RunConfig& c) { return std::to_string(c.*field); },
                         [field, key](RunConfig& c, const std::string& v) { c.*field = parse_int(key, v); }});
        };
        auto dbl = [&](const std::string& key, double RunConfig::* field, const char* desc) {
            b.push_back({key, desc, [field](const RunConfig& c) { return fmt_double(c.*field); },
                         [field, key](RunConfig& c, const std::string& v) { c.*field = parse_double(key, v); }});
        };
        auto flag = [&](const std::string& key, bool RunConfig::* field, const char* desc) {
            b.push_back({key, desc, [field](const RunConfig& c) { return bool_str(c.*field); },
                         [field, key](RunConfig& c, const std::string& v) { c.*field = parse_bool(key, v); }});
        };
        str("name", &RunConfig::name, "run label used in output files");
        str("values_csv", &RunConfig::values_csv, "series CSV (header row, one row per 5-minute step)");
        str("meta_json", &RunConfig::meta_json, "dataset sidecar JSON");
        str("variant", &RunConfig::variant, "full | temporal_only | spatial_only");
        num("k_layers", &RunConfig::k_layers, "K: extra relu layers in the temporal CDE function (paper grid 1-3)");
        num("embed_dim", &RunConfig::embed_dim, "C: node embedding width (paper grid 1-10)");
        num("hidden_dim", &RunConfig::hidden_dim, "temporal state width (paper grid 32/64/128/256)");
        num("state_dim", &RunConfig::state_dim, "spatial state width; 0 follows hidden_dim");
        num("input_len", &RunConfig::input_len, "observed steps per window (benchmark: 12)");
        num("horizon", &RunConfig::horizon, "forecast steps per window (benchmark: 12)");
        num("output_dim", &RunConfig::output_dim, "predicted channels per step (benchmark: 1)");
        num("target_feature", &RunConfig::target_feature, "feature channel to forecast");
        flag("time_channel", &RunConfig::time_channel, "append t as an extra control channel");
        str("solver", &RunConfig::solver, "euler | rk4");
        num("steps_per_unit", &RunConfig::steps_per_unit, "solver steps per unit time");
        num("epochs", &RunConfig::epochs, "training epochs (paper: 200)");
        num("batch_size", &RunConfig::batch_size, "windows per optimizer step (paper: 64)");
        dbl("lr", &RunConfig::lr, "learning rate (paper grid 1e-2..1e-4, best 1e-3)");
        dbl("weight_decay", &RunConfig::weight_decay, "L2 coefficient (paper grid 1e-4..1e-2, best 1e-3)");
        flag("decoupled_decay", &RunConfig::decoupled_decay, "true decays weights outside the moments (AdamW style)");
        dbl("clip_norm", &RunConfig::clip_norm, "global gradient-norm clip; 0 disables");
        num("patience", &RunConfig::patience, "early-stop patience in epochs (paper: 15)");
        b.push_back({"seed", "master seed for init, shuffling and masks",
                     [](const RunConfig& c) { return std::to_string(c.seed); },
                     [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }});
        flag("log_timing", &RunConfig::log_timing, "false writes 0.000 in the seconds column for bitwise-stable logs");
        flag("loss_on_normalized", &RunConfig::loss_on_normalized, "train against z-scored targets instead of original units");
        dbl("target_train_loss", &RunConfig::target_train_loss, "stop once train loss dips below; 0 disables");
        num("eval_batch", &RunConfig::eval_batch, "windows per forward pass during evaluation");
        return b;
    }();
    return bindings;
}

const KeyBinding& find_binding(const std::string& key) {
    for (const auto& b : key_bindings()) {
        if (b.key == key) return b;
    }
    std::string valid;
    for (const auto& b : key_bindings()) {
        if (!valid.empty()) valid += ", ";
        valid += b.key;
    }
    throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid);
}

std::string json_value_to_string(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory " + dir + ": " + ec.message());
}

std::pair<std::string, std::string> checkpoint_files(const std::string& checkpoint_dir) {
    fs::path p(checkpoint_dir);
    if (fs::is_directory(p)) return {(p / "checkpoint.json").string(), (p / "checkpoint.bin").string()};
    // Allow pointing straight at the manifest.
    fs::path bin = p;
    bin.replace_extension(".bin");
    return {p.string(), bin.string()};
}

char metrics_buf[256];

std::string metrics_line(const Metrics& m) {
    std::snprintf(metrics_buf, sizeof(metrics_buf), "MAE %.4f  RMSE %.4f  MAPE %.2f%%", m.mae, m.rmse,
                  m.mape);
    return metrics_buf;
}

}  // namespace

std::vector<ConfigKeyDoc> config_key_docs() {
    const RunConfig defaults;
    std::vector<ConfigKeyDoc> docs;
    for (const auto& b : key_bindings()) docs.push_back({b.key, b.get(defaults), b.description});
    return docs;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid config JSON in " + path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object: " + path);

    RunConfig cfg;
    for (const auto& [key, value] : j.items()) {
        find_binding(key).set(cfg, json_value_to_string(value));
    }
    // Dataset paths are relative to the config file, not the working directory.
    const fs::path base = fs::path(path).parent_path();
    auto resolve = [&](std::string& p) {
        if (!p.empty() && fs::path(p).is_relative()) p = (base / p).string();
    };
    resolve(cfg.values_csv);
    resolve(cfg.meta_json);
    return cfg;
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    find_binding(key).set(cfg, value);
}

void validate(const RunConfig& cfg) {
    parse_variant(cfg.variant);
    parse_solver_method(cfg.solver);
    if (cfg.input_len < 2) throw ConfigError("input_len must be >= 2");
    if (cfg.horizon < 1) throw ConfigError("horizon must be >= 1");
    if (cfg.k_layers < 1) throw ConfigError("k_layers must be >= 1");
    if (cfg.embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (cfg.hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
    if (cfg.state_dim < 0) throw ConfigError("state_dim must be >= 0 (0 follows hidden_dim)");
    if (cfg.target_feature < 0) throw ConfigError("target_feature must be >= 0");
    try {
        cfg.train_config().validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

std::string run_config_json(const RunConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& b : key_bindings()) {
        const std::string v = b.get(cfg);
        if (b.key == "seed") {
            j[b.key] = cfg.seed;
        } else if (v == "true" || v == "false") {
            j[b.key] = v == "true";
        } else {
            // Numbers stay numbers in the snapshot; strings stay strings.
            char* end = nullptr;
            const double num = std::strtod(v.c_str(), &end);
            if (!v.empty() && end == v.c_str() + v.size() && v.find_first_not_of("0123456789.eE+-") == std::string::npos) {
                if (v.find_first_of(".eE") == std::string::npos &&
                    std::fabs(num) <= 2147483647.0) {
                    j[b.key] = static_cast<std::int64_t>(num);
                } else {
                    j[b.key] = num;
                }
            } else {
                j[b.key] = v;
            }
        }
    }
    return j.dump(2);
}

Pipeline load_pipeline(const RunConfig& cfg) {
    validate(cfg);
    if (cfg.values_csv.empty() || cfg.meta_json.empty()) {
        throw ConfigError("config must set values_csv and meta_json");
    }
    auto [meta, series] = load_dataset(cfg.values_csv, cfg.meta_json);
    const Splits splits = split_6_2_2(series);
    const NormStats stats = compute_norm_stats(splits.train);

    Pipeline p;
    p.meta = meta;
    p.train = make_windows(splits.train, stats, cfg.input_len, cfg.horizon, cfg.target_feature);
    p.val = make_windows(splits.val, stats, cfg.input_len, cfg.horizon, cfg.target_feature);
    p.test = make_windows(splits.test, stats, cfg.input_len, cfg.horizon, cfg.target_feature);

    p.model_config.num_nodes = meta.num_nodes;
    p.model_config.input_dim = meta.num_features;
    p.model_config.hidden_dim = cfg.hidden_dim;
    p.model_config.state_dim = cfg.resolved_state_dim();
    p.model_config.embed_dim = cfg.embed_dim;
    p.model_config.k_layers = cfg.k_layers;
    p.model_config.horizon = cfg.horizon;
    p.model_config.output_dim = cfg.output_dim;
    p.model_config.variant = cfg.model_variant();
    p.model_config.time_channel = cfg.time_channel;
    return p;
}

void cmd_train(const RunConfig& cfg, const std::string& out_dir) {
    Pipeline p = load_pipeline(cfg);
    ensure_dir(out_dir);

    Model model(p.model_config, cfg.seed);
    const TrainConfig tc = cfg.train_config();

    std::cout << "training '" << cfg.name << "' (" << cfg.variant << ", " << cfg.solver << ", "
              << p.train.num_windows() << " train windows)\n";
    TrainResult result = train_loop(model, p.train, p.val, tc, [](const EpochLog& row) {
        std::printf("epoch %3d  train %.5f  val MAE %.5f  (%.1fs)\n", row.epoch, row.train_loss,
                    row.val_mae, row.seconds);
        std::fflush(stdout);
        return true;
    });

    const fs::path out(out_dir);
    write_train_log_csv(result.log, (out / "train_log.csv").string());
    {
        std::ofstream snap(out / "config_resolved.json");
        snap << run_config_json(cfg) << "\n";
    }
    Model best(p.model_config, result.best_params.clone());
    save_checkpoint((out / "checkpoint.json").string(), (out / "checkpoint.bin").string(),
                    p.model_config, best.params(), result.best_epoch, result.best_val_mae,
                    run_config_json(cfg));

    const EvalResult test = evaluate(best, p.test, tc.solver, tc.eval_batch, tc.loss_on_normalized);
    std::cout << "best epoch " << result.best_epoch << " (val MAE "
              << result.best_val_mae << ")\n";
    std::cout << "test: " << metrics_line(test.overall) << "\n";
}

namespace {

Model load_model_for(const RunConfig& cfg, const Pipeline& p, const std::string& checkpoint_dir) {
    const auto [manifest, bin] = checkpoint_files(checkpoint_dir);
    LoadedCheckpoint ck = load_checkpoint(manifest, bin);
    if (ck.config.num_nodes != p.model_config.num_nodes ||
        ck.config.input_dim != p.model_config.input_dim ||
        ck.config.horizon != p.model_config.horizon) {
        throw ConfigError("checkpoint layout does not match the configured dataset");
    }
    (void)cfg;
    return Model(ck.config, std::move(ck.params));
}

const WindowBatch& pick_split(const Pipeline& p, const std::string& split) {
    if (split == "train") return p.train;
    if (split == "val") return p.val;
    if (split == "test") return p.test;
    throw ConfigError("unknown split '" + split + "' (expected train, val or test)");
}

}  // namespace

void cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint_dir, const std::string& split,
                  const std::string& out_dir) {
    Pipeline p = load_pipeline(cfg);
    Model model = load_model_for(cfg, p, checkpoint_dir);
    const WindowBatch& windows = pick_split(p, split);
    const EvalResult r =
        evaluate(model, windows, cfg.solver_config(), cfg.eval_batch, cfg.loss_on_normalized);
    std::cout << split << ": " << metrics_line(r.overall) << "\n";
    if (!out_dir.empty()) {
        ensure_dir(out_dir);
        std::ofstream out(fs::path(out_dir) / ("metrics_" + split + ".csv"));
        out << "horizon,mae,rmse,mape\n";
        char buf[160];
        for (std::size_t h = 0; h < r.per_horizon.size(); ++h) {
            std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", h + 1, r.per_horizon[h].mae,
                          r.per_horizon[h].rmse, r.per_horizon[h].mape);
            out << buf;
        }
    }
}

void cmd_predict(const RunConfig& cfg, const std::string& checkpoint_dir, int window,
                 const std::string& out_dir) {
    Pipeline p = load_pipeline(cfg);
    Model model = load_model_for(cfg, p, checkpoint_dir);
    if (window < 0 || window >= p.test.num_windows()) {
        throw ConfigError("window " + std::to_string(window) + " out of range; test split has " +
                          std::to_string(p.test.num_windows()) + " windows");
    }
    const ControlPath path = p.test.path(window);
    Tensor pred = model.forward(path, cfg.solver_config());
    if (cfg.loss_on_normalized) {
        const auto& st = p.test.stats();
        const double mean = st.mean[static_cast<std::size_t>(cfg.target_feature)];
        const double sd = st.stddev[static_cast<std::size_t>(cfg.target_feature)];
        for (double& v : pred.raw()) v = v * sd + mean;
    }

    std::ostream* out = &std::cout;
    std::ofstream file;
    if (!out_dir.empty()) {
        ensure_dir(out_dir);
        file.open(fs::path(out_dir) / "predictions.csv");
        out = &file;
    }
    *out << "node";
    for (int s = 1; s <= cfg.horizon; ++s) *out << ",h" << s;
    *out << "\n";
    char buf[48];
    for (int v = 0; v < p.meta.num_nodes; ++v) {
        *out << v;
        for (int s = 0; s < cfg.horizon; ++s) {
            std::snprintf(buf, sizeof(buf), ",%.17g", pred.at2(v, s));
            *out << buf;
        }
        *out << "\n";
    }
}

void cmd_mask_eval(const RunConfig& cfg, const std::vector<double>& rates,
                   const std::vector<std::string>& variants, const std::string& checkpoint_dir,
                   const std::string& out_dir) {
    for (double r : rates) {
        if (!(r >= 0.0 && r <= 0.5 + 1e-12)) {
            throw ConfigError("mask-eval rate " + std::to_string(r) + " outside [0, 0.5]");
        }
    }
    Pipeline p = load_pipeline(cfg);
    ensure_dir(out_dir);
    std::ofstream out(fs::path(out_dir) / "mask_eval.csv");
    out << "rate,variant,mae,rmse,mape\n";
    char buf[200];

    auto emit = [&](double rate, const std::string& variant, const Metrics& m) {
        std::snprintf(buf, sizeof(buf), "%g,%s,%.17g,%.17g,%.17g\n", rate, variant.c_str(), m.mae,
                      m.rmse, m.mape);
        out << buf;
        std::cout << "rate " << rate << "  " << variant << "  " << metrics_line(m) << "\n";
    };

    if (!checkpoint_dir.empty()) {
        // Evaluate an existing checkpoint against masked test inputs.
        Model model = load_model_for(cfg, p, checkpoint_dir);
        const std::string variant = variant_name(model.config().variant);
        for (double rate : rates) {
            const WindowBatch masked = apply_missing_mask(p.test, rate, cfg.seed);
            const EvalResult r =
                evaluate(model, masked, cfg.solver_config(), cfg.eval_batch, cfg.loss_on_normalized);
            emit(rate, variant, r.overall);
        }
        return;
    }

    // Train-from-scratch protocol: each (rate, variant) trains on masked
    // inputs, mirroring the irregular-forecasting tables.
    for (double rate : rates) {
        const WindowBatch train_m = apply_missing_mask(p.train, rate, cfg.seed);
        const WindowBatch val_m = apply_missing_mask(p.val, rate, cfg.seed + 1);
        const WindowBatch test_m = apply_missing_mask(p.test, rate, cfg.seed + 2);
        for (const std::string& variant : variants) {
            RunConfig vcfg = cfg;
            vcfg.variant = variant;
            ModelConfig mc = p.model_config;
            mc.variant = vcfg.model_variant();
            Model model(mc, cfg.seed);
            TrainResult tr = train_loop(model, train_m, val_m, vcfg.train_config());
            Model best(mc, std::move(tr.best_params));
            const EvalResult r = evaluate(best, test_m, vcfg.solver_config(), cfg.eval_batch,
                                          cfg.loss_on_normalized);
            emit(rate, variant, r.overall);
        }
    }
}

void cmd_export(const RunConfig& cfg, const std::string& checkpoint_dir,
                const std::vector<int>& nodes, int horizon, const std::string& out_dir) {
    if (horizon < 1 || horizon > cfg.horizon) {
        throw ConfigError("export horizon must be in [1, " + std::to_string(cfg.horizon) + "]");
    }
    Pipeline p = load_pipeline(cfg);
    Model model = load_model_for(cfg, p, checkpoint_dir);
    for (int node : nodes) {
        if (node < 0 || node >= p.meta.num_nodes) {
            throw ConfigError("unknown node id " + std::to_string(node) + " (dataset has " +
                              std::to_string(p.meta.num_nodes) + " nodes)");
        }
    }
    ensure_dir(out_dir);

    const SolverConfig solver = cfg.solver_config();
    const auto preds = predict_windows(model, p.test, solver, cfg.eval_batch, cfg.loss_on_normalized);

    // Per-node curves at the requested horizon: one prediction per window,
    // timestamped at the predicted step.
    char buf[160];
    for (int node : nodes) {
        std::ofstream out(fs::path(out_dir) / ("node_" + std::to_string(node) + ".csv"));
        out << "t,truth,prediction\n";
        for (int w = 0; w < p.test.num_windows(); ++w) {
            const int t = w + cfg.input_len + horizon - 1;
            const double truth = p.test.target(w).at2(node, horizon - 1);
            const double pred = preds[static_cast<std::size_t>(w)].at2(node, horizon - 1);
            std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", t, truth, pred);
            out << buf;
        }
    }

    std::vector<MetricSums> sums(static_cast<std::size_t>(cfg.horizon));
    for (int w = 0; w < p.test.num_windows(); ++w) {
        const Tensor truth = p.test.target(w);
        const auto pr = preds[static_cast<std::size_t>(w)].data();
        const auto tr = truth.data();
        for (std::size_t i = 0; i < pr.size(); ++i) {
            sums[i % static_cast<std::size_t>(cfg.horizon)].add(pr[i], tr[i]);
        }
    }
    std::ofstream out(fs::path(out_dir) / "horizon_errors.csv");
    out << "horizon,mae,rmse,mape\n";
    for (int h = 0; h < cfg.horizon; ++h) {
        const Metrics m = sums[static_cast<std::size_t>(h)].finalize();
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", h + 1, m.mae, m.rmse, m.mape);
        out << buf;
    }
}

}  // namespace stgncde::cli
