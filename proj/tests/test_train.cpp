#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "stgncde/errors.hpp"
#include "stgncde/train.hpp"
#include "oracle.hpp"

using namespace stgncde;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("stgncde_train_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

ModelConfig toy_model_config(ModelVariant variant = ModelVariant::full) {
    ModelConfig cfg;
    cfg.num_nodes = 3;
    cfg.input_dim = 1;
    cfg.hidden_dim = 8;
    cfg.state_dim = 8;
    cfg.embed_dim = 2;
    cfg.k_layers = 1;
    cfg.horizon = 4;
    cfg.output_dim = 1;
    cfg.variant = variant;
    return cfg;
}

TrainConfig quick_train_config(int epochs) {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 16;
    tc.lr = 5e-3;
    tc.weight_decay = 1e-4;
    tc.patience = 15;
    tc.seed = 11;
    tc.solver = {SolverConfig::Method::euler, 1};
    tc.log_timing = false;
    return tc;
}

WindowBatch toy_windows(int steps, std::uint64_t seed, int input_len = 8, int horizon = 4) {
    const Tensor series = make_synthetic_ring(3, steps, 0.02, seed);
    const NormStats stats = compute_norm_stats(series);
    return make_windows(series, stats, input_len, horizon);
}

}  // namespace

TEST_CASE("l1 loss") {
    SUBCASE("zero for a perfect prediction") {
        const Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
        CHECK(l1_loss(t, t).value() == 0.0);
    }
    SUBCASE("hand value") {
        const Tensor target = Tensor::from_data({2, 2}, {1, 2, 3, 4});
        const Tensor pred = Tensor::from_data({2, 2}, {1, 1, 5, 4});
        CHECK(l1_loss(pred, target).value() == doctest::Approx(0.75).epsilon(1e-15));
    }
    SUBCASE("a constant upward shift raises the loss by that constant") {
        const Tensor target = Tensor::from_data({3}, {1, 2, 3});
        const Tensor pred = Tensor::from_data({3}, {2, 3, 4});  // already >= target
        const double base = l1_loss(pred, target).value();
        Tensor shifted = pred.clone();
        for (double& v : shifted.raw()) v += 0.5;
        CHECK(l1_loss(shifted, target).value() == doctest::Approx(base + 0.5).epsilon(1e-12));
    }
    SUBCASE("shape mismatch is a contract error") {
        CHECK_THROWS_AS(l1_loss(Tensor::zeros({2}), Tensor::zeros({3})), std::invalid_argument);
    }
}

TEST_CASE("adam optimizer") {
    SUBCASE("zero gradient and zero decay leave parameters unchanged") {
        Tensor p = Tensor::from_data({2}, {1.5, -0.5});
        AdamOptimizer opt({&p});
        const std::vector<Tensor> grads{Tensor::zeros({2})};
        opt.step(grads, 1e-3, 0.0);
        CHECK(p.data()[0] == 1.5);
        CHECK(p.data()[1] == -0.5);
    }
    SUBCASE("first step moves by lr / (1 + eps)") {
        Tensor p = Tensor::from_data({1}, {0.2});
        AdamOptimizer opt({&p});
        const std::vector<Tensor> grads{Tensor::from_data({1}, {1.0})};
        opt.step(grads, 1e-3, 0.0);
        const double want = 0.2 - 1e-3 / (1.0 + 1e-8);
        CHECK(p.data()[0] == doctest::Approx(want).epsilon(1e-15));
    }
    SUBCASE("decay-only dynamics shrink the parameter monotonically") {
        Tensor p = Tensor::from_data({1}, {2.0});
        AdamOptimizer opt({&p});
        const std::vector<Tensor> grads{Tensor::zeros({1})};
        double prev = 2.0;
        for (int i = 0; i < 25; ++i) {
            opt.step(grads, 1e-2, 1e-2);
            CHECK(std::fabs(p.data()[0]) < std::fabs(prev));
            prev = p.data()[0];
        }
    }
    SUBCASE("vanishing learning rate leaves parameters unchanged within 1e-15") {
        Tensor p = Tensor::from_data({1}, {0.7});
        AdamOptimizer opt({&p});
        const std::vector<Tensor> grads{Tensor::from_data({1}, {0.3})};
        opt.step(grads, 1e-20, 1e-3);
        CHECK(std::fabs(p.data()[0] - 0.7) < 1e-15);
    }
    SUBCASE("decoupled mode multiplies weights by (1 - lr * wd)") {
        Tensor p = Tensor::from_data({1}, {1.0});
        AdamOptimizer opt({&p});
        const std::vector<Tensor> grads{Tensor::zeros({1})};
        opt.step(grads, 0.1, 0.5, true);
        CHECK(p.data()[0] == doctest::Approx(0.95).epsilon(1e-12));  // decay only, no moment motion
    }
    SUBCASE("clipping caps the applied gradient norm") {
        Tensor p = Tensor::from_data({1}, {0.0});
        AdamOptimizer opt({&p});
        const std::vector<Tensor> grads{Tensor::from_data({1}, {100.0})};
        opt.step(grads, 1e-3, 0.0, false, 1.0);
        // clipped gradient is 1.0, so the step matches the unit-gradient step
        CHECK(p.data()[0] == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
    }
}

TEST_CASE("one small step decreases the loss on a fixed batch") {
    oracle::Rng rng(3);
    Model model(toy_model_config(), 21);
    const WindowBatch windows = toy_windows(40, 5);
    REQUIRE(windows.num_windows() >= 4);
    std::vector<ControlPath> paths;
    std::vector<const ControlPath*> ptrs;
    for (int w = 0; w < 4; ++w) {
        paths.push_back(windows.path(w));
    }
    for (const auto& p : paths) ptrs.push_back(&p);
    Tensor targets = Tensor::zeros({4 * 3, 4});
    {
        auto buf = targets.raw();
        std::size_t off = 0;
        for (int w = 0; w < 4; ++w) {
            const Tensor t = windows.target(w);
            for (double v : t.data()) buf[off++] = v;
        }
    }
    const SolverConfig solver{SolverConfig::Method::rk4, 1};

    auto loss_now = [&]() {
        return l1_loss(model.forward(std::span<const ControlPath* const>(ptrs), solver), targets)
            .value();
    };
    const double before = loss_now();

    auto named = model.params().named();
    std::vector<Tensor*> params;
    for (auto& [n, t] : named) params.push_back(t);
    AdamOptimizer opt(params);
    Tape tape;
    {
        Tape::Activate scope(tape);
        tape.backward(
            l1_loss(model.forward(std::span<const ControlPath* const>(ptrs), solver), targets));
    }
    std::vector<Tensor> grads;
    for (Tensor* p : params) grads.push_back(tape.recorded(*p) ? tape.grad(*p) : Tensor::zeros(p->shape()));
    opt.step(grads, 1e-5, 0.0);
    CHECK(loss_now() < before);
}

TEST_CASE("train_loop learns, logs and early-stops") {
    const WindowBatch train = toy_windows(120, 5);
    const WindowBatch val = toy_windows(60, 6);
    Model model(toy_model_config(), 21);
    const TrainConfig tc = quick_train_config(12);
    const TrainResult r = train_loop(model, train, val, tc);

    REQUIRE(!r.log.empty());
    CHECK(r.log.front().epoch == 1);
    // the best checkpoint is never worse than any epoch seen
    double min_val = r.log.front().val_mae;
    for (const auto& row : r.log) min_val = std::min(min_val, row.val_mae);
    CHECK(r.best_val_mae == min_val);
    // learning happened
    CHECK(r.log.back().train_loss < r.log.front().train_loss);

    if (r.stopped_early) {
        CHECK(static_cast<int>(r.log.size()) == r.best_epoch + tc.patience);
    }
}

TEST_CASE("early stopping halts after patience non-improving epochs") {
    const WindowBatch train = toy_windows(60, 5);
    const WindowBatch val = toy_windows(40, 6);
    Model model(toy_model_config(), 21);
    TrainConfig tc = quick_train_config(60);
    tc.patience = 3;
    tc.lr = 40.0;  // guarantees no genuine improvement after the first epochs
    const TrainResult r = train_loop(model, train, val, tc);
    CHECK(r.stopped_early);
    CHECK(static_cast<int>(r.log.size()) == r.best_epoch + 3);
}

TEST_CASE("identical seeds reproduce the log bitwise") {
    const WindowBatch train = toy_windows(80, 5);
    const WindowBatch val = toy_windows(40, 6);
    auto run = [&]() {
        Model model(toy_model_config(), 33);
        return train_loop(model, train, val, quick_train_config(4));
    };
    const TrainResult a = run();
    const TrainResult b = run();
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].train_loss == b.log[i].train_loss);
        CHECK(a.log[i].val_mae == b.log[i].val_mae);
        CHECK(a.log[i].val_rmse == b.log[i].val_rmse);
        CHECK(a.log[i].val_mape == b.log[i].val_mape);
    }
}

TEST_CASE("divergent parameters abort with a divergence error") {
    const WindowBatch train = toy_windows(60, 5);
    const WindowBatch val = toy_windows(40, 6);
    Model model(toy_model_config(), 33);
    // blow the readout magnitudes far enough that the first forward overflows
    for (double& v : model.params().h0.w.raw()) v = 1e120;
    for (double& v : model.params().z0.w.raw()) v = 1e120;
    for (double& v : model.params().out.w.raw()) v = 1e120;
    CHECK_THROWS_AS(train_loop(model, train, val, quick_train_config(2)), DivergenceError);
}

TEST_CASE("evaluation aggregates per horizon") {
    const WindowBatch test = toy_windows(80, 9);
    Model model(toy_model_config(), 41);
    const SolverConfig solver{SolverConfig::Method::rk4, 1};
    const EvalResult r = evaluate(model, test, solver);
    REQUIRE(static_cast<int>(r.per_horizon.size()) == test.horizon());

    // per-horizon MAEs average back to the overall MAE (equal entry counts)
    double mean = 0.0;
    for (const auto& h : r.per_horizon) mean += h.mae;
    mean /= static_cast<double>(r.per_horizon.size());
    CHECK(std::fabs(mean - r.overall.mae) < 1e-10);

    // a perfect model scores zero everywhere: predict the targets themselves
    const auto preds = predict_windows(model, test, solver);
    MetricSums sums;
    for (int w = 0; w < test.num_windows(); ++w) {
        const Tensor t = test.target(w);
        const auto pd = preds[static_cast<std::size_t>(w)].data();
        const auto td = t.data();
        for (std::size_t i = 0; i < pd.size(); ++i) sums.add(pd[i], td[i]);
    }
    CHECK(sums.finalize().mae == doctest::Approx(r.overall.mae).epsilon(1e-12));
}

TEST_CASE("persistence predictions degrade with the horizon on a smooth signal") {
    // brute-force check on the noiseless series: repeating the last observed
    // value gets worse as the lead time grows
    const Tensor series = make_synthetic_ring(3, 200, 0.0, 4);
    const NormStats stats = compute_norm_stats(series);
    const WindowBatch windows = make_windows(series, stats, 12, 12);
    std::vector<MetricSums> sums(12);
    for (int w = 0; w < windows.num_windows(); ++w) {
        const Tensor target = windows.target(w);
        for (int node = 0; node < 3; ++node) {
            const double last = series.at3(w + 11, node, 0);
            for (int h = 0; h < 12; ++h)
                sums[static_cast<std::size_t>(h)].add(last, target.at2(node, h));
        }
    }
    for (int h = 1; h < 12; ++h) {
        CHECK(sums[static_cast<std::size_t>(h)].finalize().mae >=
              sums[static_cast<std::size_t>(h - 1)].finalize().mae);
    }
}

TEST_CASE("checkpoint round trip is bitwise") {
    TempDir tmp;
    const ModelConfig mc = toy_model_config();
    Model model(mc, 77);
    save_checkpoint(tmp.file("ck.json"), tmp.file("ck.bin"), mc, model.params(), 17, 1.25,
                    R"({"lr":0.001})");
    const LoadedCheckpoint loaded = load_checkpoint(tmp.file("ck.json"), tmp.file("ck.bin"));
    CHECK(loaded.epoch == 17);
    CHECK(loaded.best_val_mae == 1.25);
    CHECK(loaded.config.hidden_dim == mc.hidden_dim);
    CHECK(loaded.config.variant == mc.variant);

    const auto got = loaded.params.named();
    const auto want = model.params().named();
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].first == want[i].first);
        CHECK(oracle::bitwise_equal(*got[i].second, *want[i].second));
    }

    // metrics from the loaded model are bitwise those of the source model
    const WindowBatch test = toy_windows(60, 13);
    const SolverConfig solver{SolverConfig::Method::rk4, 1};
    Model restored(loaded.config, std::move(loaded.params));
    const EvalResult a = evaluate(model, test, solver);
    const EvalResult b = evaluate(restored, test, solver);
    CHECK(a.overall.mae == b.overall.mae);
    CHECK(a.overall.rmse == b.overall.rmse);
    CHECK(a.overall.mape == b.overall.mape);
}

TEST_CASE("train log csv layout") {
    TempDir tmp;
    std::vector<EpochLog> log{{1, 0.5, 0.4, 0.6, 12.0, 0.0}, {2, 0.25, 0.3, 0.5, 9.0, 0.0}};
    write_train_log_csv(log, tmp.file("log.csv"));
    std::ifstream in(tmp.file("log.csv"));
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,train_loss,val_mae,val_rmse,val_mape,seconds");
    int rows = 0;
    std::string line;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 2);
}
