#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "stgncde/errors.hpp"
#include "stgncde/solver.hpp"

using namespace stgncde;

namespace {

SolverConfig euler_cfg(int spu) { return {SolverConfig::Method::euler, spu}; }
SolverConfig rk4_cfg(int spu) { return {SolverConfig::Method::rk4, spu}; }

// dz/dt = z with z(0) = 1
const OdeField exp_field = [](double, const OdeState& s) { return OdeState{s[0]}; };

double solve_exp(const SolverConfig& cfg) {
    return integrate(exp_field, {Tensor::scalar(1.0)}, 0.0, 1.0, cfg)[0].value();
}

}  // namespace

TEST_CASE("constant field integrates to state0 + c * T") {
    const OdeField field = [](double, const OdeState&) {
        return OdeState{Tensor::scalar(0.375)};  // dyadic, so the sums stay exact
    };
    for (auto cfg : {euler_cfg(1), euler_cfg(4), rk4_cfg(1), rk4_cfg(4)}) {
        const double z = integrate(field, {Tensor::scalar(1.0)}, 0.0, 4.0, cfg)[0].value();
        CHECK(z == doctest::Approx(1.0 + 0.375 * 4.0).epsilon(1e-14));
    }
}

TEST_CASE("rk4 single step on dz/dt = z reproduces the hand-computed stages") {
    // k1..k4 = 1, 1.05, 1.0525, 1.10525 -> z = 1 + (0.1/6) * 6.31025
    const double z = integrate(exp_field, {Tensor::scalar(1.0)}, 0.0, 0.1, rk4_cfg(10))[0].value();
    CHECK(z == doctest::Approx(1.0 + 0.1 / 6.0 * 6.31025).epsilon(1e-15));
    CHECK(std::fabs(z - std::exp(0.1)) < 1e-7);
}

TEST_CASE("euler on dz/dt = 2t accumulates the left Riemann sum") {
    const OdeField field = [](double t, const OdeState&) { return OdeState{Tensor::scalar(2.0 * t)}; };
    const double z = integrate(field, {Tensor::scalar(0.0)}, 0.0, 1.0, euler_cfg(4))[0].value();
    CHECK(z == 0.75);  // dyadic arithmetic, exact
}

TEST_CASE("euler at unit steps is bitwise the residual recurrence") {
    const OdeField field = [](double t, const OdeState& s) {
        return OdeState{scale(tanh(s[0]), 0.3 + 0.1 * t)};
    };
    Tensor z0 = Tensor::scalar(0.7312345);
    const double solver_z = integrate(field, {z0}, 0.0, 5.0, euler_cfg(1))[0].value();

    Tensor z = z0;
    for (int k = 0; k < 5; ++k) z = add(z, field(static_cast<double>(k), {z})[0]);
    CHECK(solver_z == z.value());  // bitwise
}

TEST_CASE("halving the step shrinks the error at the method's order") {
    const double truth = std::exp(1.0);
    const double euler_ratio = std::fabs(solve_exp(euler_cfg(8)) - truth) /
                               std::fabs(solve_exp(euler_cfg(16)) - truth);
    CHECK(euler_ratio > 1.7);
    CHECK(euler_ratio < 2.3);

    const double rk4_ratio =
        std::fabs(solve_exp(rk4_cfg(2)) - truth) / std::fabs(solve_exp(rk4_cfg(4)) - truth);
    CHECK(rk4_ratio > 12.0);
    CHECK(rk4_ratio < 20.0);
}

TEST_CASE("integration is differentiable end to end") {
    // d z(1) / d theta for dz/dt = theta * z: z(1) = z0 * exp(theta), so the
    // gradient is z(1) itself (up to discretization error).
    Tensor theta = Tensor::scalar(0.5).set_requires_grad(true);
    Tape tape;
    double z1 = 0.0;
    {
        Tape::Activate scope(tape);
        const OdeField field = [&](double, const OdeState& s) {
            return OdeState{mul(theta, s[0])};
        };
        OdeState out = integrate(field, {Tensor::scalar(1.0)}, 0.0, 1.0, rk4_cfg(8));
        z1 = out[0].value();
        tape.backward(sum(out[0]));
    }
    CHECK(std::fabs(z1 - std::exp(0.5)) < 1e-6);
    CHECK(tape.grad(theta).value() == doctest::Approx(z1).epsilon(1e-5));
}

TEST_CASE("divergence reports the failing step") {
    const OdeField field = [](double, const OdeState& s) {
        return OdeState{Tensor::scalar(s[0].value() * 1e160)};
    };
    try {
        integrate(field, {Tensor::scalar(1e160)}, 0.0, 4.0, euler_cfg(1));
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("configuration contract") {
    CHECK_THROWS_AS(integrate(exp_field, {Tensor::scalar(1.0)}, 0.0, 1.0, euler_cfg(0)),
                    std::invalid_argument);
    CHECK_THROWS_AS(integrate(exp_field, {Tensor::scalar(1.0)}, 1.0, 1.0, euler_cfg(1)),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_solver_method("dopri"), std::invalid_argument);
    CHECK(solver_method_name(SolverConfig::Method::rk4) == "rk4");
}
