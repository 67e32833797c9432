#include "stgncde/solver.hpp"

#include <cmath>
#include <stdexcept>

#include "stgncde/errors.hpp"

namespace stgncde {

SolverConfig::Method parse_solver_method(const std::string& name) {
    if (name == "euler") return SolverConfig::Method::euler;
    if (name == "rk4") return SolverConfig::Method::rk4;
    throw std::invalid_argument("unknown solver method '" + name + "' (expected euler or rk4)");
}

std::string solver_method_name(SolverConfig::Method m) {
    return m == SolverConfig::Method::euler ? "euler" : "rk4";
}

namespace {

OdeState axpy_state(const OdeState& s, const OdeState& k, double c) {
    OdeState out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out.push_back(add(s[i], scale(k[i], c)));
    return out;
}

void check_finite(const OdeState& s, int step) {
    for (const auto& t : s) {
        if (!t.all_finite()) {
            throw DivergenceError("integrate: non-finite state at step " + std::to_string(step));
        }
    }
}

}  // namespace

OdeState integrate(const OdeField& field, OdeState state, double t0, double t1,
                   const SolverConfig& cfg) {
    if (cfg.steps_per_unit < 1) {
        throw std::invalid_argument("integrate: steps_per_unit must be >= 1");
    }
    if (!(t1 > t0)) {
        throw std::invalid_argument("integrate: require t1 > t0");
    }
    const int steps = std::max(1, static_cast<int>(std::lround((t1 - t0) * cfg.steps_per_unit)));
    const double dt = (t1 - t0) / steps;

    for (int k = 0; k < steps; ++k) {
        const double t = t0 + k * dt;
        if (cfg.method == SolverConfig::Method::euler) {
            state = axpy_state(state, field(t, state), dt);
        } else {
            const OdeState k1 = field(t, state);
            const OdeState k2 = field(t + 0.5 * dt, axpy_state(state, k1, 0.5 * dt));
            const OdeState k3 = field(t + 0.5 * dt, axpy_state(state, k2, 0.5 * dt));
            const OdeState k4 = field(t + dt, axpy_state(state, k3, dt));
            OdeState next;
            next.reserve(state.size());
            for (std::size_t i = 0; i < state.size(); ++i) {
                Tensor incr = add(add(k1[i], scale(k2[i], 2.0)), add(scale(k3[i], 2.0), k4[i]));
                next.push_back(add(state[i], scale(incr, dt / 6.0)));
            }
            state = std::move(next);
        }
        check_finite(state, k);
    }
    return state;
}

}  // namespace stgncde
