#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stgncde/tensor.hpp"

namespace stgncde {

struct SolverConfig {
    enum class Method { euler, rk4 };
    Method method = Method::rk4;
    int steps_per_unit = 1;
};

SolverConfig::Method parse_solver_method(const std::string& name);
std::string solver_method_name(SolverConfig::Method m);

/// The integrated state as a list of tensors; the field returns the time
/// derivative of each entry.
using OdeState = std::vector<Tensor>;
using OdeField = std::function<OdeState(double t, const OdeState& state)>;

/// Fixed-step integration of state' = field(t, state) from t0 to t1 with
/// (t1 - t0) * steps_per_unit steps. Every stage runs through the tensor ops,
/// so a backward() on anything derived from the result differentiates through
/// the whole discretization. Throws DivergenceError if the state goes
/// non-finite, reporting the step index.
OdeState integrate(const OdeField& field, OdeState state, double t0, double t1,
                   const SolverConfig& cfg);

}  // namespace stgncde
