#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "stgncde/tensor.hpp"

namespace stgncde {

/// One natural cubic spline: knot times plus per-segment coefficients of
/// S(t) = a + b*u + c*u^2 + d*u^3 with u = t - t_left. Outside the knot range
/// the spline continues linearly with the boundary slope (the natural
/// boundary makes that extension C^1).
struct SplineCoeffs {
    std::vector<double> knots;
    std::vector<std::array<double, 4>> segs;  // a, b, c, d per segment

    double eval(double t) const;
    double eval_derivative(double t) const;
};

/// Natural cubic spline through (times[i], values[i]): zero second derivative
/// at both boundary knots, interior second derivatives from the standard
/// tridiagonal system. Two knots degenerate to the straight line.
SplineCoeffs fit_natural_cubic(std::span<const double> times, std::span<const double> values);

/// The continuous control path of one window: a spline per (node, channel)
/// over the grid t = 0..window_len-1. Immutable and safely shareable.
class ControlPath {
  public:
    ControlPath() = default;
    ControlPath(std::vector<SplineCoeffs> splines, int num_nodes, int num_channels, int window_len);

    int num_nodes() const { return num_nodes_; }
    int num_channels() const { return num_channels_; }
    int window_len() const { return window_len_; }
    double t_end() const { return static_cast<double>(window_len_ - 1); }

    const SplineCoeffs& spline(int node, int channel) const;

    Tensor eval(double t) const;             // [V x D]
    Tensor eval_derivative(double t) const;  // [V x D]

    /// Appends values/derivatives at t for all nodes into a flat buffer;
    /// used to stack several windows into one batch tensor.
    void eval_into(double t, double* out) const;
    void eval_derivative_into(double t, double* out) const;

  private:
    std::vector<SplineCoeffs> splines_;  // node-major, channel-minor
    int num_nodes_ = 0;
    int num_channels_ = 0;
    int window_len_ = 0;
};

/// Fits one spline per (node, channel) through the unmasked knots of the
/// window (shape [V x T x D]; mask is V x T, true = observed). A channel with
/// one observed point becomes a constant path at that value; with none, a
/// constant path at fill_value[channel]. Constant paths have zero derivative.
ControlPath build_control_paths(const Tensor& window, std::span<const std::uint8_t> mask,
                                std::span<const double> fill_value);

}  // namespace stgncde
