#include "stgncde/spline.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace stgncde {

namespace {

// Index of the segment containing t (clamped to the outermost segments).
std::size_t segment_index(const std::vector<double>& knots, double t) {
    if (t <= knots.front()) return 0;
    if (t >= knots.back()) return knots.size() - 2;
    const auto it = std::upper_bound(knots.begin(), knots.end(), t);
    return static_cast<std::size_t>(it - knots.begin()) - 1;
}

SplineCoeffs constant_spline(double value, double t_end) {
    SplineCoeffs s;
    s.knots = {0.0, std::max(t_end, 1.0)};
    s.segs = {{value, 0.0, 0.0, 0.0}};
    return s;
}

}  // namespace

double SplineCoeffs::eval(double t) const {
    const double lo = knots.front(), hi = knots.back();
    if (t < lo) return segs.front()[0] + segs.front()[1] * (t - lo);
    if (t > hi) {
        const std::size_t i = segs.size() - 1;
        const double u = knots[i + 1] - knots[i];
        const auto& [a, b, c, d] = segs[i];
        const double end_value = a + u * (b + u * (c + u * d));
        const double end_slope = b + u * (2.0 * c + 3.0 * d * u);
        return end_value + end_slope * (t - hi);
    }
    const std::size_t i = segment_index(knots, t);
    const double u = t - knots[i];
    const auto& [a, b, c, d] = segs[i];
    return a + u * (b + u * (c + u * d));
}

double SplineCoeffs::eval_derivative(double t) const {
    const double lo = knots.front(), hi = knots.back();
    if (t < lo) return segs.front()[1];
    if (t > hi) {
        const std::size_t i = segs.size() - 1;
        const double u = knots[i + 1] - knots[i];
        const auto& [a, b, c, d] = segs[i];
        (void)a;
        return b + u * (2.0 * c + 3.0 * d * u);
    }
    const std::size_t i = segment_index(knots, t);
    const double u = t - knots[i];
    const auto& [a, b, c, d] = segs[i];
    (void)a;
    return b + u * (2.0 * c + 3.0 * d * u);
}

SplineCoeffs fit_natural_cubic(std::span<const double> times, std::span<const double> values) {
    const std::size_t k = times.size();
    if (k < 2) {
        throw std::invalid_argument("fit_natural_cubic: need at least 2 knots, got " + std::to_string(k));
    }
    if (values.size() != k) {
        throw std::invalid_argument("fit_natural_cubic: " + std::to_string(values.size()) +
                                    " values for " + std::to_string(k) + " knot times");
    }
    for (std::size_t i = 1; i < k; ++i) {
        if (!(times[i] > times[i - 1])) {
            throw std::invalid_argument("fit_natural_cubic: knot times must be strictly increasing (t[" +
                                        std::to_string(i - 1) + "]=" + std::to_string(times[i - 1]) +
                                        ", t[" + std::to_string(i) + "]=" + std::to_string(times[i]) + ")");
        }
    }

    SplineCoeffs s;
    s.knots.assign(times.begin(), times.end());
    s.segs.resize(k - 1);

    // Second derivatives M_i: natural boundary M_0 = M_{k-1} = 0, interior
    // ones from h_{i-1} M_{i-1} + 2(h_{i-1}+h_i) M_i + h_i M_{i+1} = rhs_i.
    std::vector<double> m(k, 0.0);
    if (k > 2) {
        const std::size_t n = k - 2;
        std::vector<double> diag(n), upper(n), rhs(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double h0 = times[i + 1] - times[i];
            const double h1 = times[i + 2] - times[i + 1];
            diag[i] = 2.0 * (h0 + h1);
            upper[i] = h1;
            rhs[i] = 6.0 * ((values[i + 2] - values[i + 1]) / h1 - (values[i + 1] - values[i]) / h0);
        }
        // Thomas algorithm (sub-diagonal equals the previous upper entry's h).
        for (std::size_t i = 1; i < n; ++i) {
            const double h0 = times[i + 1] - times[i];
            const double w = h0 / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        m[n] = rhs[n - 1] / diag[n - 1];
        for (std::size_t i = n - 1; i >= 1; --i) {
            m[i] = (rhs[i - 1] - upper[i - 1] * m[i + 1]) / diag[i - 1];
        }
    }

    for (std::size_t i = 0; i + 1 < k; ++i) {
        const double h = times[i + 1] - times[i];
        s.segs[i][0] = values[i];
        s.segs[i][1] = (values[i + 1] - values[i]) / h - h * (2.0 * m[i] + m[i + 1]) / 6.0;
        s.segs[i][2] = m[i] / 2.0;
        s.segs[i][3] = (m[i + 1] - m[i]) / (6.0 * h);
    }
    return s;
}

ControlPath::ControlPath(std::vector<SplineCoeffs> splines, int num_nodes, int num_channels,
                         int window_len)
    : splines_(std::move(splines)), num_nodes_(num_nodes), num_channels_(num_channels),
      window_len_(window_len) {
    if (static_cast<int>(splines_.size()) != num_nodes_ * num_channels_) {
        throw std::invalid_argument("ControlPath: spline count does not match nodes x channels");
    }
}

const SplineCoeffs& ControlPath::spline(int node, int channel) const {
    return splines_.at(static_cast<std::size_t>(node) * num_channels_ + channel);
}

void ControlPath::eval_into(double t, double* out) const {
    for (const auto& s : splines_) *out++ = s.eval(t);
}

void ControlPath::eval_derivative_into(double t, double* out) const {
    for (const auto& s : splines_) *out++ = s.eval_derivative(t);
}

Tensor ControlPath::eval(double t) const {
    Tensor out = Tensor::zeros({num_nodes_, num_channels_});
    eval_into(t, out.raw().data());
    return out;
}

Tensor ControlPath::eval_derivative(double t) const {
    Tensor out = Tensor::zeros({num_nodes_, num_channels_});
    eval_derivative_into(t, out.raw().data());
    return out;
}

ControlPath build_control_paths(const Tensor& window, std::span<const std::uint8_t> mask,
                                std::span<const double> fill_value) {
    if (window.ndim() != 3) {
        throw std::invalid_argument("build_control_paths: window must be [V x T x D], got " +
                                    detail::shape_str(window.shape()));
    }
    const int v = window.dim(0), t_len = window.dim(1), d = window.dim(2);
    if (static_cast<int>(mask.size()) != v * t_len) {
        throw std::invalid_argument("build_control_paths: mask size " + std::to_string(mask.size()) +
                                    " != nodes x steps = " + std::to_string(v * t_len));
    }
    if (static_cast<int>(fill_value.size()) != d) {
        throw std::invalid_argument("build_control_paths: fill_value must have one entry per channel");
    }

    const double t_end = static_cast<double>(t_len - 1);
    std::vector<SplineCoeffs> splines;
    splines.reserve(static_cast<std::size_t>(v) * d);
    std::vector<double> times, vals;
    for (int node = 0; node < v; ++node) {
        times.clear();
        for (int i = 0; i < t_len; ++i) {
            if (mask[static_cast<std::size_t>(node) * t_len + i]) times.push_back(static_cast<double>(i));
        }
        for (int ch = 0; ch < d; ++ch) {
            if (times.size() >= 2) {
                vals.clear();
                for (double ti : times) vals.push_back(window.at3(node, static_cast<int>(ti), ch));
                splines.push_back(fit_natural_cubic(times, vals));
            } else if (times.size() == 1) {
                splines.push_back(constant_spline(window.at3(node, static_cast<int>(times[0]), ch), t_end));
            } else {
                splines.push_back(constant_spline(fill_value[ch], t_end));
            }
        }
    }
    return ControlPath(std::move(splines), v, d, t_len);
}

}  // namespace stgncde
