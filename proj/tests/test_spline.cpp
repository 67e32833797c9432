#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "stgncde/spline.hpp"
#include "oracle.hpp"

using namespace stgncde;

namespace {

ControlPath path_from_grid(const Tensor& window) {
    const std::vector<std::uint8_t> mask(
        static_cast<std::size_t>(window.dim(0)) * window.dim(1), 1);
    const std::vector<double> fill(static_cast<std::size_t>(window.dim(2)), 0.0);
    return build_control_paths(window, mask, fill);
}

}  // namespace

TEST_CASE("collinear knots reproduce the line") {
    const double times[] = {0, 1, 2};
    const double values[] = {0, 1, 2};
    const SplineCoeffs s = fit_natural_cubic(times, values);
    CHECK(s.eval(0.5) == doctest::Approx(0.5).epsilon(1e-14));
    for (double t : {-0.5, 0.0, 0.3, 1.0, 1.7, 2.0, 2.5}) {
        CHECK(s.eval_derivative(t) == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("hand-solved tent spline") {
    // knots (0,0),(1,1),(2,0): the tridiagonal system gives M1 = -3, so the
    // first segment is S(t) = 1.5 t - 0.5 t^3.
    const double times[] = {0, 1, 2};
    const double values[] = {0, 1, 0};
    const SplineCoeffs s = fit_natural_cubic(times, values);
    CHECK(s.eval(0.5) == doctest::Approx(0.6875).epsilon(1e-14));
    CHECK(s.eval_derivative(0.0) == doctest::Approx(1.5).epsilon(1e-14));
    CHECK(s.eval_derivative(1.0) == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(s.eval(1.0) == 1.0);  // knot interpolation is exact
    // against the closed form on a grid
    for (double t = 0.0; t <= 1.0; t += 0.125) {
        CHECK(s.eval(t) == doctest::Approx(1.5 * t - 0.5 * t * t * t).epsilon(1e-13));
    }
}

TEST_CASE("two knots degenerate to the segment's line") {
    const double times[] = {0, 4};
    const double values[] = {3, 7};
    const SplineCoeffs s = fit_natural_cubic(times, values);
    for (double t : {-1.0, 0.0, 1.0, 2.5, 4.0, 6.0}) {
        CHECK(s.eval_derivative(t) == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(s.eval(t) == doctest::Approx(3.0 + t).epsilon(1e-13));
    }
}

TEST_CASE("fit errors") {
    const double one_t[] = {0.0};
    const double one_v[] = {1.0};
    CHECK_THROWS_AS(fit_natural_cubic({one_t, 1}, {one_v, 1}), std::invalid_argument);
    const double bad_t[] = {0.0, 2.0, 2.0};
    const double vals[] = {1.0, 2.0, 3.0};
    CHECK_THROWS_AS(fit_natural_cubic(bad_t, vals), std::invalid_argument);
}

TEST_CASE("random windows: interpolation, continuity, derivative oracle") {
    oracle::Rng rng(101);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<double> times, values;
        const int k = 4 + static_cast<int>(rng.next() % 10);
        double t = 0.0;
        for (int i = 0; i < k; ++i) {
            times.push_back(t);
            values.push_back(rng.uniform(-2.0, 2.0));
            t += 1.0;
        }
        const SplineCoeffs s = fit_natural_cubic(times, values);

        for (int i = 0; i < k; ++i) {
            CHECK(std::fabs(s.eval(times[static_cast<std::size_t>(i)]) -
                            values[static_cast<std::size_t>(i)]) < 1e-10);
        }

        // C0/C1/C2 agreement across interior knots, plus natural boundaries.
        auto d2 = [&](std::size_t seg, double u) {
            return 2.0 * s.segs[seg][2] + 6.0 * s.segs[seg][3] * u;
        };
        for (std::size_t i = 1; i + 1 < static_cast<std::size_t>(k); ++i) {
            const double h = times[i] - times[i - 1];
            const auto& left = s.segs[i - 1];
            const double v_left = left[0] + h * (left[1] + h * (left[2] + h * left[3]));
            const double d_left = left[1] + h * (2.0 * left[2] + 3.0 * left[3] * h);
            CHECK(std::fabs(v_left - s.segs[i][0]) < 1e-8);
            CHECK(std::fabs(d_left - s.segs[i][1]) < 1e-8);
            CHECK(std::fabs(d2(i - 1, h) - d2(i, 0.0)) < 1e-8);
        }
        CHECK(std::fabs(d2(0, 0.0)) < 1e-8);
        CHECK(std::fabs(d2(static_cast<std::size_t>(k) - 2,
                           times[static_cast<std::size_t>(k) - 1] -
                               times[static_cast<std::size_t>(k) - 2])) < 1e-8);

        // analytic derivative vs central differences of eval
        for (int probe = 0; probe < 100; ++probe) {
            const double tp = rng.uniform(times.front(), times.back());
            const double h = 1e-6;
            const double fd = (s.eval(tp + h) - s.eval(tp - h)) / (2.0 * h);
            CHECK(std::fabs(s.eval_derivative(tp) - fd) < 1e-6);
        }
    }
}

TEST_CASE("extrapolation continues linearly with the boundary slope") {
    const double times[] = {0, 1, 2, 3};
    const double values[] = {0.0, 1.0, -0.5, 0.25};
    const SplineCoeffs s = fit_natural_cubic(times, values);
    const double slope_left = s.eval_derivative(0.0);
    const double slope_right = s.eval_derivative(3.0);
    for (double d : {0.5, 1.0, 2.0}) {
        CHECK(s.eval(-d) == doctest::Approx(values[0] - slope_left * d).epsilon(1e-12));
        CHECK(s.eval(3.0 + d) == doctest::Approx(values[3] + slope_right * d).epsilon(1e-12));
        CHECK(s.eval_derivative(-d) == doctest::Approx(slope_left).epsilon(1e-12));
        CHECK(s.eval_derivative(3.0 + d) == doctest::Approx(slope_right).epsilon(1e-12));
    }
}

TEST_CASE("control paths reproduce a fully observed window") {
    oracle::Rng rng(55);
    const Tensor window = oracle::random_tensor({3, 12, 2}, rng);
    const ControlPath path = path_from_grid(window);
    for (int i = 0; i < 12; ++i) {
        const Tensor x = path.eval(static_cast<double>(i));
        for (int v = 0; v < 3; ++v)
            for (int c = 0; c < 2; ++c) CHECK(std::fabs(x.at2(v, c) - window.at3(v, i, c)) < 1e-10);
    }
}

TEST_CASE("sparse observations fall back per the masking rules") {
    oracle::Rng rng(56);
    const Tensor window = oracle::random_tensor({3, 4, 1}, rng);
    const double fill[] = {0.625};

    SUBCASE("single observed point gives a constant path at that value") {
        std::vector<std::uint8_t> mask(12, 0);
        mask[0 * 4 + 2] = 1;  // node 0 observed only at t=2
        mask[1 * 4 + 0] = mask[1 * 4 + 1] = mask[1 * 4 + 2] = mask[1 * 4 + 3] = 1;
        mask[2 * 4 + 1] = 1;  // node 2 observed only at t=1
        const ControlPath path = build_control_paths(window, mask, fill);
        for (double t : {0.0, 0.7, 2.0, 3.0}) {
            CHECK(path.eval(t).at2(0, 0) == doctest::Approx(window.at3(0, 2, 0)).epsilon(1e-14));
            CHECK(path.eval_derivative(t).at2(0, 0) == 0.0);
            CHECK(path.eval(t).at2(2, 0) == doctest::Approx(window.at3(2, 1, 0)).epsilon(1e-14));
        }
    }
    SUBCASE("no observed points give a constant path at the fill value") {
        std::vector<std::uint8_t> mask(12, 1);
        for (int i = 0; i < 4; ++i) mask[1 * 4 + i] = 0;
        const ControlPath path = build_control_paths(window, mask, fill);
        for (double t : {0.0, 1.3, 3.0}) {
            CHECK(path.eval(t).at2(1, 0) == 0.625);
            CHECK(path.eval_derivative(t).at2(1, 0) == 0.0);
        }
    }
    SUBCASE("masked boundary extrapolates from the remaining knots") {
        // observations only at t = 1 and t = 3: a two-knot line; eval(0)
        // extends that line leftward.
        std::vector<std::uint8_t> mask(12, 1);
        mask[0 * 4 + 0] = 0;
        mask[0 * 4 + 2] = 0;
        const ControlPath path = build_control_paths(window, mask, fill);
        const double v1 = window.at3(0, 1, 0), v3 = window.at3(0, 3, 0);
        const double slope = (v3 - v1) / 2.0;
        CHECK(path.eval(0.0).at2(0, 0) == doctest::Approx(v1 - slope).epsilon(1e-12));
        CHECK(path.eval(2.0).at2(0, 0) == doctest::Approx(v1 + slope).epsilon(1e-12));
    }
}

TEST_CASE("control path rejects malformed inputs") {
    const Tensor window = Tensor::zeros({2, 4, 1});
    const double fill[] = {0.0};
    std::vector<std::uint8_t> short_mask(4, 1);
    CHECK_THROWS_AS(build_control_paths(window, short_mask, fill), std::invalid_argument);
    std::vector<std::uint8_t> mask(8, 1);
    CHECK_THROWS_AS(build_control_paths(window, mask, std::span<const double>{}),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_control_paths(Tensor::zeros({2, 4}), mask, fill), std::invalid_argument);
}
