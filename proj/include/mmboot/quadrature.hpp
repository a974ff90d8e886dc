#pragma once

#include <array>
#include <cmath>
#include <queue>
#include <utility>
#include <vector>

#include "mmboot/errors.hpp"

// Adaptive one-dimensional quadrature: 15-point Kronrod extension of
// 7-point Gauss per panel, with global error control — the panel with the
// largest Kronrod/Gauss discrepancy is bisected until the summed error meets
// the tolerance.  Splitting worst-first keeps effort proportional to where
// the integrand actually misbehaves (the near-indicator transition kernels
// at tiny scales), instead of spreading a per-panel tolerance over smooth
// regions.

namespace mmboot {

namespace detail {

// Nodes/weights of the (G7, K15) pair on [-1, 1].  Gauss points are the
// odd-indexed Kronrod points.
inline constexpr std::array<double, 8> k15_nodes = {
    0.0,
    0.2077849550078984676006894, 0.4058451513773971669066064,
    0.5860872354676911302941448, 0.7415311855993944398638648,
    0.8648644233597690727897128, 0.9491079123427585245261897,
    0.9914553711208126392068547,
};
inline constexpr std::array<double, 8> k15_weights = {
    0.2094821410847278280129992,
    0.2044329400752988924141620, 0.1903505780647854099132564,
    0.1690047266392679028265834, 0.1406532597155259187451896,
    0.1047900103222501838398763, 0.0630920926299785532907007,
    0.0229353220105292249637320,
};
inline constexpr std::array<double, 4> g7_weights = {
    0.4179591836734693877551020, // node 0.0
    0.3818300505051189449503698, // node 0.4058...
    0.2797053914892766679014678, // node 0.7415...
    0.1294849661688696932706114, // node 0.9491...
};

/// One Gauss-Kronrod panel: returns (kronrod value, |kronrod - gauss|).
template <typename F>
std::pair<double, double> gk15_panel(F&& f, double lo, double hi) {
    const double mid = 0.5 * (lo + hi);
    const double half = 0.5 * (hi - lo);
    const double f0 = f(mid);
    double kronrod = k15_weights[0] * f0;
    double gauss = g7_weights[0] * f0;
    for (int i = 1; i < 8; ++i) {
        const double fv = f(mid - half * k15_nodes[i]) + f(mid + half * k15_nodes[i]);
        kronrod += k15_weights[i] * fv;
        if (i % 2 == 0)
            gauss += g7_weights[i / 2] * fv;
    }
    kronrod *= half;
    gauss *= half;
    return {kronrod, std::fabs(kronrod - gauss)};
}

struct QuadPanel {
    double lo, hi, value, err;
    bool operator<(const QuadPanel& other) const { return err < other.err; }
};

}  // namespace detail

/// Integrate f over [lo, hi] aiming at the given absolute tolerance.
/// Throws numerical_error if the error estimate cannot be brought under
/// max(1e-6, 10 * abs_tol) — the hard accuracy floor of the probability
/// integrals computed here.
template <typename F>
double integrate(F&& f, double lo, double hi, double abs_tol, int max_panels = 4096) {
    if (!(lo <= hi))
        throw config_error("integrate: invalid interval");
    if (lo == hi)
        return 0.0;

    std::priority_queue<detail::QuadPanel> queue;
    const auto [v0, e0] = detail::gk15_panel(f, lo, hi);
    queue.push({lo, hi, v0, e0});
    double total_err = e0;
    int n_panels = 1;
    const double min_width = (hi - lo) * 1e-14;

    std::vector<detail::QuadPanel> done;  // panels too narrow to split further
    while (total_err > abs_tol && n_panels < max_panels && !queue.empty()) {
        const detail::QuadPanel worst = queue.top();
        queue.pop();
        const double mid = 0.5 * (worst.lo + worst.hi);
        if (worst.hi - worst.lo <= min_width || mid <= worst.lo || mid >= worst.hi) {
            // Cannot be resolved further in double precision; accept as is.
            done.push_back(worst);
            continue;
        }
        const auto [vl, el] = detail::gk15_panel(f, worst.lo, mid);
        const auto [vr, er] = detail::gk15_panel(f, mid, worst.hi);
        queue.push({worst.lo, mid, vl, el});
        queue.push({mid, worst.hi, vr, er});
        total_err += el + er - worst.err;
        ++n_panels;
    }

    double value = 0.0;
    double err = 0.0;
    for (const auto& p : done) {
        value += p.value;
        err += p.err;
    }
    while (!queue.empty()) {
        value += queue.top().value;
        err += queue.top().err;
        queue.pop();
    }
    if (err > std::max(1e-6, 10.0 * abs_tol))
        throw numerical_error("integrate: error estimate " + std::to_string(err) +
                              " exceeds the accuracy floor");
    return value;
}

}  // namespace mmboot
