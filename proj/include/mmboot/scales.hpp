#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mmboot/errors.hpp"

// Resampling scales.  A cell of the experiment design is a tuple of one to
// three scales (tau_1[, tau_2[, tau_3]]): step i of a replicate chain
// perturbs with scale tau_i.  tau^2 = n/n' is the variance inflation of
// resampling n' observations instead of n, but any positive real scale is
// accepted.

namespace mmboot {

/// Scales for one cell: k ∈ {1,2,3} resampling steps.
struct ScaleTuple {
    int k = 0;
    std::array<double, 3> tau{0.0, 0.0, 0.0};

    ScaleTuple() = default;
    explicit ScaleTuple(double t1) : k(1), tau{t1, 0.0, 0.0} { validate(); }
    ScaleTuple(double t1, double t2) : k(2), tau{t1, t2, 0.0} { validate(); }
    ScaleTuple(double t1, double t2, double t3) : k(3), tau{t1, t2, t3} { validate(); }

    /// Combined scale sqrt(tau_1^2 + ... + tau_k^2): the single-step scale
    /// with the same total perturbation variance.
    double combined() const {
        double sum = 0.0;
        for (int i = 0; i < k; ++i) sum += tau[i] * tau[i];
        return std::sqrt(sum);
    }

    bool operator==(const ScaleTuple& other) const {
        if (k != other.k) return false;
        for (int i = 0; i < k; ++i)
            if (tau[i] != other.tau[i]) return false;
        return true;
    }

private:
    void validate() const {
        for (int i = 0; i < k; ++i)
            if (!(tau[i] > 0.0))
                throw config_error("ScaleTuple: scales must be positive");
    }
};

/// The full experiment design: an ordered list of cells and the number of
/// replicate chains per cell.  Cell order is canonical - all 1-step cells,
/// then 2-step, then 3-step - and downstream fits index cells by position.
struct ScalePlan {
    std::vector<ScaleTuple> cells;
    long replicates_per_cell = 0;
};

/// The default design: tau_1^2 ranges over {10/3, 10/6, 1, 10/15, 10/21}
/// (resampling 0.3n, 0.6n, n, 1.5n and 2.1n observations), while the
/// second- and third-step scales use the two interior ratios
/// {10/6, 10/15}.  That yields 5 one-step, 10 two-step and 20 three-step
/// cells in canonical order; the one-step / two-step / three-step analyses
/// consume 5, 15 and 35 cells respectively.
inline ScalePlan default_scale_plan(int n, long replicates_per_cell) {
    if (n < 2)
        throw config_error("default_scale_plan: sample size must be at least 2");
    if (replicates_per_cell < 100)
        throw config_error("default_scale_plan: need at least 100 replicates per cell");
    const std::array<double, 5> tau1_sq{10.0 / 3.0, 10.0 / 6.0, 1.0, 10.0 / 15.0, 10.0 / 21.0};
    const std::array<double, 2> tau23_sq{10.0 / 6.0, 10.0 / 15.0};

    ScalePlan plan;
    plan.replicates_per_cell = replicates_per_cell;
    plan.cells.reserve(35);
    for (double a : tau1_sq)
        plan.cells.emplace_back(std::sqrt(a));
    for (double a : tau1_sq)
        for (double b : tau23_sq)
            plan.cells.emplace_back(std::sqrt(a), std::sqrt(b));
    for (double a : tau1_sq)
        for (double b : tau23_sq)
            for (double c : tau23_sq)
                plan.cells.emplace_back(std::sqrt(a), std::sqrt(b), std::sqrt(c));
    return plan;
}

} // namespace mmboot
