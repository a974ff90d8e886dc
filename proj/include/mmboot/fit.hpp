#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mmboot/errors.hpp"
#include "mmboot/resample.hpp"
#include "mmboot/scales.hpp"
#include "mmboot/special.hpp"

namespace mmboot {

// ---------------------------------------------------------------------------
// Scale features.
//
// The regression surfaces below depend on a chain's scales only through four
// symmetric combinations.  Scales absent from a tuple enter as tau -> 0
// limits of the three-step formulas; note the limit leaves a nonzero s3 for
// two-step cells (tau1^4 tau2^2 s1^6), which the joint 35-cell fit relies on.
// ---------------------------------------------------------------------------

struct ScaleFeatures {
    double s1 = 0.0;  ///< (tau1^2 + tau2^2 + tau3^2)^{-1/2}
    double s2 = 0.0;
    double s3 = 0.0;
    double s4 = 0.0;
};

inline ScaleFeatures scale_features(const ScaleTuple& s) {
    const double t1 = s.tau[0] * s.tau[0];
    const double t2 = s.k >= 2 ? s.tau[1] * s.tau[1] : 0.0;
    const double t3 = s.k >= 3 ? s.tau[2] * s.tau[2] : 0.0;
    const double sum = t1 + t2 + t3;
    const double inv = 1.0 / sum;
    ScaleFeatures f;
    f.s1 = std::sqrt(inv);
    f.s2 = (t1 * t2 + t2 * t3 + t3 * t1) * inv * inv;
    f.s3 = (t1 * t2 * t3 + t2 * t2 * t3 + t1 * t1 * (t2 + t3)) * inv * inv * inv;
    f.s4 = t1 * t2 * t3 * inv * inv * inv;
    return f;
}

// ---------------------------------------------------------------------------
// Regression surfaces.
//
// zeta2 models two-step z-values with three coefficients; zeta3 extends it
// to three-step chains with six.  Both are singular at gamma1 = 0 (gamma1 is
// a signed distance; the surfaces divide by it), so fits keep |gamma1|
// bounded away from zero.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_gamma1(double g1) {
    if (!(std::fabs(g1) >= 1e-6))
        throw numerical_error("regression surface: |gamma1| < 1e-6 (near-singular)");
}

}  // namespace detail

inline double zeta2(const std::array<double, 3>& g, const ScaleTuple& s) {
    detail::check_gamma1(g[0]);
    const ScaleFeatures f = scale_features(s);
    const double q = f.s1 * g[0];
    return q * (1.0 + f.s2 * g[2]) - (g[1] + f.s2 * g[2]) / q;
}

inline double zeta3(const std::array<double, 6>& g, const ScaleTuple& s) {
    detail::check_gamma1(g[0]);
    const ScaleFeatures f = scale_features(s);
    const double q = f.s1 * g[0];
    const double s2q = f.s2 * f.s2 * g[2] * g[2];
    const double grow = 1.0 + g[2] * f.s2 + 4.0 * s2q + g[4] * f.s3 + g[5] * f.s4;
    const double pull =
        g[1] + g[2] * f.s2 + 7.0 * s2q + g[3] * f.s2 + 3.0 * g[4] * f.s3 + 3.0 * g[5] * f.s4;
    return q * grow - pull / q;
}

namespace detail {

/// zeta2 value and gradient with respect to the three coefficients.
inline double zeta2_grad(const std::array<double, 3>& g, const ScaleFeatures& f,
                         std::array<double, 3>& grad) {
    const double q = f.s1 * g[0];
    const double A = 1.0 + f.s2 * g[2];
    const double P = g[1] + f.s2 * g[2];
    grad[0] = f.s1 * (A + P / (q * q));
    grad[1] = -1.0 / q;
    grad[2] = f.s2 * (q - 1.0 / q);
    return q * A - P / q;
}

/// zeta3 value and gradient with respect to the six coefficients.
inline double zeta3_grad(const std::array<double, 6>& g, const ScaleFeatures& f,
                         std::array<double, 6>& grad) {
    const double q = f.s1 * g[0];
    const double s2sq = f.s2 * f.s2;
    const double A = 1.0 + g[2] * f.s2 + 4.0 * s2sq * g[2] * g[2] + g[4] * f.s3 + g[5] * f.s4;
    const double P = g[1] + g[2] * f.s2 + 7.0 * s2sq * g[2] * g[2] + g[3] * f.s2 +
                     3.0 * g[4] * f.s3 + 3.0 * g[5] * f.s4;
    grad[0] = f.s1 * (A + P / (q * q));
    grad[1] = -1.0 / q;
    grad[2] = q * (f.s2 + 8.0 * s2sq * g[2]) - (f.s2 + 14.0 * s2sq * g[2]) / q;
    grad[3] = -f.s2 / q;
    grad[4] = q * f.s3 - 3.0 * f.s3 / q;
    grad[5] = q * f.s4 - 3.0 * f.s4 / q;
    return q * A - P / q;
}

// ---------------------------------------------------------------------------
// Dense symmetric linear algebra, sized for n <= 6.
// ---------------------------------------------------------------------------

/// In-place Cholesky factorization A = LL' of a row-major n x n matrix.
inline void cholesky(std::vector<double>& a, int n) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double sum = a[i * n + j];
            for (int k = 0; k < j; ++k)
                sum -= a[i * n + k] * a[j * n + k];
            if (i == j) {
                if (!(sum > 0.0))
                    throw numerical_error("normal equations not positive definite");
                a[i * n + i] = std::sqrt(sum);
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
}

/// Solve LL'x = b given the factor from cholesky().
inline void cholesky_solve(const std::vector<double>& l, int n, std::vector<double>& b) {
    for (int i = 0; i < n; ++i) {
        double sum = b[i];
        for (int k = 0; k < i; ++k)
            sum -= l[i * n + k] * b[k];
        b[i] = sum / l[i * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double sum = b[i];
        for (int k = i + 1; k < n; ++k)
            sum -= l[k * n + i] * b[k];
        b[i] = sum / l[i * n + i];
    }
}

/// Inverse of an SPD matrix through its Cholesky factor.
inline std::vector<double> spd_inverse(std::vector<double> a, int n) {
    cholesky(a, n);
    std::vector<double> inv(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<double> e(n);
    for (int j = 0; j < n; ++j) {
        std::fill(e.begin(), e.end(), 0.0);
        e[j] = 1.0;
        cholesky_solve(a, n, e);
        for (int i = 0; i < n; ++i)
            inv[i * n + j] = e[i];
    }
    // Symmetrize against round-off.
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < i; ++j) {
            const double v = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = inv[j * n + i] = v;
        }
    return inv;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// One-step fit: weighted least squares of z on (1/tau, tau).
// ---------------------------------------------------------------------------

struct LinearFit {
    double v = 0.0;  ///< coefficient of 1/tau: signed-distance estimate
    double c = 0.0;  ///< coefficient of tau: curvature estimate
    std::array<double, 4> cov{};  ///< row-major 2x2 covariance of (v, c)
    double rss = 0.0;             ///< weighted residual sum of squares
    int n_cells = 0;

    double se_v() const { return std::sqrt(cov[0]); }
    double se_c() const { return std::sqrt(cov[3]); }
};

inline LinearFit fit_onestep(const BootstrapTable& table) {
    double a11 = 0.0, a12 = 0.0, a22 = 0.0, b1 = 0.0, b2 = 0.0;
    double tau_min = 0.0, tau_max = 0.0;
    int n = 0;
    for (const auto& cell : table.cells) {
        if (cell.scales.k != 1)
            continue;
        const double tau = cell.scales.tau[0];
        const double w = 1.0 / cell.var_z;
        const double x1 = 1.0 / tau;
        a11 += w * x1 * x1;
        a12 += w;  // x1 * x2 = 1
        a22 += w * tau * tau;
        b1 += w * x1 * cell.z;
        b2 += w * tau * cell.z;
        tau_min = (n == 0) ? tau : std::min(tau_min, tau);
        tau_max = (n == 0) ? tau : std::max(tau_max, tau);
        ++n;
    }
    if (n < 2 || tau_max - tau_min <= 1e-12 * tau_max)
        throw config_error("fit_onestep: need at least two one-step cells with distinct scales");

    const double det = a11 * a22 - a12 * a12;
    if (!(det > 0.0))
        throw numerical_error("fit_onestep: singular design");
    LinearFit fit;
    fit.n_cells = n;
    fit.v = (a22 * b1 - a12 * b2) / det;
    fit.c = (a11 * b2 - a12 * b1) / det;
    fit.cov = {a22 / det, -a12 / det, -a12 / det, a11 / det};
    for (const auto& cell : table.cells) {
        if (cell.scales.k != 1)
            continue;
        const double tau = cell.scales.tau[0];
        const double r = cell.z - (fit.v / tau + fit.c * tau);
        fit.rss += r * r / cell.var_z;
    }
    return fit;
}

// ---------------------------------------------------------------------------
// Multistep fit: damped Gauss-Newton on the zeta surfaces.
// ---------------------------------------------------------------------------

struct GammaFit {
    int order = 0;                   ///< 3 or 6 coefficients
    std::array<double, 6> gamma{};   ///< estimates (trailing entries unused)
    std::array<double, 36> cov{};    ///< row-major order x order covariance
    std::array<double, 6> ridge{};   ///< penalty weights used
    double rss = 0.0;                ///< weighted residual sum of squares
    int iterations = 0;

    double se(int i) const { return std::sqrt(cov[i * order + i]); }
};

/// The standard penalty: leave the two leading coefficients free, shrink the
/// higher-order ones gently toward zero.
inline std::vector<double> default_ridge_weights(int order) {
    if (order != 3 && order != 6)
        throw config_error("default_ridge_weights: order must be 3 or 6");
    std::vector<double> w(static_cast<std::size_t>(order), 0.01);
    w[0] = 0.0;
    w[1] = 0.0;
    return w;
}

/// Fit the order-3 (two-step) or order-6 (three-step) surface to a table.
/// Order 3 uses the cells with k <= 2; order 6 uses all cells.  Weights are
/// per-replicate (w_i = 1/(B_i var_z_i)), which sets the scale on which the
/// ridge weights act; the covariance is the linearization sandwich
/// A^{-1} (J' diag(w_i/B_i) J) A^{-1} with A = J'WJ + Omega, which reduces
/// to the plain (J'WJ)^{-1} inverse when the penalty is zero.
inline GammaFit fit_multistep(const BootstrapTable& table, int order,
                              const std::vector<double>& ridge_weights,
                              const std::optional<std::array<double, 6>>& init = std::nullopt) {
    if (order != 3 && order != 6)
        throw config_error("fit_multistep: order must be 3 or 6");
    if (ridge_weights.size() != static_cast<std::size_t>(order))
        throw config_error("fit_multistep: need one ridge weight per coefficient");
    for (double w : ridge_weights)
        if (w < 0.0)
            throw config_error("fit_multistep: ridge weights must be nonnegative");

    struct Row {
        ScaleFeatures f;
        double z;
        double inv_var;  // 1 / var_z
        double w;        // per-replicate weight 1/(B var_z)
        double w_b;      // w / B, the covariance middle weight
    };
    std::vector<Row> rows;
    for (const auto& cell : table.cells) {
        if (order == 3 && cell.scales.k > 2)
            continue;
        Row r;
        r.f = scale_features(cell.scales);
        r.z = cell.z;
        r.inv_var = 1.0 / cell.var_z;
        r.w = r.inv_var / static_cast<double>(cell.B);
        r.w_b = r.w / static_cast<double>(cell.B);
        rows.push_back(r);
    }
    const int n = static_cast<int>(rows.size());
    if (n < order)
        throw config_error("fit_multistep: need at least " + std::to_string(order) +
                           " cells, have " + std::to_string(n));

    // Initialize gamma1 at the one-step signed distance (floored away from
    // the singular axis), everything else at zero.
    std::array<double, 6> g{};
    if (init) {
        g = *init;
    } else {
        const double v = fit_onestep(table).v;
        double g1 = v;
        if (std::fabs(g1) < 1e-3)
            g1 = (g1 < 0.0) ? -1e-3 : 1e-3;
        g[0] = g1;
    }
    if (std::fabs(g[0]) < 1e-6)
        throw numerical_error("fit_multistep: initial |gamma1| < 1e-6");

    auto surface = [&](const std::array<double, 6>& gam, const ScaleFeatures& f,
                       std::array<double, 6>& grad) -> double {
        if (order == 3) {
            std::array<double, 3> g3{gam[0], gam[1], gam[2]};
            std::array<double, 3> gr3;
            const double z = detail::zeta2_grad(g3, f, gr3);
            grad = {gr3[0], gr3[1], gr3[2], 0.0, 0.0, 0.0};
            return z;
        }
        return detail::zeta3_grad(gam, f, grad);
    };

    auto objective = [&](const std::array<double, 6>& gam) -> double {
        std::array<double, 6> grad;
        double obj = 0.0;
        for (const auto& row : rows) {
            const double r = row.z - surface(gam, row.f, grad);
            obj += row.w * r * r;
        }
        for (int j = 0; j < order; ++j)
            obj += ridge_weights[static_cast<std::size_t>(j)] * gam[j] * gam[j];
        return obj;
    };

    double obj = objective(g);
    double lambda = 1e-3;
    int iter = 0;
    bool converged = (obj == 0.0);
    double grad_norm = 0.0;

    std::vector<double> h(static_cast<std::size_t>(order) * order);
    std::vector<double> rhs(static_cast<std::size_t>(order));
    while (!converged && iter < 200) {
        ++iter;
        // Normal equations of the penalized problem at the current point.
        std::fill(h.begin(), h.end(), 0.0);
        std::fill(rhs.begin(), rhs.end(), 0.0);
        std::array<double, 6> grad;
        for (const auto& row : rows) {
            const double r = row.z - surface(g, row.f, grad);
            for (int i = 0; i < order; ++i) {
                rhs[static_cast<std::size_t>(i)] += row.w * grad[i] * r;
                for (int j = 0; j <= i; ++j)
                    h[static_cast<std::size_t>(i) * order + j] += row.w * grad[i] * grad[j];
            }
        }
        for (int i = 0; i < order; ++i)
            for (int j = i + 1; j < order; ++j)
                h[static_cast<std::size_t>(i) * order + j] =
                    h[static_cast<std::size_t>(j) * order + i];
        double max_diag = 0.0;
        for (int i = 0; i < order; ++i) {
            rhs[static_cast<std::size_t>(i)] -=
                ridge_weights[static_cast<std::size_t>(i)] * g[i];
            h[static_cast<std::size_t>(i) * order + i] +=
                ridge_weights[static_cast<std::size_t>(i)];
            max_diag = std::max(max_diag, h[static_cast<std::size_t>(i) * order + i]);
        }
        grad_norm = 0.0;
        for (int i = 0; i < order; ++i)
            grad_norm = std::max(grad_norm, std::fabs(rhs[static_cast<std::size_t>(i)]));

        // Damped step; rejections raise the damping until the step shrinks
        // into the trust region.
        bool accepted = false;
        while (!accepted) {
            std::vector<double> a = h;
            for (int i = 0; i < order; ++i)
                a[static_cast<std::size_t>(i) * order + i] +=
                    lambda * (h[static_cast<std::size_t>(i) * order + i] +
                              1e-12 * max_diag);
            std::vector<double> step = rhs;
            try {
                detail::cholesky(a, order);
                detail::cholesky_solve(a, order, step);
            } catch (const numerical_error&) {
                lambda *= 10.0;
                if (lambda > 1e15)
                    throw numerical_error(
                        "fit_multistep: normal equations unsolvable at iteration " +
                        std::to_string(iter));
                continue;
            }
            std::array<double, 6> trial = g;
            for (int i = 0; i < order; ++i)
                trial[i] += step[static_cast<std::size_t>(i)];
            const bool singular = std::fabs(trial[0]) < 1e-6;
            const double trial_obj = singular ? obj : objective(trial);
            if (!singular && trial_obj < obj) {
                const double decrease = obj - trial_obj;
                g = trial;
                converged = decrease <= 1e-12 * std::max(obj, 1e-300);
                obj = trial_obj;
                accepted = true;
                lambda = std::max(lambda * 0.1, 1e-12);
            } else {
                lambda *= 10.0;
                if (lambda > 1e15) {
                    // No descent direction left; at the optimum this is
                    // convergence, anywhere else a genuine failure.
                    if (grad_norm <= 1e-8 * std::max(1.0, obj)) {
                        converged = true;
                        accepted = true;
                    } else {
                        std::ostringstream msg;
                        msg << "fit_multistep: no descent at iteration " << iter
                            << " (objective " << obj << ", gradient norm " << grad_norm
                            << ", gamma";
                        for (int i = 0; i < order; ++i)
                            msg << ' ' << g[i];
                        msg << ")";
                        throw numerical_error(msg.str());
                    }
                }
            }
        }
    }
    if (!converged) {
        std::ostringstream msg;
        msg << "fit_multistep: no convergence in 200 iterations (gradient norm "
            << grad_norm << ", gamma";
        for (int i = 0; i < order; ++i)
            msg << ' ' << g[i];
        msg << ")";
        throw numerical_error(msg.str());
    }
    if (std::fabs(g[0]) < 1e-6)
        throw numerical_error("fit_multistep: |gamma1| pinned at the singular bound");

    GammaFit fit;
    fit.order = order;
    fit.gamma = g;
    for (int i = 0; i < order; ++i)
        fit.ridge[i] = ridge_weights[static_cast<std::size_t>(i)];
    fit.iterations = iter;

    // Covariance and reported residual sum at the solution.
    std::vector<double> hmat(static_cast<std::size_t>(order) * order, 0.0);
    std::vector<double> mmat(static_cast<std::size_t>(order) * order, 0.0);
    std::array<double, 6> grad;
    double rss_var = 0.0;
    for (const auto& row : rows) {
        const double r = row.z - surface(g, row.f, grad);
        rss_var += row.inv_var * r * r;
        for (int i = 0; i < order; ++i)
            for (int j = 0; j < order; ++j) {
                hmat[static_cast<std::size_t>(i) * order + j] += row.w * grad[i] * grad[j];
                mmat[static_cast<std::size_t>(i) * order + j] += row.w_b * grad[i] * grad[j];
            }
    }
    fit.rss = rss_var;
    std::vector<double> amat = hmat;
    for (int i = 0; i < order; ++i)
        amat[static_cast<std::size_t>(i) * order + i] +=
            ridge_weights[static_cast<std::size_t>(i)];
    const std::vector<double> ainv = detail::spd_inverse(amat, order);
    // cov = A^{-1} M A^{-1}
    std::vector<double> tmp(static_cast<std::size_t>(order) * order, 0.0);
    for (int i = 0; i < order; ++i)
        for (int k = 0; k < order; ++k) {
            const double aik = ainv[static_cast<std::size_t>(i) * order + k];
            if (aik == 0.0)
                continue;
            for (int j = 0; j < order; ++j)
                tmp[static_cast<std::size_t>(i) * order + j] +=
                    aik * mmat[static_cast<std::size_t>(k) * order + j];
        }
    for (int i = 0; i < order; ++i)
        for (int j = 0; j < order; ++j) {
            double sum = 0.0;
            for (int k = 0; k < order; ++k)
                sum += tmp[static_cast<std::size_t>(i) * order + k] *
                       ainv[static_cast<std::size_t>(k) * order + j];
            fit.cov[i * order + j] = sum;
        }
    return fit;
}

// ---------------------------------------------------------------------------
// CSV reports.
// ---------------------------------------------------------------------------

inline void write_fit_csv(const LinearFit& fit, std::ostream& out) {
    out << "coefficient,estimate,SE,rss,iterations\n";
    out << "v," << detail::fmt17(fit.v) << ',' << detail::fmt17(fit.se_v()) << ','
        << detail::fmt17(fit.rss) << ",0\n";
    out << "c," << detail::fmt17(fit.c) << ',' << detail::fmt17(fit.se_c()) << ','
        << detail::fmt17(fit.rss) << ",0\n";
}

inline void write_fit_csv(const GammaFit& fit, std::ostream& out) {
    out << "coefficient,estimate,SE,rss,iterations\n";
    for (int i = 0; i < fit.order; ++i)
        out << "gamma" << (i + 1) << ',' << detail::fmt17(fit.gamma[i]) << ','
            << detail::fmt17(fit.se(i)) << ',' << detail::fmt17(fit.rss) << ','
            << fit.iterations << "\n";
}

}  // namespace mmboot
