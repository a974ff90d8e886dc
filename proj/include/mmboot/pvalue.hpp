#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mmboot/errors.hpp"
#include "mmboot/fit.hpp"
#include "mmboot/models.hpp"
#include "mmboot/resample.hpp"
#include "mmboot/special.hpp"

namespace mmboot {

// ---------------------------------------------------------------------------
// Corrected p-values.
//
// Every report pairs a probability with its z-value, alpha = Phi(-z), plus a
// delta-method standard error where one is defined (the abc and exact methods
// carry none).  `source` records which table/fit produced the number.
// ---------------------------------------------------------------------------

struct PValueReport {
    std::string method;  ///< one of p0, abc, p1, p2, p3, exact
    double alpha = 0.0;
    double z = 0.0;
    std::optional<double> se_alpha;
    std::string source;
};

namespace detail {

/// The plain bootstrap cell: one step at scale tau = 1.
inline const BootstrapCell& find_unit_cell(const BootstrapTable& table) {
    for (const auto& cell : table.cells)
        if (cell.scales.k == 1 && std::fabs(cell.scales.tau[0] - 1.0) <= 1e-9)
            return cell;
    throw config_error("table has no one-step cell at scale 1 (needed for p0/abc)");
}

inline std::string table_source(const BootstrapTable& table) {
    return std::string(table.oracle ? "oracle" : "mc") + " table, model " +
           table.model_name;
}

/// Reserved cell index for the re-run at the projected point; far outside
/// any plausible design so its random streams never collide with table cells.
constexpr std::uint32_t kProjectionCell = 0x80000000u;

}  // namespace detail

/// The uncorrected bootstrap probability: the tau = 1 one-step cell as is.
inline PValueReport p0(const BootstrapTable& table) {
    const BootstrapCell& cell = detail::find_unit_cell(table);
    PValueReport r;
    r.method = "p0";
    r.z = cell.z;
    r.alpha = normal_cdf(-cell.z);
    r.se_alpha = normal_pdf(cell.z) * std::sqrt(cell.var_z);
    r.source = detail::table_source(table);
    return r;
}

/// The bias-corrected-and-accelerated conversion on the z scale.  Note the
/// acceleration enters with the opposite sign of the usual confidence-limit
/// form: this is the p-value direction.
inline double z_abc(double z0_y, double z0_proj, double a) {
    const double d = z0_y - z0_proj;
    const double denom = 1.0 - a * d;
    if (std::fabs(denom) < 1e-6)
        throw numerical_error("z_abc: acceleration denominator vanishes");
    return d / denom - z0_proj;
}

/// Full two-level pipeline: the plain cell at y plus a second one-step cell
/// re-run at the projection of y onto the region boundary.  Monte Carlo
/// tables re-run that cell with the table's own seed; oracle tables use the
/// model's one-step probability directly.
template <ReplicateModel M>
PValueReport p_abc(const M& model, const BootstrapTable& table, int workers = 1) {
    if constexpr (!HasBoundaryProjection<M> || !HasAcceleration<M>) {
        (void)table;
        (void)workers;
        throw capability_error("model '" + std::string(model.name()) +
                               "' lacks boundary projection or acceleration");
    } else {
        const BootstrapCell& unit = detail::find_unit_cell(table);
        const Point eta = model.project_to_boundary(table.observation);
        double z0_proj;
        if (table.oracle) {
            if constexpr (HasOneStepOracle<M>)
                z0_proj = -normal_quantile(model.one_step_prob(eta, 1.0));
            else
                throw capability_error("model '" + std::string(model.name()) +
                                       "' has no one-step probability oracle");
        } else {
            const BootstrapCell proj =
                run_cell(model, eta, ScaleTuple(1.0), unit.B, table.master_seed,
                         detail::kProjectionCell, workers);
            z0_proj = proj.z;
        }
        PValueReport r;
        r.method = "abc";
        r.z = z_abc(unit.z, z0_proj, model.acceleration());
        r.alpha = normal_cdf(-r.z);
        r.source = detail::table_source(table);
        return r;
    }
}

/// First-order correction from the one-step fit: z1 = v - c.
inline PValueReport p1(const LinearFit& fit) {
    PValueReport r;
    r.method = "p1";
    r.z = fit.v - fit.c;
    r.alpha = normal_cdf(-r.z);
    const double var = fit.cov[0] - 2.0 * fit.cov[1] + fit.cov[3];
    r.se_alpha = normal_pdf(r.z) * std::sqrt(std::max(var, 0.0));
    r.source = "one-step fit";
    return r;
}

/// Second-order correction from the three-coefficient fit:
/// z2 = gamma1 (1 + gamma3) + gamma2 / gamma1.
inline PValueReport p2(const GammaFit& fit) {
    if (fit.order != 3)
        throw config_error("p2 needs a three-coefficient fit");
    detail::check_gamma1(fit.gamma[0]);
    const double g1 = fit.gamma[0], g2 = fit.gamma[1], g3 = fit.gamma[2];
    PValueReport r;
    r.method = "p2";
    r.z = g1 * (1.0 + g3) + g2 / g1;
    r.alpha = normal_cdf(-r.z);
    const double grad[3] = {1.0 + g3 - g2 / (g1 * g1), 1.0 / g1, g1};
    double var = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            var += grad[i] * fit.cov[i * 3 + j] * grad[j];
    r.se_alpha = normal_pdf(r.z) * std::sqrt(std::max(var, 0.0));
    r.source = "three-coefficient fit";
    return r;
}

/// Third-order correction from the six-coefficient fit:
/// z3 = gamma1 (1 + gamma3 + 4 gamma3^2 + gamma6)
///      + (gamma2 + gamma3^2/2 + gamma4 + gamma5) / gamma1.
inline PValueReport p3(const GammaFit& fit) {
    if (fit.order != 6)
        throw config_error("p3 needs a six-coefficient fit");
    detail::check_gamma1(fit.gamma[0]);
    const double g1 = fit.gamma[0], g2 = fit.gamma[1], g3 = fit.gamma[2];
    const double g4 = fit.gamma[3], g5 = fit.gamma[4], g6 = fit.gamma[5];
    PValueReport r;
    r.method = "p3";
    const double grow = 1.0 + g3 + 4.0 * g3 * g3 + g6;
    const double pull = g2 + 0.5 * g3 * g3 + g4 + g5;
    r.z = g1 * grow + pull / g1;
    r.alpha = normal_cdf(-r.z);
    const double grad[6] = {grow - pull / (g1 * g1),
                            1.0 / g1,
                            g1 * (1.0 + 8.0 * g3) + g3 / g1,
                            1.0 / g1,
                            1.0 / g1,
                            g1};
    double var = 0.0;
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j)
            var += grad[i] * fit.cov[i * 6 + j] * grad[j];
    r.se_alpha = normal_pdf(r.z) * std::sqrt(std::max(var, 0.0));
    r.source = "six-coefficient fit";
    return r;
}

/// The model's closed-form p-value, where one exists.
template <typename M>
PValueReport p_exact(const M& model, const Point& y) {
    if constexpr (!HasExactPValue<M>) {
        (void)y;
        throw capability_error("model '" + std::string(model.name()) +
                               "' has no exact p-value");
    } else {
        PValueReport r;
        r.method = "exact";
        r.alpha = model.exact_pvalue(y);
        r.z = -normal_quantile(r.alpha);
        r.source = std::string("model ") + model.name();
        return r;
    }
}

/// Predicted gap between the two-step and one-step z-values at the combined
/// scale, driven by the acceleration: a diagnostic for how much of the
/// multistep effect is third-order skewness.
inline double two_step_shift(double a, double v, double tau1, double tau2) {
    if (!(tau1 > 0.0) || !(tau2 > 0.0))
        throw config_error("two_step_shift: scales must be positive");
    const double t1 = tau1 * tau1, t2 = tau2 * tau2;
    const double sum = t1 + t2;
    return a * t1 * t2 * (v * v - sum) / (sum * sum * std::sqrt(sum));
}

// ---------------------------------------------------------------------------
// CSV report.
// ---------------------------------------------------------------------------

inline void write_pvalues_csv(const std::vector<PValueReport>& reports,
                              std::ostream& out) {
    out << "method,alpha,z,se_alpha\n";
    for (const auto& r : reports) {
        out << r.method << ',' << detail::fmt17(r.alpha) << ',' << detail::fmt17(r.z)
            << ',';
        if (r.se_alpha)
            out << detail::fmt17(*r.se_alpha);
        out << '\n';
    }
}

}  // namespace mmboot
