#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mmboot/errors.hpp"
#include "mmboot/fit.hpp"
#include "mmboot/models.hpp"
#include "mmboot/pvalue.hpp"
#include "mmboot/resample.hpp"
#include "mmboot/scales.hpp"
#include "mmboot/special.hpp"

// Orchestration: the full observation -> table -> fits -> p-values pipeline,
// benchmark-table and curve exports, and coverage simulations.  The CLI is a
// thin shell over this header.

namespace mmboot {

enum class RunMode { mc, oracle };

inline RunMode parse_run_mode(const std::string& s) {
    if (s == "mc")
        return RunMode::mc;
    if (s == "oracle")
        return RunMode::oracle;
    throw config_error("mode must be 'mc' or 'oracle', got '" + s + "'");
}

// ---------------------------------------------------------------------------
// Calibrated observations.
// ---------------------------------------------------------------------------

/// The observation along the boundary ray whose exact p-value equals
/// `target`: scales the model's canonical boundary point until the exact
/// p-value crosses the target, then bisects to machine precision.
template <typename M>
Point solve_observation(const M& model, double target) {
    static_assert(HasExactPValue<M> && HasBoundaryPoint<M>,
                  "solve_observation needs an exact p-value and a boundary point");
    if (!(target > 0.0) || !(target < 1.0))
        throw config_error("solve_observation: target must be inside (0,1)");
    const Point eta = model.boundary_point();
    auto alpha_at = [&](double t) {
        Point y = eta;
        for (double& v : y)
            v *= t;
        return model.exact_pvalue(y);
    };
    // The exact p-value falls as the observation moves out along the ray.
    double lo = 1.0, hi = 1.0;
    int guard = 0;
    if (alpha_at(1.0) > target)
        while (alpha_at(hi) > target && ++guard < 4000)
            hi *= 1.25;
    else
        while (alpha_at(lo) < target && ++guard < 4000)
            lo *= 0.8;
    if (guard >= 4000)
        throw numerical_error("solve_observation: failed to bracket the target");
    for (int i = 0; i < 200 && hi - lo > 1e-16 * hi; ++i) {
        const double mid = 0.5 * (lo + hi);
        (alpha_at(mid) > target ? lo : hi) = mid;
    }
    Point y = eta;
    for (double& v : y)
        v *= 0.5 * (lo + hi);
    return y;
}

// ---------------------------------------------------------------------------
// Single-observation analysis.
// ---------------------------------------------------------------------------

struct AnalysisOptions {
    RunMode mode = RunMode::mc;
    long long B = 10000;
    std::uint64_t seed = 0;
    int workers = 1;
    /// Methods to report; empty means every method the inputs support.
    std::vector<std::string> methods;
    /// Penalty weights for the six-coefficient fit (first three double as the
    /// three-coefficient weights); empty means the library defaults.
    std::vector<double> ridge;
    std::optional<ScalePlan> plan;
};

struct AnalysisResult {
    BootstrapTable table;
    std::optional<LinearFit> onestep;
    std::optional<GammaFit> fit3;
    std::optional<GammaFit> fit6;
    std::vector<PValueReport> reports;
};

namespace detail {

inline bool wants(const std::vector<std::string>& methods, const std::string& m) {
    return std::find(methods.begin(), methods.end(), m) != methods.end();
}

inline void validate_methods(const std::vector<std::string>& methods) {
    static const char* known[] = {"p0", "abc", "p1", "p2", "p3", "exact"};
    for (const auto& m : methods)
        if (std::find(std::begin(known), std::end(known), m) == std::end(known))
            throw config_error("unknown method '" + m +
                               "' (choose from p0, abc, p1, p2, p3, exact)");
}

inline std::pair<std::vector<double>, std::vector<double>> split_ridge(
    const std::vector<double>& ridge) {
    if (ridge.empty())
        return {default_ridge_weights(3), default_ridge_weights(6)};
    if (ridge.size() != 6)
        throw config_error("ridge needs exactly 6 weights (or none for defaults)");
    return {{ridge[0], ridge[1], ridge[2]}, ridge};
}

/// The table-only part of the pipeline: fits plus p0/p1/p2/p3.
inline void analyze_core(AnalysisResult& out, const std::vector<std::string>& methods,
                         const std::vector<double>& ridge3,
                         const std::vector<double>& ridge6) {
    int onestep_cells = 0;
    for (const auto& cell : out.table.cells)
        onestep_cells += cell.scales.k == 1;
    if (wants(methods, "p1") || onestep_cells >= 2)
        out.onestep = fit_onestep(out.table);
    if (wants(methods, "p2"))
        out.fit3 = fit_multistep(out.table, 3, ridge3);
    if (wants(methods, "p3"))
        out.fit6 = fit_multistep(out.table, 6, ridge6);

    for (const auto& m : methods) {
        if (m == "p0")
            out.reports.push_back(p0(out.table));
        else if (m == "p1")
            out.reports.push_back(p1(*out.onestep));
        else if (m == "p2")
            out.reports.push_back(p2(*out.fit3));
        else if (m == "p3")
            out.reports.push_back(p3(*out.fit6));
    }
}

}  // namespace detail

/// Run the full pipeline for one observation of a model.
template <ReplicateModel M>
AnalysisResult run_analysis(const M& model, const Point& y, const AnalysisOptions& opt) {
    detail::validate_methods(opt.methods);
    std::vector<std::string> methods = opt.methods;
    if (methods.empty()) {
        methods = {"p0", "p1", "p2", "p3"};
        if constexpr (HasBoundaryProjection<M> && HasAcceleration<M>)
            methods.insert(methods.begin() + 1, "abc");
        if constexpr (HasExactPValue<M>)
            methods.push_back("exact");
    }
    const auto [ridge3, ridge6] = detail::split_ridge(opt.ridge);
    const ScalePlan plan =
        opt.plan ? *opt.plan : default_scale_plan(model.sample_size(), opt.B);

    AnalysisResult out;
    out.table = opt.mode == RunMode::oracle
                    ? build_table_oracle(model, y, plan, opt.workers)
                    : build_table(model, y, plan, opt.seed, opt.workers);
    detail::analyze_core(out, methods, ridge3, ridge6);

    // Model-backed methods, spliced into the requested order.
    std::vector<PValueReport> ordered;
    auto core = out.reports.begin();
    for (const auto& m : methods) {
        if (m == "abc")
            ordered.push_back(p_abc(model, out.table, opt.workers));
        else if (m == "exact")
            ordered.push_back(p_exact(model, y));
        else
            ordered.push_back(*core++);
    }
    out.reports = std::move(ordered);
    return out;
}

/// Run the table-only pipeline on an imported count table (no model: the
/// abc and exact methods are unavailable).
inline AnalysisResult analyze_table(BootstrapTable table, const AnalysisOptions& opt) {
    detail::validate_methods(opt.methods);
    std::vector<std::string> methods = opt.methods;
    if (methods.empty())
        methods = {"p0", "p1", "p2", "p3"};
    else
        for (const auto& m : methods)
            if (m == "abc" || m == "exact")
                throw capability_error("method '" + m +
                                       "' needs a model, not just a count table");
    const auto [ridge3, ridge6] = detail::split_ridge(opt.ridge);
    AnalysisResult out;
    out.table = std::move(table);
    detail::analyze_core(out, methods, ridge3, ridge6);
    return out;
}

// ---------------------------------------------------------------------------
// Benchmark table (two models x sample sizes x targets, all methods).
// ---------------------------------------------------------------------------

struct BenchmarkRow {
    std::string model;
    int n = 0;
    double target = 0.0;  ///< exact p-value the observation is calibrated to
    // All in percent, standard errors where the method defines one.
    double p0 = 0.0;
    double abc = 0.0;
    double p1 = 0.0, p1_se = 0.0;
    double p2 = 0.0, p2_se = 0.0;
    double p3 = 0.0, p3_se = 0.0;
    double p2_ridge = 0.0, p2_ridge_se = 0.0;
    double p3_ridge = 0.0, p3_ridge_se = 0.0;
};

/// One benchmark row: the observation is solved so the model's exact p-value
/// equals `target`, then every correction is run in the requested mode.
/// The penalized columns use the library's default ridge weights.
template <ReplicateModel M>
BenchmarkRow benchmark_row(const M& model, double target, RunMode mode, long long B,
                           std::uint64_t seed, int workers = 1) {
    const Point y = solve_observation(model, target);
    const ScalePlan plan = default_scale_plan(model.sample_size(), B);
    BenchmarkRow row;
    row.model = model.name();
    row.n = model.sample_size();
    row.target = target;

    const BootstrapTable table = mode == RunMode::oracle
                                     ? build_table_oracle(model, y, plan, workers)
                                     : build_table(model, y, plan, seed, workers);
    row.p0 = 100.0 * mmboot::p0(table).alpha;
    row.abc = 100.0 * p_abc(model, table, workers).alpha;

    const PValueReport r1 = mmboot::p1(fit_onestep(table));
    row.p1 = 100.0 * r1.alpha;
    row.p1_se = 100.0 * r1.se_alpha.value();

    const PValueReport r2 = mmboot::p2(fit_multistep(table, 3, {0.0, 0.0, 0.0}));
    row.p2 = 100.0 * r2.alpha;
    row.p2_se = 100.0 * r2.se_alpha.value();
    const PValueReport r3 =
        mmboot::p3(fit_multistep(table, 6, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0}));
    row.p3 = 100.0 * r3.alpha;
    row.p3_se = 100.0 * r3.se_alpha.value();

    const PValueReport r2r = mmboot::p2(fit_multistep(table, 3, default_ridge_weights(3)));
    row.p2_ridge = 100.0 * r2r.alpha;
    row.p2_ridge_se = 100.0 * r2r.se_alpha.value();
    const PValueReport r3r = mmboot::p3(fit_multistep(table, 6, default_ridge_weights(6)));
    row.p3_ridge = 100.0 * r3r.alpha;
    row.p3_ridge_se = 100.0 * r3r.se_alpha.value();
    return row;
}

inline void write_benchmark_csv(const std::vector<BenchmarkRow>& rows,
                                std::ostream& out) {
    out << "model,n,target,p0,abc,p1,p1_se,p2,p2_se,p3,p3_se,"
           "p2_ridge,p2_ridge_se,p3_ridge,p3_ridge_se\n";
    for (const auto& r : rows) {
        out << r.model << ',' << r.n << ',' << detail::fmt17(r.target);
        for (double v : {r.p0, r.abc, r.p1, r.p1_se, r.p2, r.p2_se, r.p3, r.p3_se,
                         r.p2_ridge, r.p2_ridge_se, r.p3_ridge, r.p3_ridge_se})
            out << ',' << detail::fmt17(v);
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Scaling-curve export: z against 1/tau with the fitted one-step law.
// ---------------------------------------------------------------------------

struct CurvePoint {
    double inv_tau = 0.0;
    std::optional<double> z;     ///< measured z (absent on dense-grid rows)
    std::optional<double> se_z;  ///< its standard error
    double fitted = 0.0;         ///< v * (1/tau) + c * tau
};

/// Measured one-step points plus a dense fitted grid across their range.
inline std::vector<CurvePoint> curve_points(const BootstrapTable& table,
                                            const LinearFit& fit, int grid = 101) {
    std::vector<CurvePoint> pts;
    for (const auto& cell : table.cells) {
        if (cell.scales.k != 1)
            continue;
        CurvePoint p;
        p.inv_tau = 1.0 / cell.scales.tau[0];
        p.z = cell.z;
        p.se_z = std::sqrt(cell.var_z);
        p.fitted = fit.v * p.inv_tau + fit.c / p.inv_tau;
        pts.push_back(p);
    }
    if (pts.empty())
        throw config_error("curve needs at least one one-step cell");
    std::sort(pts.begin(), pts.end(),
              [](const CurvePoint& a, const CurvePoint& b) { return a.inv_tau < b.inv_tau; });
    const double lo = pts.front().inv_tau, hi = pts.back().inv_tau;
    for (int i = 0; i < grid; ++i) {
        CurvePoint p;
        p.inv_tau = lo + (hi - lo) * static_cast<double>(i) / (grid - 1);
        p.fitted = fit.v * p.inv_tau + fit.c / p.inv_tau;
        pts.push_back(p);
    }
    return pts;
}

inline void write_curve_csv(const std::vector<CurvePoint>& pts, std::ostream& out) {
    out << "inv_tau,z,se_z,fitted\n";
    for (const auto& p : pts) {
        out << detail::fmt17(p.inv_tau) << ',';
        if (p.z)
            out << detail::fmt17(*p.z);
        out << ',';
        if (p.se_z)
            out << detail::fmt17(*p.se_z);
        out << ',' << detail::fmt17(p.fitted) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Coverage simulation.
// ---------------------------------------------------------------------------

struct CoverageResult {
    std::string method;
    double level = 0.0;
    long trials = 0;
    long hits = 0;       ///< draws with alpha_hat < level
    double frequency = 0.0;
    double se = 0.0;     ///< binomial standard error of the frequency
};

namespace detail {

/// Stream address for the top-level draw of a coverage trial; far outside
/// both the design cells and the abc projection cell.
constexpr std::uint32_t kCoverageDraw = 0xC0000000u;

/// The smallest sub-design a method needs: the unit cell for p0/abc, the
/// one-step block for p1, everything through two steps for p2, all for p3.
inline ScalePlan coverage_plan(const std::string& method, int n, long long B) {
    const ScalePlan full = default_scale_plan(n, B);
    ScalePlan out;
    out.replicates_per_cell = B;
    for (const auto& cell : full.cells) {
        if (method == "p0" || method == "abc") {
            if (cell.k == 1 && std::fabs(cell.tau[0] - 1.0) <= 1e-9)
                out.cells.push_back(cell);
        } else if (method == "p1") {
            if (cell.k == 1)
                out.cells.push_back(cell);
        } else if (method == "p2") {
            if (cell.k <= 2)
                out.cells.push_back(cell);
        } else {
            out.cells.push_back(cell);
        }
    }
    return out;
}

}  // namespace detail

/// Frequency of alpha_hat(Y) < level over `trials` independent draws of Y
/// from the model's sampling distribution at its canonical boundary point.
/// A calibrated method would reject a boundary point at exactly the level.
/// Trials run in parallel; each is seeded from (master_seed, trial), so the
/// result does not depend on the worker count.
template <ReplicateModel M>
CoverageResult run_coverage(const M& model, const std::string& method, double level,
                            long trials, RunMode mode, long long B,
                            std::uint64_t master_seed, int workers = 1) {
    static_assert(HasBoundaryPoint<M>,
                  "coverage needs the model's canonical boundary point");
    detail::validate_methods({method});
    if (!(level > 0.0) || !(level < 1.0))
        throw config_error("coverage level must be inside (0,1)");
    if (trials < 1)
        throw config_error("coverage needs at least one trial");
    if (method == "exact" && !HasExactPValue<M>)
        throw capability_error("model '" + std::string(model.name()) +
                               "' has no exact p-value");

    const Point eta = model.boundary_point();
    const ScalePlan plan = detail::coverage_plan(method, model.sample_size(), B);
    std::atomic<long> hits{0};
    detail::parallel_for(static_cast<std::size_t>(trials), workers, [&](std::size_t i) {
        const std::uint64_t seed = derive_seed(master_seed, i);
        RandomStream rs(seed, detail::kCoverageDraw, 0, 0);
        const Point y = model.sample_replicate(eta, 1.0, rs);
        double alpha;
        if (method == "exact") {
            if constexpr (HasExactPValue<M>)
                alpha = model.exact_pvalue(y);
            else
                return;  // unreachable; guarded above
        } else {
            const BootstrapTable table = mode == RunMode::oracle
                                             ? build_table_oracle(model, y, plan, 1)
                                             : build_table(model, y, plan, seed, 1);
            if (method == "p0")
                alpha = p0(table).alpha;
            else if (method == "abc")
                alpha = p_abc(model, table, 1).alpha;
            else if (method == "p1")
                alpha = p1(fit_onestep(table)).alpha;
            else if (method == "p2")
                alpha = p2(fit_multistep(table, 3, default_ridge_weights(3))).alpha;
            else
                alpha = p3(fit_multistep(table, 6, default_ridge_weights(6))).alpha;
        }
        if (alpha < level)
            hits.fetch_add(1);
    });

    CoverageResult res;
    res.method = method;
    res.level = level;
    res.trials = trials;
    res.hits = hits.load();
    res.frequency = static_cast<double>(res.hits) / static_cast<double>(trials);
    res.se = std::sqrt(res.frequency * (1.0 - res.frequency) /
                       static_cast<double>(trials));
    return res;
}

inline void write_coverage_csv(const CoverageResult& r, std::ostream& out) {
    out << "method,level,trials,hits,frequency,se\n";
    out << r.method << ',' << detail::fmt17(r.level) << ',' << r.trials << ','
        << r.hits << ',' << detail::fmt17(r.frequency) << ',' << detail::fmt17(r.se)
        << '\n';
}

}  // namespace mmboot
