#pragma once

#include <array>
#include <cmath>
#include <concepts>
#include <string>
#include <vector>

#include "mmboot/errors.hpp"
#include "mmboot/quadrature.hpp"
#include "mmboot/rng.hpp"
#include "mmboot/scales.hpp"
#include "mmboot/special.hpp"

namespace mmboot {

/// Observed statistic in the model's coordinate system.
using Point = std::vector<double>;

inline double squared_norm(const Point& y) {
    double s = 0.0;
    for (double v : y)
        s += v * v;
    return s;
}

inline double norm(const Point& y) { return std::sqrt(squared_norm(y)); }

// ---------------------------------------------------------------------------
// Model capabilities.
//
// A model supplies, at minimum, Monte Carlo replicates and a region-membership
// test; everything downstream (tables, fits, p-values) is generic over that.
// The optional capabilities unlock exact tables, bias-corrected p-values, and
// reference answers and are detected per-model at compile time.
// ---------------------------------------------------------------------------

template <typename M>
concept ReplicateModel = requires(const M& m, const Point& y, double tau, RandomStream& rs) {
    { m.dim() } -> std::convertible_to<int>;
    { m.name() } -> std::convertible_to<std::string>;
    { m.sample_replicate(y, tau, rs) } -> std::same_as<Point>;
    { m.in_region(y) } -> std::same_as<bool>;
};

/// Exact probability that a single replicate at scale tau lands in the region.
template <typename M>
concept HasOneStepOracle = ReplicateModel<M> && requires(const M& m, const Point& y, double tau) {
    { m.one_step_prob(y, tau) } -> std::same_as<double>;
};

/// Exact probability that the last replicate of a k-step chain lands in the
/// region (replicate-of-replicate sampling, one draw per step).
template <typename M>
concept HasKStepOracle = ReplicateModel<M> && requires(const M& m, const Point& y, const ScaleTuple& s) {
    { m.k_step_prob(y, s) } -> std::same_as<double>;
};

/// Nearest point on the region boundary (used by the bias-corrected method).
template <typename M>
concept HasBoundaryProjection = ReplicateModel<M> && requires(const M& m, const Point& y) {
    { m.project_to_boundary(y) } -> std::same_as<Point>;
};

/// Skewness-correction constant for the bias-corrected method.
template <typename M>
concept HasAcceleration = ReplicateModel<M> && requires(const M& m) {
    { m.acceleration() } -> std::same_as<double>;
};

/// Closed-form reference p-value, available for the built-in test models.
template <typename M>
concept HasExactPValue = ReplicateModel<M> && requires(const M& m, const Point& y) {
    { m.exact_pvalue(y) } -> std::same_as<double>;
};

/// A canonical point on the region boundary (used by coverage studies).
template <typename M>
concept HasBoundaryPoint = ReplicateModel<M> && requires(const M& m) {
    { m.boundary_point() } -> std::same_as<Point>;
};

namespace detail {

inline void check_dim(const Point& y, int want, const char* who) {
    if (static_cast<int>(y.size()) != want)
        throw config_error(std::string(who) + ": point has dimension " +
                           std::to_string(y.size()) + ", model expects " +
                           std::to_string(want));
}

/// Averages f over a Gamma(shape,1) variate, i.e. computes
/// E[f(G/shape)] for G ~ Gamma(shape, 1), so the argument of f is a
/// mean-one multiplicative factor.  Integration runs on the log scale
/// (t = ln g), which keeps the integrand smooth for both small and large
/// shapes, over the central 1 - 2e-13 probability mass.
struct GammaAverager {
    double shape;
    double t_lo, t_hi;
    double log_gamma;

    explicit GammaAverager(double shape_)
        : shape(shape_),
          t_lo(std::log(gamma_quantile(shape_, 1e-13))),
          t_hi(std::log(gamma_quantile(shape_, 1.0 - 1e-13))),
          log_gamma(lgamma_safe(shape_)) {}

    template <typename F>
    double average(F&& f, double abs_tol) const {
        // Transformed density: g^{shape-1} e^{-g} / Gamma(shape) * dg
        //                    = exp(shape*t - e^t - lgamma) dt.
        return integrate(
            [&](double t) {
                const double g = std::exp(t);
                const double w = std::exp(shape * t - g - log_gamma);
                return f(g / shape) * w;
            },
            t_lo, t_hi, abs_tol);
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Spherical region, multivariate normal replicates.
//
// The region is the ball { ||y|| <= sqrt(n) } in R^p; the observation sits
// outside it.  Replicates at scale tau are y* ~ N(y, tau^2 I).  Because a
// chain of normal perturbations is itself normal, every k-step probability
// collapses to a one-step probability at the combined scale, making this the
// exact-arithmetic test bed for the chain machinery.
// ---------------------------------------------------------------------------

class SphericalNormalModel {
public:
    SphericalNormalModel(int p, int n) : p_(p), n_(n) {
        if (p < 2)
            throw config_error("spherical model: dimension p must be >= 2");
        if (n < 1)
            throw config_error("spherical model: sample size n must be >= 1");
    }

    int dim() const { return p_; }
    int sample_size() const { return n_; }
    std::string name() const { return "spherical"; }

    Point sample_replicate(const Point& y, double tau, RandomStream& rs) const {
        detail::check_dim(y, p_, "spherical sample_replicate");
        if (!(tau > 0.0))
            throw config_error("spherical sample_replicate: tau must be positive");
        Point out(y);
        for (double& v : out)
            v += tau * rs.next_normal();
        return out;
    }

    bool in_region(const Point& y) const {
        detail::check_dim(y, p_, "spherical in_region");
        return squared_norm(y) <= static_cast<double>(n_);
    }

    double one_step_prob(const Point& y, double tau) const {
        detail::check_dim(y, p_, "spherical one_step_prob");
        if (!(tau > 0.0))
            throw config_error("spherical one_step_prob: tau must be positive");
        const double t2 = tau * tau;
        // ||y*||^2 / tau^2 is noncentral chi-square, df = p, nc = ||y||^2/tau^2.
        return noncentral_chisq_cdf(p_, squared_norm(y) / t2, n_ / t2);
    }

    double k_step_prob(const Point& y, const ScaleTuple& s) const {
        return one_step_prob(y, s.combined());
    }

    Point project_to_boundary(const Point& y) const {
        detail::check_dim(y, p_, "spherical project_to_boundary");
        const double r = norm(y);
        if (r <= 0.0)
            throw config_error("spherical project_to_boundary: undefined at the origin");
        Point out(y);
        const double scale = std::sqrt(static_cast<double>(n_)) / r;
        for (double& v : out)
            v *= scale;
        return out;
    }

    double acceleration() const { return 0.0; }

    double exact_pvalue(const Point& y) const {
        detail::check_dim(y, p_, "spherical exact_pvalue");
        // P(||Y||^2 >= ||y||^2) for Y ~ N(mu, I) with ||mu||^2 = n.
        return 1.0 - noncentral_chisq_cdf(p_, static_cast<double>(n_), squared_norm(y));
    }

    Point boundary_point() const {
        Point out(p_, 0.0);
        out[0] = std::sqrt(static_cast<double>(n_));
        return out;
    }

private:
    int p_;
    int n_;
};

static_assert(ReplicateModel<SphericalNormalModel>);
static_assert(HasOneStepOracle<SphericalNormalModel>);
static_assert(HasKStepOracle<SphericalNormalModel>);
static_assert(HasBoundaryProjection<SphericalNormalModel>);
static_assert(HasAcceleration<SphericalNormalModel>);
static_assert(HasExactPValue<SphericalNormalModel>);
static_assert(HasBoundaryPoint<SphericalNormalModel>);

// ---------------------------------------------------------------------------
// Exponential-mean region, gamma replicates.
//
// The statistic is the sample mean of n exponentials; the region is
// { y <= sqrt(n) } on the positive half-line.  A replicate at scale tau is
// the mean of n/tau^2 fresh exponentials with mean y, i.e.
// Y* ~ Gamma(a, y/a) with a = n/tau^2, so scale enters through an effective
// sample size.  This model is deliberately skewed: it exercises every
// correction term the chain fits are designed to capture.
// ---------------------------------------------------------------------------

class ExponentialMeanModel {
public:
    explicit ExponentialMeanModel(int n) : n_(n) {
        if (n < 1)
            throw config_error("exponential model: sample size n must be >= 1");
    }

    int dim() const { return 1; }
    int sample_size() const { return n_; }
    std::string name() const { return "exponential"; }

    Point sample_replicate(const Point& y, double tau, RandomStream& rs) const {
        const double mean = value_of(y, "exponential sample_replicate");
        if (!(tau > 0.0))
            throw config_error("exponential sample_replicate: tau must be positive");
        const double a = shape_at(tau);
        // Gamma(a, mean/a): mean preserved, variance mean^2 tau^2 / n.
        return Point{rs.next_gamma(a, mean / a)};
    }

    bool in_region(const Point& y) const {
        const double v = value_of(y, "exponential in_region");
        return v <= std::sqrt(static_cast<double>(n_));
    }

    double one_step_prob(const Point& y, double tau) const {
        const double mean = value_of(y, "exponential one_step_prob");
        if (!(tau > 0.0))
            throw config_error("exponential one_step_prob: tau must be positive");
        return one_step_scalar(mean, tau);
    }

    double k_step_prob(const Point& y, const ScaleTuple& s) const {
        const double mean = value_of(y, "exponential k_step_prob");
        switch (s.k) {
        case 1:
            return one_step_scalar(mean, s.tau[0]);
        case 2: {
            const detail::GammaAverager g1(shape_at(s.tau[0]));
            return g1.average(
                [&](double f) { return one_step_scalar(mean * f, s.tau[1]); },
                1e-9);
        }
        default: {
            // Outer integral over the first step, inner over the second;
            // the innermost step stays closed-form.  The inner tolerance is
            // tighter so its error budget is negligible at the outer level.
            const detail::GammaAverager g1(shape_at(s.tau[0]));
            const detail::GammaAverager g2(shape_at(s.tau[1]));
            return g1.average(
                [&](double f1) {
                    return g2.average(
                        [&](double f2) {
                            return one_step_scalar(mean * f1 * f2, s.tau[2]);
                        },
                        1e-9);
                },
                1e-7);
        }
        }
    }

    Point project_to_boundary(const Point& y) const {
        value_of(y, "exponential project_to_boundary");
        // The region's boundary is the single point sqrt(n).
        return boundary_point();
    }

    double acceleration() const {
        // One third of the skewness of the mean's influence terms.
        return 1.0 / (3.0 * std::sqrt(static_cast<double>(n_)));
    }

    double exact_pvalue(const Point& y) const {
        const double mean = value_of(y, "exponential exact_pvalue");
        // P(Ybar >= y) for the mean of n unit exponentials rescaled to
        // boundary mean: sum ~ Gamma(n, mean_0) with boundary at sqrt(n).
        return gamma_upper_reg(static_cast<double>(n_),
                               mean * std::sqrt(static_cast<double>(n_)));
    }

    Point boundary_point() const { return Point{std::sqrt(static_cast<double>(n_))}; }

private:
    double shape_at(double tau) const { return static_cast<double>(n_) / (tau * tau); }

    double one_step_scalar(double mean, double tau) const {
        const double a = shape_at(tau);
        // P(Y* <= sqrt(n)) with Y* ~ Gamma(a, mean/a).
        return gamma_lower_reg(a, std::sqrt(static_cast<double>(n_)) / mean * a);
    }

    double value_of(const Point& y, const char* who) const {
        detail::check_dim(y, 1, who);
        if (!(y[0] > 0.0))
            throw config_error(std::string(who) + ": mean must be positive");
        return y[0];
    }

    int n_;
};

static_assert(ReplicateModel<ExponentialMeanModel>);
static_assert(HasOneStepOracle<ExponentialMeanModel>);
static_assert(HasKStepOracle<ExponentialMeanModel>);
static_assert(HasBoundaryProjection<ExponentialMeanModel>);
static_assert(HasAcceleration<ExponentialMeanModel>);
static_assert(HasExactPValue<ExponentialMeanModel>);
static_assert(HasBoundaryPoint<ExponentialMeanModel>);

// ---------------------------------------------------------------------------
// Reference geometry for the spherical region.
// ---------------------------------------------------------------------------

/// Signed distance and curvature summary for a point outside the sphere:
/// v is the distance to the boundary, c the leading mean-curvature
/// correction that the two-coefficient fit should recover.
struct SphericalGeometry {
    double v;   ///< signed distance ||y|| - sqrt(n)
    double d1;  ///< first curvature coefficient (p-1)/(2 sqrt(n))
    double d2;  ///< second curvature coefficient (p-1)/(4 n)
    double c;   ///< curvature term d1 - v*d2 entering the pivot
};

inline SphericalGeometry spherical_geometry(int p, int n, const Point& y) {
    if (static_cast<int>(y.size()) != p)
        throw config_error("spherical_geometry: dimension mismatch");
    const double rn = std::sqrt(static_cast<double>(n));
    SphericalGeometry g{};
    g.v = norm(y) - rn;
    g.d1 = (p - 1) / (2.0 * rn);
    g.d2 = (p - 1) / (4.0 * static_cast<double>(n));
    g.c = g.d1 - g.v * g.d2;
    return g;
}

}  // namespace mmboot
