#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mmboot/fit.hpp"
#include "mmboot/models.hpp"
#include "mmboot/pvalue.hpp"
#include "mmboot/resample.hpp"
#include "mmboot/scales.hpp"
#include "mmboot/special.hpp"

using namespace mmboot;
using Catch::Approx;

namespace {

Point normal_obs() {
    Point y(4, 0.0);
    y[0] = std::sqrt(26.802592389029552);
    return y;
}

Point exp_obs() { return Point{4.96642550397653}; }

const BootstrapTable& oracle_normal() {
    static const BootstrapTable t = build_table_oracle(
        SphericalNormalModel(4, 10), normal_obs(), default_scale_plan(10, 10000), 4);
    return t;
}

const BootstrapTable& oracle_exp() {
    static const BootstrapTable t = build_table_oracle(
        ExponentialMeanModel(10), exp_obs(), default_scale_plan(10, 10000), 4);
    return t;
}

const BootstrapTable& mc_exp() {
    static const BootstrapTable t = build_table(
        ExponentialMeanModel(10), exp_obs(), default_scale_plan(10, 100000), 2024, 4);
    return t;
}

// Mean whose exact p-value hits `target`, by bisection: the p-value falls
// as the observation moves deeper into the region's complement.
double solve_exp_obs(int n, double target) {
    const ExponentialMeanModel m(n);
    double lo = std::sqrt(static_cast<double>(n));
    double hi = lo;
    while (m.exact_pvalue(Point{hi}) > target)
        hi *= 1.3;
    for (int i = 0; i < 200 && hi - lo > 1e-14 * hi; ++i) {
        const double mid = 0.5 * (lo + hi);
        (m.exact_pvalue(Point{mid}) > target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

// Region indicator with no projection/acceleration/oracles.
struct BareModel {
    int dim() const { return 1; }
    std::string name() const { return "bare"; }
    Point sample_replicate(const Point& y, double tau, RandomStream& rs) const {
        return Point{y[0] + tau * rs.next_normal()};
    }
    bool in_region(const Point& y) const { return y[0] <= 0.0; }
};

void check_report(const PValueReport& r) {
    CHECK(r.alpha > 0.0);
    CHECK(r.alpha < 1.0);
    CHECK(std::fabs(r.alpha - normal_cdf(-r.z)) <= 1e-12);
    if (r.se_alpha)
        CHECK(*r.se_alpha >= 0.0);
}

}  // namespace

// ---------------------------------------------------------------------------
// p0
// ---------------------------------------------------------------------------

TEST_CASE("p0 reports the plain bootstrap cell", "[pvalue]") {
    const PValueReport rn = p0(oracle_normal());
    check_report(rn);
    CHECK(rn.method == "p0");
    CHECK(rn.alpha == Approx(0.0085).margin(5e-5));
    CHECK(rn.alpha ==
          Approx(SphericalNormalModel(4, 10).one_step_prob(normal_obs(), 1.0))
              .margin(1e-12));
    CHECK(rn.se_alpha.has_value());

    const PValueReport re = p0(oracle_exp());
    CHECK(re.alpha == Approx(0.1115).margin(5e-5));
    CHECK(re.alpha ==
          Approx(ExponentialMeanModel(10).one_step_prob(exp_obs(), 1.0)).margin(1e-12));

    SECTION("clamping keeps the report finite when every replicate hits") {
        BootstrapTable t;
        t.cells.push_back(transform_cell(100.0, 100, ScaleTuple(1.0)));
        const PValueReport r = p0(t);
        check_report(r);
        CHECK(r.alpha == Approx(0.995).margin(1e-12));
    }
    SECTION("a table without the unit cell is rejected") {
        BootstrapTable t;
        t.cells.push_back(transform_cell(50.0, 100, ScaleTuple(2.0)));
        t.cells.push_back(transform_cell(50.0, 100, ScaleTuple(1.0, 1.0)));
        CHECK_THROWS_AS(p0(t), config_error);
    }
}

// ---------------------------------------------------------------------------
// abc
// ---------------------------------------------------------------------------

TEST_CASE("abc conversion formula", "[pvalue]") {
    SECTION("zero acceleration is pure reflection") {
        CHECK(z_abc(2.4, 0.5, 0.0) == Approx(2.4 - 2.0 * 0.5).epsilon(1e-15));
        CHECK(z_abc(-1.0, 0.25, 0.0) == Approx(-1.0 - 0.5).epsilon(1e-15));
    }
    SECTION("published spherical inputs give the published output") {
        const double z = z_abc(-normal_quantile(0.0085), -normal_quantile(0.315), 0.0);
        CHECK(normal_cdf(-z) == Approx(0.0775).margin(8e-4));
    }
    SECTION("vanishing denominator is rejected") {
        CHECK_THROWS_AS(z_abc(2.0, 0.0, 0.5), numerical_error);
        CHECK_THROWS_AS(z_abc(2.0, 0.0, 0.4999999), numerical_error);
    }
}

TEST_CASE("abc pipeline on the oracle tables", "[pvalue]") {
    const PValueReport rn = p_abc(SphericalNormalModel(4, 10), oracle_normal());
    check_report(rn);
    CHECK(rn.method == "abc");
    CHECK(rn.alpha == Approx(0.0775).margin(1e-3));
    CHECK_FALSE(rn.se_alpha.has_value());

    const PValueReport re = p_abc(ExponentialMeanModel(10), oracle_exp());
    CHECK(re.alpha == Approx(0.0500).margin(2e-3));
    CHECK_FALSE(re.se_alpha.has_value());
}

TEST_CASE("abc pipeline in Monte Carlo mode", "[pvalue][slow]") {
    const ExponentialMeanModel m(10);
    const PValueReport mc = p_abc(m, mc_exp(), 4);
    check_report(mc);
    const PValueReport ex = p_abc(m, oracle_exp());
    // B = 1e5 puts ~4 standard errors of the two-cell pipeline at ~0.007.
    CHECK(mc.alpha == Approx(ex.alpha).margin(7e-3));

    SECTION("deterministic given the table seed, whatever the worker count") {
        const PValueReport again = p_abc(m, mc_exp(), 1);
        CHECK(again.alpha == mc.alpha);
        CHECK(again.z == mc.z);
    }
    SECTION("models without the needed capabilities are rejected") {
        BootstrapTable t;
        t.cells.push_back(transform_cell(50.0, 100, ScaleTuple(1.0)));
        CHECK_THROWS_AS(p_abc(BareModel{}, t), capability_error);
    }
}

// ---------------------------------------------------------------------------
// p1 / p2 / p3
// ---------------------------------------------------------------------------

TEST_CASE("p1 applies the one-step correction", "[pvalue]") {
    const PValueReport rn = p1(fit_onestep(oracle_normal()));
    check_report(rn);
    CHECK(rn.method == "p1");
    CHECK(rn.alpha == Approx(0.0529).margin(1e-3));
    CHECK(rn.se_alpha.value() > 0.0);

    const PValueReport re = p1(fit_onestep(oracle_exp()));
    CHECK(re.alpha == Approx(0.0753).margin(1e-3));

    SECTION("a flat fit is a coin flip") {
        LinearFit flat;
        flat.cov = {1e-4, 0.0, 0.0, 1e-4};
        const PValueReport r = p1(flat);
        CHECK(r.alpha == Approx(0.5).epsilon(1e-15));
        CHECK(r.z == 0.0);
    }
}

TEST_CASE("p2 applies the second-order correction", "[pvalue][slow]") {
    const GammaFit fe = fit_multistep(oracle_exp(), 3, {0.0, 0.0, 0.0});
    const PValueReport re = p2(fe);
    check_report(re);
    CHECK(re.method == "p2");
    CHECK(re.alpha == Approx(0.0528).margin(1e-3));
    CHECK(re.se_alpha.value() > 0.0);

    const GammaFit fn = fit_multistep(oracle_normal(), 3, {0.0, 0.0, 0.0});
    CHECK(p2(fn).alpha == Approx(0.0585).margin(3e-3));

    SECTION("pure gamma1 passes straight through") {
        GammaFit fit;
        fit.order = 3;
        fit.gamma = {1.7, 0.0, 0.0, 0.0, 0.0, 0.0};
        CHECK(p2(fit).alpha == Approx(normal_cdf(-1.7)).epsilon(1e-14));
    }
    SECTION("wrong fit order and singular gamma1 are rejected") {
        GammaFit six;
        six.order = 6;
        six.gamma = {1.5, 0.0, 0.0, 0.0, 0.0, 0.0};
        CHECK_THROWS_AS(p2(six), config_error);
        GammaFit bad;
        bad.order = 3;
        bad.gamma = {0.0, 0.1, 0.1, 0.0, 0.0, 0.0};
        CHECK_THROWS_AS(p2(bad), numerical_error);
    }
}

TEST_CASE("p3 applies the third-order correction", "[pvalue][slow]") {
    const GammaFit fe = fit_multistep(oracle_exp(), 6, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0});
    const PValueReport re = p3(fe);
    check_report(re);
    CHECK(re.method == "p3");
    CHECK(re.alpha == Approx(0.0509).margin(1e-3));
    CHECK(re.se_alpha.value() > 0.0);

    SECTION("the displayed internal arithmetic") {
        const double g3 = fe.gamma[2];
        CHECK(4.0 * g3 * g3 == Approx(0.065).margin(2e-3));
        CHECK(0.5 * g3 * g3 == Approx(0.008).margin(1e-3));
    }
    SECTION("pure gamma1 passes straight through") {
        GammaFit fit;
        fit.order = 6;
        fit.gamma = {1.7, 0.0, 0.0, 0.0, 0.0, 0.0};
        CHECK(p3(fit).alpha == Approx(normal_cdf(-1.7)).epsilon(1e-14));
    }
    SECTION("wrong fit order is rejected") {
        GammaFit three;
        three.order = 3;
        three.gamma = {1.5, 0.0, 0.0, 0.0, 0.0, 0.0};
        CHECK_THROWS_AS(p3(three), config_error);
    }
}

TEST_CASE("p2 and p3 coincide when the higher coefficients vanish", "[pvalue]") {
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> u1(0.8, 2.2);
    std::uniform_real_distribution<double> u2(-0.5, 0.5);
    for (int rep = 0; rep < 25; ++rep) {
        const double g1 = u1(rng), g2 = u2(rng);
        GammaFit three;
        three.order = 3;
        three.gamma = {g1, g2, 0.0, 0.0, 0.0, 0.0};
        GammaFit six;
        six.order = 6;
        six.gamma = {g1, g2, 0.0, 0.0, 0.0, 0.0};
        CHECK(p2(three).alpha == Approx(p3(six).alpha).margin(2e-3));
    }
}

// ---------------------------------------------------------------------------
// exact
// ---------------------------------------------------------------------------

TEST_CASE("exact p-values round-trip through the report", "[pvalue]") {
    const PValueReport rn = p_exact(SphericalNormalModel(4, 10), normal_obs());
    check_report(rn);
    CHECK(rn.method == "exact");
    CHECK(rn.alpha == Approx(0.05).margin(1e-10));
    CHECK(rn.z == Approx(-normal_quantile(0.05)).margin(1e-9));
    CHECK_FALSE(rn.se_alpha.has_value());

    CHECK(p_exact(ExponentialMeanModel(10), exp_obs()).alpha ==
          Approx(0.05).margin(1e-10));
}

// ---------------------------------------------------------------------------
// Accuracy ladder
// ---------------------------------------------------------------------------

TEST_CASE("corrections tighten in order on the exponential model",
          "[pvalue][slow]") {
    // Observations placed so the exact p-value is 0.05; each correction
    // should then land closer to 0.05 than the one before it.
    CHECK(solve_exp_obs(10, 0.05) == Approx(4.96642550397653).margin(1e-9));
    CHECK(solve_exp_obs(100, 0.05) == Approx(11.6997).margin(1e-3));
    CHECK(solve_exp_obs(1000, 0.05) == Approx(33.2854).margin(1e-3));

    for (int n : {10, 100, 1000}) {
        const ExponentialMeanModel m(n);
        const Point y{solve_exp_obs(n, 0.05)};
        const BootstrapTable t =
            build_table_oracle(m, y, default_scale_plan(n, 10000), 4);
        const double d0 = std::fabs(p0(t).alpha - 0.05);
        const double d1 = std::fabs(p1(fit_onestep(t)).alpha - 0.05);
        const double d2 =
            std::fabs(p2(fit_multistep(t, 3, {0.0, 0.0, 0.0})).alpha - 0.05);
        const double d3 = std::fabs(
            p3(fit_multistep(t, 6, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0})).alpha - 0.05);
        CAPTURE(n, d0, d1, d2, d3);
        CHECK(d0 > d1);
        CHECK(d1 > d2);
        CHECK(d2 >= d3);
    }
}

// ---------------------------------------------------------------------------
// Two-step shift diagnostic
// ---------------------------------------------------------------------------

TEST_CASE("two-step shift predicts the multistep gap", "[pvalue]") {
    SECTION("zero acceleration collapses the shift") {
        CHECK(two_step_shift(0.0, 2.0, 1.3, 0.7) == 0.0);
    }
    SECTION("a vanishing second scale collapses the shift") {
        CHECK(std::fabs(two_step_shift(0.1, 2.0, 1.3, 1e-8)) < 1e-12);
    }
    SECTION("exponential prediction matches the oracle gap") {
        const double a = 1.0 / (3.0 * std::sqrt(10.0));
        const double tau = std::sqrt(10.0 / 6.0);
        const double shift = two_step_shift(a, 1.328, tau, tau);
        CHECK(shift ==
              Approx(-normal_quantile(0.3063) + normal_quantile(0.2990)).margin(0.05));

        // Against the exact cell probabilities rather than printed digits.
        const ExponentialMeanModel m(10);
        const double z2 = -normal_quantile(m.k_step_prob(exp_obs(), ScaleTuple(tau, tau)));
        const double z1 =
            -normal_quantile(m.one_step_prob(exp_obs(), ScaleTuple(tau, tau).combined()));
        CHECK(shift == Approx(z2 - z1).margin(5e-3));
    }
    SECTION("invalid scales are rejected") {
        CHECK_THROWS_AS(two_step_shift(0.1, 2.0, 0.0, 1.0), config_error);
        CHECK_THROWS_AS(two_step_shift(0.1, 2.0, 1.0, -1.0), config_error);
    }
}

// ---------------------------------------------------------------------------
// CSV report
// ---------------------------------------------------------------------------

TEST_CASE("p-value reports serialize to CSV", "[pvalue][slow]") {
    std::vector<PValueReport> reports;
    reports.push_back(p0(oracle_exp()));
    reports.push_back(p_abc(ExponentialMeanModel(10), oracle_exp()));
    reports.push_back(p1(fit_onestep(oracle_exp())));
    reports.push_back(p_exact(ExponentialMeanModel(10), exp_obs()));

    std::ostringstream out;
    write_pvalues_csv(reports, out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "method,alpha,z,se_alpha");

    std::getline(in, line);
    CHECK(line.substr(0, 3) == "p0,");
    CHECK(line.back() != ',');  // p0 carries a standard error

    std::getline(in, line);
    CHECK(line.substr(0, 4) == "abc,");
    CHECK(line.back() == ',');  // abc does not

    std::getline(in, line);
    CHECK(line.substr(0, 3) == "p1,");
    const double alpha = std::stod(line.substr(3));
    CHECK(alpha == reports[2].alpha);

    std::getline(in, line);
    CHECK(line.substr(0, 6) == "exact,");
    CHECK(line.back() == ',');
}
