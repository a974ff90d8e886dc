#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mmboot/fit.hpp"
#include "mmboot/models.hpp"
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

// Exact-probability tables are quadrature-heavy; build each once.
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

// A table whose z-values sit exactly on the three-step surface.
BootstrapTable surface_table(const std::array<double, 6>& g, long long B) {
    const ScalePlan plan = default_scale_plan(10, B);
    BootstrapTable t;
    t.model_name = "synthetic";
    t.oracle = true;
    t.observation = Point{0.0};
    for (const auto& s : plan.cells) {
        const double alpha = normal_cdf(-zeta3(g, s));
        BootstrapCell cell{s, B, alpha * static_cast<double>(B), alpha, 0.0, 0.0};
        alpha_to_z(alpha, B, cell.z, cell.var_z);
        t.cells.push_back(cell);
    }
    return t;
}

// Same, restricted to the two-step surface over the k <= 2 cells.
BootstrapTable surface_table2(const std::array<double, 3>& g, long long B) {
    const ScalePlan plan = default_scale_plan(10, B);
    BootstrapTable t;
    t.model_name = "synthetic";
    t.oracle = true;
    t.observation = Point{0.0};
    for (const auto& s : plan.cells) {
        if (s.k > 2)
            continue;
        const double alpha = normal_cdf(-zeta2(g, s));
        BootstrapCell cell{s, B, alpha * static_cast<double>(B), alpha, 0.0, 0.0};
        alpha_to_z(alpha, B, cell.z, cell.var_z);
        t.cells.push_back(cell);
    }
    return t;
}

// The quantity fit_multistep minimizes, recomputed independently.
double penalized_objective(const BootstrapTable& table, int order,
                           const std::array<double, 6>& g,
                           const std::vector<double>& ridge) {
    double obj = 0.0;
    for (const auto& cell : table.cells) {
        if (order == 3 && cell.scales.k > 2)
            continue;
        const double zfit = order == 3 ? zeta2({g[0], g[1], g[2]}, cell.scales)
                                       : zeta3(g, cell.scales);
        const double w = 1.0 / (static_cast<double>(cell.B) * cell.var_z);
        const double r = cell.z - zfit;
        obj += w * r * r;
    }
    for (int j = 0; j < order; ++j)
        obj += ridge[static_cast<std::size_t>(j)] * g[j] * g[j];
    return obj;
}

}  // namespace

// ---------------------------------------------------------------------------
// Scale features
// ---------------------------------------------------------------------------

TEST_CASE("scale features reduce three scales to four combinations", "[fit]") {
    SECTION("unit three-step tuple") {
        const ScaleFeatures f = scale_features(ScaleTuple(1.0, 1.0, 1.0));
        CHECK(f.s1 == Approx(1.0 / std::sqrt(3.0)).epsilon(1e-15));
        CHECK(f.s2 == Approx(1.0 / 3.0).epsilon(1e-15));
        CHECK(f.s3 == Approx(4.0 / 27.0).epsilon(1e-15));
        CHECK(f.s4 == Approx(1.0 / 27.0).epsilon(1e-15));
    }
    SECTION("equal two-step tuple") {
        const double t = std::sqrt(10.0 / 6.0);
        const ScaleFeatures f = scale_features(ScaleTuple(t, t));
        CHECK(f.s1 == Approx(0.5477225575051661).epsilon(1e-14));
        CHECK(f.s2 == Approx(0.25).epsilon(1e-14));
        CHECK(f.s4 == 0.0);
    }
    SECTION("one-step tuple is a pure reciprocal") {
        const ScaleFeatures f = scale_features(ScaleTuple(2.0));
        CHECK(f.s1 == Approx(0.5).epsilon(1e-15));
        CHECK(f.s2 == 0.0);
        CHECK(f.s3 == 0.0);
        CHECK(f.s4 == 0.0);
    }
    SECTION("shorter tuples are tau -> 0 limits of longer ones") {
        const ScaleTuple two(1.3, 0.9);
        const ScaleTuple almost_two(1.3, 0.9, 1e-8);
        const ScaleFeatures a = scale_features(two);
        const ScaleFeatures b = scale_features(almost_two);
        CHECK(a.s1 == Approx(b.s1).margin(1e-12));
        CHECK(a.s2 == Approx(b.s2).margin(1e-12));
        // The limit keeps a nonzero s3 on two-step tuples.
        CHECK(a.s3 == Approx(b.s3).margin(1e-12));
        CHECK(a.s3 == Approx(1.3 * 1.3 * 1.3 * 1.3 * 0.9 * 0.9 *
                             std::pow(1.3 * 1.3 + 0.9 * 0.9, -3.0))
                          .epsilon(1e-13));
        CHECK(a.s4 == Approx(b.s4).margin(1e-12));

        const ScaleFeatures c = scale_features(ScaleTuple(1.3));
        const ScaleFeatures d = scale_features(ScaleTuple(1.3, 1e-8));
        CHECK(c.s1 == Approx(d.s1).margin(1e-12));
        CHECK(c.s2 == Approx(d.s2).margin(1e-12));
    }
}

// ---------------------------------------------------------------------------
// Regression surfaces
// ---------------------------------------------------------------------------

TEST_CASE("two-step surface matches pilot z-values and symmetries", "[fit]") {
    SECTION("exponential pilot coefficients reproduce the pilot cell") {
        const std::array<double, 3> g{1.328, 0.144, 0.137};
        const double t = std::sqrt(10.0 / 6.0);
        const double z = zeta2(g, ScaleTuple(t, t));
        CHECK(z == Approx(-normal_quantile(0.3063)).margin(0.02));
    }
    SECTION("symmetric under swapping the two scales") {
        const std::array<double, 3> g{1.5, 0.2, -0.1};
        const double pairs[3][2] = {{0.7, 1.8}, {1.0, 1.3}, {0.5, 0.5}};
        for (const auto& p : pairs)
            CHECK(zeta2(g, ScaleTuple(p[0], p[1])) ==
                  Approx(zeta2(g, ScaleTuple(p[1], p[0]))).epsilon(1e-14));
    }
    SECTION("one-step tuples collapse to the linear law") {
        const std::array<double, 3> g{1.2, 0.3, 0.9};
        const double tau = 1.7;
        const double s1 = 1.0 / tau;
        CHECK(zeta2(g, ScaleTuple(tau)) ==
              Approx(s1 * g[0] - g[1] / (s1 * g[0])).epsilon(1e-14));
    }
    SECTION("singular at gamma1 = 0") {
        CHECK_THROWS_AS(zeta2({0.0, 0.1, 0.1}, ScaleTuple(1.0, 1.0)), numerical_error);
        CHECK_THROWS_AS(zeta2({1e-7, 0.1, 0.1}, ScaleTuple(1.0, 1.0)), numerical_error);
    }
}

TEST_CASE("three-step surface properties", "[fit]") {
    SECTION("pure gamma1 gives a straight line in s1") {
        const std::array<double, 6> g{1.7, 0.0, 0.0, 0.0, 0.0, 0.0};
        for (const ScaleTuple& s :
             {ScaleTuple(1.0), ScaleTuple(0.8, 1.4), ScaleTuple(1.0, 1.2, 0.7)})
            CHECK(zeta3(g, s) == Approx(1.7 * scale_features(s).s1).epsilon(1e-14));
    }
    SECTION("reduces to the two-step surface when the extra terms vanish") {
        const std::array<double, 6> g{1.4, 0.25, 0.0, 0.0, 0.0, 0.0};
        for (const ScaleTuple& s : {ScaleTuple(1.1), ScaleTuple(0.9, 1.6)})
            CHECK(zeta3(g, s) ==
                  Approx(zeta2({g[0], g[1], g[2]}, s)).epsilon(1e-14));
    }
    SECTION("analytic gradients match finite differences") {
        std::mt19937 rng(42);
        std::uniform_real_distribution<double> mid(-0.3, 0.3);
        std::uniform_real_distribution<double> tau(0.6, 1.9);
        for (int rep = 0; rep < 20; ++rep) {
            std::array<double, 6> g{1.0 + std::fabs(mid(rng)) * 3.0, mid(rng), mid(rng),
                                    mid(rng), mid(rng), mid(rng)};
            const ScaleTuple s(tau(rng), tau(rng), tau(rng));
            const ScaleFeatures f = scale_features(s);
            std::array<double, 6> grad;
            detail::zeta3_grad(g, f, grad);
            for (int j = 0; j < 6; ++j) {
                const double h = 1e-6;
                std::array<double, 6> gp = g, gm = g;
                gp[j] += h;
                gm[j] -= h;
                const double fd = (zeta3(gp, s) - zeta3(gm, s)) / (2.0 * h);
                CHECK(grad[j] == Approx(fd).margin(1e-7));
            }

            std::array<double, 3> g3{g[0], g[1], g[2]};
            std::array<double, 3> grad3;
            detail::zeta2_grad(g3, f, grad3);
            for (int j = 0; j < 3; ++j) {
                const double h = 1e-6;
                std::array<double, 3> gp = g3, gm = g3;
                gp[j] += h;
                gm[j] -= h;
                const double fd = (zeta2(gp, s) - zeta2(gm, s)) / (2.0 * h);
                CHECK(grad3[j] == Approx(fd).margin(1e-7));
            }
        }
    }
    SECTION("pilot six-coefficient surface tracks the exponential oracle") {
        const std::array<double, 6> g{1.328, 0.145, 0.127, -0.018, -0.0004, -0.036};
        for (const auto& cell : oracle_exp().cells)
            CHECK(zeta3(g, cell.scales) == Approx(cell.z).margin(0.02));
    }
}

// ---------------------------------------------------------------------------
// One-step fit
// ---------------------------------------------------------------------------

TEST_CASE("one-step fit recovers the pilot slopes", "[fit]") {
    const LinearFit fn = fit_onestep(oracle_normal());
    CHECK(fn.n_cells == 5);
    CHECK(fn.v == Approx(2.002).margin(0.01));
    CHECK(fn.c == Approx(0.385).margin(0.01));
    CHECK(fn.se_v() > 0.0);
    CHECK(fn.se_c() > 0.0);

    const LinearFit fe = fit_onestep(oracle_exp());
    CHECK(fe.v == Approx(1.328).margin(0.01));
    CHECK(fe.c == Approx(-0.110).margin(0.01));

    SECTION("sum of slopes matches the plain bootstrap z-value") {
        // The tau = 1 one-step cell sits in the middle of the design; the
        // fitted curve at 1/tau = 1 should land on its z-value.
        for (const BootstrapTable* t : {&oracle_normal(), &oracle_exp()}) {
            const LinearFit fit = fit_onestep(*t);
            double z0 = 0.0;
            for (const auto& cell : t->cells)
                if (cell.scales.k == 1 && std::fabs(cell.scales.tau[0] - 1.0) < 1e-9)
                    z0 = cell.z;
            CHECK(fit.v + fit.c == Approx(z0).margin(0.02));
        }
    }
    SECTION("difference of slopes is the curve derivative at 1/tau = 1") {
        const LinearFit fit = fit_onestep(oracle_normal());
        auto curve = [&](double x) { return fit.v * x + fit.c / x; };
        const double h = 1e-6;
        const double deriv = (curve(1.0 + h) - curve(1.0 - h)) / (2.0 * h);
        CHECK(deriv == Approx(fit.v - fit.c).margin(1e-9));
    }
}

TEST_CASE("one-step fit is exact on a synthetic line", "[fit]") {
    BootstrapTable t;
    t.model_name = "synthetic";
    for (double tau : {0.55, 0.8, 1.0, 1.25, 1.45, 1.45}) {
        BootstrapCell cell{ScaleTuple(tau), 10000, 0.0, 0.0, 0.0, 0.0};
        cell.z = 2.0 / tau + 0.3 * tau;
        cell.alpha = normal_cdf(-cell.z);
        cell.count = cell.alpha * 10000.0;
        cell.var_z = (tau == 0.8) ? 4e-4 : 2.5e-4;  // uneven weights change nothing
        t.cells.push_back(cell);
    }
    const LinearFit fit = fit_onestep(t);
    CHECK(fit.v == Approx(2.0).margin(1e-10));
    CHECK(fit.c == Approx(0.3).margin(1e-10));
    CHECK(fit.rss <= 1e-16);
    CHECK(fit.n_cells == 6);
}

TEST_CASE("one-step fit rejects degenerate designs", "[fit]") {
    BootstrapTable t;
    for (int i = 0; i < 3; ++i) {
        BootstrapCell cell{ScaleTuple(1.0), 1000, 100.0, 0.1, 0.0, 0.0};
        alpha_to_z(0.1, 1000, cell.z, cell.var_z);
        t.cells.push_back(cell);
    }
    CHECK_THROWS_AS(fit_onestep(t), config_error);  // no spread in tau

    BootstrapTable single;
    single.cells.push_back(t.cells[0]);
    CHECK_THROWS_AS(fit_onestep(single), config_error);

    BootstrapTable no_onestep;
    BootstrapCell two{ScaleTuple(1.0, 1.0), 1000, 100.0, 0.1, 0.0, 0.0};
    alpha_to_z(0.1, 1000, two.z, two.var_z);
    no_onestep.cells.push_back(two);
    CHECK_THROWS_AS(fit_onestep(no_onestep), config_error);
}

// ---------------------------------------------------------------------------
// Multistep fit
// ---------------------------------------------------------------------------

TEST_CASE("multistep fit recovers the exponential pilot coefficients",
          "[fit][slow]") {
    SECTION("three coefficients, no penalty") {
        const GammaFit fit = fit_multistep(oracle_exp(), 3, {0.0, 0.0, 0.0});
        CHECK(fit.order == 3);
        CHECK(fit.gamma[0] == Approx(1.328).margin(0.01));
        CHECK(fit.gamma[1] == Approx(0.144).margin(0.01));
        CHECK(fit.gamma[2] == Approx(0.137).margin(0.01));
        CHECK(fit.iterations < 200);
        for (int i = 0; i < 3; ++i)
            CHECK(fit.se(i) > 0.0);
    }
    SECTION("six coefficients, no penalty") {
        const GammaFit fit =
            fit_multistep(oracle_exp(), 6, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0});
        CHECK(fit.gamma[0] == Approx(1.328).margin(0.01));
        CHECK(fit.gamma[1] == Approx(0.145).margin(0.01));
        CHECK(fit.gamma[2] == Approx(0.127).margin(0.01));
        CHECK(fit.gamma[3] == Approx(-0.018).margin(0.01));
        CHECK(fit.gamma[4] == Approx(-0.0004).margin(0.005));
        CHECK(fit.gamma[5] == Approx(-0.036).margin(0.01));
    }
    SECTION("the default penalty shrinks the higher coefficients and the SEs") {
        const GammaFit plain =
            fit_multistep(oracle_exp(), 6, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0});
        const GammaFit ridge = fit_multistep(oracle_exp(), 6, default_ridge_weights(6));
        for (int i = 0; i < 6; ++i)
            CHECK(ridge.se(i) <= plain.se(i) + 1e-12);
        // Shrinkage pulls the penalized coefficients toward zero overall.
        double norm_plain = 0.0, norm_ridge = 0.0;
        for (int i = 2; i < 6; ++i) {
            norm_plain += plain.gamma[i] * plain.gamma[i];
            norm_ridge += ridge.gamma[i] * ridge.gamma[i];
        }
        CHECK(norm_ridge <= norm_plain + 1e-12);
    }
}

TEST_CASE("multistep fit recovers synthetic coefficients exactly", "[fit]") {
    SECTION("six-coefficient surface") {
        const std::array<double, 6> truth{1.5, 0.1, 0.05, 0.01, -0.01, 0.02};
        const BootstrapTable t = surface_table(truth, 10000);
        const GammaFit fit = fit_multistep(t, 6, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0});
        for (int i = 0; i < 6; ++i)
            CHECK(fit.gamma[i] == Approx(truth[i]).margin(1e-8));
        CHECK(fit.rss <= 1e-12);
    }
    SECTION("three-coefficient surface") {
        const std::array<double, 3> truth{1.4, 0.12, 0.08};
        const BootstrapTable t = surface_table2(truth, 10000);
        const GammaFit fit = fit_multistep(t, 3, {0.0, 0.0, 0.0});
        for (int i = 0; i < 3; ++i)
            CHECK(fit.gamma[i] == Approx(truth[i]).margin(1e-8));
        CHECK(fit.rss <= 1e-12);
    }
}

TEST_CASE("multistep fit satisfies the estimator invariants", "[fit][slow]") {
    SECTION("weighted residuals are orthogonal to the Jacobian columns") {
        const GammaFit fit =
            fit_multistep(oracle_exp(), 6, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0});
        std::array<double, 6> dot{};
        for (const auto& cell : oracle_exp().cells) {
            const ScaleFeatures f = scale_features(cell.scales);
            std::array<double, 6> grad;
            const double zfit = detail::zeta3_grad(fit.gamma, f, grad);
            const double w = 1.0 / (static_cast<double>(cell.B) * cell.var_z);
            for (int j = 0; j < 6; ++j)
                dot[j] += w * grad[j] * (cell.z - zfit);
        }
        for (int j = 0; j < 6; ++j)
            CHECK(std::fabs(dot[j]) <= 1e-8);
    }
    SECTION("penalized objective at the estimate beats the generating truth") {
        std::mt19937 rng(7);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        std::normal_distribution<double> gauss(0.0, 0.01);
        const std::vector<double> ridge = default_ridge_weights(6);
        for (int rep = 0; rep < 20; ++rep) {
            const std::array<double, 6> truth{
                0.8 + 0.6 * std::fabs(u(rng)), 0.2 * u(rng),  0.2 * u(rng),
                0.05 * u(rng),                 0.05 * u(rng), 0.05 * u(rng)};
            BootstrapTable t = surface_table(truth, 10000);
            for (auto& cell : t.cells) {
                const double z = cell.z + gauss(rng);
                cell.alpha = normal_cdf(-z);
                cell.count = cell.alpha * static_cast<double>(cell.B);
                alpha_to_z(cell.alpha, cell.B, cell.z, cell.var_z);
            }
            const GammaFit fit = fit_multistep(t, 6, ridge);
            CHECK(penalized_objective(t, 6, fit.gamma, ridge) <=
                  penalized_objective(t, 6, truth, ridge) + 1e-12);
        }
    }
    SECTION("the optimum does not depend on the starting point") {
        const std::vector<double> ridge = default_ridge_weights(6);
        const GammaFit base = fit_multistep(oracle_exp(), 6, ridge);
        std::mt19937 rng(11);
        std::uniform_real_distribution<double> scale(0.5, 1.5);
        std::uniform_real_distribution<double> small(-0.1, 0.1);
        for (int rep = 0; rep < 10; ++rep) {
            std::array<double, 6> init{};
            init[0] = base.gamma[0] * scale(rng);
            for (int j = 1; j < 6; ++j)
                init[j] = small(rng);
            const GammaFit fit = fit_multistep(oracle_exp(), 6, ridge, init);
            for (int j = 0; j < 6; ++j)
                CHECK(fit.gamma[j] == Approx(base.gamma[j]).margin(1e-6));
        }
    }
}

TEST_CASE("multistep fit rejects bad configurations", "[fit]") {
    const std::array<double, 6> g{1.5, 0.1, 0.05, 0.01, -0.01, 0.02};
    const BootstrapTable t = surface_table(g, 10000);

    CHECK_THROWS_AS(fit_multistep(t, 4, {0.0, 0.0, 0.0, 0.0}), config_error);
    CHECK_THROWS_AS(fit_multistep(t, 3, {0.0, 0.0}), config_error);
    CHECK_THROWS_AS(fit_multistep(t, 3, {0.0, 0.0, -0.5}), config_error);
    CHECK_THROWS_AS(
        fit_multistep(t, 6, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0},
                      std::array<double, 6>{0.0, 0.0, 0.0, 0.0, 0.0, 0.0}),
        numerical_error);

    BootstrapTable tiny;
    tiny.cells.assign(t.cells.begin(), t.cells.begin() + 2);
    CHECK_THROWS_AS(fit_multistep(tiny, 3, {0.0, 0.0, 0.0}), config_error);
}

TEST_CASE("default ridge weights leave the leading coefficients free", "[fit]") {
    const std::vector<double> w3 = default_ridge_weights(3);
    REQUIRE(w3.size() == 3);
    CHECK(w3[0] == 0.0);
    CHECK(w3[1] == 0.0);
    CHECK(w3[2] == 0.01);

    const std::vector<double> w6 = default_ridge_weights(6);
    REQUIRE(w6.size() == 6);
    CHECK(w6[0] == 0.0);
    CHECK(w6[1] == 0.0);
    for (int i = 2; i < 6; ++i)
        CHECK(w6[static_cast<std::size_t>(i)] == 0.01);

    CHECK_THROWS_AS(default_ridge_weights(4), config_error);
}

TEST_CASE("fit reports serialize to CSV", "[fit]") {
    SECTION("linear fit") {
        const LinearFit fit = fit_onestep(oracle_normal());
        std::ostringstream out;
        write_fit_csv(fit, out);
        std::istringstream in(out.str());
        std::string line;
        std::getline(in, line);
        CHECK(line == "coefficient,estimate,SE,rss,iterations");
        std::getline(in, line);
        CHECK(line.substr(0, 2) == "v,");
        CHECK(std::stod(line.substr(2)) == fit.v);
        std::getline(in, line);
        CHECK(line.substr(0, 2) == "c,");
        CHECK(std::stod(line.substr(2)) == fit.c);
    }
    SECTION("gamma fit") {
        const GammaFit fit = fit_multistep(oracle_exp(), 3, default_ridge_weights(3));
        std::ostringstream out;
        write_fit_csv(fit, out);
        std::istringstream in(out.str());
        std::string line;
        std::getline(in, line);
        CHECK(line == "coefficient,estimate,SE,rss,iterations");
        int rows = 0;
        while (std::getline(in, line) && !line.empty()) {
            CHECK(line.substr(0, 5) == "gamma");
            ++rows;
        }
        CHECK(rows == 3);
    }
}
