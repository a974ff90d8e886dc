// mmboot: multistep-multiscale bootstrap p-values from the command line.
//
// Subcommands: analyze (one observation, full pipeline), table2 (benchmark
// grid over the built-in models), curve (scaling-curve data for plotting),
// coverage (rejection-frequency simulation at the region boundary).
//
// Exit codes: 0 success, 2 bad configuration, 3 missing model capability,
// 4 numerical failure.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mmboot/analysis.hpp"

namespace fs = std::filesystem;
using namespace mmboot;

namespace {

// ---------------------------------------------------------------------------
// Shared option block, one instance per subcommand.
// ---------------------------------------------------------------------------

struct CommonOpts {
    std::string model = "spherical";
    int p = 4;
    int n = 10;
    std::string mode = "mc";
    long long B = 10000;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
    std::vector<std::string> methods;
    std::string ridge = "default";
    std::string scales_file;
    std::string out_dir = ".";
    int workers = 1;
};

void add_common(CLI::App* cmd, CommonOpts& c, bool with_model_opts = true) {
    if (with_model_opts) {
        cmd->add_option("--model", c.model,
                        "built-in model: spherical (alias: normal) or exponential")
            ->capture_default_str();
        cmd->add_option("--p", c.p, "dimension of the spherical model")
            ->capture_default_str();
        cmd->add_option("--n", c.n, "sample size behind the observation")
            ->capture_default_str();
    }
    cmd->add_option("--mode", c.mode, "mc (simulate) or oracle (exact probabilities)")
        ->check(CLI::IsMember({"mc", "oracle"}))
        ->capture_default_str();
    cmd->add_option("--b", c.B, "bootstrap replicates per cell")
        ->capture_default_str();
    c.seed_opt = cmd->add_option("--seed", c.seed,
                                 "master seed (generated and printed if omitted)");
    cmd->add_option("--ridge", c.ridge,
                    "penalty weights: 'default', 'none', or six comma-separated values")
        ->capture_default_str();
    cmd->add_option("--scales-file", c.scales_file,
                    "replace the built-in scale plan: one tau1[,tau2[,tau3]] per line");
    cmd->add_option("--out-dir", c.out_dir, "directory for CSV outputs")
        ->capture_default_str();
    cmd->add_option("--workers", c.workers, "worker threads (never changes results)")
        ->capture_default_str();
}

/// Config-file reader for flat `key=value` lines with `#` comments: keys
/// without an explicit section are scoped to the subcommand being run, so
/// `model=exponential` in a file reaches `analyze --model`.
class FlatConfig : public CLI::ConfigTOML {
public:
    explicit FlatConfig(const CLI::App* app) : app_(app) {}

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        auto items = CLI::ConfigTOML::from_config(input);
        const auto subs = app_->get_subcommands();
        if (!subs.empty())
            for (auto& item : items)
                if (item.parents.empty())
                    item.parents.push_back(subs.front()->get_name());
        return items;
    }

private:
    const CLI::App* app_;
};

RunMode mode_of(const CommonOpts& c) { return parse_run_mode(c.mode); }

/// Seed policy: explicit wins; otherwise randomized commands get a fresh
/// seed that is printed so the run can be reproduced.
std::uint64_t resolve_seed(const CommonOpts& c, bool randomized) {
    if (c.seed_opt != nullptr && c.seed_opt->count() > 0)
        return c.seed;
    if (!randomized)
        return 0;
    std::random_device rd;
    const std::uint64_t s =
        (static_cast<std::uint64_t>(rd()) << 32) ^ static_cast<std::uint64_t>(rd());
    std::cout << "seed: " << s << " (generated; pass --seed " << s
              << " to reproduce)\n";
    return s;
}

std::vector<double> parse_ridge(const std::string& arg) {
    if (arg.empty() || arg == "default")
        return {};
    if (arg == "none")
        return std::vector<double>(6, 0.0);
    std::vector<double> out;
    std::stringstream in(arg);
    std::string field;
    while (std::getline(in, field, ',')) {
        try {
            out.push_back(std::stod(field));
        } catch (const std::exception&) {
            throw config_error("ridge: cannot parse '" + field + "' as a number");
        }
    }
    if (out.size() != 6)
        throw config_error("ridge needs exactly 6 comma-separated weights, got " +
                           std::to_string(out.size()));
    return out;
}

ScalePlan read_scales_file(const std::string& path, long long B) {
    std::ifstream in(path);
    if (!in)
        throw config_error("cannot open scales file '" + path + "'");
    ScalePlan plan;
    plan.replicates_per_cell = B;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#')
            continue;
        std::vector<double> taus;
        std::stringstream fields(line);
        std::string field;
        while (std::getline(fields, field, ',')) {
            try {
                taus.push_back(std::stod(field));
            } catch (const std::exception&) {
                throw config_error("scales file line " + std::to_string(lineno) +
                                   ": cannot parse '" + field + "'");
            }
        }
        switch (taus.size()) {
        case 1:
            plan.cells.emplace_back(taus[0]);
            break;
        case 2:
            plan.cells.emplace_back(taus[0], taus[1]);
            break;
        case 3:
            plan.cells.emplace_back(taus[0], taus[1], taus[2]);
            break;
        default:
            throw config_error("scales file line " + std::to_string(lineno) +
                               ": expected 1-3 scales, got " +
                               std::to_string(taus.size()));
        }
    }
    if (plan.cells.empty())
        throw config_error("scales file '" + path + "' defines no cells");
    return plan;
}

AnalysisOptions make_options(const CommonOpts& c, bool randomized) {
    AnalysisOptions opt;
    opt.mode = mode_of(c);
    opt.B = c.B;
    opt.seed = resolve_seed(c, randomized && opt.mode == RunMode::mc);
    opt.workers = c.workers;
    opt.methods = c.methods;
    opt.ridge = parse_ridge(c.ridge);
    if (!c.scales_file.empty())
        opt.plan = read_scales_file(c.scales_file, c.B);
    return opt;
}

fs::path prepare_out_dir(const std::string& dir) {
    fs::path p(dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec)
        throw config_error("cannot create output directory '" + dir +
                           "': " + ec.message());
    return p;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path);
    if (!out)
        throw config_error("cannot open '" + path.string() + "' for writing");
    out << content;
}

/// Dispatch on the model name; `fn` is a generic lambda over the model type.
template <typename Fn>
int with_model(const CommonOpts& c, Fn&& fn) {
    if (c.model == "spherical" || c.model == "normal")
        return fn(SphericalNormalModel(c.p, c.n));
    if (c.model == "exponential")
        return fn(ExponentialMeanModel(c.n));
    throw config_error("unknown model '" + c.model +
                       "' (choose spherical, normal, or exponential)");
}

/// The observation in y coordinates (y = sqrt(n) * xbar).
template <typename M>
Point make_observation(const M& model, const std::optional<double>& xbar_norm2,
                       const std::vector<double>& xbar) {
    if (xbar_norm2 && !xbar.empty())
        throw config_error("give either --xbar-norm2 or --xbar, not both");
    const double root_n = std::sqrt(static_cast<double>(model.sample_size()));
    if (xbar_norm2) {
        if (model.name() != "spherical")
            throw config_error("--xbar-norm2 applies only to the spherical model");
        if (!(*xbar_norm2 > 0.0))
            throw config_error("--xbar-norm2 must be positive");
        // Rotation-invariant model: place the observation on the first axis.
        Point y(static_cast<std::size_t>(model.dim()), 0.0);
        y[0] = root_n * std::sqrt(*xbar_norm2);
        return y;
    }
    if (!xbar.empty()) {
        if (static_cast<int>(xbar.size()) != model.dim())
            throw config_error("--xbar needs " + std::to_string(model.dim()) +
                               " coordinates for this model, got " +
                               std::to_string(xbar.size()));
        Point y(xbar.begin(), xbar.end());
        for (double& v : y)
            v *= root_n;
        return y;
    }
    throw config_error("an observation is required: --xbar-norm2 or --xbar");
}

// ---------------------------------------------------------------------------
// Output helpers.
// ---------------------------------------------------------------------------

std::string render_fit_csv(const AnalysisResult& res) {
    std::ostringstream out;
    if (res.onestep) {
        out << "# fit=onestep\n";
        write_fit_csv(*res.onestep, out);
    }
    if (res.fit3) {
        out << "# fit=gamma3\n";
        write_fit_csv(*res.fit3, out);
    }
    if (res.fit6) {
        out << "# fit=gamma6\n";
        write_fit_csv(*res.fit6, out);
    }
    return out.str();
}

void print_reports(const AnalysisResult& res) {
    std::cout << "method     p-value       z          SE(p-value)\n";
    for (const auto& r : res.reports) {
        std::cout << std::left << std::setw(10) << r.method << std::right
                  << std::fixed << std::setprecision(6) << std::setw(9) << r.alpha
                  << "  " << std::setw(9) << r.z << "  ";
        if (r.se_alpha)
            std::cout << std::setw(9) << *r.se_alpha;
        else
            std::cout << "        -";
        std::cout << "\n";
    }
    std::cout.unsetf(std::ios::floatfield);
    std::cout << std::setprecision(6);
}

void write_analysis_outputs(const AnalysisResult& res, const fs::path& dir) {
    {
        std::ostringstream table;
        write_table_csv(res.table, table);
        write_file(dir / "table.csv", table.str());
    }
    write_file(dir / "fit.csv", render_fit_csv(res));
    {
        std::ostringstream pv;
        write_pvalues_csv(res.reports, pv);
        write_file(dir / "pvalues.csv", pv.str());
    }
    std::cout << "wrote " << (dir / "table.csv").string() << ", "
              << (dir / "fit.csv").string() << ", "
              << (dir / "pvalues.csv").string() << "\n";
}

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

int cmd_analyze(const CommonOpts& c, const std::optional<double>& xbar_norm2,
                const std::vector<double>& xbar, const std::string& table_file) {
    const fs::path dir = prepare_out_dir(c.out_dir);

    if (!table_file.empty()) {
        if (xbar_norm2 || !xbar.empty())
            throw config_error("--table replaces the model/observation flags");
        AnalysisOptions opt = make_options(c, /*randomized=*/false);
        AnalysisResult res = analyze_table(read_table_csv(table_file), opt);
        std::cout << "imported " << res.table.cells.size() << " cells from "
                  << table_file << "\n";
        print_reports(res);
        write_analysis_outputs(res, dir);
        return 0;
    }

    AnalysisOptions opt = make_options(c, /*randomized=*/true);
    return with_model(c, [&](const auto& model) {
        const Point y = make_observation(model, xbar_norm2, xbar);
        const AnalysisResult res = run_analysis(model, y, opt);
        std::cout << "model " << model.name() << ", n=" << model.sample_size()
                  << ", mode=" << c.mode << ", B=" << c.B << ", cells="
                  << res.table.cells.size() << "\n";
        print_reports(res);
        write_analysis_outputs(res, dir);
        return 0;
    });
}

int cmd_table2(const CommonOpts& c, const std::string& which,
               const std::vector<int>& ns, const std::vector<double>& targets) {
    const RunMode mode = mode_of(c);
    const fs::path dir = prepare_out_dir(c.out_dir);
    const std::uint64_t seed = resolve_seed(c, mode == RunMode::mc);

    std::vector<std::string> kinds;
    if (which == "both") {
        kinds = {"spherical", "exponential"};
    } else if (which == "spherical" || which == "normal" || which == "exponential") {
        kinds = {which};
    } else {
        throw config_error("table2 --model must be both, spherical, normal, or "
                           "exponential");
    }

    std::vector<BenchmarkRow> rows;
    std::uint64_t row_index = 0;
    for (const auto& kind : kinds) {
        for (int n : ns) {
            for (double target : targets) {
                CommonOpts mc = c;
                mc.model = kind;
                mc.n = n;
                with_model(mc, [&](const auto& model) {
                    rows.push_back(benchmark_row(model, target, mode, c.B,
                                                 derive_seed(seed, row_index),
                                                 c.workers));
                    return 0;
                });
                ++row_index;
                const BenchmarkRow& r = rows.back();
                std::cout << std::left << std::setw(12) << r.model << " n="
                          << std::setw(5) << r.n << " target=" << std::fixed
                          << std::setprecision(2) << r.target << "  " << r.p0 << "  "
                          << r.abc << "  " << r.p1 << "(" << r.p1_se << ")  " << r.p2
                          << "(" << r.p2_se << ")  " << r.p3 << "(" << r.p3_se
                          << ")  " << r.p2_ridge << "(" << r.p2_ridge_se << ")  "
                          << r.p3_ridge << "(" << r.p3_ridge_se << ")\n";
                std::cout.unsetf(std::ios::floatfield);
                std::cout << std::setprecision(6);
            }
        }
    }

    std::ostringstream csv;
    write_benchmark_csv(rows, csv);
    write_file(dir / "table2.csv", csv.str());
    std::cout << "wrote " << (dir / "table2.csv").string() << " (" << rows.size()
              << " rows)\n";
    return 0;
}

int cmd_curve(const CommonOpts& c, const std::optional<double>& xbar_norm2,
              const std::vector<double>& xbar) {
    const fs::path dir = prepare_out_dir(c.out_dir);
    AnalysisOptions opt = make_options(c, /*randomized=*/true);
    return with_model(c, [&](const auto& model) {
        const Point y = make_observation(model, xbar_norm2, xbar);
        const ScalePlan plan =
            opt.plan ? *opt.plan : default_scale_plan(model.sample_size(), c.B);
        const BootstrapTable table =
            opt.mode == RunMode::oracle
                ? build_table_oracle(model, y, plan, c.workers)
                : build_table(model, y, plan, opt.seed, c.workers);
        const LinearFit fit = fit_onestep(table);
        const auto pts = curve_points(table, fit);

        std::cout << "one-step fit: v=" << fit.v << " (SE " << fit.se_v()
                  << "), c=" << fit.c << " (SE " << fit.se_c() << ")\n";
        std::cout << "fitted z at 1/tau=1: " << fit.v + fit.c << "\n";
        std::ostringstream csv;
        write_curve_csv(pts, csv);
        write_file(dir / "curve.csv", csv.str());
        std::cout << "wrote " << (dir / "curve.csv").string() << "\n";
        return 0;
    });
}

int cmd_coverage(const CommonOpts& c, const std::string& method, double level,
                 long trials) {
    const fs::path dir = prepare_out_dir(c.out_dir);
    const RunMode mode = mode_of(c);
    const std::uint64_t seed = resolve_seed(c, /*randomized=*/true);
    return with_model(c, [&](const auto& model) {
        const CoverageResult res =
            run_coverage(model, method, level, trials, mode, c.B, seed, c.workers);
        std::cout << "method " << res.method << " at level " << res.level << ": "
                  << res.hits << "/" << res.trials << " rejections, frequency "
                  << res.frequency << " (SE " << res.se << ")\n";
        std::ostringstream csv;
        write_coverage_csv(res, csv);
        write_file(dir / "coverage.csv", csv.str());
        std::cout << "wrote " << (dir / "coverage.csv").string() << "\n";
        return 0;
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multistep-multiscale bootstrap p-values"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "key=value file with any subcommand option; flags win");
    app.config_formatter(std::make_shared<FlatConfig>(&app));

    CommonOpts ca, ct, cc, cv;
    std::optional<double> xbar_norm2_a, xbar_norm2_c;
    std::vector<double> xbar_a, xbar_c;
    std::string table_file;
    std::string t2_model = "both";
    std::vector<int> t2_ns = {10, 100, 1000};
    std::vector<double> t2_targets = {0.05, 0.95};
    std::string cov_method;
    double cov_level = 0.05;
    long cov_trials = 2000;

    CLI::App* analyze =
        app.add_subcommand("analyze", "p-values for one observation");
    add_common(analyze, ca);
    analyze->add_option("--xbar-norm2", xbar_norm2_a,
                        "||xbar||^2 for the spherical model (y = sqrt(n) xbar)");
    analyze->add_option("--xbar", xbar_a,
                        "xbar coordinates, comma separated (y = sqrt(n) xbar)")
        ->delimiter(',');
    analyze->add_option("--methods", ca.methods,
                        "comma list from p0,abc,p1,p2,p3,exact (default: all "
                        "the inputs support)")
        ->delimiter(',');
    analyze->add_option("--table", table_file,
                        "import a count table CSV instead of simulating");

    CLI::App* table2 = app.add_subcommand(
        "table2", "benchmark grid over the built-in models");
    add_common(table2, ct, /*with_model_opts=*/false);
    table2->add_option("--model", t2_model,
                       "both, spherical, normal, or exponential")
        ->capture_default_str();
    table2->add_option("--p", ct.p, "dimension of the spherical model")
        ->capture_default_str();
    table2->add_option("--n", t2_ns, "sample sizes, comma separated")
        ->delimiter(',')
        ->capture_default_str();
    table2->add_option("--target", t2_targets,
                       "exact p-value targets, comma separated")
        ->delimiter(',')
        ->capture_default_str();

    CLI::App* curve =
        app.add_subcommand("curve", "scaling-curve data (z against 1/tau)");
    add_common(curve, cc);
    curve->add_option("--xbar-norm2", xbar_norm2_c,
                      "||xbar||^2 for the spherical model");
    curve->add_option("--xbar", xbar_c, "xbar coordinates, comma separated")
        ->delimiter(',');

    CLI::App* coverage = app.add_subcommand(
        "coverage", "rejection frequency at the region boundary");
    add_common(coverage, cv);
    coverage->add_option("--method", cov_method,
                         "method to simulate: p0, abc, p1, p2, p3, or exact")
        ->required();
    coverage->add_option("--level", cov_level, "rejection level")
        ->capture_default_str();
    coverage->add_option("--trials", cov_trials, "independent draws")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*analyze)
            return cmd_analyze(ca, xbar_norm2_a, xbar_a, table_file);
        if (*table2)
            return cmd_table2(ct, t2_model, t2_ns, t2_targets);
        if (*curve)
            return cmd_curve(cc, xbar_norm2_c, xbar_c);
        if (*coverage)
            return cmd_coverage(cv, cov_method, cov_level, cov_trials);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const capability_error& e) {
        std::cerr << "capability error: " << e.what() << "\n";
        return 3;
    } catch (const numerical_error& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
