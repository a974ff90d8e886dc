#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mmboot/errors.hpp"
#include "mmboot/models.hpp"
#include "mmboot/rng.hpp"
#include "mmboot/scales.hpp"
#include "mmboot/special.hpp"

namespace mmboot {

// ---------------------------------------------------------------------------
// One resampling cell: a scale tuple, a replicate budget, and the observed
// hit count transformed to the z scale.  `count` is real-valued so that
// exact-probability tables (where count = alpha * B is not an integer) share
// the same plumbing as Monte Carlo tables.
// ---------------------------------------------------------------------------

struct BootstrapCell {
    ScaleTuple scales;
    long long B = 0;
    double count = 0.0;
    double alpha = 0.0;  ///< hit fraction after clamping
    double z = 0.0;      ///< -Phi^{-1}(alpha)
    double var_z = 0.0;  ///< delta-method variance of z
};

/// z and its delta-method variance for a hit fraction alpha out of B chains:
/// var(z) = alpha(1-alpha) / (B * phi(Phi^{-1}(alpha))^2).
inline void alpha_to_z(double alpha, long long B, double& z, double& var_z) {
    if (!(alpha > 0.0 && alpha < 1.0))
        throw numerical_error("alpha_to_z: alpha must be strictly inside (0,1)");
    const double q = normal_quantile(alpha);
    const double phi = normal_pdf(q);
    z = -q;
    var_z = alpha * (1.0 - alpha) / (static_cast<double>(B) * phi * phi);
}

/// Clamp a raw count into [0.5, B-0.5] and transform to the z scale.  The
/// clamp keeps z finite when a cell sees zero (or only) hits.
inline BootstrapCell transform_cell(double count, long long B, const ScaleTuple& scales) {
    if (B < 1)
        throw config_error("transform_cell: B must be at least 1");
    if (count < 0.0 || count > static_cast<double>(B))
        throw config_error("transform_cell: count must lie in [0, B]");
    BootstrapCell cell{scales, B, count, 0.0, 0.0, 0.0};
    const double clamped = std::min(std::max(count, 0.5), static_cast<double>(B) - 0.5);
    cell.alpha = clamped / static_cast<double>(B);
    alpha_to_z(cell.alpha, B, cell.z, cell.var_z);
    return cell;
}

// ---------------------------------------------------------------------------
// Chain engine.
//
// Each chain runs y -> y* -> y** -> y*** with one replicate per step at the
// cell's per-step scale.  Every (chain, step) pair owns a counter-addressed
// random stream, so results are bit-identical no matter how chains are
// scheduled across threads, and a step's draw count (the gamma sampler
// rejects a variable number of uniforms) never shifts any other stream.
// ---------------------------------------------------------------------------

namespace detail {

template <ReplicateModel M>
bool run_chain(const M& model, const Point& y, const ScaleTuple& scales,
               std::uint64_t seed, std::uint64_t chain, std::uint32_t cell_index) {
    Point pt = y;
    for (int step = 0; step < scales.k; ++step) {
        RandomStream rs(seed, cell_index, chain, static_cast<unsigned>(step));
        pt = model.sample_replicate(pt, scales.tau[step], rs);
    }
    return model.in_region(pt);
}

/// Run fn(i) for i in [0, n) on `workers` threads.  The index dispenser is
/// shared; any accumulation fn performs must be order-independent.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto body = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n)
                return;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    const int spawn = std::min<int>(workers, static_cast<int>(n));
    pool.reserve(static_cast<std::size_t>(spawn));
    for (int t = 0; t < spawn; ++t)
        pool.emplace_back(body);
    for (auto& th : pool)
        th.join();
}

}  // namespace detail

/// Run B independent chains for one cell and tabulate the hit count.
template <ReplicateModel M>
BootstrapCell run_cell(const M& model, const Point& y, const ScaleTuple& scales,
                       long long B, std::uint64_t seed, std::uint32_t cell_index = 0,
                       int workers = 1) {
    if (B < 1)
        throw config_error("run_cell: B must be at least 1");
    // Blocks keep thread handoff coarse; integer partial sums commute, so the
    // total is independent of scheduling.
    const long long block = 1 << 14;
    const std::size_t n_blocks = static_cast<std::size_t>((B + block - 1) / block);
    std::atomic<long long> hits{0};
    detail::parallel_for(n_blocks, workers, [&](std::size_t b) {
        const long long lo = static_cast<long long>(b) * block;
        const long long hi = std::min(B, lo + block);
        long long local = 0;
        for (long long chain = lo; chain < hi; ++chain)
            local += detail::run_chain(model, y, scales, seed,
                                       static_cast<std::uint64_t>(chain), cell_index)
                         ? 1
                         : 0;
        hits.fetch_add(local);
    });
    return transform_cell(static_cast<double>(hits.load()), B, scales);
}

// ---------------------------------------------------------------------------
// The full table across a scale plan.
// ---------------------------------------------------------------------------

struct BootstrapTable {
    std::vector<BootstrapCell> cells;
    std::uint64_t master_seed = 0;
    std::string model_name;
    Point observation;
    bool oracle = false;  ///< true when counts are exact probabilities * B
};

/// Monte Carlo table: every plan cell simulated with B chains.
template <ReplicateModel M>
BootstrapTable build_table(const M& model, const Point& y, const ScalePlan& plan,
                           std::uint64_t seed, int workers = 1) {
    BootstrapTable table;
    table.master_seed = seed;
    table.model_name = model.name();
    table.observation = y;
    table.oracle = false;
    table.cells.resize(plan.cells.size(),
                       BootstrapCell{plan.cells.empty() ? ScaleTuple(1.0) : plan.cells[0],
                                     0, 0.0, 0.0, 0.0, 0.0});
    // Parallelize over (cell, chain-block) pairs so a handful of heavy cells
    // cannot serialize the run.
    const long long B = plan.replicates_per_cell;
    const long long block = 1 << 14;
    const std::size_t blocks_per_cell = static_cast<std::size_t>((B + block - 1) / block);
    const std::size_t n_tasks = plan.cells.size() * blocks_per_cell;
    std::vector<std::atomic<long long>> hits(plan.cells.size());
    for (auto& h : hits)
        h.store(0);
    detail::parallel_for(n_tasks, workers, [&](std::size_t task) {
        const std::size_t ci = task / blocks_per_cell;
        const std::size_t bi = task % blocks_per_cell;
        const long long lo = static_cast<long long>(bi) * block;
        const long long hi = std::min(B, lo + block);
        long long local = 0;
        for (long long chain = lo; chain < hi; ++chain)
            local += detail::run_chain(model, y, plan.cells[ci], seed,
                                       static_cast<std::uint64_t>(chain),
                                       static_cast<std::uint32_t>(ci))
                         ? 1
                         : 0;
        hits[ci].fetch_add(local);
    });
    for (std::size_t ci = 0; ci < plan.cells.size(); ++ci)
        table.cells[ci] =
            transform_cell(static_cast<double>(hits[ci].load()), B, plan.cells[ci]);
    return table;
}

/// Exact-probability table: each cell's hit fraction is the model's chain
/// probability; B only sets the (nominal) weights.  Requires the model's
/// probability oracles.
template <typename M>
BootstrapTable build_table_oracle(const M& model, const Point& y, const ScalePlan& plan,
                                  int workers = 1) {
    if constexpr (!HasKStepOracle<M>) {
        (void)y;
        (void)plan;
        (void)workers;
        throw capability_error("model '" + std::string(model.name()) +
                               "' provides no chain-probability oracle");
    } else {
        BootstrapTable table;
        table.master_seed = 0;
        table.model_name = model.name();
        table.observation = y;
        table.oracle = true;
        const long long B = plan.replicates_per_cell;
        table.cells.resize(plan.cells.size(),
                           BootstrapCell{plan.cells.empty() ? ScaleTuple(1.0) : plan.cells[0],
                                         0, 0.0, 0.0, 0.0, 0.0});
        std::vector<std::string> failures(plan.cells.size());
        detail::parallel_for(plan.cells.size(), workers, [&](std::size_t ci) {
            try {
                const double alpha = model.k_step_prob(y, plan.cells[ci]);
                BootstrapCell cell{plan.cells[ci], B, alpha * static_cast<double>(B),
                                   alpha, 0.0, 0.0};
                alpha_to_z(alpha, B, cell.z, cell.var_z);
                table.cells[ci] = cell;
            } catch (const std::exception& ex) {
                failures[ci] = ex.what();
            }
        });
        for (std::size_t ci = 0; ci < plan.cells.size(); ++ci)
            if (!failures[ci].empty())
                throw numerical_error("cell " + std::to_string(ci) + " (k=" +
                                      std::to_string(plan.cells[ci].k) +
                                      "): " + failures[ci]);
        return table;
    }
}

// ---------------------------------------------------------------------------
// CSV interchange.
//
// Columns: k,tau1,tau2,tau3,B,count,alpha,z,var_z with tau2/tau3 left empty
// for shorter chains.  Values are printed with 17 significant digits so a
// write/read cycle reproduces the table bit for bit.  Header comments carry
// the provenance fields.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ','))
        out.push_back(field);
    if (!line.empty() && line.back() == ',')
        out.emplace_back();
    return out;
}

}  // namespace detail

inline void write_table_csv(const BootstrapTable& table, std::ostream& out) {
    out << "# model=" << table.model_name << "\n";
    out << "# seed=" << table.master_seed << "\n";
    out << "# oracle=" << (table.oracle ? 1 : 0) << "\n";
    out << "# y=";
    for (std::size_t i = 0; i < table.observation.size(); ++i)
        out << (i ? " " : "") << detail::fmt17(table.observation[i]);
    out << "\n";
    out << "k,tau1,tau2,tau3,B,count,alpha,z,var_z\n";
    for (const auto& c : table.cells) {
        out << c.scales.k << ',' << detail::fmt17(c.scales.tau[0]) << ',';
        if (c.scales.k >= 2)
            out << detail::fmt17(c.scales.tau[1]);
        out << ',';
        if (c.scales.k >= 3)
            out << detail::fmt17(c.scales.tau[2]);
        out << ',' << c.B << ',' << detail::fmt17(c.count) << ','
            << detail::fmt17(c.alpha) << ',' << detail::fmt17(c.z) << ','
            << detail::fmt17(c.var_z) << "\n";
    }
}

inline void write_table_csv(const BootstrapTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw config_error("cannot open '" + path + "' for writing");
    write_table_csv(table, out);
}

/// Read a table back.  Rows that omit alpha/z/var_z (external count tables)
/// are completed with the standard transform; fully populated rows are taken
/// verbatim so round-trips are exact.
inline BootstrapTable read_table_csv(std::istream& in) {
    BootstrapTable table;
    std::string line;
    bool header_seen = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                continue;
            std::string key = line.substr(1, eq - 1);
            std::string val = line.substr(eq + 1);
            while (!key.empty() && key.front() == ' ')
                key.erase(key.begin());
            while (!key.empty() && key.back() == ' ')
                key.pop_back();
            if (key == "model")
                table.model_name = val;
            else if (key == "seed")
                table.master_seed = std::stoull(val);
            else if (key == "oracle")
                table.oracle = (val == "1" || val == "true");
            else if (key == "y") {
                std::istringstream ys(val);
                double v;
                table.observation.clear();
                while (ys >> v)
                    table.observation.push_back(v);
            }
            continue;
        }
        if (!header_seen) {
            if (line.rfind("k,", 0) != 0)
                throw config_error("table CSV line " + std::to_string(lineno) +
                                   ": expected header 'k,tau1,...'");
            header_seen = true;
            continue;
        }
        const auto f = detail::split_csv_line(line);
        if (f.size() < 6)
            throw config_error("table CSV line " + std::to_string(lineno) +
                               ": expected at least 6 fields");
        try {
            const int k = std::stoi(f[0]);
            ScaleTuple scales = [&]() -> ScaleTuple {
                switch (k) {
                case 1:
                    return ScaleTuple(std::stod(f[1]));
                case 2:
                    return ScaleTuple(std::stod(f[1]), std::stod(f[2]));
                case 3:
                    return ScaleTuple(std::stod(f[1]), std::stod(f[2]), std::stod(f[3]));
                default:
                    throw config_error("k must be 1, 2, or 3");
                }
            }();
            const long long B = std::stoll(f[4]);
            const double count = std::stod(f[5]);
            const bool have_transform =
                f.size() >= 9 && !f[6].empty() && !f[7].empty() && !f[8].empty();
            if (have_transform) {
                BootstrapCell cell{scales, B, count, std::stod(f[6]), std::stod(f[7]),
                                   std::stod(f[8])};
                table.cells.push_back(cell);
            } else {
                table.cells.push_back(transform_cell(count, B, scales));
            }
        } catch (const config_error&) {
            throw;
        } catch (const std::exception& ex) {
            throw config_error("table CSV line " + std::to_string(lineno) + ": " +
                               ex.what());
        }
    }
    if (!header_seen)
        throw config_error("table CSV: missing header row");
    return table;
}

inline BootstrapTable read_table_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw config_error("cannot open '" + path + "' for reading");
    return read_table_csv(in);
}

}  // namespace mmboot
