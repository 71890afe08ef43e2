// Acceptance checks: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "tbloc/cli/experiments.hpp"

using namespace tbloc;
using namespace tbloc::cli;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

std::string config_path(const std::string& name) { return std::string(TBLOC_CONFIG_DIR) + "/" + name; }

std::vector<fs::path> shipped_configs() {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(TBLOC_CONFIG_DIR))
        if (e.path().extension() == ".toml") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

json run(const std::string& name, int threads = 4) {
    ExperimentConfig c = load_config(config_path(name));
    c.threads = threads;
    Report rep;
    run_experiment(c, rep);
    return rep.results;
}

Models chain_models() {
    Models m;
    m.hop = {1.0, 1.5, 1.0};
    m.onsite.kind = OnsiteModel::Kind::Saturating;
    m.onsite.U = 0.5;
    m.onsite.rho0 = 0.5;
    return m;
}

Models dimer_models() {
    Models m = chain_models();
    m.hop.gamma0 = 2.0;
    m.onsite.species_shift = {{"A", -1.0}, {"B", 1.0}};
    return m;
}

Configuration dimer_ring(int cells) {
    Eigen::MatrixXd basis(1, 2);
    basis << 0.0, 1.0;
    return build_multilattice(Eigen::MatrixXd::Constant(1, 1, 2.0), basis, {"A", "B"}, {cells}, true);
}

ScfParams tight() {
    ScfParams p;
    p.tol = 1e-13;
    return p;
}

// Seeded test systems: jittered chains at finite temperature and gapped rings at zero temperature.
std::vector<SystemState> seeded_states(const std::vector<int>& sizes) {
    std::vector<SystemState> out;
    std::uint64_t seed = 100;
    for (int n : sizes) {
        const Configuration c = build_chain(n, 1.0);
        out.push_back(solve_state(c, jitter_displacement(c, 0.05, seed++), chain_models(), {10.0, 0.05}, tight()));
        const Configuration r = dimer_ring(n / 2);
        out.push_back(solve_state(r, jitter_displacement(r, 0.05, seed++), dimer_models(), {kInf, 0.0}, tight()));
    }
    return out;
}

// ---------------------------------------------------------------------------

Outcome trace_identity() {
    double es = 0.0, ec = 0.0;
    const double margin = SolverConfig{}.margin;
    for (const SystemState& s : seeded_states({10, 20, 30, 40})) {
        for (const Observable& o : {s.fermi(), s.thermo.grand()}) {
            es = std::max(es, trace_identity_spectral(s, o));
            ec = std::max(ec, trace_identity_contour(s, o, 64, margin));
        }
    }
    return {es <= 1e-12 && ec <= 1e-8, "spectral " + fmt(es) + ", contour(64) " + fmt(ec)};
}

Outcome scf_fixed_point() {
    double worst = 0.0, min_gap = kInf;
    int runs = 0;
    for (const fs::path& p : shipped_configs()) {
        const ExperimentConfig c = load_config(p.string());
        std::vector<std::vector<int>> sizes = {c.geometry.repeats};
        for (const auto& s : c.defect.sizes) sizes.push_back(s);
        std::vector<double> betas = {c.thermo.beta};
        for (double b : c.locality.betas) betas.push_back(b);
        for (const auto& reps : sizes) {
            const Configuration ref = build_reference(c.geometry, reps);
            std::vector<Configuration> cfgs = {ref};
            if (!c.geometry.defects.empty()) cfgs.push_back(apply_defects(ref, c.geometry));
            for (const Configuration& cfg : cfgs)
                for (double beta : betas) {
                    const Displacement u = jitter_displacement(cfg, c.geometry.jitter, c.seed);
                    const SystemState s = solve_state(cfg, u, c.models, {beta, c.thermo.mu}, c.solver.scf);
                    const Density F = density_map(cfg, u, s.density.rho, c.models, s.fermi());
                    worst = std::max(worst, (F.rho - s.density.rho).cwiseAbs().maxCoeff());
                    if (std::isinf(beta)) min_gap = std::min(min_gap, s.density.min_gap);
                    ++runs;
                }
        }
    }
    return {worst <= 1e-10 && min_gap > 0,
            std::to_string(runs) + " solves, max residual " + fmt(worst) + ", min gap (beta=inf) " + fmt(min_gap)};
}

Outcome stability_operator_fd() {
    double err = 0.0;
    for (const SystemState& s : seeded_states({4, 8, 12})) err = std::max(err, stability_fd_error(s));
    const Configuration one = build_chain(1, 1.0);
    Models m = chain_models();
    m.onsite.U = 1.0;
    m.onsite.rho0 = 0.0;
    err = std::max(err, stability_fd_error(solve_state(one, zero_displacement(one), m, {5.0, 0.5}, tight())));
    return {err <= 1e-6, "max columnwise relative error " + fmt(err)};
}

Outcome response_fd() {
    std::mt19937_64 gen(11);
    ResponseChecks w;
    auto take = [&](const ResponseChecks& r) {
        w.density_response = std::max(w.density_response, r.density_response);
        w.gradient = std::max(w.gradient, r.gradient);
        w.hessian = std::max(w.hessian, r.hessian);
        w.sum_rule = std::max(w.sum_rule, r.sum_rule);
    };
    {
        const Configuration c = build_chain(10, 1.0);
        const StateBuilder B(c, chain_models(), {10.0, 0.05}, tight());
        take(response_fd_errors(B, jitter_displacement(c, 0.05, 1), Observable::grand_potential(0.05, 10.0), gen, 3,
                                1e-4, 4));
    }
    {
        const Configuration c = dimer_ring(6);
        const StateBuilder B(c, dimer_models(), {kInf, 0.0}, tight());
        take(response_fd_errors(B, jitter_displacement(c, 0.05, 2), Observable::grand_potential(0.0, kInf), gen, 3,
                                1e-4, 4));
    }
    {
        const Configuration c =
            build_multilattice(Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Zero(2, 1), {"A"}, {3, 3}, false);
        const StateBuilder B(c, chain_models(), {10.0, 0.0}, tight());
        take(response_fd_errors(B, jitter_displacement(c, 0.05, 3), Observable::grand_potential(0.0, 10.0), gen, 3,
                                1e-4, 4));
    }
    const bool ok = w.density_response <= 1e-5 && w.gradient <= 1e-5 && w.hessian <= 1e-4 && w.sum_rule <= 1e-8;
    return {ok, "density " + fmt(w.density_response) + ", gradient " + fmt(w.gradient) + ", hessian " +
                    fmt(w.hessian) + ", sum rule " + fmt(w.sum_rule)};
}

Outcome combes_thomas() {
    const json r = run("ct.toml");
    bool ok = r["eta_monotone_in_d"].get<bool>();
    std::string d;
    for (const auto& row : r["distances"]) {
        const double r2 = row["fit"]["r_squared"].get<double>();
        ok = ok && r2 >= 0.98;
        d += "d=" + fmt(row["d"].get<double>()) + ": gamma " + fmt(row["gamma"].get<double>()) + " R2 " + fmt(r2) +
             "; ";
    }
    return {ok && r["distances"].size() == 2, d + "monotone " + (r["eta_monotone_in_d"].get<bool>() ? "yes" : "no")};
}

Outcome locality() {
    const json g = run("locality.toml");
    const auto& runs = g["runs"];
    bool ok = runs.size() == 3;
    std::string d;
    for (const auto& x : runs) {
        const double eta = x["fit"]["eta_hat"].get<double>(), r2 = x["fit"]["r_squared"].get<double>();
        ok = ok && eta > 0 && r2 >= 0.9;
        d += "beta=" + (x["beta"].is_string() ? std::string("inf") : fmt(x["beta"].get<double>())) + ": eta " +
             fmt(eta) + " R2 " + fmt(r2) + "; ";
    }
    const double e20 = runs[1]["fit"]["eta_hat"].get<double>(), e80 = runs[2]["fit"]["eta_hat"].get<double>();
    const double spread = std::abs(e20 - e80) / e80;
    ok = ok && spread <= 0.2;
    const json gl = run("locality_gapless.toml");
    const bool mono = gl["eta_nonincreasing"].get<bool>();
    std::string ge;
    for (const auto& x : gl["runs"]) ge += fmt(x["fit"]["eta_hat"].get<double>()) + " ";
    return {ok && mono, d + "|eta20-eta80|/eta80 " + fmt(spread) + "; gapless eta " + ge + (mono ? "non-increasing" : "increasing")};
}

Outcome woodbury() {
    double err = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 gen(seed);
        err = std::max(err, woodbury_error(gen, 8, 3));
    }
    return {err <= 1e-10, "max relative error over 20 seeds " + fmt(err)};
}

Outcome defects() {
    const json r = run("defect.toml");
    const auto& sizes = r["sizes"];
    bool ok = sizes.size() >= 2 && r["in_gap_count_stable"].get<bool>();
    std::string d;
    for (const auto& s : sizes) {
        std::vector<double> rel;
        for (const auto& b : s["bins"])
            if (b["pairs"].get<int>() > 0) {
                const double c = b["mean_constant"].get<double>(), cr = b["mean_constant_ref"].get<double>();
                rel.push_back(std::abs(c - cr) / cr);
            }
        bool mono = rel.size() >= 3;
        for (std::size_t q = 1; q < rel.size(); ++q) mono = mono && rel[q] <= rel[q - 1] + 1e-9;
        const double far = rel.empty() ? kInf : rel.back();
        const double r2 = s["density_fit"].is_null() ? 0.0 : s["density_fit"]["r_squared"].get<double>();
        ok = ok && mono && far <= 0.2 && r2 >= 0.8;
        d += std::to_string(s["n_sites_reference"].get<int>()) + " sites: in-gap " +
             std::to_string(s["in_gap_count"].get<int>()) + ", far bin " + fmt(far) + (mono ? " (monotone)" : " (not monotone)") +
             ", density R2 " + fmt(r2) + "; ";
    }
    if (d.size() >= 2) d.resize(d.size() - 2);
    return {ok, d};
}

Outcome bloch() {
    const json r = run("bands.toml");
    double cons = 0.0;
    for (const auto& x : r["supercell_consistency"]) cons = std::max(cons, x["max_deviation"].get<double>());
    const double gap = r["band_gap"].get<double>(), gd = r["gap_difference"].get<double>();
    const double sd = r["stability"]["spectrum_deviation"].get<double>();
    // Finite temperature twisted stability operator on the same lattice.
    ExperimentConfig c = load_config(config_path("bands.toml"));
    const Configuration ref = build_reference(c.geometry);
    const SystemState s = solve_state(ref, zero_displacement(ref), c.models, {20.0, c.thermo.mu}, c.solver.scf);
    double sd20 = 0.0;
    for (int M : {4, 8, 16}) sd20 = std::max(sd20, BlochStability(ref, s.density.rho, c.models, s.fermi(), M).supercell_deviation());
    const bool ok = r["supercell_consistency"].size() == 3 && cons <= 1e-9 && gap > 0 && gd <= 1e-6 && sd <= 1e-6 &&
                    sd20 <= 1e-6;
    return {ok, "eigenvalues " + fmt(cons) + ", gap " + fmt(gap) + " (vs supercell " + fmt(gd) +
                    "), stability spectra " + fmt(sd) + " (beta=inf) " + fmt(sd20) + " (beta=20)"};
}

Outcome beta_limit() {
    const json r = run("beta_limit.toml");
    if (!r["failure"].is_null()) return {false, r["failure"].get<std::string>()};
    std::string d = "deviations";
    for (const auto& p : r["points"]) d += " " + fmt(p["deviation"].get<double>());
    const bool dec = r["strictly_decreasing"].get<bool>();
    const double slope = r["slope"].get<double>(), r2 = r["fit"]["r_squared"].get<double>();
    return {dec && slope > 0 && r2 >= 0.9,
            d + (dec ? " (strictly decreasing)" : " (not decreasing)") + ", slope " + fmt(slope) + ", R2 " + fmt(r2)};
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(TBLOC_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / ("tbloc-acceptance-" + std::to_string(::getpid()));
    fs::remove_all(root);
    int compared = 0, mismatched = 0, failed = 0;
    for (const fs::path& p : shipped_configs()) {
        const std::string stem = p.stem().string();
        const fs::path a = root / (stem + "-a"), b = root / (stem + "-b");
        // Different thread counts must not change the numbers either.
        const int ca = run_cli("--config " + p.string() + " --threads 1 --out " + a.string());
        const int cb = run_cli("--config " + p.string() + " --threads 4 --out " + b.string());
        if (ca != 0 || cb != 0) {
            ++failed;
            continue;
        }
        auto load = [](const fs::path& d) {
            std::ifstream in(d / "summary.json");
            json j = json::parse(in);
            j.erase("timestamp");
            j["config"].erase("output");
            j["config"].erase("threads");
            return j;
        };
        mismatched += load(a) != load(b);
        for (const auto& e : fs::directory_iterator(a))
            if (e.path().extension() == ".csv") mismatched += slurp(e.path()) != slurp(b / e.path().filename());
        ++compared;
    }
    fs::remove_all(root);
    return {compared > 0 && mismatched == 0 && failed == 0,
            std::to_string(compared) + " configs re-run, " + std::to_string(mismatched) + " mismatches, " +
                std::to_string(failed) + " failed runs"};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        double budget_s;
        std::function<Outcome()> check;
    };
    const std::vector<Criterion> criteria = {
        {1, "trace identity", 1, trace_identity},
        {2, "SCF fixed point", 5, scf_fixed_point},
        {3, "stability operator vs FD Jacobian", 10, stability_operator_fd},
        {4, "response, gradient, Hessian vs FD; sum rule", 120, response_fd},
        {5, "resolvent decay", 10, combes_thomas},
        {6, "locality of site derivatives", 300, locality},
        {7, "Woodbury update", 1, woodbury},
        {8, "point defect comparison", 600, defects},
        {9, "Bloch consistency", 60, bloch},
        {10, "beta -> inf limit of relaxed geometry", 900, beta_limit},
        {11, "determinism", 600, determinism},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = dt <= c.budget_s;
        const bool pass = o.pass && in_time;
        failures += !pass;
        std::printf("[%s] %2d %s: %s [%.2f s / %.0f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), dt,
                    c.budget_s, in_time ? "" : ", over budget");
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
