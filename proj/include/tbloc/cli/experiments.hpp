#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "tbloc/bloch.hpp"
#include "tbloc/cli/config.hpp"
#include "tbloc/cli/report.hpp"
#include "tbloc/locality.hpp"
#include "tbloc/relax.hpp"

namespace tbloc::cli {

// Uniform double in [0, 1) from the top 53 bits; fixed across platforms.
inline double uniform01(std::mt19937_64& gen) { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

inline int uniform_index(std::mt19937_64& gen, int n) {
    return std::min(n - 1, static_cast<int>(uniform01(gen) * n));
}

// ---- geometry -------------------------------------------------------------

inline Configuration build_reference(const GeometryConfig& g, const std::vector<int>& repeats) {
    return build_multilattice(g.cell.transpose(), g.basis, g.species, repeats, g.periodic);
}

inline Configuration build_reference(const GeometryConfig& g) { return build_reference(g, g.repeats); }

// Applies the configured edits. Site indices (and "middle" = size / 2) refer
// to the reference numbering.
inline Configuration apply_defects(const Configuration& ref, const GeometryConfig& g) {
    if (g.defects.empty()) return ref;
    std::vector<Vec3> where;
    for (const auto& d : g.defects) {
        if (d.kind == "interstitial") {
            Vec3 x = Vec3::Zero();
            for (int c = 0; c < g.dim; ++c) x[c] = d.position[c];
            where.push_back(x);
        } else {
            const int site = d.middle ? ref.size() / 2 : *d.site;
            if (site < 0 || site >= ref.size())
                throw ConfigError("geometry.defect", "site index " + std::to_string(site) + " out of range");
            where.push_back(ref.site(site));
        }
    }
    Vec3 center = where[0];
    if (g.defect_center) {
        center.setZero();
        for (int c = 0; c < g.dim; ++c) center[c] = (*g.defect_center)[c];
    }
    double radius = 0.0;
    for (const Vec3& x : where) radius = std::max(radius, ref.reduce(x - center).norm());
    if (g.defect_radius) {
        if (*g.defect_radius + 1e-12 < radius)
            throw ConfigError("geometry.defect_radius", "an edit lies outside the declared defect radius");
        radius = *g.defect_radius;
    }
    Configuration cur = ref;
    for (std::size_t k = 0; k < g.defects.size(); ++k) {
        const auto& d = g.defects[k];
        DefectEdit e;
        if (d.kind == "interstitial") {
            e = DefectEdit::interstitial(where[k], d.species);
        } else {
            const int idx = cur.find_site(where[k]);
            if (idx < 0) throw ConfigError("geometry.defect", "edit " + std::to_string(k) + " targets a removed site");
            e = d.kind == "vacancy" ? DefectEdit::vacancy(idx) : DefectEdit::substitution(idx, d.species);
        }
        cur = apply_point_defect(cur, e, center, radius);
    }
    return cur;
}

// Seeded uniform displacement with components in [-amp, amp].
inline Displacement jitter_displacement(const Configuration& cfg, double amp, std::uint64_t seed) {
    Displacement u = zero_displacement(cfg);
    if (amp == 0.0) return u;
    std::mt19937_64 gen(seed);
    for (int i = 0; i < cfg.size(); ++i)
        for (int c = 0; c < cfg.dim(); ++c) u(c, i) = amp * (2.0 * uniform01(gen) - 1.0);
    return u;
}

inline Thermo thermo_of(const ExperimentConfig& c) { return {c.thermo.beta, c.thermo.mu}; }

inline ResponseEngine make_engine(const ExperimentConfig& c, const SystemState& s, const Observable& obs) {
    if (c.solver.route == "quadrature") return ResponseEngine::quadrature(s, obs, c.solver.n_quad, c.solver.margin);
    return ResponseEngine::spectral(s, obs);
}

inline json fit_json(const DecayFit& f) {
    return {{"eta_hat", number(f.eta_hat)},  {"r_squared", number(f.r_squared)}, {"log_prefactor", number(f.log_prefactor)},
            {"samples", f.samples},          {"r_min", number(f.r_min)},         {"r_max", number(f.r_max)},
            {"saturated", f.saturated}};
}

inline json state_json(const SystemState& s, const ExperimentConfig& c) {
    const GapInfo g = spectral_gap(s.spec.values, s.thermo.mu);
    json j;
    j["n_sites"] = s.n_sites();
    j["gap"] = number(g.gap);
    j["scf_iterations"] = s.density.iterations;
    j["scf_residual"] = number(s.density.residual);
    j["scf_min_gap"] = number(s.density.min_gap);
    // Fermi contour clearance; the zero-temperature contour needs a gap.
    try {
        const Contour C = build_contour(s.spec.values, s.fermi(), c.solver.n_quad, c.solver.margin);
        j["contour_clearance"] = number(C.clearance);
        j["contour_pole_clearance"] = number(C.pole_clearance);
    } catch (const Error&) {
        j["contour_clearance"] = nullptr;
    }
    const StabilityOperator S = stability_operator_spectral(s.spec, s.density.rho, s.models.onsite, s.fermi());
    j["stability_margin"] = number(S.margin);
    j["stability_spectral_distance"] = number(S.spectral_distance);
    return j;
}

// ---- locality -------------------------------------------------------------

inline void run_locality(const ExperimentConfig& c, Report& rep) {
    const Configuration cfg = apply_defects(build_reference(c.geometry), c.geometry);
    const Displacement u = jitter_displacement(cfg, c.geometry.jitter, c.seed);
    LocalityOptions opt;
    opt.use_envelope = c.locality.envelope;
    opt.threads = c.threads;
    if (c.locality.r_lo || c.locality.r_hi) {
        FitWindow w = default_window(cfg);
        if (c.locality.r_lo) w.r_lo = *c.locality.r_lo;
        if (c.locality.r_hi) w.r_hi = *c.locality.r_hi;
        w.drop_top = c.locality.drop_top;
        opt.window = w;
    } else {
        FitWindow w = default_window(cfg);
        w.drop_top = c.locality.drop_top;
        opt.window = w;
    }
    std::vector<double> betas = {c.thermo.beta};
    for (double b : c.locality.betas) betas.push_back(b);

    Table& fits = rep.table("locality_fits", {"beta", "gap", "eta_hat", "r_squared", "samples", "stability_margin"});
    json runs = json::array();
    std::optional<Eigen::VectorXd> guess;
    for (std::size_t q = 0; q < betas.size(); ++q) {
        const Thermo th{betas[q], c.thermo.mu};
        const SystemState s = solve_state(cfg, u, c.models, th, c.solver.scf, guess);
        guess = s.density.rho;
        const ResponseEngine E = make_engine(c, s, th.grand());
        const LocalityResult r = locality_experiment(E, c.locality.order, opt);
        json run = state_json(s, c);
        run["beta"] = number(betas[q]);
        run["window"] = {{"r_lo", number(r.window.r_lo)}, {"r_hi", number(r.window.r_hi)}, {"drop_top", r.window.drop_top}};
        run["fit"] = fit_json(r.fit);
        runs.push_back(run);
        fits.add({betas[q], run["gap"].is_number() ? run["gap"].get<double>() : kInf, r.fit.eta_hat, r.fit.r_squared,
                  r.fit.samples, E.stability().margin});
        if (q == 0) {
            Table& t = rep.table("locality", {"l", "m", "i", "j", "r", "value"});
            for (const auto& row : r.table) t.add({row.l, row.m, row.i, row.j, row.r, row.value});
            rep.results["order"] = r.order;
            rep.results["fit"] = run["fit"];
        }
        rep.results["runs"] = runs;
    }
    // Trend across the listed temperatures (gapless controls expect non-increasing rates).
    bool nonincreasing = true;
    for (std::size_t q = 1; q < runs.size(); ++q)
        nonincreasing = nonincreasing && runs[q]["fit"]["eta_hat"].get<double>() <=
                                             runs[q - 1]["fit"]["eta_hat"].get<double>() + 0.05;
    rep.results["eta_nonincreasing"] = nonincreasing;
}

// ---- Combes-Thomas ----------------------------------------------------------

inline void run_ct(const ExperimentConfig& c, Report& rep) {
    const Configuration cfg = apply_defects(build_reference(c.geometry), c.geometry);
    const Displacement u = jitter_displacement(cfg, c.geometry.jitter, c.seed);
    const SystemState s = solve_state(cfg, u, c.models, thermo_of(c), c.solver.scf);
    rep.results["state"] = state_json(s, c);
    const double x0 = c.ct.center.value_or(c.thermo.mu);
    json rows = json::array();
    Table& t = rep.table("ct", {"d", "l", "k", "r", "value", "bound"});
    for (double d : c.ct.distances) {
        const CtReport r = ct_check(cfg, u, s.H, cd(x0, d), d);
        rows.push_back({{"d", number(d)},
                        {"clearance", number(r.clearance)},
                        {"gamma", number(r.gamma)},
                        {"violations", r.violations},
                        {"fit", fit_json(r.fit)}});
        for (const auto& p : r.pairs) t.add({d, p.l, p.k, p.r, p.value, p.bound});
        rep.results["distances"] = rows;
    }
    bool monotone = true;
    for (std::size_t q = 1; q < rows.size(); ++q)
        monotone = monotone && rows[q]["fit"]["eta_hat"].get<double>() >= rows[q - 1]["fit"]["eta_hat"].get<double>();
    rep.results["eta_monotone_in_d"] = monotone;
}

// ---- defect comparison ------------------------------------------------------

inline std::vector<std::pair<double, double>> reference_bands(const ExperimentConfig& c, const SystemState& ref) {
    if (ref.cfg.periodic())
        return band_structure(ref.cfg, ref.density.rho, c.models, c.defect.band_grid, c.thermo.mu, c.threads)
            .intervals();
    return spectrum_intervals(ref.spec.values, c.thermo.mu);
}

inline void run_defect(const ExperimentConfig& c, Report& rep) {
    if (c.geometry.defects.empty()) throw ConfigError("geometry.defect", "defect-compare needs at least one edit");
    std::vector<std::vector<int>> sizes = c.defect.sizes;
    if (sizes.empty()) sizes.push_back(c.geometry.repeats);
    const Thermo th = thermo_of(c);
    Table& bins = rep.table("defect_bins", {"size", "bin", "d_lo", "d_hi", "pairs", "mean_deviation", "max_deviation",
                                            "mean_constant", "mean_constant_ref"});
    Table& dens = rep.table("defect_density", {"size", "distance", "abs_deviation"});
    json runs = json::array();
    for (const auto& reps : sizes) {
        if (static_cast<int>(reps.size()) != c.geometry.dim) throw ConfigError("defect.sizes", "one count per axis");
        const Configuration ref = build_reference(c.geometry, reps);
        const Configuration def = apply_defects(ref, c.geometry);
        const SystemState sr = solve_state(ref, zero_displacement(ref), c.models, th, c.solver.scf);
        const SystemState sd = solve_state(def, zero_displacement(def), c.models, th, c.solver.scf);
        const ResponseEngine Er = make_engine(c, sr, th.grand());
        const ResponseEngine Ed = make_engine(c, sd, th.grand());
        DefectOptions o;
        o.n_bins = c.defect.bins;
        o.gap_delta = c.defect.gap_delta;
        o.pair_r_max = c.defect.pair_r_max;
        if (c.defect.density_floor) o.density_floor = *c.defect.density_floor;
        o.bands = reference_bands(c, sr);
        o.threads = c.threads;
        const DefectComparison dc = defect_comparison(Ed, Er, o);
        json run;
        run["repeats"] = reps;
        run["n_sites_reference"] = ref.size();
        run["n_sites_defect"] = def.size();
        run["reference"] = state_json(sr, c);
        run["defect"] = state_json(sd, c);
        run["eta_ref"] = number(dc.eta_ref);
        run["in_gap_count"] = dc.in_gap_count;
        run["in_gap_values"] = numbers(dc.in_gap_values);
        json jb = json::array();
        for (std::size_t b = 0; b < dc.bins.size(); ++b) {
            const auto& x = dc.bins[b];
            jb.push_back({{"d_lo", number(x.d_lo)},
                          {"d_hi", number(x.d_hi)},
                          {"pairs", x.pairs},
                          {"mean_deviation", number(x.mean_deviation)},
                          {"max_deviation", number(x.max_deviation)},
                          {"mean_constant", number(x.mean_constant)},
                          {"mean_constant_ref", number(x.mean_constant_ref)}});
            bins.add({def.size(), static_cast<int>(b), x.d_lo, x.d_hi, x.pairs, x.mean_deviation, x.max_deviation,
                      x.mean_constant, x.mean_constant_ref});
        }
        run["bins"] = jb;
        run["deviation_fit"] = dc.deviation_fit ? fit_json(*dc.deviation_fit) : json(nullptr);
        run["density_l2"] = number(dc.density_l2);
        run["density_fit"] = dc.density_fit ? fit_json(*dc.density_fit) : json(nullptr);
        run["perturbed_entries"] = dc.perturbed_entries;
        run["perturbation_reach"] = number(dc.perturbation_reach);
        for (const auto& p : dc.density_profile) dens.add({def.size(), p.r, p.value});
        runs.push_back(run);
        rep.results["sizes"] = runs;
    }
    bool stable = true;
    for (const auto& r : runs) stable = stable && r["in_gap_count"] == runs[0]["in_gap_count"];
    rep.results["in_gap_count_stable"] = stable;
}

// ---- bands ---------------------------------------------------------------

inline void run_bands(const ExperimentConfig& c, Report& rep) {
    if (!c.geometry.periodic) throw ConfigError("geometry.periodic", "the bands experiment needs a periodic lattice");
    if (!c.geometry.defects.empty()) throw ConfigError("geometry.defect", "the bands experiment needs a perfect lattice");
    const Configuration ref = build_reference(c.geometry);
    const SystemState s = solve_state(ref, zero_displacement(ref), c.models, thermo_of(c), c.solver.scf);
    rep.results["state"] = state_json(s, c);
    const BandStructure bs = band_structure(ref, s.density.rho, c.models, c.bands.grid, c.thermo.mu, c.threads);
    const GapInfo sg = spectral_gap(s.spec.values, c.thermo.mu);
    rep.results["band_gap"] = number(bs.gap);
    rep.results["valence_top"] = number(bs.valence_top);
    rep.results["conduction_bottom"] = number(bs.conduction_bottom);
    rep.results["supercell_gap"] = number(sg.gap);
    rep.results["gap_difference"] = number(std::isinf(sg.gap) ? kInf : std::abs(bs.gap - sg.gap));

    std::vector<std::string> header;
    for (int d = 0; d < ref.dim(); ++d) header.push_back("xi" + std::to_string(d));
    for (Eigen::Index b = 0; b < bs.bands.cols(); ++b) header.push_back("band" + std::to_string(b));
    Table& t = rep.table("bands", header);
    for (std::size_t q = 0; q < bs.xi.size(); ++q) {
        std::vector<std::string> row;
        for (int d = 0; d < ref.dim(); ++d) row.push_back(format_number(bs.xi[q][d]));
        for (Eigen::Index b = 0; b < bs.bands.cols(); ++b) row.push_back(format_number(bs.bands(q, b)));
        t.rows.push_back(row);
    }
    Table& ct = rep.table("supercell_consistency", {"M", "max_deviation"});
    json cons = json::array();
    std::vector<double> devs(c.bands.supercells.size());
    parallel_for(devs.size(), c.threads, [&](std::size_t q) {
        devs[q] = supercell_consistency(ref, s.density.rho, c.models, c.bands.supercells[q]);
    });
    for (std::size_t q = 0; q < devs.size(); ++q) {
        cons.push_back({{"M", c.bands.supercells[q]}, {"max_deviation", number(devs[q])}});
        ct.add({c.bands.supercells[q], devs[q]});
    }
    rep.results["supercell_consistency"] = cons;

    const BlochStability B(ref, s.density.rho, c.models, s.fermi(), c.bands.stability_supercell);
    rep.results["stability"] = {
        {"supercell", c.bands.stability_supercell},
        {"spectrum_deviation", number(B.supercell_deviation())},
        {"bloch_margin", number(B.margin(brillouin_grid(ref.lattice()->A, c.bands.grid)))},
        {"supercell_margin", number(B.supercell_operator().margin)}};
}

// ---- relaxation -----------------------------------------------------------

inline std::vector<int> free_sites_of(const ExperimentConfig& c, const Configuration& cfg) {
    if (std::isinf(c.relax.free_radius)) {
        std::vector<int> all(cfg.size());
        for (int i = 0; i < cfg.size(); ++i) all[i] = i;
        return all;
    }
    const auto s = sites_near_defect(cfg, c.relax.free_radius);
    if (s.empty()) throw ConfigError("relax.free_radius", "no sites lie within the free radius");
    return s;
}

inline RelaxOptions relax_options(const ExperimentConfig& c) {
    RelaxOptions o;
    o.tol = c.relax.tol;
    o.max_iter = c.relax.max_iter;
    o.m_min = c.relax.m_min;
    o.max_step = c.relax.max_step;
    o.threads = c.threads;
    return o;
}

inline json relax_json(const RelaxResult& r) {
    return {{"converged", r.converged}, {"iterations", r.iterations}, {"grad_norm", number(r.grad_norm)},
            {"energy", number(r.energy)}, {"noninterpenetration", number(r.m)}};
}

// Hessians beyond this many free dofs are skipped in reports.
inline constexpr int kMaxHessianDofs = 60;

inline void run_relax(const ExperimentConfig& c, Report& rep) {
    const Configuration cfg = apply_defects(build_reference(c.geometry), c.geometry);
    const Displacement u_init = jitter_displacement(cfg, c.geometry.jitter, c.seed);
    const StateBuilder builder(cfg, c.models, thermo_of(c), c.solver.scf);
    const GrandPotential G(builder, c.repulsion, zero_displacement(cfg));
    const std::vector<int> free = free_sites_of(c, cfg);
    const RelaxResult r = relax_geometry(G, u_init, free, relax_options(c));
    json j = relax_json(r);
    j["free_sites"] = free;
    const int nd = static_cast<int>(free.size()) * cfg.dim();
    j["hessian_min_eigenvalue"] =
        nd <= kMaxHessianDofs ? number(hessian_min_eigenvalue(G, r.u, free, c.threads)) : json(nullptr);
    j["seminorm"] = number(stencil_seminorm(cfg, r.u, StencilWeights::with_default_cutoff(c.relax.upsilon)));
    rep.results["relax"] = j;
    Table& tr = rep.table("relax_trajectory", {"iteration", "energy", "grad_norm"});
    for (std::size_t q = 0; q < r.energies.size(); ++q) tr.add({static_cast<int>(q), r.energies[q], r.grad_norms[q]});
    std::vector<std::string> header = {"site"};
    for (int d = 0; d < cfg.dim(); ++d) header.push_back("x" + std::to_string(d));
    for (int d = 0; d < cfg.dim(); ++d) header.push_back("u" + std::to_string(d));
    Table& td = rep.table("relax_displacement", header);
    for (int i = 0; i < cfg.size(); ++i) {
        std::vector<std::string> row = {std::to_string(i)};
        for (int d = 0; d < cfg.dim(); ++d) row.push_back(format_number(cfg.site(i)[d]));
        for (int d = 0; d < cfg.dim(); ++d) row.push_back(format_number(r.u(d, i)));
        td.rows.push_back(row);
    }
    if (!r.converged) throw ConvergenceError("relaxation did not reach the gradient tolerance", r.grad_norm, r.iterations);
}

inline void run_beta_limit(const ExperimentConfig& c, Report& rep) {
    const Configuration cfg = apply_defects(build_reference(c.geometry), c.geometry);
    const Displacement u_init = jitter_displacement(cfg, c.geometry.jitter, c.seed);
    const StateBuilder builder(cfg, c.models, thermo_of(c), c.solver.scf);
    const std::vector<int> free = free_sites_of(c, cfg);
    const BetaLimitResult r = beta_limit_experiment(builder, c.repulsion, u_init, free, c.beta_limit.betas,
                                                    StencilWeights::with_default_cutoff(c.relax.upsilon),
                                                    relax_options(c));
    rep.results["zero_temperature"] = relax_json(r.zero_temperature);
    rep.results["free_sites"] = free;
    json pts = json::array();
    Table& t = rep.table("beta_limit", {"beta", "deviation", "grad_norm", "iterations", "converged"});
    for (const auto& p : r.points) {
        pts.push_back({{"beta", number(p.beta)},
                       {"deviation", number(p.deviation)},
                       {"grad_norm", number(p.grad_norm)},
                       {"iterations", p.iterations},
                       {"converged", p.converged}});
        t.add({p.beta, p.deviation, p.grad_norm, p.iterations, p.converged});
    }
    rep.results["points"] = pts;
    rep.results["strictly_decreasing"] = r.strictly_decreasing;
    rep.results["fit"] = r.fit ? fit_json(*r.fit) : json(nullptr);
    rep.results["slope"] = r.fit ? number(r.fit->eta_hat) : json(nullptr);
    rep.results["failure"] = r.failure.empty() ? json(nullptr) : json(r.failure);
    if (r.failure.empty() && static_cast<int>(free.size()) * cfg.dim() <= kMaxHessianDofs) {
        const GrandPotential G(builder.with_thermo({kInf, c.thermo.mu}), c.repulsion, zero_displacement(cfg));
        rep.results["hessian_min_eigenvalue"] = number(hessian_min_eigenvalue(G, r.zero_temperature.u, free, c.threads));
    }
}

// ---- selfcheck ------------------------------------------------------------

struct CheckResult {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

// |a - b|_inf / |b|_inf (absolute when b vanishes).
inline double relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const double scale = b.cwiseAbs().maxCoeff();
    const double err = (a - b).cwiseAbs().maxCoeff();
    return scale > 0 ? err / scale : err;
}

// Sum of site observables against the sum of o(lambda) over the spectrum.
inline double trace_identity_spectral(const SystemState& s, const Observable& obs) {
    const Eigen::VectorXd O = local_observables_spectral(s.spec, obs);
    double lhs = 0.0, rhs = 0.0;
    for (Eigen::Index l = 0; l < O.size(); ++l) lhs += O[l];
    for (Eigen::Index t = 0; t < s.spec.values.size(); ++t) rhs += obs.value(s.spec.values[t]);
    return std::abs(lhs - rhs);
}

inline double trace_identity_contour(const SystemState& s, const Observable& obs, int n_quad, double margin) {
    const Contour C = build_contour(s.spec.values, obs, n_quad, margin);
    const Eigen::VectorXd O = local_observables_contour(s.H, obs, C);
    double lhs = 0.0, rhs = 0.0;
    for (Eigen::Index l = 0; l < O.size(); ++l) lhs += O[l];
    for (Eigen::Index t = 0; t < s.spec.values.size(); ++t) rhs += obs.value(s.spec.values[t]);
    return std::abs(lhs - rhs);
}

// Stability operator against the central-difference Jacobian of rho -> F(u; rho).
inline double stability_fd_error(const SystemState& s, double h = 1e-5) {
    const StabilityOperator S = stability_operator_spectral(s.spec, s.density.rho, s.models.onsite, s.fermi());
    const int n = s.n_sites();
    Eigen::MatrixXd J(n, n);
    for (int k = 0; k < n; ++k) {
        Eigen::VectorXd rp = s.density.rho, rm = s.density.rho;
        rp[k] += h;
        rm[k] -= h;
        J.col(k) = (evaluate_density(s.cfg, s.u, rp, s.models, s.fermi()).F -
                    evaluate_density(s.cfg, s.u, rm, s.models, s.fermi()).F) /
                   (2.0 * h);
    }
    // Column-wise comparison, each relative to the largest column entry.
    double err = 0.0;
    for (int k = 0; k < n; ++k) err = std::max(err, relative_error(S.L.col(k), J.col(k)));
    return err;
}

// Composed rank-1 updates of a seeded 8 x 8 matrix against dense inversion.
inline double woodbury_error(std::mt19937_64& gen, int n = 8, int updates = 3) {
    auto rnd = [&](int r, int c) {
        Eigen::MatrixXd M(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) M(i, j) = 2.0 * uniform01(gen) - 1.0;
        return M;
    };
    Eigen::MatrixXd A = rnd(n, n) + n * Eigen::MatrixXd::Identity(n, n);
    auto action = dense_inverse_action(A);
    double err = 0.0;
    for (int k = 0; k < updates; ++k) {
        const Eigen::MatrixXd U = rnd(n, 1), V = rnd(n, 1);
        const WoodburyInverse<double> W(action, U, V);
        action = W.action();
        A += U * V.transpose();
        const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
        err = std::max(err, relative_error(action(I), A.inverse()));
    }
    // Dense rank-2 update through its SVD factors.
    const Eigen::MatrixXd P = rnd(n, 2) * rnd(2, n);
    const auto W2 = WoodburyInverse<double>::from_dense(action, P);
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
    err = std::max(err, relative_error(W2.apply(I), (A + P).inverse()));
    return err;
}

struct ResponseChecks {
    double density_response = 0.0;
    double gradient = 0.0;
    double hessian = 0.0;
    double sum_rule = 0.0;  // |sum_m dO_l/du(m)| relative to max |dO_l/du(m)|
};

// Analytic responses against finite differences of re-solved states at a
// few seeded degrees of freedom.
inline ResponseChecks response_fd_errors(const StateBuilder& builder, const Displacement& u, const Observable& obs,
                                         std::mt19937_64& gen, int probes = 2, double h = 1e-4, int threads = 1) {
    const SystemState s = builder(u);
    const ResponseEngine E = ResponseEngine::spectral(s, obs);
    const int n = s.n_sites(), dim = s.cfg.dim();
    const StateBuilder warm = builder.with_guess(s.density.rho);
    std::function<Eigen::VectorXd(const Displacement&)> rho = [&](const Displacement& v) {
        return Eigen::VectorXd(warm(v).density.rho);
    };
    std::function<Eigen::VectorXd(const Displacement&)> site = [&](const Displacement& v) {
        return Eigen::VectorXd(local_observables_spectral(warm(v).spec, obs));
    };
    ResponseChecks out;
    for (int p = 0; p < probes; ++p) {
        const Dof a{uniform_index(gen, n), uniform_index(gen, dim)};
        const Dof b{uniform_index(gen, n), uniform_index(gen, dim)};
        out.density_response = std::max(
            out.density_response, relative_error(E.density_response(a.site, a.dir), fd_oracle(rho, u, {a}, h, true)));
        out.gradient =
            std::max(out.gradient, relative_error(E.site_gradients(a.site, a.dir), fd_oracle(site, u, {a}, h, true)));
        std::function<Eigen::VectorXd(const Displacement&)> grad = [&](const Displacement& v) {
            return Eigen::VectorXd(ResponseEngine::spectral(warm(v), obs).site_gradients(b.site, b.dir));
        };
        out.hessian = std::max(out.hessian, relative_error(E.site_hessians(a.site, a.dir, b.site, b.dir),
                                                           fd_oracle(grad, u, {a}, h, true)));
    }
    const auto table = E.gradient_table(threads);
    for (int i = 0; i < dim; ++i) {
        const double scale = std::max(table[i].cwiseAbs().maxCoeff(), 1e-300);
        out.sum_rule = std::max(out.sum_rule, table[i].rowwise().sum().cwiseAbs().maxCoeff() / scale);
    }
    return out;
}

inline std::vector<CheckResult> selfcheck_suite(const ExperimentConfig& c) {
    std::mt19937_64 gen(c.seed);
    const Configuration cfg = apply_defects(build_reference(c.geometry), c.geometry);
    const Displacement u = jitter_displacement(cfg, c.geometry.jitter, gen());
    ScfParams tight = c.solver.scf;
    tight.tol = std::min(tight.tol, 1e-13);
    const Thermo th = thermo_of(c);
    const StateBuilder builder(cfg, c.models, th, tight);
    const SystemState s = builder(u);
    std::vector<CheckResult> out;
    auto add = [&](std::string name, double v, double tol) { out.push_back({std::move(name), v, tol, v <= tol}); };

    add("scf_residual", s.density.residual, c.solver.scf.tol);
    for (const auto& [name, obs] : {std::pair<std::string, Observable>{"fermi", th.fermi()}, {"grand", th.grand()}}) {
        add("trace_identity_spectral_" + name, trace_identity_spectral(s, obs), 1e-12);
        add("trace_identity_contour_" + name, trace_identity_contour(s, obs, 64, c.solver.margin), 1e-8);
        const Contour C = build_converged_contour(s.spec.values, obs, c.solver.n_quad, c.solver.margin);
        add("contour_vs_spectral_" + name,
            relative_error(local_observables_contour(s.H, obs, C), local_observables_spectral(s.spec, obs)), 1e-10);
    }
    {
        const Contour Cf = build_converged_contour(s.spec.values, th.fermi(), c.solver.n_quad, c.solver.margin);
        const auto Lq = stability_operator(s.cfg, s.u, s.density.rho, s.models, th.fermi(), Cf).L;
        const auto Ls = stability_operator_spectral(s.spec, s.density.rho, s.models.onsite, th.fermi()).L;
        add("stability_contour_vs_spectral", (Lq - Ls).cwiseAbs().maxCoeff(), 1e-10);
    }
    add("stability_operator_fd", stability_fd_error(s), 1e-6);
    add("woodbury", woodbury_error(gen), 1e-10);
    const ResponseChecks r = response_fd_errors(builder, u, th.grand(), gen, 2, 1e-4, c.threads);
    add("density_response_fd", r.density_response, 1e-5);
    add("site_gradient_fd", r.gradient, 1e-5);
    add("site_hessian_fd", r.hessian, 1e-4);
    add("force_sum_rule", r.sum_rule, 1e-8);
    return out;
}

inline void run_selfcheck(const ExperimentConfig& c, Report& rep) {
    const auto checks = selfcheck_suite(c);
    Table& t = rep.table("selfcheck", {"check", "value", "tolerance", "passed"});
    json arr = json::array();
    bool all = true;
    for (const auto& k : checks) {
        arr.push_back({{"name", k.name}, {"value", number(k.value)}, {"tolerance", number(k.tolerance)}, {"passed", k.passed}});
        t.add({k.name, k.value, k.tolerance, k.passed});
        all = all && k.passed;
    }
    rep.results["checks"] = arr;
    rep.results["all_passed"] = all;
    rep.checks_passed = all;
}

// ---- dispatch -------------------------------------------------------------

// Fills `rep` as it goes, so a failure leaves the results gathered so far.
inline void run_experiment(const ExperimentConfig& c, Report& rep) {
    rep.results["experiment"] = c.experiment;
    if (c.experiment == "locality") run_locality(c, rep);
    else if (c.experiment == "ct") run_ct(c, rep);
    else if (c.experiment == "defect-compare") run_defect(c, rep);
    else if (c.experiment == "bands") run_bands(c, rep);
    else if (c.experiment == "relax") run_relax(c, rep);
    else if (c.experiment == "beta-limit") run_beta_limit(c, rep);
    else if (c.experiment == "selfcheck") run_selfcheck(c, rep);
    else throw ConfigError("experiment", "unknown experiment '" + c.experiment + "'");
}

}  // namespace tbloc::cli
