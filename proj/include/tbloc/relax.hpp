#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "tbloc/locality.hpp"
#include "tbloc/response.hpp"

namespace tbloc {

// Pair repulsion phi(r) = A exp(-gamma (r - r_on)), split evenly between the
// two sites of each pair. A = 0 disables it.
struct PairRepulsion {
    double A = 0.0;
    double gamma = 2.0;
    double r_on = 1.0;

    void validate() const {
        if (!(A >= 0)) throw InvalidArgument("repulsion prefactor must be non-negative");
        if (!(gamma > 0)) throw InvalidArgument("repulsion exponent must be positive");
    }
    bool active() const { return A > 0; }
    double cutoff() const { return r_on + std::log(std::max(A, 1e-300) / 1e-16) / gamma; }
    double phi(double r) const { return r > cutoff() ? 0.0 : A * std::exp(-gamma * (r - r_on)); }
    double dphi(double r) const { return -gamma * phi(r); }
    double ddphi(double r) const { return gamma * gamma * phi(r); }

    Eigen::VectorXd site_energies(const Configuration& cfg, const Displacement& u) const {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(cfg.size());
        if (!active()) return e;
        for_each_interaction(cfg, u, cutoff(), [&](int l, int k, const Vec3& r) {
            const double p = 0.5 * phi(r.norm());
            if (l == k) {
                e[l] += p;  // both signs of a self-image are visited
            } else {
                e[l] += p;
                e[k] += p;
            }
        });
        return e;
    }

    // Gradient of the total repulsion energy, dim x n.
    Displacement gradient(const Configuration& cfg, const Displacement& u) const {
        Displacement g = Displacement::Zero(3, cfg.size());
        if (!active()) return g;
        for_each_interaction(cfg, u, cutoff(), [&](int l, int k, const Vec3& r) {
            if (l == k) return;
            const double rn = r.norm();
            const Vec3 f = dphi(rn) / rn * r;
            g.col(l) += f;
            g.col(k) -= f;
        });
        return g;
    }

    // Hessian block d^2 E / du(m)_i du(n)_j.
    double hessian(const Configuration& cfg, const Displacement& u, int m, int i, int n, int j) const {
        if (!active()) return 0.0;
        double h = 0.0;
        for_each_interaction(cfg, u, cutoff(), [&](int l, int k, const Vec3& r) {
            if (l == k) return;
            const double rn = r.norm();
            const Vec3 e = r / rn;
            const double P = e[i] * e[j];
            const double kij = ddphi(rn) * P + dphi(rn) / rn * ((i == j ? 1.0 : 0.0) - P);
            const double sm = (m == l ? 1.0 : 0.0) - (m == k ? 1.0 : 0.0);
            const double sn = (n == l ? 1.0 : 0.0) - (n == k ? 1.0 : 0.0);
            h += sm * sn * kij;
        });
        return h;
    }
};

// Renormalised grand potential sum_l (G_l(u) - G_l(u0)) with
// G_l = grand-potential site energy + half the pair repulsion of site l.
class GrandPotential {
public:
    GrandPotential(StateBuilder builder, PairRepulsion rep, Displacement u0)
        : builder_(std::move(builder)), rep_(rep), u0_(std::move(u0)) {
        rep_.validate();
        base_state_ = builder_(u0_);
        base_sites_ = site_energies(*base_state_);
        guess_ = base_state_->density.rho;
    }

    const StateBuilder& builder() const { return builder_; }
    const PairRepulsion& repulsion() const { return rep_; }
    const Displacement& baseline() const { return u0_; }
    Observable observable() const { return builder_.thermo().grand(); }

    SystemState state(const Displacement& u) const {
        if (u.cols() == u0_.cols() && u == u0_) return *base_state_;
        SystemState s = builder_.solve(u, guess_);
        guess_ = s.density.rho;
        return s;
    }

    Eigen::VectorXd site_energies(const SystemState& s) const {
        return local_observables_spectral(s.spec, observable()) + rep_.site_energies(s.cfg, s.u);
    }

    double value(const Displacement& u) const { return value(state(u)); }

    double value(const SystemState& s) const {
        const Eigen::VectorXd d = site_energies(s) - base_sites_;
        double acc = 0.0;
        for (Eigen::Index l = 0; l < d.size(); ++l) acc += d[l];
        return acc;
    }

    // Full gradient (3 x n layout, unused components zero).
    Displacement gradient(const SystemState& s, int threads = 1) const {
        const ResponseEngine E = ResponseEngine::spectral(s, observable());
        const int n = s.n_sites(), dim = s.cfg.dim();
        std::vector<int> dofs(n * dim);
        for (int q = 0; q < n * dim; ++q) dofs[q] = q;
        const Eigen::VectorXd g = E.total_gradient(dofs, threads);
        Displacement out = rep_.gradient(s.cfg, s.u);
        for (int q = 0; q < n * dim; ++q) out(q % dim, q / dim) += g[q];
        for (int c = dim; c < 3; ++c) out.row(c).setZero();
        return out;
    }

    Displacement gradient(const Displacement& u, int threads = 1) const { return gradient(state(u), threads); }

    // Hessian restricted to the given dofs (site * dim + direction).
    Eigen::MatrixXd hessian(const SystemState& s, const std::vector<int>& dofs, int threads = 1) const {
        const ResponseEngine E = ResponseEngine::spectral(s, observable());
        const int dim = s.cfg.dim();
        const int k = static_cast<int>(dofs.size());
        Eigen::MatrixXd Hm(k, k);
        std::vector<std::pair<int, int>> pairs;
        for (int a = 0; a < k; ++a)
            for (int b = a; b < k; ++b) pairs.push_back({a, b});
        std::vector<double> vals(pairs.size());
        parallel_for(pairs.size(), threads, [&](std::size_t q) {
            const int m = dofs[pairs[q].first] / dim, i = dofs[pairs[q].first] % dim;
            const int n = dofs[pairs[q].second] / dim, j = dofs[pairs[q].second] % dim;
            vals[q] = E.site_hessians(m, i, n, j).sum() + rep_.hessian(s.cfg, s.u, m, i, n, j);
        });
        for (std::size_t q = 0; q < pairs.size(); ++q)
            Hm(pairs[q].first, pairs[q].second) = Hm(pairs[q].second, pairs[q].first) = vals[q];
        return Hm;
    }

    void set_guess(const Eigen::VectorXd& rho) const { guess_ = rho; }

private:
    StateBuilder builder_;
    PairRepulsion rep_;
    Displacement u0_;
    std::optional<SystemState> base_state_;
    Eigen::VectorXd base_sites_;
    mutable std::optional<Eigen::VectorXd> guess_;
};

struct RelaxOptions {
    double tol = 1e-8;        // sup-norm gradient tolerance
    int max_iter = 200;
    double m_min = 0.5;       // non-interpenetration floor for accepted steps
    double max_step = 0.1;    // largest displacement change per step (sup norm)
    int threads = 1;
};

struct RelaxResult {
    Displacement u;
    double grad_norm = kInf;
    double energy = 0.0;
    int iterations = 0;
    bool converged = false;
    double m = 0.0;
    std::vector<double> energies;    // per accepted iterate, starting with u_init
    std::vector<double> grad_norms;
    Eigen::VectorXd rho;
};

inline std::vector<int> free_dofs(const Configuration& cfg, const std::vector<int>& free_sites) {
    std::vector<int> dofs;
    for (int s : free_sites) {
        if (s < 0 || s >= cfg.size()) throw InvalidArgument("free site index out of range");
        for (int i = 0; i < cfg.dim(); ++i) dofs.push_back(s * cfg.dim() + i);
    }
    std::sort(dofs.begin(), dofs.end());
    dofs.erase(std::unique(dofs.begin(), dofs.end()), dofs.end());
    return dofs;
}

// Sites within `radius` of the defect centre.
inline std::vector<int> sites_near_defect(const Configuration& cfg, double radius) {
    std::vector<int> out;
    for (int i = 0; i < cfg.size(); ++i)
        if (distance_to_defect(cfg, i) <= radius + 1e-12) out.push_back(i);
    return out;
}

// BFGS on the free dofs with Armijo backtracking. Steps that violate the
// non-interpenetration floor are shortened. Once the energy change is at
// round-off level, a step is accepted if it does not raise the energy
// beyond that level and lowers the gradient.
inline RelaxResult relax_geometry(const GrandPotential& G, const Displacement& u_init, const std::vector<int>& free_sites,
                                  const RelaxOptions& opt = {}) {
    if (!(opt.tol > 0) || opt.max_iter < 0 || !(opt.m_min > 0)) throw InvalidArgument("invalid relaxation options");
    const Configuration& cfg = G.builder().cfg();
    const int dim = cfg.dim();
    const std::vector<int> dofs = free_dofs(cfg, free_sites);
    const int k = static_cast<int>(dofs.size());
    auto pack = [&](const Displacement& g) {
        Eigen::VectorXd v(k);
        for (int q = 0; q < k; ++q) v[q] = g(dofs[q] % dim, dofs[q] / dim);
        return v;
    };
    auto moved = [&](const Displacement& u, const Eigen::VectorXd& p, double t) {
        Displacement w = u;
        for (int q = 0; q < k; ++q) w(dofs[q] % dim, dofs[q] / dim) += t * p[q];
        return w;
    };
    auto sup = [](const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; };

    RelaxResult res;
    res.u = u_init;
    if (cfg.size() >= 2 && noninterpenetration_constant(cfg, u_init) < opt.m_min)
        throw RelaxationError("initial displacement violates the non-interpenetration floor");
    SystemState s = G.state(res.u);
    double E = G.value(s);
    Eigen::VectorXd g = pack(G.gradient(s, opt.threads));
    res.energies.push_back(E);
    res.grad_norms.push_back(sup(g));
    Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(k, k);
    bool scaled = false;
    const double noise = 1e-13;
    for (int it = 0; it < opt.max_iter && sup(g) > opt.tol; ++it) {
        Eigen::VectorXd p = -Hinv * g;
        if (p.dot(g) >= 0) {
            Hinv.setIdentity();
            p = -g;
        }
        const double pmax = sup(p);
        if (pmax > opt.max_step) p *= opt.max_step / pmax;
        double t = 1.0;
        bool accepted = false, any_valid = false;
        SystemState s_new = s;
        double E_new = E;
        Eigen::VectorXd g_new = g;
        for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
            const Displacement w = moved(res.u, p, t);
            if (cfg.size() >= 2 && noninterpenetration_constant(cfg, w) < opt.m_min) continue;
            any_valid = true;
            try {
                s_new = G.state(w);
            } catch (const GapError&) {
                continue;
            } catch (const ConvergenceError&) {
                continue;
            }
            E_new = G.value(s_new);
            const double slack = noise * (1.0 + std::abs(E));
            if (E_new <= E + 1e-4 * t * g.dot(p)) {
                accepted = true;
            } else if (E_new <= E + slack) {
                g_new = pack(G.gradient(s_new, opt.threads));
                accepted = sup(g_new) < sup(g);
                if (accepted) break;
                continue;
            }
            if (accepted) {
                g_new = pack(G.gradient(s_new, opt.threads));
                break;
            }
        }
        if (!any_valid) throw RelaxationError("every trial step violates the non-interpenetration floor");
        if (!accepted) break;
        const Eigen::VectorXd sv = t * p, yv = g_new - g;
        const double sy = sv.dot(yv);
        if (sy > 1e-14 * sv.norm() * yv.norm()) {
            if (!scaled) {
                Hinv *= sy / yv.squaredNorm();
                scaled = true;
            }
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(k, k);
            Hinv = (I - rho * sv * yv.transpose()) * Hinv * (I - rho * yv * sv.transpose()) + rho * sv * sv.transpose();
        }
        res.u = s_new.u;
        s = std::move(s_new);
        E = E_new;
        g = g_new;
        res.iterations = it + 1;
        res.energies.push_back(E);
        res.grad_norms.push_back(sup(g));
    }
    res.grad_norm = sup(g);
    res.energy = E;
    res.converged = res.grad_norm <= opt.tol;
    res.m = cfg.size() >= 2 ? noninterpenetration_constant(cfg, res.u) : kInf;
    res.rho = s.density.rho;
    return res;
}

// Smallest eigenvalue of the grand-potential Hessian on the free dofs.
inline double hessian_min_eigenvalue(const GrandPotential& G, const Displacement& u, const std::vector<int>& free_sites,
                                     int threads = 1) {
    const SystemState s = G.state(u);
    const Eigen::MatrixXd Hm = G.hessian(s, free_dofs(s.cfg, free_sites), threads);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Hm, Eigen::EigenvaluesOnly);
    return es.eigenvalues()[0];
}

struct BetaLimitPoint {
    double beta = 0.0;
    double deviation = 0.0;  // |D(u_beta - u_inf)| in the stencil seminorm
    double grad_norm = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct BetaLimitResult {
    RelaxResult zero_temperature;
    std::vector<BetaLimitPoint> points;
    std::optional<DecayFit> fit;  // deviation vs beta; eta_hat is the slope c
    bool strictly_decreasing = false;
    std::string failure;          // set when the experiment could not be fitted
};

// Relaxes at zero temperature, then at each beta warm-started from the
// zero-temperature minimiser, and fits the deviation against beta.
inline BetaLimitResult beta_limit_experiment(const StateBuilder& builder, const PairRepulsion& rep,
                                             const Displacement& u_init, const std::vector<int>& free_sites,
                                             const std::vector<double>& betas, const StencilWeights& w,
                                             const RelaxOptions& opt = {}) {
    if (betas.empty()) throw InvalidArgument("beta list is empty");
    for (std::size_t q = 0; q < betas.size(); ++q) {
        if (!(betas[q] > 0) || std::isinf(betas[q])) throw InvalidArgument("beta values must be finite and positive");
        if (q > 0 && !(betas[q] > betas[q - 1])) throw InvalidArgument("beta list must be ascending");
    }
    BetaLimitResult out;
    const Thermo t_inf{kInf, builder.thermo().mu};
    try {
        const GrandPotential G_inf(builder.with_thermo(t_inf), rep, u_init);
        out.zero_temperature = relax_geometry(G_inf, u_init, free_sites, opt);
    } catch (const GapError& e) {
        out.failure = std::string("zero-temperature relaxation failed: ") + e.what();
        return out;
    }
    if (!out.zero_temperature.converged) {
        out.failure = "zero-temperature relaxation did not converge";
        return out;
    }
    const Displacement& u_inf = out.zero_temperature.u;
    for (double beta : betas) {
        const GrandPotential G(builder.with_thermo({beta, t_inf.mu}).with_guess(out.zero_temperature.rho), rep, u_init);
        const RelaxResult r = relax_geometry(G, u_inf, free_sites, opt);
        BetaLimitPoint p;
        p.beta = beta;
        p.deviation = stencil_seminorm(builder.cfg(), r.u - u_inf, w);
        p.grad_norm = r.grad_norm;
        p.iterations = r.iterations;
        p.converged = r.converged;
        out.points.push_back(p);
    }
    out.strictly_decreasing = true;
    for (std::size_t q = 1; q < out.points.size(); ++q)
        out.strictly_decreasing = out.strictly_decreasing && out.points[q].deviation < out.points[q - 1].deviation;
    std::vector<DecaySample> samples;
    for (const auto& p : out.points) samples.push_back({p.beta, p.deviation});
    try {
        out.fit = fit_decay(samples, 0.0, 3);
    } catch (const FitError& e) {
        out.failure = std::string("deviation fit failed: ") + e.what();
    }
    return out;
}

}  // namespace tbloc
