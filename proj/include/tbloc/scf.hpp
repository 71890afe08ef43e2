#pragma once

#include <Eigen/Dense>

#include <deque>
#include <optional>
#include <vector>

#include "tbloc/kernels.hpp"
#include "tbloc/model.hpp"
#include "tbloc/spectral.hpp"

namespace tbloc {

struct Thermo {
    double beta = kInf;
    double mu = 0.0;

    Observable fermi() const { return Observable::fermi_occupation(mu, beta); }
    Observable grand() const { return Observable::grand_potential(mu, beta); }
};

struct ScfParams {
    double mixing = 0.5;
    int anderson_depth = 5;
    double tol = 1e-10;
    int max_iter = 500;

    void validate() const {
        if (!(mixing > 0 && mixing <= 1)) throw InvalidArgument("mixing must lie in (0, 1]");
        if (anderson_depth < 0) throw InvalidArgument("anderson depth must be >= 0");
        if (!(tol > 0)) throw InvalidArgument("scf tolerance must be positive");
        if (max_iter < 1) throw InvalidArgument("max_iter must be >= 1");
    }
};

struct Density {
    Eigen::VectorXd rho;
    double residual = kInf;  // |rho - F(rho)|_inf
    int iterations = 0;
    bool converged = false;
    std::vector<double> trace;  // residual per iteration
    double min_gap = kInf;      // smallest gap at mu seen during the iteration (zero temperature)
};

inline void check_fermi(const Observable& obs) {
    if (obs.kind != Observable::Kind::Fermi) throw InvalidArgument("density map needs the Fermi observable");
    obs.validate();
}

// F(u; rho_in) together with the spectral data it came from.
struct DensityEvaluation {
    Eigen::VectorXd F;
    Hamiltonian H;
    SpectralCache spec;
    double gap = kInf;
};

inline DensityEvaluation evaluate_density(const Configuration& cfg, const Displacement& u, const Eigen::VectorXd& rho_in,
                                          const Models& models, const Observable& obs) {
    check_fermi(obs);
    Hamiltonian H = assemble(cfg, u, rho_in, models);
    SpectralCache spec = diagonalize(H);
    double gap = kInf;
    if (obs.zero_temperature()) {
        const GapInfo g = spectral_gap(spec.values, obs.mu);
        if (g.at_mu) throw GapError("eigenvalue within 1e-8 of mu at zero temperature", g.gap);
        gap = g.gap;
    }
    Eigen::VectorXd F = local_observables_spectral(spec, obs);
    return {std::move(F), std::move(H), std::move(spec), gap};
}

inline Density density_map(const Configuration& cfg, const Displacement& u, const Eigen::VectorXd& rho_in,
                           const Models& models, const Observable& obs) {
    DensityEvaluation e = evaluate_density(cfg, u, rho_in, models, obs);
    Density d;
    d.residual = (rho_in - e.F).cwiseAbs().maxCoeff();
    d.rho = std::move(e.F);
    d.iterations = 1;
    d.min_gap = e.gap;
    return d;
}

// Damped fixed-point iteration with Anderson acceleration. Returns the last
// input density, whose residual |rho - F(rho)|_inf is below tol.
inline Density scf_solve(const Configuration& cfg, const Displacement& u, const Eigen::VectorXd& rho0,
                         const Models& models, const Observable& obs, const ScfParams& p) {
    p.validate();
    check_fermi(obs);
    const int nb = models.hop.n_orbitals;
    check_density_range(rho0, cfg.size(), nb);
    Density out;
    if (models.onsite.sup_v1() == 0.0) {
        // F does not depend on rho.
        DensityEvaluation e = evaluate_density(cfg, u, rho0, models, obs);
        out.rho = e.F;
        out.residual = 0.0;
        out.iterations = 1;
        out.converged = true;
        out.trace = {0.0};
        out.min_gap = e.gap;
        return out;
    }
    Eigen::VectorXd x = rho0;
    Eigen::VectorXd x_prev, f_prev;
    std::deque<Eigen::VectorXd> dX, dF;
    double best = kInf;
    for (int it = 1; it <= p.max_iter; ++it) {
        DensityEvaluation e = evaluate_density(cfg, u, x, models, obs);
        out.min_gap = std::min(out.min_gap, e.gap);
        const Eigen::VectorXd f = e.F - x;
        const double res = f.cwiseAbs().maxCoeff();
        out.trace.push_back(res);
        if (res <= p.tol) {
            out.rho = x;
            out.residual = res;
            out.iterations = it;
            out.converged = true;
            return out;
        }
        if (res > 1e3 * best) {
            dX.clear();
            dF.clear();
        }
        best = std::min(best, res);
        Eigen::VectorXd next;
        if (p.anderson_depth > 0 && x_prev.size() > 0) {
            dX.push_back(x - x_prev);
            dF.push_back(f - f_prev);
            while (static_cast<int>(dX.size()) > p.anderson_depth) {
                dX.pop_front();
                dF.pop_front();
            }
            const int k = static_cast<int>(dX.size());
            Eigen::MatrixXd DX(x.size(), k), DF(x.size(), k);
            for (int j = 0; j < k; ++j) {
                DX.col(j) = dX[j];
                DF.col(j) = dF[j];
            }
            const Eigen::VectorXd gamma = DF.completeOrthogonalDecomposition().solve(f);
            next = x + p.mixing * f - (DX + p.mixing * DF) * gamma;
        } else {
            next = x + p.mixing * f;
        }
        x_prev = x;
        f_prev = f;
        x = next.cwiseMax(0.0).cwiseMin(static_cast<double>(nb));
    }
    throw ConvergenceError("self-consistency did not converge", out.trace.empty() ? kInf : out.trace.back(),
                           p.max_iter);
}

// A converged self-consistent state and the spectral data at the fixed point.
struct SystemState {
    Configuration cfg;
    Displacement u;
    Models models;
    Thermo thermo;
    Density density;
    Hamiltonian H;
    SpectralCache spec;

    Observable fermi() const { return thermo.fermi(); }
    int n_sites() const { return cfg.size(); }
    int dofs() const { return cfg.size() * cfg.dim(); }
};

inline SystemState solve_state(const Configuration& cfg, const Displacement& u, const Models& models,
                               const Thermo& thermo, const ScfParams& p,
                               const std::optional<Eigen::VectorXd>& rho0 = std::nullopt) {
    const int nb = models.hop.n_orbitals;
    Eigen::VectorXd start = rho0 ? *rho0 : Eigen::VectorXd::Constant(cfg.size(), 0.5 * nb);
    Density d = scf_solve(cfg, u, start, models, thermo.fermi(), p);
    Hamiltonian H = assemble(cfg, u, d.rho, models);
    SpectralCache spec = diagonalize(H);
    return {cfg, u, models, thermo, std::move(d), std::move(H), std::move(spec)};
}

struct StabilityOperator {
    Eigen::MatrixXd L;
    double margin = 0.0;             // smallest singular value of I - L
    double spectral_distance = 0.0;  // dist(1, spectrum of L)
};

inline double stability_margin(const Eigen::MatrixXd& L) {
    const Eigen::Index n = L.rows();
    const Eigen::MatrixXd A = Eigen::MatrixXd::Identity(n, n) - L;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
    const double s = svd.singularValues().minCoeff();
    return s < 1e-12 ? 0.0 : s;
}

inline double spectral_distance_from_one(const Eigen::MatrixXd& L) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(L, false);
    double d = kInf;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) d = std::min(d, std::abs(es.eigenvalues()[i] - 1.0));
    return d;
}

inline StabilityOperator make_stability_operator(const Eigen::MatrixXd& pair_kernel, const Eigen::VectorXd& rho,
                                                 const OnsiteModel& onsite) {
    const Eigen::Index n = rho.size();
    Eigen::VectorXd v1(n);
    for (Eigen::Index k = 0; k < n; ++k) v1[k] = onsite.v1(rho[k]);
    StabilityOperator S;
    S.L = pair_kernel * v1.asDiagonal();
    if (onsite.sup_v1() == 0.0) S.L.setZero();
    S.margin = stability_margin(S.L);
    S.spectral_distance = spectral_distance_from_one(S.L);
    return S;
}

// Stability operator by trapezoidal quadrature of squared resolvent entries on C_f.
inline StabilityOperator stability_operator(const Configuration& cfg, const Displacement& u, const Eigen::VectorXd& rho,
                                            const Models& models, const Observable& fermi_obs, const Contour& C_f) {
    check_fermi(fermi_obs);
    const Hamiltonian H = assemble(cfg, u, rho, models);
    const QuadratureKernels K(H, fermi_obs, C_f);
    return make_stability_operator(K.pair_kernel(), rho, models.onsite);
}

// Same operator with the contour integral evaluated exactly in the eigenbasis.
inline StabilityOperator stability_operator_spectral(const SpectralCache& spec, const Eigen::VectorXd& rho,
                                                     const OnsiteModel& onsite, const Observable& fermi_obs) {
    check_fermi(fermi_obs);
    const SpectralKernels K(spec, fermi_obs);
    return make_stability_operator(K.pair_kernel(), rho, onsite);
}

}  // namespace tbloc
