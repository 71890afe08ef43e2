#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <string>

#include "tbloc/errors.hpp"
#include "tbloc/lattice.hpp"

namespace tbloc {

// Isotropic exponential hopping h(xi) = -h0 exp(-gamma0 (|xi| - r_on)), cut
// off where its magnitude drops below 1e-12. With two orbitals and a nonzero
// mixing the orbital block is h(xi) * [[1, t], [t, 1]].
struct HoppingModel {
    double h0 = 1.0;
    double gamma0 = 1.0;
    double r_on = 1.0;
    int n_orbitals = 1;
    double orbital_mixing = 0.0;
    double r_cut = 0.0;  // 0 selects the automatic cutoff

    void validate() const {
        if (!(h0 > 0)) throw InvalidArgument("h0 must be positive");
        if (!(gamma0 > 0)) throw InvalidArgument("gamma0 must be positive");
        if (!std::isfinite(r_on)) throw InvalidArgument("r_on must be finite");
        if (n_orbitals < 1) throw InvalidArgument("n_orbitals must be >= 1");
        if (std::abs(orbital_mixing) > 1.0) throw InvalidArgument("orbital mixing must lie in [-1, 1]");
        if (r_cut < 0) throw InvalidArgument("r_cut must be non-negative");
    }

    double cutoff() const {
        if (r_cut > 0) return r_cut;
        return r_on + std::log(h0 / 1e-12) / gamma0;
    }

    double radial(double r) const {
        if (r > cutoff()) return 0.0;
        return -h0 * std::exp(-gamma0 * (r - r_on));
    }

    double coupling(int a, int b) const { return a == b ? 1.0 : orbital_mixing; }

    // Gradient of the radial hopping with respect to the separation vector.
    Vec3 gradient(const Vec3& xi) const {
        const double r = xi.norm();
        if (r == 0.0 || r > cutoff()) return Vec3::Zero();
        return -gamma0 * radial(r) / r * xi;
    }

    Eigen::Matrix3d hessian(const Vec3& xi) const {
        const double r = xi.norm();
        if (r == 0.0 || r > cutoff()) return Eigen::Matrix3d::Zero();
        const double h = radial(r);
        const Vec3 e = xi / r;
        const Eigen::Matrix3d P = e * e.transpose();
        return gamma0 * gamma0 * h * P - gamma0 * h / r * (Eigen::Matrix3d::Identity() - P);
    }
};

// On-site term v(rho) plus a per-species constant shift.
struct OnsiteModel {
    enum class Kind { Constant, Saturating };
    Kind kind = Kind::Constant;
    double c = 0.0;
    double U = 0.0;
    double rho0 = 0.0;
    std::map<std::string, double> species_shift;

    void validate() const {
        if (!std::isfinite(c) || !std::isfinite(U) || !std::isfinite(rho0))
            throw InvalidArgument("on-site parameters must be finite");
        for (const auto& [k, s] : species_shift)
            if (!std::isfinite(s)) throw InvalidArgument("species shift for '" + k + "' is not finite");
    }

    double shift(const std::string& species) const {
        auto it = species_shift.find(species);
        return it == species_shift.end() ? 0.0 : it->second;
    }

    double v(double rho) const { return kind == Kind::Constant ? c : U * std::tanh(rho - rho0); }

    double v1(double rho) const {
        if (kind == Kind::Constant) return 0.0;
        const double s = 1.0 / std::cosh(rho - rho0);
        return U * s * s;
    }

    double v2(double rho) const {
        if (kind == Kind::Constant) return 0.0;
        const double s = 1.0 / std::cosh(rho - rho0);
        return -2.0 * U * std::tanh(rho - rho0) * s * s;
    }

    double sup_v() const {
        double m = 0.0;
        for (const auto& [k, s] : species_shift) m = std::max(m, std::abs(s));
        return (kind == Kind::Constant ? std::abs(c) : std::abs(U)) + m;
    }
    double sup_v1() const { return kind == Kind::Constant ? 0.0 : std::abs(U); }
    double sup_v2() const { return kind == Kind::Constant ? 0.0 : std::abs(U) * 4.0 / (3.0 * std::sqrt(3.0)); }
};

struct Models {
    HoppingModel hop;
    OnsiteModel onsite;
};

struct Hamiltonian {
    Eigen::MatrixXd matrix;
    int n_sites = 0;
    int n_orb = 1;

    int index(int site, int orb) const { return site * n_orb + orb; }
    int dimension() const { return n_sites * n_orb; }
};

// Visits every interacting (l, k, image) with l <= k, skipping the zero image
// for l == k. The separation passed is x_l + u_l - x_k - u_k + shift.
template <class F>
void for_each_interaction(const Configuration& cfg, const Displacement& u, double cutoff, F&& visit) {
    const int n = cfg.size();
    double umax = 0.0;
    for (int i = 0; i < n; ++i) umax = std::max(umax, u.col(i).norm());
    std::vector<Vec3> shifts = {Vec3::Zero()};
    if (cfg.periodic()) {
        const double reach = cutoff + cfg.lattice()->supercell().colwise().norm().sum() + 2.0 * umax;
        shifts = cfg.image_shifts(reach);
    }
    for (int l = 0; l < n; ++l) {
        for (int k = l; k < n; ++k) {
            const Vec3 base = displaced_separation(cfg, u, l, k);
            for (const Vec3& s : shifts) {
                if (l == k && s.squaredNorm() == 0.0) continue;
                const Vec3 r = base + s;
                const double rn = r.norm();
                if (rn > cutoff) continue;
                if (rn < 1e-14) throw GeometryError("displaced sites coincide");
                visit(l, k, r);
            }
        }
    }
}

inline void check_density_range(const Eigen::VectorXd& rho, int n_sites, int n_orb) {
    if (rho.size() != n_sites) throw InvalidArgument("density length does not match site count");
    for (Eigen::Index i = 0; i < rho.size(); ++i)
        if (!(rho[i] >= -1e-12 && rho[i] <= n_orb + 1e-12))
            throw InvalidArgument("density out of range [0, N_b] at site " + std::to_string(i));
}

// Linear (geometry-dependent) part of the Hamiltonian.
inline Eigen::MatrixXd assemble_linear(const Configuration& cfg, const Displacement& u, const HoppingModel& hop) {
    hop.validate();
    check_displacement(cfg, u);
    const int nb = hop.n_orbitals;
    const int N = cfg.size() * nb;
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(N, N);
    for_each_interaction(cfg, u, hop.cutoff(), [&](int l, int k, const Vec3& r) {
        const double h = hop.radial(r.norm());
        for (int a = 0; a < nb; ++a)
            for (int b = 0; b < nb; ++b) H(l * nb + a, k * nb + b) += h * hop.coupling(a, b);
    });
    // Only l <= k was visited; mirror the strict upper part.
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < i; ++j) H(i, j) = H(j, i);
    // Self-image blocks were accumulated once per shift (both signs), already symmetric.
    return H;
}

inline Hamiltonian assemble(const Configuration& cfg, const Displacement& u, const Eigen::VectorXd& rho,
                            const Models& models) {
    models.onsite.validate();
    const int nb = models.hop.n_orbitals;
    check_density_range(rho, cfg.size(), nb);
    Hamiltonian H{assemble_linear(cfg, u, models.hop), cfg.size(), nb};
    for (int l = 0; l < cfg.size(); ++l) {
        const double v = models.onsite.v(rho[l]) + models.onsite.shift(cfg.species(l));
        for (int a = 0; a < nb; ++a) H.matrix(l * nb + a, l * nb + a) += v;
    }
    return H;
}

// Column block G (N x N_b) with dH^L/du(m)_i = E_m G^T + G E_m^T, where E_m
// selects the orbitals of site m. The block of G at site m is zero.
inline Eigen::MatrixXd hopping_derivative_column(const Configuration& cfg, const Displacement& u,
                                                 const HoppingModel& hop, int m, int i) {
    const int n = cfg.size();
    if (m < 0 || m >= n) throw InvalidArgument("site index out of range");
    if (i < 0 || i >= cfg.dim()) throw InvalidArgument("direction index out of range");
    const int nb = hop.n_orbitals;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n * nb, nb);
    const double rc = hop.cutoff();
    std::vector<Vec3> shifts = {Vec3::Zero()};
    if (cfg.periodic()) {
        double umax = 0.0;
        for (int j = 0; j < n; ++j) umax = std::max(umax, u.col(j).norm());
        shifts = cfg.image_shifts(rc + cfg.lattice()->supercell().colwise().norm().sum() + 2.0 * umax);
    }
    for (int k = 0; k < n; ++k) {
        if (k == m) continue;
        const Vec3 base = displaced_separation(cfg, u, m, k);
        double g = 0.0;
        for (const Vec3& s : shifts) {
            const Vec3 r = base + s;
            if (r.norm() > rc) continue;
            g += hop.gradient(r)[i];
        }
        for (int a = 0; a < nb; ++a)
            for (int b = 0; b < nb; ++b) G(k * nb + a, b) = g * hop.coupling(a, b);
    }
    return G;
}

// dH^L/du(m)_i as a dense matrix (linear part only).
inline Eigen::MatrixXd hamiltonian_derivative(const Configuration& cfg, const Displacement& u,
                                              const HoppingModel& hop, int m, int i) {
    hop.validate();
    check_displacement(cfg, u);
    const int nb = hop.n_orbitals;
    const int N = cfg.size() * nb;
    const Eigen::MatrixXd G = hopping_derivative_column(cfg, u, hop, m, i);
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(N, N);
    D.middleCols(m * nb, nb) += G;
    D.middleRows(m * nb, nb) += G.transpose();
    return D;
}

// d^2 H^L / du(m)_i du(n)_j as a dense matrix.
inline Eigen::MatrixXd hamiltonian_second_derivative(const Configuration& cfg, const Displacement& u,
                                                     const HoppingModel& hop, int m, int i, int n, int j) {
    hop.validate();
    check_displacement(cfg, u);
    const int ns = cfg.size();
    if (m < 0 || m >= ns || n < 0 || n >= ns) throw InvalidArgument("site index out of range");
    if (i < 0 || i >= cfg.dim() || j < 0 || j >= cfg.dim()) throw InvalidArgument("direction index out of range");
    const int nb = hop.n_orbitals;
    const int N = ns * nb;
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(N, N);
    const double rc = hop.cutoff();
    std::vector<Vec3> shifts = {Vec3::Zero()};
    if (cfg.periodic()) {
        double umax = 0.0;
        for (int q = 0; q < ns; ++q) umax = std::max(umax, u.col(q).norm());
        shifts = cfg.image_shifts(rc + cfg.lattice()->supercell().colwise().norm().sum() + 2.0 * umax);
    }
    auto pair_hessian = [&](int l, int k) {
        const Vec3 base = displaced_separation(cfg, u, l, k);
        double s2 = 0.0;
        for (const Vec3& s : shifts) {
            const Vec3 r = base + s;
            if (r.norm() > rc) continue;
            s2 += hop.hessian(r)(i, j);
        }
        return s2;
    };
    auto put = [&](int l, int k, double val) {
        for (int a = 0; a < nb; ++a)
            for (int b = 0; b < nb; ++b) D(l * nb + a, k * nb + b) += val * hop.coupling(a, b);
    };
    if (m != n) {
        const double val = -pair_hessian(m, n);
        put(m, n, val);
        put(n, m, val);
    } else {
        for (int k = 0; k < ns; ++k) {
            if (k == m) continue;
            const double val = pair_hessian(m, k);
            put(m, k, val);
            put(k, m, val);
        }
    }
    return D;
}

// Gershgorin interval of a symmetric matrix.
inline std::pair<double, double> gershgorin_interval(const Eigen::MatrixXd& H) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (Eigen::Index i = 0; i < H.rows(); ++i) {
        const double rad = H.row(i).cwiseAbs().sum() - std::abs(H(i, i));
        lo = std::min(lo, H(i, i) - rad);
        hi = std::max(hi, H(i, i) + rad);
    }
    return {lo, hi};
}

}  // namespace tbloc
