#pragma once

#include <Eigen/Dense>
#include <boost/math/special_functions/ellint_1.hpp>
#include <boost/math/special_functions/jacobi_elliptic.hpp>

#include <algorithm>
#include <type_traits>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numbers>
#include <vector>

#include "tbloc/errors.hpp"
#include "tbloc/model.hpp"

namespace tbloc {

using cd = std::complex<double>;
inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kPi = std::numbers::pi;

inline std::uint64_t hash_matrix(const Eigen::MatrixXd& M) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    const Eigen::Index r = M.rows(), c = M.cols();
    mix(&r, sizeof r);
    mix(&c, sizeof c);
    mix(M.data(), sizeof(double) * static_cast<std::size_t>(M.size()));
    return h;
}

struct SpectralCache {
    Eigen::VectorXd values;   // ascending
    Eigen::MatrixXd vectors;  // columns are eigenvectors
    std::uint64_t host_hash = 0;
    int n_sites = 0;
    int n_orb = 1;

    int dimension() const { return static_cast<int>(values.size()); }

    // Largest residual |H psi - lambda psi| relative to |H| and orthonormality defect.
    std::pair<double, double> check(const Eigen::MatrixXd& H) const {
        const double hn = std::max(1.0, H.norm());
        const Eigen::MatrixXd R = H * vectors - vectors * values.asDiagonal();
        const double res = R.colwise().norm().maxCoeff() / hn;
        const Eigen::MatrixXd G = vectors.transpose() * vectors - Eigen::MatrixXd::Identity(dimension(), dimension());
        return {res, G.cwiseAbs().maxCoeff()};
    }
};

inline SpectralCache diagonalize(const Hamiltonian& H) {
    if (!H.matrix.allFinite()) throw NumericalError("Hamiltonian has non-finite entries");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H.matrix);
    if (es.info() != Eigen::Success) throw NumericalError("eigensolver failed");
    return {es.eigenvalues(), es.eigenvectors(), hash_matrix(H.matrix), H.n_sites, H.n_orb};
}

// Fermi-Dirac occupation f(z - mu). For beta = inf only the real part of z
// matters and f(mu) = 1/2.
inline cd fermi(cd z, double mu, double beta) {
    if (!(beta > 0)) throw InvalidArgument("beta must be positive");
    if (std::isinf(beta)) {
        const double x = z.real();
        if (x < mu) return 1.0;
        if (x > mu) return 0.0;
        return 0.5;
    }
    const cd x = beta * (z - mu);
    // Matsubara poles: x = i*pi*(2k+1).
    const double k = std::round((x.imag() / kPi - 1.0) / 2.0);
    const cd pole(0.0, kPi * (2.0 * k + 1.0));
    if (std::abs(x - pole) < 1e-10) throw DomainError("fermi evaluated at a Matsubara pole");
    if (x.real() > 0) {
        const cd e = std::exp(-x);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + std::exp(x));
}

inline double fermi(double x, double mu, double beta) { return fermi(cd(x, 0.0), mu, beta).real(); }

namespace detail {

// Gauss-Legendre nodes and weights on [0, 1].
inline const std::array<std::pair<double, double>, 10>& gauss_legendre_unit() {
    static const std::array<std::pair<double, double>, 10> table = [] {
        const double x[5] = {0.1488743389816312, 0.4333953941292472, 0.6794095682990244, 0.8650633666889845,
                             0.9739065285171717};
        const double w[5] = {0.2955242247147529, 0.2692667193099963, 0.2190863625159820, 0.1494513491505806,
                             0.0666713443086881};
        std::array<std::pair<double, double>, 10> t{};
        for (int i = 0; i < 5; ++i) {
            t[2 * i] = {0.5 * (1.0 - x[i]), 0.5 * w[i]};
            t[2 * i + 1] = {0.5 * (1.0 + x[i]), 0.5 * w[i]};
        }
        return t;
    }();
    return table;
}

inline double softplus(double y) { return std::max(y, 0.0) + std::log1p(std::exp(-std::abs(y))); }

}  // namespace detail

// Scalar function evaluated on the spectrum (and continued onto the paired
// contour): Fermi occupation, grand-potential integrand, or a polynomial.
struct Observable {
    enum class Kind { Fermi, GrandPotential, Polynomial };
    Kind kind = Kind::Fermi;
    double beta = kInf;
    double mu = 0.0;
    std::vector<double> coeffs;  // polynomial coefficients, lowest degree first

    static Observable fermi_occupation(double mu, double beta) { return {Kind::Fermi, beta, mu, {}}; }
    static Observable grand_potential(double mu, double beta) { return {Kind::GrandPotential, beta, mu, {}}; }
    static Observable polynomial(std::vector<double> c) { return {Kind::Polynomial, kInf, 0.0, std::move(c)}; }

    bool zero_temperature() const { return kind != Kind::Polynomial && std::isinf(beta); }

    void validate() const {
        if (kind != Kind::Polynomial && !(beta > 0)) throw InvalidArgument("beta must be positive");
        if (!std::isfinite(mu)) throw InvalidArgument("mu must be finite");
        if (kind == Kind::Polynomial && coeffs.empty()) throw InvalidArgument("polynomial needs coefficients");
    }

    double value(double x) const {
        switch (kind) {
        case Kind::Fermi:
            return fermi(x, mu, beta);
        case Kind::GrandPotential:
            if (std::isinf(beta)) return x < mu ? 2.0 * (x - mu) : 0.0;
            return -2.0 / beta * detail::softplus(-beta * (x - mu));
        case Kind::Polynomial: {
            double s = 0.0;
            for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) s = s * x + *it;
            return s;
        }
        }
        return 0.0;
    }

    double d1(double x) const {
        switch (kind) {
        case Kind::Fermi: {
            if (std::isinf(beta)) return 0.0;
            const double f = fermi(x, mu, beta);
            return -beta * f * (1.0 - f);
        }
        case Kind::GrandPotential:
            if (std::isinf(beta)) return x < mu ? 2.0 : 0.0;
            return 2.0 * fermi(x, mu, beta);
        case Kind::Polynomial: {
            double s = 0.0;
            for (std::size_t k = coeffs.size(); k-- > 1;) s = s * x + static_cast<double>(k) * coeffs[k];
            return s;
        }
        }
        return 0.0;
    }

    double d2(double x) const {
        switch (kind) {
        case Kind::Fermi: {
            if (std::isinf(beta)) return 0.0;
            const double f = fermi(x, mu, beta);
            return beta * beta * f * (1.0 - f) * (1.0 - 2.0 * f);
        }
        case Kind::GrandPotential: {
            if (std::isinf(beta)) return 0.0;
            const double f = fermi(x, mu, beta);
            return -2.0 * beta * f * (1.0 - f);
        }
        case Kind::Polynomial: {
            double s = 0.0;
            for (std::size_t k = coeffs.size(); k-- > 2;)
                s = s * x + static_cast<double>(k) * static_cast<double>(k - 1) * coeffs[k];
            return s;
        }
        }
        return 0.0;
    }

    // Analytic continuation used on the paired contour. The zero-temperature
    // kinds are continued from the occupied side, which is all the
    // occupied-states contour encloses.
    cd contour_value(cd z) const {
        switch (kind) {
        case Kind::Fermi:
            if (std::isinf(beta)) return 1.0;
            return fermi(z, mu, beta);
        case Kind::GrandPotential: {
            if (std::isinf(beta)) return 2.0 * (z - mu);
            // (2/beta) log(1 - f) = -(2/beta) log(1 + exp(-x)); this branch is
            // continuous in the strip |Im x| < pi that the contour stays in.
            const cd x = beta * (z - mu);
            cd lg;
            if (x.real() < 0) lg = -x + std::log(1.0 + std::exp(x));
            else lg = std::log(1.0 + std::exp(-x));
            return -2.0 / beta * lg;
        }
        case Kind::Polynomial: {
            cd s = 0.0;
            for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) s = s * z + *it;
            return s;
        }
        }
        return 0.0;
    }

    // Length scale on which the function varies; below it divided
    // differences switch from quotients to quadrature.
    double smooth_scale() const { return kind == Kind::Polynomial ? 1.0 : 1.0 / beta; }

    // First divided difference o[a, b].
    double dd1(double a, double b) const {
        if (zero_temperature()) {
            const bool oa = a < mu, ob = b < mu;
            if (oa == ob) return (kind == Kind::GrandPotential && oa) ? 2.0 : 0.0;
            return (value(a) - value(b)) / (a - b);
        }
        if (std::abs(a - b) >= smooth_scale()) return (value(a) - value(b)) / (a - b);
        double s = 0.0;
        for (const auto& [t, w] : detail::gauss_legendre_unit()) s += w * d1(b + t * (a - b));
        return s;
    }

    // Second divided difference o[a, b, c].
    double dd2(double a, double b, double c) const {
        std::array<double, 3> x{a, b, c};
        std::sort(x.begin(), x.end());
        const double span = x[2] - x[0];
        if (zero_temperature()) {
            if (span == 0.0) return 0.0;
            return (dd1(x[0], x[1]) - dd1(x[1], x[2])) / (x[0] - x[2]);
        }
        if (span >= smooth_scale()) return (dd1(x[0], x[1]) - dd1(x[1], x[2])) / (x[0] - x[2]);
        // Hermite-Genocchi: integral of o'' over the simplex, collapsed onto the square.
        double s = 0.0;
        for (const auto& [p, wp] : detail::gauss_legendre_unit())
            for (const auto& [q, wq] : detail::gauss_legendre_unit()) {
                const double t1 = p, t2 = (1.0 - p) * q, t0 = 1.0 - t1 - t2;
                s += wp * wq * (1.0 - p) * d2(t0 * x[0] + t1 * x[1] + t2 * x[2]);
            }
        return s;
    }
};

struct GapInfo {
    double below = -kInf;  // largest eigenvalue < mu
    double above = kInf;   // smallest eigenvalue > mu
    double gap = kInf;     // above - below; <= 0 reported when mu hits the spectrum
    bool at_mu = false;    // some eigenvalue within tol of mu
};

inline GapInfo spectral_gap(const Eigen::VectorXd& values, double mu, double tol = 1e-8) {
    GapInfo g;
    for (Eigen::Index s = 0; s < values.size(); ++s) {
        const double l = values[s];
        if (std::abs(l - mu) < tol) g.at_mu = true;
        if (l < mu) g.below = std::max(g.below, l);
        else g.above = std::min(g.above, l);
    }
    g.gap = g.at_mu ? 0.0 : g.above - g.below;
    return g;
}

// Closed contour, symmetric about the real axis, with trapezoidal
// quadrature. Only the n_quad nodes in the upper half plane are stored; the
// lower half is their mirror image, so for real symmetric H
//   integral of g dz ~ S - conj(S),  S = sum_q weights[q] * g(nodes[q]).
struct Contour {
    enum class Kind { Observable, Fermi, FermiZeroT };
    Kind kind = Kind::Observable;
    cd center = 0.0;
    double semi_x = 0.0;  // extent along the real axis
    double semi_y = 0.0;  // extent along the imaginary axis
    std::vector<cd> nodes;
    std::vector<cd> weights;
    double clearance = 0.0;  // min distance from nodes to the spectrum used to build it
    double pole_clearance = kInf;  // min distance from nodes to Matsubara poles (finite beta)
    double rate = 0.0;  // finite-beta kind: predicted log-error decrease per node

    double radius() const { return semi_x; }
    int n_quad() const { return static_cast<int>(nodes.size()); }
    bool empty() const { return nodes.empty(); }
};

namespace detail {

// Upper half of a circle or ellipse; the full rule has 2n points.
inline void place_nodes(Contour& C, int n) {
    C.nodes.resize(n);
    C.weights.resize(n);
    const double h = kPi / n;
    for (int q = 0; q < n; ++q) {
        const double t = h * (q + 0.5);
        C.nodes[q] = C.center + cd(C.semi_x * std::cos(t), C.semi_y * std::sin(t));
        C.weights[q] = cd(-C.semi_x * std::sin(t), C.semi_y * std::cos(t)) * h;
    }
}

// S - conj(S) for the accumulated upper-half sum.
template <class T>
T mirror(const T& acc) {
    if constexpr (std::is_same_v<T, cd>) return acc - std::conj(acc);
    else return acc - acc.conjugate();
}

// Finite-beta Fermi contour from a conformal map. With w = (z - mu)^2 the
// poles mu + i pi (2k+1)/beta land on (-inf, -pi^2/beta^2] and the spectrum
// on [0, E^2]. After the shift w' = w + pi^2/beta^2 the annulus map
//   w' = sqrt(m M) (1/k + sn(t)) / (1/k - sn(t)),  Im t = K'/2,
// sends the trapezoid rule on the annulus to a curve around [m, M] that
// avoids the cut; both square roots z = mu +- sqrt(w) are used.
inline void place_fermi_nodes(Contour& C, double mu, double beta, double E, int n) {
    const double sigma = kPi * kPi / (beta * beta);
    const double m = sigma;
    const double M = std::max(E * E + sigma, m * (1.0 + 1e-6));
    const double r = std::sqrt(M / m);
    const double k = (r - 1.0) / (r + 1.0);
    const double kp = std::sqrt((1.0 - k) * (1.0 + k));
    const double K = boost::math::ellint_1(k), Kp = boost::math::ellint_1(kp);
    const double h = 4.0 * K / n;  // n nodes along the full period 4K
    double cy, dy;
    const double sy = boost::math::jacobi_elliptic(kp, 0.5 * Kp, &cy, &dy);
    const double c = std::sqrt(m * M);
    C.nodes.resize(n);
    C.weights.resize(n);
    for (int j = 0; j < n; ++j) {
        const double x = -K + (j + 0.5) * h;
        double cx, dx;
        const double sx = boost::math::jacobi_elliptic(k, x, &cx, &dx);
        const double D = cy * cy + k * k * sx * sx * sy * sy;
        const cd sn = cd(sx * dy, cx * dx * sy * cy) / D;
        const cd cn = cd(cx * cy, -sx * dx * sy * dy) / D;
        const cd dn = cd(dx * cy * dy, -k * k * sx * cx * sy) / D;
        const cd wp = c * (1.0 / k + sn) / (1.0 / k - sn);
        const cd dwdt = (2.0 * c / k) * cn * dn / ((1.0 / k - sn) * (1.0 / k - sn));
        // The line Im t = K'/2 runs clockwise around [m, M].
        const cd W = -h * dwdt;
        cd s = std::sqrt(wp - sigma);
        const double sign = s.imag() >= 0 ? 1.0 : -1.0;
        C.nodes[j] = mu + sign * s;
        C.weights[j] = sign * W / (2.0 * s);
    }
    C.center = mu;
    C.semi_x = E;
    C.semi_y = 0.0;
    for (const cd& z : C.nodes) C.semi_y = std::max(C.semi_y, z.imag());
    C.rate = kPi * Kp / (4.0 * K);
}

inline double node_clearance(const Contour& C, const Eigen::VectorXd& values) {
    double d = kInf;
    for (const cd& z : C.nodes)
        for (Eigen::Index s = 0; s < values.size(); ++s) d = std::min(d, std::abs(z - values[s]));
    return d;
}

inline double matsubara_clearance(const Contour& C, double mu, double beta) {
    double d = kInf;
    for (const cd& z : C.nodes) {
        const double y = z.imag() * beta / kPi;
        const double k = std::round((y - 1.0) / 2.0);
        for (double kk : {k - 1, k, k + 1}) d = std::min(d, std::abs(z - cd(mu, kPi * (2.0 * kk + 1.0) / beta)));
    }
    return d;
}

// Distance, in the trapezoid parameter, from a circle or ellipse to a singularity s.
inline double strip_width(const Contour& C, cd s) {
    const double a = C.semi_x, b = C.semi_y;
    if (std::abs(a - b) <= 1e-14 * a) return std::abs(std::log(std::abs(s - C.center) / a));
    const double f = std::sqrt(a * a - b * b);
    const double rho0 = (a + b) / f;
    const cd zeta = (s - C.center) / f;
    cd W = zeta + std::sqrt(zeta - 1.0) * std::sqrt(zeta + 1.0);
    if (std::abs(W) < 1.0) W = 1.0 / W;
    return std::abs(std::log(std::abs(W) / rho0));
}

}  // namespace detail

// Shapes:
//  - polynomial observables: circle around the whole spectrum with the given margin;
//  - finite beta: conformal-map curve around [mu - E, mu + E], E = max|lambda - mu|
//    + margin, pinched between the first Matsubara poles;
//  - zero temperature: circle through the gap midpoint enclosing exactly the
//    occupied eigenvalues, clearance gap/2.
inline Contour build_contour(const Eigen::VectorXd& values, const Observable& obs, int n_quad, double margin = 0.5) {
    obs.validate();
    if (n_quad < 4) throw InvalidArgument("n_quad must be >= 4");
    if (!(margin > 0)) throw InvalidArgument("contour margin must be positive");
    if (values.size() == 0) throw InvalidArgument("empty spectrum");
    const double lo = values.minCoeff(), hi = values.maxCoeff();
    Contour C;
    if (obs.kind == Observable::Kind::Polynomial) {
        C.kind = Contour::Kind::Observable;
        C.center = 0.5 * (lo + hi);
        C.semi_x = C.semi_y = 0.5 * (hi - lo) + margin;
        detail::place_nodes(C, n_quad);
    } else if (!obs.zero_temperature()) {
        C.kind = Contour::Kind::Fermi;
        const double E = std::max(std::abs(lo - obs.mu), std::abs(hi - obs.mu)) + margin;
        detail::place_fermi_nodes(C, obs.mu, obs.beta, E, n_quad);
        C.pole_clearance = detail::matsubara_clearance(C, obs.mu, obs.beta);
    } else {
        C.kind = Contour::Kind::FermiZeroT;
        const GapInfo g = spectral_gap(values, obs.mu);
        if (g.at_mu || !(g.gap > 0))
            throw GapError("zero-temperature contour needs a spectral gap at mu", g.gap);
        if (g.below == -kInf) {
            // Nothing occupied: the contour is empty and all integrals vanish.
            C.clearance = kInf;
            return C;
        }
        const double half = std::isinf(g.gap) ? margin : 0.5 * g.gap;
        const double right = g.below + half, left = lo - half;
        C.center = 0.5 * (left + right);
        C.semi_x = C.semi_y = 0.5 * (right - left);
        detail::place_nodes(C, n_quad);
    }
    C.clearance = detail::node_clearance(C, values);
    if (!(C.clearance > 0)) throw ContourError("contour touches the spectrum");
    return C;
}

inline Contour build_contour(const SpectralCache& spec, const Observable& obs, int n_quad, double margin = 0.5) {
    return build_contour(spec.values, obs, n_quad, margin);
}

// Trapezoid node count that brings the quadrature error near `tol`, from the
// nearest singularity (eigenvalues and, at finite beta, Matsubara poles).
inline int recommended_nodes(const Contour& C, const Eigen::VectorXd& values, const Observable& obs,
                             double tol = 1e-13) {
    if (C.empty()) return 0;
    if (C.kind == Contour::Kind::Fermi) {
        const double n = (std::log(1.0 / tol) + 3.0) / C.rate;
        int N = static_cast<int>(std::min(n, 1e6));
        return std::max(16, (N + 7) / 8 * 8);
    }
    double tau = kInf;
    for (Eigen::Index s = 0; s < values.size(); ++s) tau = std::min(tau, detail::strip_width(C, values[s]));
    if (!(tau > 0)) throw ContourError("singularity on the contour");
    // Upper-half storage: the full rule has 2n points, error ~ exp(-2 n tau).
    tau *= 2.0;
    const double n = (std::log(1.0 / tol) + 3.0) / tau;
    int N = static_cast<int>(std::min(n, 1e6));
    N = std::max(16, (N + 7) / 8 * 8);
    return N;
}

// Contour with the recommended node count (never fewer than n_min).
inline Contour build_converged_contour(const Eigen::VectorXd& values, const Observable& obs, int n_min = 64,
                                       double margin = 0.5, double tol = 1e-13) {
    Contour C = build_contour(values, obs, n_min, margin);
    if (C.empty()) return C;
    const int n = recommended_nodes(C, values, obs, tol);
    if (n > n_min) C = build_contour(values, obs, n, margin);
    return C;
}

inline Eigen::VectorXcd resolvent_column(const Hamiltonian& H, cd z, int k, int b, const SpectralCache* spec = nullptr) {
    const int N = H.dimension();
    if (k < 0 || k >= H.n_sites || b < 0 || b >= H.n_orb) throw InvalidArgument("resolvent index out of range");
    if (spec) {
        double d = kInf;
        for (Eigen::Index s = 0; s < spec->values.size(); ++s) d = std::min(d, std::abs(z - spec->values[s]));
        if (d < 1e-8) throw NearSingularError("resolvent evaluated within 1e-8 of the spectrum");
    }
    Eigen::MatrixXcd A = H.matrix.cast<cd>();
    A.diagonal().array() -= z;
    Eigen::PartialPivLU<Eigen::MatrixXcd> lu(A);
    Eigen::VectorXcd e = Eigen::VectorXcd::Zero(N);
    e[H.index(k, b)] = 1.0;
    Eigen::VectorXcd x = lu.solve(e);
    const double res = (A * x - e).norm();
    if (!x.allFinite() || res > 1e-10 || x.cwiseAbs().maxCoeff() > 1e8)
        throw NearSingularError("resolvent solve is near-singular");
    return x;
}

// Full resolvent (H - z)^-1 by LU.
inline Eigen::MatrixXcd resolvent_matrix(const Eigen::MatrixXd& H, cd z) {
    Eigen::MatrixXcd A = H.cast<cd>();
    A.diagonal().array() -= z;
    Eigen::PartialPivLU<Eigen::MatrixXcd> lu(A);
    Eigen::MatrixXcd R = lu.inverse();
    if (!R.allFinite() || R.cwiseAbs().maxCoeff() > 1e10) throw NearSingularError("resolvent is near-singular");
    return R;
}

inline double local_observable_spectral(const SpectralCache& spec, const Observable& obs, int l) {
    if (l < 0 || l >= spec.n_sites) throw InvalidArgument("site index out of range");
    double s = 0.0;
    for (int t = 0; t < spec.dimension(); ++t) {
        double w = 0.0;
        for (int a = 0; a < spec.n_orb; ++a) {
            const double p = spec.vectors(l * spec.n_orb + a, t);
            w += p * p;
        }
        s += obs.value(spec.values[t]) * w;
    }
    return s;
}

inline Eigen::VectorXd local_observables_spectral(const SpectralCache& spec, const Observable& obs) {
    Eigen::VectorXd ov(spec.dimension());
    for (int t = 0; t < spec.dimension(); ++t) ov[t] = obs.value(spec.values[t]);
    const Eigen::VectorXd per_row = spec.vectors.cwiseAbs2() * ov;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(spec.n_sites);
    for (int l = 0; l < spec.n_sites; ++l)
        for (int a = 0; a < spec.n_orb; ++a) out[l] += per_row[l * spec.n_orb + a];
    return out;
}

namespace detail {

inline double checked_real(cd v) {
    if (std::abs(v.imag()) > 1e-8 * std::max(1.0, std::abs(v.real())))
        throw ContourError("contour integral has a large imaginary residual");
    return v.real();
}

inline void check_contour(const Contour& C) {
    if (!C.empty() && !(C.clearance > 1e-8)) throw ContourError("contour clearance violated");
}

}  // namespace detail

inline double local_observable_contour(const Hamiltonian& H, const Observable& obs, const Contour& C, int l) {
    detail::check_contour(C);
    if (l < 0 || l >= H.n_sites) throw InvalidArgument("site index out of range");
    cd acc = 0.0;
    for (int q = 0; q < C.n_quad(); ++q) {
        const cd z = C.nodes[q];
        cd diag = 0.0;
        for (int a = 0; a < H.n_orb; ++a) diag += resolvent_column(H, z, l, a)[H.index(l, a)];
        acc += C.weights[q] * obs.contour_value(z) * diag;
    }
    return detail::checked_real(-detail::mirror(acc) / cd(0.0, 2.0 * kPi));
}

inline Eigen::VectorXd local_observables_contour(const Hamiltonian& H, const Observable& obs, const Contour& C) {
    detail::check_contour(C);
    Eigen::VectorXcd acc = Eigen::VectorXcd::Zero(H.n_sites);
    for (int q = 0; q < C.n_quad(); ++q) {
        const Eigen::MatrixXcd R = resolvent_matrix(H.matrix, C.nodes[q]);
        const cd w = C.weights[q] * obs.contour_value(C.nodes[q]);
        for (int l = 0; l < H.n_sites; ++l)
            for (int a = 0; a < H.n_orb; ++a) acc[l] += w * R(H.index(l, a), H.index(l, a));
    }
    Eigen::VectorXd out(H.n_sites);
    for (int l = 0; l < H.n_sites; ++l) out[l] = detail::checked_real(-detail::mirror(acc[l]) / cd(0.0, 2.0 * kPi));
    return out;
}

}  // namespace tbloc
