#pragma once

#include <random>

#include "tbloc/bloch.hpp"
#include "tbloc/locality.hpp"
#include "tbloc/relax.hpp"
#include "tbloc/response.hpp"

namespace testing_util {

using namespace tbloc;

inline Models constant_models(double gamma0 = 1.5, double c = 0.0) {
    Models m;
    m.hop.h0 = 1.0;
    m.hop.gamma0 = gamma0;
    m.hop.r_on = 1.0;
    m.onsite.kind = OnsiteModel::Kind::Constant;
    m.onsite.c = c;
    return m;
}

inline Models tanh_models(double U = 0.5, double rho0 = 0.5, double gamma0 = 1.5) {
    Models m = constant_models(gamma0);
    m.onsite.kind = OnsiteModel::Kind::Saturating;
    m.onsite.U = U;
    m.onsite.rho0 = rho0;
    return m;
}

// Two-species models with onsite shifts -delta / +delta.
inline Models dimerized_models(double delta = 1.0, double U = 0.5, double gamma0 = 2.0) {
    Models m = tanh_models(U, 0.5, gamma0);
    m.onsite.species_shift = {{"A", -delta}, {"B", delta}};
    return m;
}

inline Configuration dimerized_ring(int cells) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Constant(1, 1, 2.0);
    Eigen::MatrixXd basis(1, 2);
    basis << 0.0, 1.0;
    return build_multilattice(A, basis, {"A", "B"}, {cells}, true);
}

inline Configuration dimerized_chain(int cells) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Constant(1, 1, 2.0);
    Eigen::MatrixXd basis(1, 2);
    basis << 0.0, 1.0;
    return build_multilattice(A, basis, {"A", "B"}, {cells}, false);
}

inline Configuration monatomic_ring(int n) {
    return build_multilattice(Eigen::MatrixXd::Identity(1, 1), Eigen::MatrixXd::Zero(1, 1), {"A"}, {n}, true);
}

inline Displacement random_u(const Configuration& c, std::uint64_t seed, double amp) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> U(-amp, amp);
    Displacement u = zero_displacement(c);
    for (int j = 0; j < c.size(); ++j)
        for (int i = 0; i < c.dim(); ++i) u(i, j) = U(gen);
    return u;
}

inline ScfParams tight_scf() {
    ScfParams p;
    p.tol = 1e-13;
    return p;
}

inline double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const double s = b.cwiseAbs().maxCoeff();
    const double e = (a - b).cwiseAbs().maxCoeff();
    return s > 0 ? e / s : e;
}

}  // namespace testing_util
