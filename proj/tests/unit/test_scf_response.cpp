#include <gtest/gtest.h>

#include <boost/math/tools/roots.hpp>

#include "common.hpp"

using namespace tbloc;
using namespace testing_util;

namespace {

Models single_atom_tanh() {
    Models m = constant_models();
    m.onsite.kind = OnsiteModel::Kind::Saturating;
    m.onsite.U = 1.0;
    m.onsite.rho0 = 0.0;
    return m;
}

SystemState solved(const Configuration& c, const Displacement& u, const Models& m, double beta, double mu = 0.0) {
    return solve_state(c, u, m, {beta, mu}, tight_scf());
}

}  // namespace

TEST(DensityMap, SingleAtomBelowMu) {
    const Configuration c = build_chain(1, 1.0);
    for (double r : {0.0, 0.3, 1.0}) {
        const Density d = density_map(c, zero_displacement(c), Eigen::VectorXd::Constant(1, r), constant_models(),
                                      Observable::fermi_occupation(1.0, kInf));
        EXPECT_EQ(d.rho[0], 1.0);
    }
}

TEST(DensityMap, SymmetricDimerHalfFilled) {
    const Configuration c = build_chain(2, 1.0);
    const Density d = density_map(c, zero_displacement(c), Eigen::VectorXd::Constant(2, 0.3), constant_models(),
                                  Observable::fermi_occupation(0.0, 7.0));
    EXPECT_NEAR(d.rho[0], 0.5, 1e-15);
    EXPECT_NEAR(d.rho[1], 0.5, 1e-15);
}

TEST(DensityMap, ZeroTemperatureWithMuInSpectrum) {
    const Configuration c = build_chain(1, 1.0);
    EXPECT_THROW(density_map(c, zero_displacement(c), Eigen::VectorXd::Zero(1), constant_models(),
                             Observable::fermi_occupation(0.0, kInf)),
                 GapError);
}

TEST(DensityMap, NeedsFermiObservable) {
    const Configuration c = build_chain(2, 1.0);
    EXPECT_THROW(density_map(c, zero_displacement(c), Eigen::VectorXd::Zero(2), constant_models(),
                             Observable::grand_potential(0.0, 5.0)),
                 InvalidArgument);
}

TEST(Scf, ConstantOnsiteConvergesInOneStep) {
    const Configuration c = build_chain(6, 1.0);
    const Displacement u = random_u(c, 3, 0.1);
    const Observable f = Observable::fermi_occupation(0.1, 10.0);
    const Density d = scf_solve(c, u, Eigen::VectorXd::Constant(6, 0.2), constant_models(), f, ScfParams{});
    EXPECT_EQ(d.iterations, 1);
    EXPECT_TRUE(d.converged);
    const Density F = density_map(c, u, Eigen::VectorXd::Constant(6, 0.7), constant_models(), f);
    EXPECT_EQ((d.rho - F.rho).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Scf, SingleAtomMatchesBisection) {
    const Configuration c = build_chain(1, 1.0);
    const double beta = 5.0, mu = 0.5;
    const Density d = scf_solve(c, zero_displacement(c), Eigen::VectorXd::Zero(1), single_atom_tanh(),
                                Observable::fermi_occupation(mu, beta), tight_scf());
    auto g = [&](double r) { return r - fermi(std::tanh(r), mu, beta); };
    const auto [lo, hi] = boost::math::tools::bisect(g, 0.0, 1.0, boost::math::tools::eps_tolerance<double>(50));
    EXPECT_NEAR(d.rho[0], 0.5 * (lo + hi), 1e-12);
    EXPECT_LE(std::abs(g(d.rho[0])), 1e-12);
}

TEST(Scf, SingleAtomZeroTemperatureHasNoFixedPoint) {
    // rho = 1 lifts the level above mu and rho = 0 drops it below: the map oscillates.
    const Configuration c = build_chain(1, 1.0);
    ScfParams p;
    p.max_iter = 50;
    EXPECT_THROW(scf_solve(c, zero_displacement(c), Eigen::VectorXd::Zero(1), single_atom_tanh(),
                           Observable::fermi_occupation(0.5, kInf), p),
                 Error);
}

TEST(Scf, FixedPointResidual) {
    const Configuration c = build_chain(12, 1.0);
    const Displacement u = random_u(c, 8, 0.05);
    for (double beta : {5.0, 20.0}) {
        const SystemState s = solved(c, u, tanh_models(), beta, 0.05);
        const Density F = density_map(c, u, s.density.rho, s.models, s.fermi());
        EXPECT_LE((F.rho - s.density.rho).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Scf, ZeroTemperatureKeepsGap) {
    const Configuration c = dimerized_ring(10);
    const SystemState s = solved(c, zero_displacement(c), dimerized_models(), kInf);
    EXPECT_GT(s.density.min_gap, 0.0);
    EXPECT_LE(s.density.residual, 1e-10);
    // Half filling by particle-hole symmetry of the two species.
    EXPECT_NEAR(s.density.rho.sum(), 10.0, 1e-10);
}

TEST(Scf, ReportsNonConvergence) {
    const Configuration c = build_chain(8, 1.0);
    ScfParams p;
    p.max_iter = 1;
    p.anderson_depth = 0;
    try {
        scf_solve(c, zero_displacement(c), Eigen::VectorXd::Zero(8), tanh_models(2.0), Observable::fermi_occupation(0, 5), p);
        FAIL() << "expected non-convergence";
    } catch (const ConvergenceError& e) {
        EXPECT_GT(e.residual(), 0.0);
    }
}

TEST(Scf, RejectsBadParameters) {
    ScfParams p;
    p.mixing = 0.0;
    EXPECT_THROW(p.validate(), InvalidArgument);
}

TEST(StabilityMargin, Values) {
    EXPECT_DOUBLE_EQ(stability_margin(Eigen::MatrixXd::Zero(3, 3)), 1.0);
    EXPECT_NEAR(stability_margin(0.5 * Eigen::MatrixXd::Identity(3, 3)), 0.5, 1e-15);
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> U(-0.3, 0.3);
    Eigen::MatrixXd L(6, 6);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) L(i, j) = U(gen);
    const Eigen::MatrixXd inv = (Eigen::MatrixXd::Identity(6, 6) - L).inverse();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(inv);
    EXPECT_NEAR(stability_margin(L), 1.0 / svd.singularValues()[0], 1e-10);
}

TEST(StabilityOperator, ConstantOnsiteIsZero) {
    const Configuration c = build_chain(5, 1.0);
    const SystemState s = solved(c, zero_displacement(c), constant_models(), 10.0);
    const StabilityOperator S = stability_operator_spectral(s.spec, s.density.rho, s.models.onsite, s.fermi());
    EXPECT_EQ(S.L.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(S.margin, 1.0);
}

namespace {

Eigen::MatrixXd density_jacobian(const SystemState& s, double h = 1e-5) {
    const int n = s.n_sites();
    Eigen::MatrixXd J(n, n);
    for (int k = 0; k < n; ++k) {
        Eigen::VectorXd rp = s.density.rho, rm = s.density.rho;
        rp[k] += h;
        rm[k] -= h;
        J.col(k) = (density_map(s.cfg, s.u, rp, s.models, s.fermi()).rho -
                    density_map(s.cfg, s.u, rm, s.models, s.fermi()).rho) /
                   (2 * h);
    }
    return J;
}

}  // namespace

TEST(StabilityOperator, SingleAtomMatchesFiniteDifference) {
    const Configuration c = build_chain(1, 1.0);
    const SystemState s = solve_state(c, zero_displacement(c), single_atom_tanh(), {5.0, 0.5}, tight_scf());
    const StabilityOperator S = stability_operator_spectral(s.spec, s.density.rho, s.models.onsite, s.fermi());
    const Eigen::MatrixXd J = density_jacobian(s);
    EXPECT_NEAR(S.L(0, 0), J(0, 0), 1e-6 * std::abs(J(0, 0)));
    // Closed form: f'(tanh rho - mu) * v'(rho).
    const double x = std::tanh(s.density.rho[0]);
    EXPECT_NEAR(S.L(0, 0), s.fermi().d1(x) * s.models.onsite.v1(s.density.rho[0]), 1e-12);
}

TEST(StabilityOperator, ChainMatchesFiniteDifferenceColumnwise) {
    const Configuration c = build_chain(6, 1.0);
    const SystemState s = solved(c, random_u(c, 12, 0.08), tanh_models(0.8), 8.0, 0.1);
    const StabilityOperator S = stability_operator_spectral(s.spec, s.density.rho, s.models.onsite, s.fermi());
    const Eigen::MatrixXd J = density_jacobian(s);
    for (int k = 0; k < 6; ++k) EXPECT_LE(rel_err(S.L.col(k), J.col(k)), 1e-6) << k;
    // Quadrature route gives the same operator.
    const Contour C = build_converged_contour(s.spec.values, s.fermi(), 64);
    const StabilityOperator Q = stability_operator(s.cfg, s.u, s.density.rho, s.models, s.fermi(), C);
    EXPECT_LE((Q.L - S.L).cwiseAbs().maxCoeff(), 1e-11);
    EXPECT_NEAR(Q.margin, S.margin, 1e-11);
}

TEST(StabilityOperator, ZeroTemperatureQuadratureMatchesSpectral) {
    const Configuration c = dimerized_ring(5);
    const SystemState s = solved(c, random_u(c, 4, 0.05), dimerized_models(), kInf);
    const StabilityOperator S = stability_operator_spectral(s.spec, s.density.rho, s.models.onsite, s.fermi());
    const Contour C = build_converged_contour(s.spec.values, s.fermi(), 64);
    const StabilityOperator Q = stability_operator(s.cfg, s.u, s.density.rho, s.models, s.fermi(), C);
    EXPECT_LE((Q.L - S.L).cwiseAbs().maxCoeff(), 1e-11);
    const Eigen::MatrixXd J = density_jacobian(s);
    EXPECT_LE(rel_err(S.L, J), 1e-6);
}

TEST(Kernels, QuadratureMatchesSpectral) {
    const Configuration c = build_chain(8, 1.0);
    const SystemState s = solved(c, random_u(c, 6, 0.1), tanh_models(), 12.0, 0.05);
    std::mt19937_64 gen(9);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    Eigen::MatrixXd X(8, 8), Y(8, 8);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) X(i, j) = U(gen), Y(i, j) = U(gen);
    X = 0.5 * (X + X.transpose()).eval();
    Y = 0.5 * (Y + Y.transpose()).eval();
    for (const Observable& o : {s.fermi(), Observable::grand_potential(0.05, 12.0)}) {
        const SpectralKernels K(s.spec, o);
        const Contour C = build_converged_contour(s.spec.values, o, 64);
        const QuadratureKernels Q(s.H, o, C);
        EXPECT_LE((K.values() - Q.values()).cwiseAbs().maxCoeff(), 1e-11);
        EXPECT_LE((K.first_order(X) - Q.first_order(X)).cwiseAbs().maxCoeff(), 1e-11);
        EXPECT_LE((K.pair_kernel() - Q.pair_kernel()).cwiseAbs().maxCoeff(), 1e-11);
        EXPECT_LE((K.second_order(X, Y) - Q.second_order(X, Y)).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Kernels, FirstOrderIsDirectionalDerivative) {
    // d/dt sum of O_l(H + tX) at t = 0 by central differences of the spectral sum.
    const Configuration c = build_chain(6, 1.0);
    const SystemState s = solved(c, zero_displacement(c), constant_models(), 6.0, 0.1);
    const Observable o = Observable::grand_potential(0.1, 6.0);
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(6, 6);
    X(1, 2) = X(2, 1) = 0.3;
    X(4, 4) = -0.2;
    const double h = 1e-5;
    Hamiltonian Hp = s.H, Hm = s.H;
    Hp.matrix += h * X;
    Hm.matrix -= h * X;
    const Eigen::VectorXd fd =
        (local_observables_spectral(diagonalize(Hp), o) - local_observables_spectral(diagonalize(Hm), o)) / (2 * h);
    EXPECT_LE((SpectralKernels(s.spec, o).first_order(X) - fd).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Response, LinearModelDensityResponseIsPhi) {
    const Configuration c = build_chain(6, 1.0);
    const SystemState s = solved(c, random_u(c, 2, 0.1), constant_models(), 10.0, 0.1);
    const ResponseEngine E = ResponseEngine::spectral(s, s.fermi());
    for (int m : {0, 3})
        EXPECT_EQ((E.density_response(m, 0) - E.response_vector(m, 0).phi).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Response, SingleAtomHasNoResponse) {
    const Configuration c = build_chain(1, 1.0);
    const SystemState s = solve_state(c, zero_displacement(c), single_atom_tanh(), {5.0, 0.5}, tight_scf());
    const ResponseEngine E = ResponseEngine::spectral(s, Observable::grand_potential(0.5, 5.0));
    EXPECT_EQ(E.response_vector(0, 0).phi.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(E.site_gradient(0, 0, 0), 0.0);
}

TEST(Response, DimerReflectionSymmetry) {
    const Configuration c = build_chain(2, 1.0);
    const SystemState s = solved(c, zero_displacement(c), tanh_models(), 10.0, 0.2);
    const Eigen::VectorXd d = ResponseEngine::spectral(s, s.fermi()).density_response(1, 0);
    // Stretching the bond changes both sites alike.
    EXPECT_NEAR(d[0], d[1], 1e-14);
    EXPECT_GT(std::abs(d[0]), 1e-4);
}

TEST(Response, ResponseVectorMatchesFrozenDensityDerivative) {
    // phi = dF/du at fixed rho.
    const Configuration c = build_chain(2, 1.0);
    const SystemState s = solved(c, zero_displacement(c), tanh_models(), 10.0, 0.2);
    const Contour C = build_converged_contour(s.spec.values, s.fermi(), 64);
    const ResponseVector r = response_vector(s, 1, 0, C);
    const double h = 1e-6;
    Displacement up = s.u, dn = s.u;
    up(0, 1) += h;
    dn(0, 1) -= h;
    const Eigen::VectorXd fd = (density_map(c, up, s.density.rho, s.models, s.fermi()).rho -
                                density_map(c, dn, s.density.rho, s.models, s.fermi()).rho) /
                               (2 * h);
    EXPECT_LE(rel_err(r.phi, fd), 1e-6);
}

TEST(Response, DensityResponseMatchesScfResolve) {
    const Configuration c = build_chain(6, 1.0);
    const Displacement u = random_u(c, 14, 0.05);
    const StateBuilder B(c, tanh_models(), {20.0, 0.05}, tight_scf());
    const SystemState s = B(u);
    const ResponseEngine E = ResponseEngine::spectral(s, s.fermi());
    const StateBuilder warm = B.with_guess(s.density.rho);
    std::function<Eigen::VectorXd(const Displacement&)> rho = [&](const Displacement& v) {
        return Eigen::VectorXd(warm(v).density.rho);
    };
    for (int m = 0; m < 6; ++m) {
        const Eigen::VectorXd fd = fd_oracle(rho, u, {{m, 0}}, 1e-5);
        EXPECT_LE(rel_err(E.density_response(m, 0), fd), 1e-5) << m;
    }
}

TEST(Response, SiteGradientLinearModel) {
    const Configuration c = build_chain(7, 1.0);
    const Displacement u = random_u(c, 15, 0.05);
    const StateBuilder B(c, constant_models(1.5, 0.1), {8.0, 0.0}, tight_scf());
    const Observable o = Observable::grand_potential(0.0, 8.0);
    const ResponseEngine E = ResponseEngine::spectral(B(u), o);
    std::function<double(const Displacement&)> total = [&](const Displacement& v) {
        return local_observables_spectral(B(v).spec, o).sum();
    };
    for (int m : {0, 3, 6}) {
        const double fd = fd_oracle(total, u, {{m, 0}}, 1e-5);
        EXPECT_NEAR(E.site_gradients(m, 0).sum(), fd, 1e-6 * std::abs(fd)) << m;
    }
}

TEST(Response, SiteGradientMatchesScfResolve) {
    const Configuration c = build_chain(8, 1.0);
    const Displacement u = random_u(c, 16, 0.05);
    const StateBuilder B(c, tanh_models(), {10.0, 0.05}, tight_scf());
    const SystemState s = B(u);
    const Observable o = Observable::grand_potential(0.05, 10.0);
    const ResponseEngine E = ResponseEngine::spectral(s, o);
    const StateBuilder warm = B.with_guess(s.density.rho);
    std::function<Eigen::VectorXd(const Displacement&)> site = [&](const Displacement& v) {
        return Eigen::VectorXd(local_observables_spectral(warm(v).spec, o));
    };
    for (int m : {0, 4, 7}) {
        const Eigen::VectorXd fd = fd_oracle(site, u, {{m, 0}}, 1e-4, true);
        EXPECT_LE(rel_err(E.site_gradients(m, 0), fd), 1e-5) << m;
    }
}

TEST(Response, QuadratureEngineMatchesSpectral) {
    const Configuration c = build_chain(8, 1.0);
    const SystemState s = solved(c, random_u(c, 17, 0.05), tanh_models(), 10.0, 0.05);
    const Observable o = Observable::grand_potential(0.05, 10.0);
    const ResponseEngine A = ResponseEngine::spectral(s, o);
    const ResponseEngine Q = ResponseEngine::quadrature(s, o);
    const Contour Cf = build_converged_contour(s.spec.values, s.fermi(), 64);
    const Contour Co = build_converged_contour(s.spec.values, o, 64);
    EXPECT_LE((A.site_gradients(2, 0) - Q.site_gradients(2, 0)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_NEAR(site_gradient(s, o, Cf, Co, 3, 2, 0), A.site_gradient(3, 2, 0), 1e-10);
    EXPECT_LE((A.site_hessians(2, 0, 5, 0) - Q.site_hessians(2, 0, 5, 0)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Response, HessianSymmetric) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(2, 2);
    const Configuration c = build_multilattice(A, Eigen::MatrixXd::Zero(2, 1), {"A"}, {3, 2}, false);
    const SystemState s = solved(c, random_u(c, 18, 0.05), tanh_models(), 10.0, 0.0);
    const ResponseEngine E = ResponseEngine::spectral(s, Observable::grand_potential(0.0, 10.0));
    for (int l : {0, 4})
        EXPECT_NEAR(E.site_hessian(l, 1, 3, 0, 1), E.site_hessian(l, 3, 1, 1, 0), 1e-8);
}

TEST(Response, LinearModelHessianMatchesSecondDifference) {
    const Configuration c = build_chain(5, 1.0);
    const Displacement u = random_u(c, 19, 0.05);
    const StateBuilder B(c, constant_models(), {6.0, 0.0}, tight_scf());
    const Observable o = Observable::grand_potential(0.0, 6.0);
    const ResponseEngine E = ResponseEngine::spectral(B(u), o);
    std::function<Eigen::VectorXd(const Displacement&)> site = [&](const Displacement& v) {
        return Eigen::VectorXd(local_observables_spectral(B(v).spec, o));
    };
    const Eigen::VectorXd fd = fd_oracle(site, u, {{1, 0}, {2, 0}}, 1e-3, true);
    EXPECT_LE(rel_err(E.site_hessians(1, 0, 2, 0), fd), 1e-4);
}

TEST(Response, HessianMatchesGradientDifference) {
    const Configuration c = build_chain(6, 1.0);
    const Displacement u = random_u(c, 20, 0.05);
    const StateBuilder B(c, tanh_models(), {10.0, 0.05}, tight_scf());
    const SystemState s = B(u);
    const Observable o = Observable::grand_potential(0.05, 10.0);
    const ResponseEngine E = ResponseEngine::spectral(s, o);
    const StateBuilder warm = B.with_guess(s.density.rho);
    for (auto [m, n] : {std::pair{1, 2}, {3, 3}, {0, 5}}) {
        std::function<Eigen::VectorXd(const Displacement&)> grad = [&](const Displacement& v) {
            return Eigen::VectorXd(ResponseEngine::spectral(warm(v), o).site_gradients(n, 0));
        };
        EXPECT_LE(rel_err(E.site_hessians(m, 0, n, 0), fd_oracle(grad, u, {{m, 0}}, 1e-4)), 1e-4) << m << n;
    }
}

TEST(Response, ForceSumRule) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(2, 2);
    const Configuration c = build_multilattice(A, Eigen::MatrixXd::Zero(2, 1), {"A"}, {3, 3}, false);
    const SystemState s = solved(c, random_u(c, 22, 0.05), tanh_models(), 10.0, 0.0);
    const ResponseEngine E = ResponseEngine::spectral(s, Observable::grand_potential(0.0, 10.0));
    const auto table = E.gradient_table(2);
    for (int i = 0; i < 2; ++i) {
        const double scale = table[i].cwiseAbs().maxCoeff();
        EXPECT_LE(table[i].rowwise().sum().cwiseAbs().maxCoeff(), 1e-8 * scale);
    }
}

TEST(Response, TotalGradientMatchesTable) {
    const Configuration c = build_chain(6, 1.0);
    const SystemState s = solved(c, random_u(c, 23, 0.05), tanh_models(), 10.0, 0.0);
    const ResponseEngine E = ResponseEngine::spectral(s, Observable::grand_potential(0.0, 10.0));
    const auto table = E.gradient_table();
    const Eigen::VectorXd g = E.total_gradient({0, 2, 5}, 3);
    EXPECT_NEAR(g[0], table[0].col(0).sum(), 1e-14);
    EXPECT_NEAR(g[1], table[0].col(2).sum(), 1e-14);
    EXPECT_NEAR(g[2], table[0].col(5).sum(), 1e-14);
}

TEST(FdOracle, ExactOnQuadratics) {
    const Configuration c = build_chain(3, 1.0);
    std::function<double(const Displacement&)> q = [](const Displacement& u) {
        return 3.0 * u(0, 1) * u(0, 1) - 2.0 * u(0, 0) * u(0, 1) + 0.5 * u(0, 2);
    };
    Displacement u = zero_displacement(c);
    u(0, 0) = 0.3;
    u(0, 1) = -0.2;
    EXPECT_NEAR(fd_oracle(q, u, {{1, 0}}, 1e-3), 6.0 * -0.2 - 2.0 * 0.3, 1e-10);
    EXPECT_NEAR(fd_oracle(q, u, {{0, 0}, {1, 0}}, 1e-3), -2.0, 1e-10);
}

TEST(FdOracle, SecondOrderConvergence) {
    const Configuration c = build_chain(1, 1.0);
    std::function<double(const Displacement&)> f = [](const Displacement& u) { return std::sin(u(0, 0)); };
    const Displacement u = Displacement::Constant(3, 1, 0.4);
    const double exact = std::cos(0.4);
    const double e1 = std::abs(fd_oracle(f, u, {{0, 0}}, 1e-2) - exact);
    const double e2 = std::abs(fd_oracle(f, u, {{0, 0}}, 5e-3) - exact);
    EXPECT_NEAR(e1 / e2, 4.0, 0.05);
}

TEST(FdOracle, Errors) {
    std::function<double(const Displacement&)> f = [](const Displacement&) -> double {
        throw ConvergenceError("no", 1.0, 1);
    };
    const Displacement u = Displacement::Zero(3, 1);
    EXPECT_THROW(fd_oracle(f, u, {{0, 0}}, 1e-8), InvalidArgument);
    EXPECT_THROW(fd_oracle(f, u, {{0, 0}}, 1e-4), OracleError);
}
