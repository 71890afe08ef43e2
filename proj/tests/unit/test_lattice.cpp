#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "tbloc/lattice.hpp"

using namespace tbloc;

namespace {

Displacement chain_u(std::initializer_list<double> xs) {
    Displacement u = Displacement::Zero(3, static_cast<Eigen::Index>(xs.size()));
    int j = 0;
    for (double x : xs) u(0, j++) = x;
    return u;
}

}  // namespace

TEST(Chain, TwoSites) {
    const Configuration c = build_chain(2, 1.0);
    ASSERT_EQ(c.size(), 2);
    EXPECT_DOUBLE_EQ(c.site(0)[0], 0.0);
    EXPECT_DOUBLE_EQ(c.site(1)[0], 1.0);
}

TEST(Chain, SingleSite) {
    const Configuration c = build_chain(1, 2.0);
    ASSERT_EQ(c.size(), 1);
    EXPECT_DOUBLE_EQ(c.site(0)[0], 0.0);
}

TEST(Chain, EndToEndDistance) {
    EXPECT_DOUBLE_EQ(build_chain(5, 1.0).distance(0, 4), 4.0);
}

TEST(Chain, RejectsBadArguments) {
    EXPECT_THROW(build_chain(0, 1.0), InvalidArgument);
    EXPECT_THROW(build_chain(3, 0.0), InvalidArgument);
    EXPECT_THROW(build_chain(3, -1.0), InvalidArgument);
}

TEST(Multilattice, Ring) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(1, 1);
    const Configuration c = build_multilattice(A, Eigen::MatrixXd::Zero(1, 1), {"A"}, {4}, true);
    EXPECT_EQ(c.size(), 4);
    EXPECT_TRUE(c.periodic());
    // Minimum image: 0 and 3 are neighbours on the ring.
    EXPECT_NEAR(c.distance(0, 3), 1.0, 1e-14);
    EXPECT_NEAR(c.distance(0, 2), 2.0, 1e-14);
}

TEST(Multilattice, SquareTwoBasis) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd basis(2, 2);
    basis << 0.0, 0.5, 0.0, 0.5;
    const Configuration c = build_multilattice(A, basis, {"A", "B"}, {2, 2}, false);
    EXPECT_EQ(c.size(), 8);
    EXPECT_NEAR(c.min_spacing(), std::sqrt(0.5), 1e-14);
}

TEST(Multilattice, SiteCountIsBasisTimesCells) {
    std::mt19937_64 gen(3);
    for (int trial = 0; trial < 10; ++trial) {
        const int d = 1 + static_cast<int>(gen() % 3);
        const int nb = 1 + static_cast<int>(gen() % 3);
        Eigen::MatrixXd A = Eigen::MatrixXd::Identity(d, d) * 2.0;
        Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(d, nb);
        for (int b = 0; b < nb; ++b) basis(0, b) = 0.5 * b;
        std::vector<std::string> sp(nb, "A");
        std::vector<int> rep(d);
        int cells = 1;
        for (int c = 0; c < d; ++c) {
            rep[c] = 1 + static_cast<int>(gen() % 3);
            cells *= rep[c];
        }
        EXPECT_EQ(build_multilattice(A, basis, sp, rep, gen() % 2).size(), nb * cells);
    }
}

TEST(Multilattice, RejectsSingularCell) {
    Eigen::MatrixXd A(2, 2);
    A << 1.0, 2.0, 2.0, 4.0;
    EXPECT_THROW(build_multilattice(A, Eigen::MatrixXd::Zero(2, 1), {"A"}, {2, 2}, false), InvalidArgument);
}

TEST(Configuration, RejectsCoincidentSites) {
    Points p = Points::Zero(3, 2);
    EXPECT_THROW(Configuration(1, p, {"A", "A"}), GeometryError);
}

TEST(Defect, VacancyAtCentre) {
    const Configuration c = build_chain(9, 1.0);
    const Configuration d = apply_point_defect(c, DefectEdit::vacancy(4), c.site(4), 0.0);
    EXPECT_EQ(d.size(), 8);
    ASSERT_TRUE(d.defect_radius());
    EXPECT_DOUBLE_EQ(*d.defect_radius(), 0.0);
    EXPECT_EQ(d.find_site(c.site(4)), -1);
}

TEST(Defect, Substitution) {
    const Configuration c = build_chain(9, 1.0);
    const Configuration d = apply_point_defect(c, DefectEdit::substitution(4, "B"), c.site(4), 0.0);
    EXPECT_EQ(d.size(), 9);
    EXPECT_EQ((d.sites() - c.sites()).cwiseAbs().maxCoeff(), 0.0);
    int changed = 0;
    for (int i = 0; i < 9; ++i) changed += d.species(i) != c.species(i);
    EXPECT_EQ(changed, 1);
    EXPECT_EQ(d.species(4), "B");
}

TEST(Defect, InterstitialMinimumSpacing) {
    const Configuration c = build_chain(9, 1.0);
    const Vec3 x(4.5, 0, 0);
    const Configuration d = apply_point_defect(c, DefectEdit::interstitial(x, "A"), x, 0.5);
    EXPECT_EQ(d.size(), 10);
    double m = std::numeric_limits<double>::infinity();
    for (int i = 0; i < d.size(); ++i)
        for (int j = i + 1; j < d.size(); ++j) m = std::min(m, (d.site(i) - d.site(j)).norm());
    EXPECT_DOUBLE_EQ(m, 0.5);
    EXPECT_DOUBLE_EQ(d.min_spacing(), 0.5);
}

TEST(Defect, EditOutsideRadius) {
    const Configuration c = build_chain(9, 1.0);
    EXPECT_THROW(apply_point_defect(c, DefectEdit::vacancy(0), c.site(4), 1.0), InvalidArgument);
}

TEST(Defect, DisplacedSitesOutsideBallAreRejected) {
    const Configuration c = build_chain(5, 1.0);
    Points p = c.sites();
    p(0, 0) = 0.3;
    EXPECT_THROW(Configuration(1, p, c.species(), c.lattice()), GeometryError);
}

TEST(Noninterpenetration, UnitChain) {
    const Configuration c = build_chain(6, 1.0);
    EXPECT_DOUBLE_EQ(noninterpenetration_constant(c, zero_displacement(c)), 1.0);
}

TEST(Noninterpenetration, TwoSitesCompressed) {
    const Configuration c = build_chain(2, 1.0);
    const Displacement u = chain_u({0.0, -0.25});
    // Brute force over the single pair.
    const double r = std::abs(c.site(1)[0] + u(0, 1) - c.site(0)[0] - u(0, 0));
    EXPECT_DOUBLE_EQ(noninterpenetration_constant(c, u), r);
    EXPECT_DOUBLE_EQ(noninterpenetration_constant(c, u), 0.75);
}

TEST(Noninterpenetration, Coincident) {
    const Configuration c = build_chain(3, 1.0);
    EXPECT_DOUBLE_EQ(noninterpenetration_constant(c, chain_u({0.0, -1.0, 0.0})), 0.0);
}

TEST(Noninterpenetration, SingleSiteIsUndefined) {
    const Configuration c = build_chain(1, 1.0);
    EXPECT_THROW(noninterpenetration_constant(c, zero_displacement(c)), UndefinedQuantity);
}

TEST(Seminorm, ZeroDisplacement) {
    const Configuration c = build_chain(7, 1.0);
    EXPECT_DOUBLE_EQ(stencil_seminorm(c, zero_displacement(c), StencilWeights::with_default_cutoff(1.0)), 0.0);
}

TEST(Seminorm, TwoSitesDirectSum) {
    const Configuration c = build_chain(2, 1.0);
    const double eps = 0.1;
    const double v = stencil_seminorm_sq(c, chain_u({0.0, eps}), StencilWeights::with_default_cutoff(1.0));
    EXPECT_NEAR(v, 2.0 * std::exp(-2.0) * eps * eps, 1e-15);
}

TEST(Seminorm, Homogeneous) {
    const Configuration c = build_chain(8, 1.0);
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> U(-0.1, 0.1);
    Displacement u = zero_displacement(c);
    for (int j = 0; j < c.size(); ++j) u(0, j) = U(gen);
    const StencilWeights w = StencilWeights::with_default_cutoff(0.7);
    EXPECT_NEAR(stencil_seminorm(c, 2.0 * u, w), 2.0 * stencil_seminorm(c, u, w), 1e-14);
}

TEST(Seminorm, TranslationInvariant) {
    const Configuration c = build_chain(6, 1.0);
    Displacement u = chain_u({0.1, -0.05, 0.0, 0.02, 0.0, 0.03});
    Displacement v = u;
    v.row(0).array() += 0.4;
    const StencilWeights w = StencilWeights::with_default_cutoff(1.0);
    EXPECT_NEAR(stencil_seminorm_sq(c, u, w), stencil_seminorm_sq(c, v, w), 1e-15);
}

TEST(ConfigurationIo, RoundTrip) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(1, 1) * 2.0;
    Eigen::MatrixXd basis(1, 2);
    basis << 0.0, 1.0;
    const Configuration c = build_multilattice(A, basis, {"A", "B"}, {5}, true);
    const Configuration d = apply_point_defect(c, DefectEdit::vacancy(4), c.site(4), 0.0);
    std::stringstream ss;
    write_configuration(ss, d);
    const Configuration e = read_configuration(ss);
    EXPECT_EQ(e.size(), d.size());
    EXPECT_EQ(e.species(), d.species());
    EXPECT_EQ((e.sites() - d.sites()).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_TRUE(e.periodic());
    ASSERT_TRUE(e.defect_radius());
    EXPECT_EQ(*e.defect_radius(), *d.defect_radius());
}
