#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "tbloc/kernels.hpp"
#include "tbloc/parallel.hpp"
#include "tbloc/scf.hpp"

namespace tbloc {

// Per-basis-site density of a translation-invariant reference; throws if
// sites of the same basis offset disagree by more than tol.
inline Eigen::VectorXd basis_density(const Configuration& ref, const Eigen::VectorXd& rho, double tol = 1e-8) {
    if (!ref.lattice()) throw InvalidArgument("reference configuration has no lattice");
    const LatticeInfo& lat = *ref.lattice();
    if (rho.size() != ref.size()) throw InvalidArgument("density length does not match site count");
    const int nb = lat.basis_size(), d = ref.dim();
    const Eigen::MatrixXd Ainv = lat.A.inverse();
    Eigen::VectorXd out = Eigen::VectorXd::Constant(nb, kInf);
    for (int i = 0; i < ref.size(); ++i) {
        int which = -1;
        for (int b = 0; b < nb && which < 0; ++b) {
            const Eigen::VectorXd g = Ainv * (ref.site(i).head(d) - lat.basis.col(b));
            bool ok = true;
            for (int c = 0; c < d; ++c) ok = ok && std::abs(g[c] - std::round(g[c])) <= 1e-8;
            if (ok) which = b;
        }
        if (which < 0) throw InvalidArgument("site " + std::to_string(i) + " is not a lattice site");
        if (std::isinf(out[which])) out[which] = rho[i];
        else if (std::abs(out[which] - rho[i]) > tol)
            throw InvalidArgument("reference density is not translation invariant");
    }
    for (int b = 0; b < nb; ++b)
        if (std::isinf(out[b])) throw InvalidArgument("basis offset without a site in the reference");
    return out;
}

struct BlochMatrix {
    Vec3 xi = Vec3::Zero();
    Eigen::MatrixXcd matrix;
};

// Lattice vectors A*gamma with |A*gamma| <= radius.
inline std::vector<Vec3> lattice_translations(const Eigen::MatrixXd& A, double radius) {
    const int d = static_cast<int>(A.rows());
    const Eigen::MatrixXd Ainv = A.inverse();
    std::vector<int> range(d), g(d);
    for (int c = 0; c < d; ++c) {
        range[c] = static_cast<int>(std::ceil(radius * Ainv.row(c).norm())) + 1;
        g[c] = -range[c];
    }
    std::vector<Vec3> out;
    while (true) {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
        for (int c = 0; c < d; ++c) v += g[c] * A.col(c);
        if (v.norm() <= radius) {
            Vec3 s = Vec3::Zero();
            s.head(d) = v;
            out.push_back(s);
        }
        int c = 0;
        while (c < d && ++g[c] > range[c]) {
            g[c] = -range[c];
            ++c;
        }
        if (c == d) break;
    }
    return out;
}

// [H_xi]_{(alpha a),(beta b)} = sum_gamma h_ab(x_alpha - x_beta + A gamma) exp(-i (x_alpha - x_beta + A gamma).xi)
//                               + delta (v(rho_alpha) + shift_alpha).
inline BlochMatrix bloch_hamiltonian(const Configuration& ref, const Eigen::VectorXd& rho_ref, const Models& models,
                                     const Vec3& xi) {
    models.hop.validate();
    models.onsite.validate();
    const Eigen::VectorXd rb = basis_density(ref, rho_ref);
    const LatticeInfo& lat = *ref.lattice();
    const int nc = lat.basis_size(), nb = models.hop.n_orbitals, d = ref.dim();
    const double rc = models.hop.cutoff();
    double span = 0.0;
    for (int a = 0; a < nc; ++a)
        for (int b = 0; b < nc; ++b) span = std::max(span, (lat.basis.col(a) - lat.basis.col(b)).norm());
    const auto shifts = lattice_translations(lat.A, rc + span);
    Eigen::MatrixXcd M = Eigen::MatrixXcd::Zero(nc * nb, nc * nb);
    for (int al = 0; al < nc; ++al)
        for (int be = 0; be < nc; ++be) {
            Vec3 base = Vec3::Zero();
            base.head(d) = lat.basis.col(al) - lat.basis.col(be);
            cd s = 0.0;
            for (const Vec3& t : shifts) {
                const Vec3 r = base + t;
                const double rn = r.norm();
                if (rn < 1e-14 || rn > rc) continue;
                s += models.hop.radial(rn) * std::exp(cd(0.0, -r.dot(xi)));
            }
            for (int a = 0; a < nb; ++a)
                for (int b = 0; b < nb; ++b) M(al * nb + a, be * nb + b) += s * models.hop.coupling(a, b);
        }
    for (int al = 0; al < nc; ++al) {
        const double v = models.onsite.v(rb[al]) + models.onsite.shift(lat.basis_species[al]);
        for (int a = 0; a < nb; ++a) M(al * nb + a, al * nb + a) += v;
    }
    const Eigen::MatrixXcd herm = 0.5 * (M + M.adjoint());
    return {xi, herm};
}

// Reciprocal basis 2 pi A^-T (columns).
inline Eigen::MatrixXd reciprocal_basis(const Eigen::MatrixXd& A) { return 2.0 * kPi * A.inverse().transpose(); }

// Wavevectors A^-T t with t on a uniform grid over [-pi, pi)^d (n points per axis).
inline std::vector<Vec3> brillouin_grid(const Eigen::MatrixXd& A, int n) {
    const int d = static_cast<int>(A.rows());
    const Eigen::MatrixXd AinvT = A.inverse().transpose();
    int total = 1;
    for (int c = 0; c < d; ++c) total *= n;
    std::vector<Vec3> out;
    out.reserve(total);
    for (int code = 0; code < total; ++code) {
        Eigen::VectorXd t(d);
        int q = code;
        for (int c = 0; c < d; ++c) {
            t[c] = -kPi + 2.0 * kPi * (q % n) / n;
            q /= n;
        }
        Vec3 xi = Vec3::Zero();
        xi.head(d) = AinvT * t;
        out.push_back(xi);
    }
    return out;
}

struct BandStructure {
    std::vector<Vec3> xi;
    Eigen::MatrixXd bands;  // row per wavevector, ascending
    double mu = 0.0;
    double gap = 0.0;       // 0 if a band crosses mu
    double valence_top = -kInf;
    double conduction_bottom = kInf;

    std::vector<std::pair<double, double>> intervals() const {
        std::vector<std::pair<double, double>> out;
        for (Eigen::Index b = 0; b < bands.cols(); ++b) out.push_back({bands.col(b).minCoeff(), bands.col(b).maxCoeff()});
        return out;
    }
};

inline BandStructure band_structure(const Configuration& ref, const Eigen::VectorXd& rho_ref, const Models& models,
                                    int grid, double mu, int threads = 1) {
    if (grid < 8) throw InvalidArgument("band grid needs at least 8 points per axis");
    BandStructure bs;
    bs.mu = mu;
    bs.xi = brillouin_grid(ref.lattice()->A, grid);
    const int nk = static_cast<int>(bs.xi.size());
    const int dimH = ref.lattice()->basis_size() * models.hop.n_orbitals;
    bs.bands.resize(nk, dimH);
    parallel_for(nk, threads, [&](std::size_t q) {
        const BlochMatrix M = bloch_hamiltonian(ref, rho_ref, models, bs.xi[q]);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(M.matrix, Eigen::EigenvaluesOnly);
        bs.bands.row(q) = es.eigenvalues().transpose();
    });
    bool straddle = false;
    for (int b = 0; b < dimH; ++b) {
        const double lo = bs.bands.col(b).minCoeff(), hi = bs.bands.col(b).maxCoeff();
        if (hi < mu) bs.valence_top = std::max(bs.valence_top, hi);
        else if (lo > mu) bs.conduction_bottom = std::min(bs.conduction_bottom, lo);
        else straddle = true;
    }
    bs.gap = straddle || std::isinf(bs.valence_top) || std::isinf(bs.conduction_bottom)
                 ? 0.0
                 : bs.conduction_bottom - bs.valence_top;
    return bs;
}

// Periodic supercell of the reference with M cells per axis.
inline Configuration reference_supercell(const Configuration& ref, int M) {
    if (M < 1) throw InvalidArgument("supercell size must be >= 1");
    const LatticeInfo& lat = *ref.lattice();
    return build_multilattice(lat.A, lat.basis, lat.basis_species, std::vector<int>(ref.dim(), M), true);
}

// Density of the supercell built from per-basis values (site order of build_multilattice).
inline Eigen::VectorXd tile_density(const Eigen::VectorXd& rho_basis, int n_sites) {
    Eigen::VectorXd out(n_sites);
    for (int i = 0; i < n_sites; ++i) out[i] = rho_basis[i % rho_basis.size()];
    return out;
}

// Commensurate wavevectors 2 pi A^-T j / M, j in {0..M-1}^d.
inline std::vector<Vec3> commensurate_grid(const Eigen::MatrixXd& A, int M) {
    const int d = static_cast<int>(A.rows());
    const Eigen::MatrixXd G = reciprocal_basis(A);
    int total = 1;
    for (int c = 0; c < d; ++c) total *= M;
    std::vector<Vec3> out;
    for (int code = 0; code < total; ++code) {
        Eigen::VectorXd j(d);
        int q = code;
        for (int c = 0; c < d; ++c) {
            j[c] = static_cast<double>(q % M) / M;
            q /= M;
        }
        Vec3 xi = Vec3::Zero();
        xi.head(d) = G * j;
        out.push_back(xi);
    }
    return out;
}

// Largest deviation between the sorted union of commensurate Bloch
// eigenvalues and the periodic supercell spectrum.
inline double supercell_consistency(const Configuration& ref, const Eigen::VectorXd& rho_ref, const Models& models,
                                    int M) {
    const Eigen::VectorXd rb = basis_density(ref, rho_ref);
    const Configuration sc = reference_supercell(ref, M);
    const Hamiltonian H = assemble(sc, zero_displacement(sc), tile_density(rb, sc.size()), models);
    const SpectralCache spec = diagonalize(H);
    std::vector<double> bl;
    for (const Vec3& xi : commensurate_grid(ref.lattice()->A, M)) {
        const BlochMatrix B = bloch_hamiltonian(ref, rho_ref, models, xi);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(B.matrix, Eigen::EigenvaluesOnly);
        for (Eigen::Index s = 0; s < es.eigenvalues().size(); ++s) bl.push_back(es.eigenvalues()[s]);
    }
    std::sort(bl.begin(), bl.end());
    if (static_cast<Eigen::Index>(bl.size()) != spec.values.size()) throw NumericalError("spectrum size mismatch");
    double dev = 0.0;
    for (std::size_t s = 0; s < bl.size(); ++s) dev = std::max(dev, std::abs(bl[s] - spec.values[s]));
    return dev;
}

// Phase-twisted stability operator of the reference crystal,
//   [L_xi]_{alpha beta} = sum_cells L_{(alpha, 0), (beta, c)} exp(-i (x_alpha - x_(beta,c)).xi),
// with the real-space operator taken from a periodic supercell.
class BlochStability {
public:
    // Exact eigenbasis evaluation on the supercell.
    BlochStability(const Configuration& ref, const Eigen::VectorXd& rho_ref, const Models& models,
                   const Observable& fermi_obs, int M)
        : BlochStability(ref, rho_ref, models, fermi_obs, M, std::nullopt) {}

    // Quadrature on the contour C_f.
    BlochStability(const Configuration& ref, const Eigen::VectorXd& rho_ref, const Models& models,
                   const Observable& fermi_obs, int M, const std::optional<Contour>& C_f)
        : ref_(ref), sc_(reference_supercell(ref, M)), M_(M) {
        check_fermi(fermi_obs);
        const Eigen::VectorXd rb = basis_density(ref, rho_ref);
        rho_sc_ = tile_density(rb, sc_.size());
        const Hamiltonian H = assemble(sc_, zero_displacement(sc_), rho_sc_, models);
        if (C_f) {
            const QuadratureKernels K(H, fermi_obs, *C_f);
            op_ = make_stability_operator(K.pair_kernel(), rho_sc_, models.onsite);
        } else {
            const SpectralKernels K(diagonalize(H), fermi_obs);
            op_ = make_stability_operator(K.pair_kernel(), rho_sc_, models.onsite);
        }
    }

    const Configuration& supercell() const { return sc_; }
    const StabilityOperator& supercell_operator() const { return op_; }
    int basis_size() const { return ref_.lattice()->basis_size(); }

    Eigen::MatrixXcd at(const Vec3& xi) const {
        const int nc = basis_size();
        Eigen::MatrixXcd Lx = Eigen::MatrixXcd::Zero(nc, nc);
        // Sites 0..nc-1 of the supercell form the home cell.
        for (int al = 0; al < nc; ++al)
            for (int k = 0; k < sc_.size(); ++k) {
                const int be = k % nc;
                const Vec3 r = sc_.separation(al, k);
                Lx(al, be) += op_.L(al, k) * std::exp(cd(0.0, -r.dot(xi)));
            }
        return Lx;
    }

    // min over the wavevectors of the smallest singular value of I - L_xi.
    double margin(const std::vector<Vec3>& grid) const {
        double m = kInf;
        for (const Vec3& xi : grid) {
            const Eigen::MatrixXcd Lx = at(xi);
            const Eigen::MatrixXcd A = Eigen::MatrixXcd::Identity(Lx.rows(), Lx.cols()) - Lx;
            Eigen::JacobiSVD<Eigen::MatrixXcd> svd(A);
            m = std::min(m, svd.singularValues().minCoeff());
        }
        return m < 1e-12 ? 0.0 : m;
    }

    // Largest gap between the eigenvalues of L_xi over the commensurate grid
    // and those of the supercell operator, matched after sorting by real part.
    double supercell_deviation() const {
        auto by_real = [](cd a, cd b) { return a.real() < b.real() || (a.real() == b.real() && a.imag() < b.imag()); };
        std::vector<cd> bl, sc;
        for (const Vec3& xi : commensurate_grid(ref_.lattice()->A, M_)) {
            Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(at(xi), false);
            for (Eigen::Index s = 0; s < es.eigenvalues().size(); ++s) bl.push_back(es.eigenvalues()[s]);
        }
        Eigen::EigenSolver<Eigen::MatrixXd> es(op_.L, false);
        for (Eigen::Index s = 0; s < es.eigenvalues().size(); ++s) sc.push_back(es.eigenvalues()[s]);
        if (bl.size() != sc.size()) throw NumericalError("stability spectrum size mismatch");
        std::sort(bl.begin(), bl.end(), by_real);
        std::sort(sc.begin(), sc.end(), by_real);
        double dev = 0.0;
        for (std::size_t s = 0; s < bl.size(); ++s) dev = std::max(dev, std::abs(bl[s] - sc[s]));
        return dev;
    }

private:
    Configuration ref_;
    Configuration sc_;
    int M_ = 1;
    Eigen::VectorXd rho_sc_;
    StabilityOperator op_;
};

inline Eigen::MatrixXcd bloch_stability(const Configuration& ref, const Eigen::VectorXd& rho_ref, const Models& models,
                                        const Vec3& xi, const Observable& fermi_obs, int M,
                                        const std::optional<Contour>& C_f = std::nullopt) {
    return BlochStability(ref, rho_ref, models, fermi_obs, M, C_f).at(xi);
}

}  // namespace tbloc
