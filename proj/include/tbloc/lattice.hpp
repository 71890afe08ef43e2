#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "tbloc/errors.hpp"

namespace tbloc {

// Positions are stored in 3-vectors; components beyond dim are zero.
using Vec3 = Eigen::Vector3d;
using Points = Eigen::Matrix3Xd;

// Reference multi-lattice: sites gamma0 + A*gamma with gamma0 in the basis.
struct LatticeInfo {
    Eigen::MatrixXd A;              // dim x dim, columns are lattice vectors
    Eigen::MatrixXd basis;          // dim x nb offsets
    std::vector<std::string> basis_species;
    std::vector<int> repeats;       // cells per axis
    bool periodic = false;

    int dim() const { return static_cast<int>(A.rows()); }
    int basis_size() const { return static_cast<int>(basis.cols()); }

    // Supercell vectors as columns (A scaled by the repeat counts).
    Eigen::MatrixXd supercell() const {
        Eigen::MatrixXd L = A;
        for (int j = 0; j < dim(); ++j) L.col(j) *= repeats[j];
        return L;
    }
};

class Configuration {
public:
    Configuration() = default;

    Configuration(int dim, Points sites, std::vector<std::string> species,
                  std::optional<LatticeInfo> lattice = std::nullopt,
                  std::optional<double> defect_radius = std::nullopt,
                  Vec3 defect_center = Vec3::Zero())
        : dim_(dim), sites_(std::move(sites)), species_(std::move(species)),
          lattice_(std::move(lattice)), defect_radius_(defect_radius),
          defect_center_(defect_center) {
        if (dim_ < 1 || dim_ > 3) throw InvalidArgument("dimension must be 1, 2 or 3");
        if (sites_.cols() != static_cast<Eigen::Index>(species_.size()))
            throw InvalidArgument("species count does not match site count");
        if (sites_.cols() == 0) throw InvalidArgument("configuration has no sites");
        for (Eigen::Index j = 0; j < sites_.cols(); ++j)
            for (int c = dim_; c < 3; ++c) sites_(c, j) = 0.0;
        if (lattice_) {
            if (lattice_->dim() != dim_) throw InvalidArgument("lattice dimension mismatch");
            if (std::abs(lattice_->A.determinant()) < 1e-12) throw InvalidArgument("singular lattice matrix");
            Eigen::MatrixXd L = lattice_->supercell();
            supercell_inv_ = L.inverse();
        }
        check_distinct();
        if (lattice_) check_lattice_membership();
    }

    int dim() const { return dim_; }
    int size() const { return static_cast<int>(sites_.cols()); }
    const Points& sites() const { return sites_; }
    Vec3 site(int i) const { return sites_.col(i); }
    const std::string& species(int i) const { return species_[i]; }
    const std::vector<std::string>& species() const { return species_; }
    const std::optional<LatticeInfo>& lattice() const { return lattice_; }
    bool periodic() const { return lattice_ && lattice_->periodic; }
    const std::optional<double>& defect_radius() const { return defect_radius_; }
    const Vec3& defect_center() const { return defect_center_; }

    // Separation x_i - x_j, reduced to the shortest periodic image if periodic.
    Vec3 separation(int i, int j) const { return reduce(sites_.col(i) - sites_.col(j)); }

    double distance(int i, int j) const { return separation(i, j).norm(); }

    Vec3 reduce(const Vec3& delta) const {
        if (!periodic()) return delta;
        const int d = dim_;
        Eigen::MatrixXd L = lattice_->supercell();
        Eigen::VectorXd frac = supercell_inv_ * delta.head(d);
        for (int c = 0; c < d; ++c) frac[c] -= std::round(frac[c]);
        Eigen::VectorXd base = L * frac;
        // Check neighbouring images; rounding is not exact for skewed cells.
        Eigen::VectorXd best = base;
        double best_norm = base.norm();
        const int n_img = d == 1 ? 3 : (d == 2 ? 9 : 27);
        for (int code = 0; code < n_img; ++code) {
            int t = code;
            Eigen::VectorXd shift = Eigen::VectorXd::Zero(d);
            for (int c = 0; c < d; ++c) {
                shift += static_cast<double>(t % 3 - 1) * L.col(c);
                t /= 3;
            }
            Eigen::VectorXd cand = base + shift;
            if (cand.norm() < best_norm - 1e-14) {
                best = cand;
                best_norm = cand.norm();
            }
        }
        Vec3 out = Vec3::Zero();
        out.head(d) = best;
        return out;
    }

    // Supercell translations L*gamma with |L*gamma| <= radius.
    std::vector<Vec3> image_shifts(double radius) const {
        std::vector<Vec3> out;
        if (!periodic()) {
            out.push_back(Vec3::Zero());
            return out;
        }
        const int d = dim_;
        Eigen::MatrixXd L = lattice_->supercell();
        // Bound on |gamma_c| from the dual basis: |gamma_c| <= radius * |row c of L^-1|.
        std::vector<int> range(d);
        for (int c = 0; c < d; ++c)
            range[c] = static_cast<int>(std::ceil(radius * supercell_inv_.row(c).norm())) + 1;
        std::vector<int> g(d, 0);
        for (int c = 0; c < d; ++c) g[c] = -range[c];
        while (true) {
            Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
            for (int c = 0; c < d; ++c) v += g[c] * L.col(c);
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

    // Largest reference pair distance (minimum image if periodic).
    double diameter() const {
        double r = 0.0;
        for (int i = 0; i < size(); ++i)
            for (int j = i + 1; j < size(); ++j) r = std::max(r, distance(i, j));
        return r;
    }

    // Smallest reference pair distance.
    double min_spacing() const {
        double r = std::numeric_limits<double>::infinity();
        for (int i = 0; i < size(); ++i)
            for (int j = i + 1; j < size(); ++j) r = std::min(r, distance(i, j));
        return r;
    }

    // Index of the site at position x (within tol), or -1.
    int find_site(const Vec3& x, double tol = 1e-9) const {
        for (int i = 0; i < size(); ++i)
            if (reduce(sites_.col(i) - x).norm() <= tol) return i;
        return -1;
    }

private:
    void check_distinct() const {
        for (int i = 0; i < size(); ++i)
            for (int j = i + 1; j < size(); ++j)
                if (distance(i, j) <= 1e-12)
                    throw GeometryError("coincident sites " + std::to_string(i) + " and " + std::to_string(j));
    }

    bool on_lattice(const Vec3& x) const {
        const LatticeInfo& lat = *lattice_;
        const int d = dim_;
        Eigen::MatrixXd Ainv = lat.A.inverse();
        for (int b = 0; b < lat.basis_size(); ++b) {
            Eigen::VectorXd g = Ainv * (x.head(d) - lat.basis.col(b));
            bool ok = true;
            for (int c = 0; c < d; ++c) {
                double r = std::round(g[c]);
                if (std::abs(g[c] - r) > 1e-8) { ok = false; break; }
                if (!lat.periodic && (r < 0 || r >= lat.repeats[c])) { ok = false; break; }
            }
            if (ok) return true;
        }
        return false;
    }

    void check_lattice_membership() const {
        for (int i = 0; i < size(); ++i) {
            if (defect_radius_ && (sites_.col(i) - defect_center_).norm() <= *defect_radius_ + 1e-12) continue;
            if (!on_lattice(sites_.col(i)))
                throw GeometryError("site " + std::to_string(i) + " is not a lattice site outside the defect ball");
        }
    }

    int dim_ = 1;
    Points sites_;
    std::vector<std::string> species_;
    std::optional<LatticeInfo> lattice_;
    std::optional<double> defect_radius_;
    Vec3 defect_center_ = Vec3::Zero();
    Eigen::MatrixXd supercell_inv_;
};

inline Configuration build_multilattice(const Eigen::MatrixXd& A, const Eigen::MatrixXd& basis,
                                        const std::vector<std::string>& basis_species,
                                        const std::vector<int>& repeats, bool periodic) {
    const int d = static_cast<int>(A.rows());
    if (A.cols() != d || d < 1 || d > 3) throw InvalidArgument("lattice matrix must be square of size 1..3");
    if (std::abs(A.determinant()) < 1e-12) throw InvalidArgument("singular lattice matrix");
    if (basis.rows() != d || basis.cols() < 1) throw InvalidArgument("basis offsets must be dim x nb");
    if (static_cast<Eigen::Index>(basis_species.size()) != basis.cols())
        throw InvalidArgument("one species per basis offset required");
    if (static_cast<int>(repeats.size()) != d) throw InvalidArgument("one repeat count per axis required");
    for (int r : repeats)
        if (r < 1) throw InvalidArgument("repeat counts must be >= 1");

    int cells = 1;
    for (int r : repeats) cells *= r;
    const int nb = static_cast<int>(basis.cols());
    Points sites(3, static_cast<Eigen::Index>(cells) * nb);
    sites.setZero();
    std::vector<std::string> species;
    species.reserve(cells * nb);
    std::vector<int> g(d, 0);
    int idx = 0;
    for (int cell = 0; cell < cells; ++cell) {
        Eigen::VectorXd shift = Eigen::VectorXd::Zero(d);
        for (int c = 0; c < d; ++c) shift += g[c] * A.col(c);
        for (int b = 0; b < nb; ++b) {
            sites.col(idx).head(d) = basis.col(b) + shift;
            species.push_back(basis_species[b]);
            ++idx;
        }
        for (int c = 0; c < d; ++c) {
            if (++g[c] < repeats[c]) break;
            g[c] = 0;
        }
    }
    LatticeInfo lat{A, basis, basis_species, repeats, periodic};
    return Configuration(d, std::move(sites), std::move(species), lat);
}

inline Configuration build_chain(int n, double a, const std::string& species = "A") {
    if (n < 1) throw InvalidArgument("chain needs at least one site");
    if (!(a > 0)) throw InvalidArgument("lattice constant must be positive");
    Eigen::MatrixXd A(1, 1);
    A(0, 0) = a;
    Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(1, 1);
    return build_multilattice(A, basis, {species}, {n}, false);
}

// A point-defect edit. Exactly one of the alternatives is active.
struct DefectEdit {
    enum class Kind { Vacancy, Interstitial, Substitution };
    Kind kind = Kind::Vacancy;
    int site = -1;                 // vacancy, substitution
    Vec3 position = Vec3::Zero();  // interstitial
    std::string species;           // interstitial, substitution

    static DefectEdit vacancy(int site) { return {Kind::Vacancy, site, Vec3::Zero(), {}}; }
    static DefectEdit interstitial(const Vec3& x, std::string sp) { return {Kind::Interstitial, -1, x, std::move(sp)}; }
    static DefectEdit substitution(int site, std::string sp) { return {Kind::Substitution, site, Vec3::Zero(), std::move(sp)}; }
};

// Applies an edit that must lie in the closed ball of radius `declared_radius`
// about `center`. The result records the smallest such ball containing all
// edits so far.
inline Configuration apply_point_defect(const Configuration& cfg, const DefectEdit& edit,
                                        const Vec3& center, double declared_radius) {
    if (!(declared_radius >= 0)) throw InvalidArgument("defect radius must be non-negative");
    if (cfg.defect_radius() && (cfg.defect_center() - center).norm() > 1e-12)
        throw InvalidArgument("defect centre differs from the one already recorded");
    Vec3 where;
    if (edit.kind == DefectEdit::Kind::Interstitial) {
        where = edit.position;
    } else {
        if (edit.site < 0 || edit.site >= cfg.size()) throw InvalidArgument("defect site index out of range");
        where = cfg.site(edit.site);
    }
    const double dist = cfg.reduce(where - center).norm();
    if (dist > declared_radius + 1e-12)
        throw InvalidArgument("defect edit lies outside the declared defect radius");

    const int n = cfg.size();
    Points sites = cfg.sites();
    std::vector<std::string> species = cfg.species();
    switch (edit.kind) {
    case DefectEdit::Kind::Vacancy: {
        if (n < 2) throw InvalidArgument("cannot remove the only site");
        Points out(3, n - 1);
        std::vector<std::string> sp;
        sp.reserve(n - 1);
        for (int i = 0, j = 0; i < n; ++i) {
            if (i == edit.site) continue;
            out.col(j++) = sites.col(i);
            sp.push_back(species[i]);
        }
        sites = std::move(out);
        species = std::move(sp);
        break;
    }
    case DefectEdit::Kind::Interstitial: {
        Points out(3, n + 1);
        out.leftCols(n) = sites;
        out.col(n) = where;
        sites = std::move(out);
        species.push_back(edit.species.empty() ? cfg.species(0) : edit.species);
        break;
    }
    case DefectEdit::Kind::Substitution:
        species[edit.site] = edit.species;
        break;
    }
    const double radius = std::max(dist, cfg.defect_radius().value_or(0.0));
    return Configuration(cfg.dim(), std::move(sites), std::move(species), cfg.lattice(), radius, center);
}

// Per-site displacement field with the same layout as Configuration::sites().
using Displacement = Points;

inline Displacement zero_displacement(const Configuration& cfg) {
    return Displacement::Zero(3, cfg.size());
}

inline void check_displacement(const Configuration& cfg, const Displacement& u) {
    if (u.cols() != cfg.size()) throw InvalidArgument("displacement length does not match site count");
    if (!u.allFinite()) throw InvalidArgument("displacement has non-finite entries");
}

// Displaced separation x_i + u_i - x_j - u_j using the reference minimum image.
inline Vec3 displaced_separation(const Configuration& cfg, const Displacement& u, int i, int j) {
    return cfg.separation(i, j) + u.col(i) - u.col(j);
}

inline double noninterpenetration_constant(const Configuration& cfg, const Displacement& u) {
    check_displacement(cfg, u);
    if (cfg.size() < 2) throw UndefinedQuantity("non-interpenetration constant needs at least two sites");
    double m = std::numeric_limits<double>::infinity();
    for (int i = 0; i < cfg.size(); ++i)
        for (int j = i + 1; j < cfg.size(); ++j) {
            const double r0 = cfg.distance(i, j);
            Vec3 r = cfg.reduce(cfg.sites().col(i) + u.col(i) - cfg.sites().col(j) - u.col(j));
            m = std::min(m, r.norm() / r0);
        }
    return m;
}

struct StencilWeights {
    double upsilon = 1.0;
    double cutoff = 0.0;

    // Cutoff chosen so that exp(-2*upsilon*cutoff) < 1e-14.
    static StencilWeights with_default_cutoff(double upsilon) {
        if (!(upsilon > 0)) throw InvalidArgument("upsilon must be positive");
        return {upsilon, std::log(1e14) / (2.0 * upsilon) * (1.0 + 1e-12)};
    }
};

// Squared stencil seminorm: sum over sites and stencil vectors sigma with
// |sigma| <= cutoff of exp(-2*upsilon*|sigma|) * |u(l+sigma) - u(l)|^2.
inline double stencil_seminorm_sq(const Configuration& cfg, const Displacement& u, const StencilWeights& w) {
    check_displacement(cfg, u);
    if (!(w.upsilon > 0) || !(w.cutoff > 0)) throw InvalidArgument("invalid stencil weights");
    const int n = cfg.size();
    const auto shifts = cfg.image_shifts(w.cutoff + cfg.diameter());
    double total = 0.0;
    for (int l = 0; l < n; ++l) {
        for (int k = 0; k < n; ++k) {
            const double du2 = (u.col(k) - u.col(l)).squaredNorm();
            const Vec3 base = cfg.separation(k, l);
            double weight = 0.0;
            for (const Vec3& s : shifts) {
                const double r = (base + s).norm();
                if (r == 0.0 || r > w.cutoff) continue;
                weight += std::exp(-2.0 * w.upsilon * r);
            }
            total += weight * du2;
        }
    }
    return total;
}

inline double stencil_seminorm(const Configuration& cfg, const Displacement& u, const StencilWeights& w) {
    return std::sqrt(stencil_seminorm_sq(cfg, u, w));
}

// Plain-text configuration format:
//   dim d / periodic 0|1 / [cell A (row-major)] / [basis nb + nb lines] /
//   [repeats ...] / [defect_center x..] / [defect_radius r] / sites n + n lines
inline void write_configuration(std::ostream& os, const Configuration& cfg) {
    const int d = cfg.dim();
    os.precision(17);
    os << "dim " << d << "\n";
    os << "periodic " << (cfg.periodic() ? 1 : 0) << "\n";
    if (const auto& lat = cfg.lattice()) {
        os << "cell";
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) os << ' ' << lat->A(r, c);
        os << "\nbasis " << lat->basis_size() << "\n";
        for (int b = 0; b < lat->basis_size(); ++b) {
            for (int c = 0; c < d; ++c) os << lat->basis(c, b) << ' ';
            os << lat->basis_species[b] << "\n";
        }
        os << "repeats";
        for (int r : lat->repeats) os << ' ' << r;
        os << "\n";
    }
    if (cfg.defect_radius()) {
        os << "defect_center";
        for (int c = 0; c < d; ++c) os << ' ' << cfg.defect_center()[c];
        os << "\ndefect_radius " << *cfg.defect_radius() << "\n";
    }
    os << "sites " << cfg.size() << "\n";
    for (int i = 0; i < cfg.size(); ++i) {
        for (int c = 0; c < d; ++c) os << cfg.site(i)[c] << ' ';
        os << cfg.species(i) << "\n";
    }
}

inline Configuration read_configuration(std::istream& is) {
    int d = 0;
    bool periodic = false;
    bool have_lattice = false;
    Eigen::MatrixXd A, basis;
    std::vector<std::string> basis_species;
    std::vector<int> repeats;
    std::optional<double> radius;
    Vec3 center = Vec3::Zero();
    Points sites;
    std::vector<std::string> species;
    std::string key;
    int line_no = 0;
    auto fail = [&](const std::string& msg) {
        throw InvalidArgument("configuration text, near line " + std::to_string(line_no) + ": " + msg);
    };
    auto read_line = [&](std::istringstream& ls) {
        std::string line;
        do {
            if (!std::getline(is, line)) fail("unexpected end of input");
            ++line_no;
        } while (line.empty() || line[0] == '#');
        ls.clear();
        ls.str(line);
    };
    auto read_site = [&](std::istringstream& ls, Vec3& x, std::string& sp) {
        x.setZero();
        for (int c = 0; c < d; ++c)
            if (!(ls >> x[c])) fail("expected coordinate");
        if (!(ls >> sp)) fail("expected species label");
    };
    std::string line;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        ls >> key;
        if (key == "dim") {
            ls >> d;
            if (d < 1 || d > 3) fail("dim must be 1..3");
        } else if (key == "periodic") {
            int p = 0;
            ls >> p;
            periodic = p != 0;
        } else if (key == "cell") {
            if (d == 0) fail("dim must precede cell");
            A.resize(d, d);
            for (int r = 0; r < d; ++r)
                for (int c = 0; c < d; ++c)
                    if (!(ls >> A(r, c))) fail("incomplete cell matrix");
            have_lattice = true;
        } else if (key == "basis") {
            int nb = 0;
            ls >> nb;
            if (nb < 1) fail("basis needs at least one offset");
            basis.resize(d, nb);
            basis_species.resize(nb);
            for (int b = 0; b < nb; ++b) {
                std::istringstream bs;
                read_line(bs);
                Vec3 x;
                read_site(bs, x, basis_species[b]);
                basis.col(b) = x.head(d);
            }
        } else if (key == "repeats") {
            repeats.assign(d, 0);
            for (int c = 0; c < d; ++c)
                if (!(ls >> repeats[c])) fail("incomplete repeats");
        } else if (key == "defect_center") {
            for (int c = 0; c < d; ++c)
                if (!(ls >> center[c])) fail("incomplete defect centre");
        } else if (key == "defect_radius") {
            double r = 0;
            if (!(ls >> r)) fail("missing defect radius");
            radius = r;
        } else if (key == "sites") {
            int n = 0;
            ls >> n;
            if (n < 1) fail("site count must be positive");
            sites.resize(3, n);
            species.resize(n);
            for (int i = 0; i < n; ++i) {
                std::istringstream ss;
                read_line(ss);
                Vec3 x;
                read_site(ss, x, species[i]);
                sites.col(i) = x;
            }
        } else {
            fail("unknown key '" + key + "'");
        }
    }
    if (d == 0) fail("missing dim");
    if (sites.cols() == 0) fail("missing sites");
    std::optional<LatticeInfo> lat;
    if (have_lattice) {
        if (basis.cols() == 0 || static_cast<int>(repeats.size()) != d) fail("lattice needs basis and repeats");
        lat = LatticeInfo{A, basis, basis_species, repeats, periodic};
    } else if (periodic) {
        fail("periodic configuration needs a cell");
    }
    return Configuration(d, std::move(sites), std::move(species), lat, radius, center);
}

}  // namespace tbloc
