#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "tbloc/parallel.hpp"
#include "tbloc/response.hpp"

namespace tbloc {

struct DecaySample {
    double r = 0.0;
    double value = 0.0;
};

// log|value| ~ log_prefactor - eta_hat * r on the samples above the floor.
struct DecayFit {
    double log_prefactor = 0.0;
    double eta_hat = 0.0;
    double r_squared = 0.0;
    double r_min = 0.0;
    double r_max = 0.0;
    int samples = 0;
    bool saturated = false;  // every sample was below the floor

    double predict(double r) const { return std::exp(log_prefactor - eta_hat * r); }
};

inline constexpr double kDecayFloor = 1e-14;

// Least-squares fit of log|value| against r. Needs at least min_samples
// samples above the floor spanning r_max / r_min >= 3.
inline DecayFit fit_decay(const std::vector<DecaySample>& samples, double floor = kDecayFloor, int min_samples = 5) {
    std::vector<DecaySample> kept;
    for (const auto& s : samples)
        if (std::isfinite(s.value) && std::abs(s.value) > floor && std::isfinite(s.r)) kept.push_back(s);
    if (static_cast<int>(kept.size()) < std::max(min_samples, 2))
        throw FitError("decay fit needs at least " + std::to_string(std::max(min_samples, 2)) + " samples above the floor");
    double r_min = kInf, r_max = -kInf;
    for (const auto& s : kept) {
        r_min = std::min(r_min, s.r);
        r_max = std::max(r_max, s.r);
    }
    if (!(r_min >= 0)) throw FitError("decay fit needs non-negative distances");
    if (r_min > 0 && r_max / r_min < 3.0) throw FitError("decay fit samples must span r_max / r_min >= 3");
    if (r_max == r_min) throw FitError("decay fit samples all share one distance");
    const double n = static_cast<double>(kept.size());
    double mr = 0.0, my = 0.0;
    for (const auto& s : kept) {
        mr += s.r;
        my += std::log(std::abs(s.value));
    }
    mr /= n;
    my /= n;
    double srr = 0.0, sry = 0.0, syy = 0.0;
    for (const auto& s : kept) {
        const double dr = s.r - mr, dy = std::log(std::abs(s.value)) - my;
        srr += dr * dr;
        sry += dr * dy;
        syy += dy * dy;
    }
    DecayFit f;
    const double slope = sry / srr;
    f.eta_hat = -slope;
    f.log_prefactor = my - slope * mr;
    double ss_res = 0.0;
    for (const auto& s : kept) {
        const double e = std::log(std::abs(s.value)) - (f.log_prefactor + slope * s.r);
        ss_res += e * e;
    }
    const double scale = std::max(1.0, std::abs(my));
    f.r_squared = syy <= 1e-24 * scale * scale * n ? 1.0 : std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
    f.r_min = r_min;
    f.r_max = r_max;
    f.samples = static_cast<int>(kept.size());
    return f;
}

// Largest |value| per distance (distances equal to within tol are merged).
inline std::vector<DecaySample> envelope(std::vector<DecaySample> samples, double tol = 1e-9) {
    std::sort(samples.begin(), samples.end(), [](const auto& a, const auto& b) { return a.r < b.r; });
    std::vector<DecaySample> out;
    for (const auto& s : samples) {
        if (!out.empty() && s.r - out.back().r <= tol)
            out.back().value = std::max(out.back().value, std::abs(s.value));
        else
            out.push_back({s.r, std::abs(s.value)});
    }
    return out;
}

struct FitWindow {
    double r_lo = 0.0;
    double r_hi = kInf;
    double drop_top = 0.1;  // fraction of the largest distances discarded
};

// Samples with r in [r_lo, r_hi], then the largest drop_top fraction of the
// distinct distances removed.
inline std::vector<DecaySample> apply_window(const std::vector<DecaySample>& samples, const FitWindow& w) {
    std::vector<double> rs;
    for (const auto& s : samples)
        if (s.r >= w.r_lo - 1e-12 && s.r <= w.r_hi + 1e-12) rs.push_back(s.r);
    std::sort(rs.begin(), rs.end());
    rs.erase(std::unique(rs.begin(), rs.end(), [](double a, double b) { return b - a <= 1e-9; }), rs.end());
    if (rs.empty()) return {};
    const std::size_t keep = rs.size() - static_cast<std::size_t>(std::floor(w.drop_top * rs.size()));
    const double r_cap = rs[std::max<std::size_t>(keep, 1) - 1];
    std::vector<DecaySample> out;
    for (const auto& s : samples)
        if (s.r >= w.r_lo - 1e-12 && s.r <= r_cap + 1e-9) out.push_back(s);
    return out;
}

// [2a, L/3] with a the smallest spacing and L the extent of the cluster
// (the supercell length for periodic systems).
inline FitWindow default_window(const Configuration& cfg) {
    const double a = cfg.min_spacing();
    double L = cfg.diameter();
    if (cfg.periodic()) L = cfg.lattice()->supercell().colwise().norm().minCoeff();
    return {2.0 * a, L / 3.0, 0.1};
}

// Resolvent decay against the bound 2/d * exp(-gamma r) with gamma half the
// fitted exponent.
struct CtPair {
    int l = 0;
    int k = 0;
    double r = 0.0;
    double value = 0.0;
    double bound = 0.0;
};

struct CtReport {
    DecayFit fit;
    double gamma = 0.0;      // exponent used in the bound
    double clearance = 0.0;  // dist(z, spectrum)
    double predicted = 0.0;  // d supplied by the caller
    int violations = 0;
    std::vector<CtPair> pairs;
};

inline CtReport ct_check(const Configuration& cfg, const Displacement& u, const Hamiltonian& H, cd z, double d,
                         const std::optional<FitWindow>& window = std::nullopt) {
    if (!(d > 0)) throw InvalidArgument("predicted clearance must be positive");
    const SpectralCache spec = diagonalize(H);
    double dist = kInf;
    for (Eigen::Index s = 0; s < spec.values.size(); ++s) dist = std::min(dist, std::abs(z - spec.values[s]));
    if (dist < 1e-8) throw NearSingularError("z lies within 1e-8 of the spectrum");
    if (dist < d * (1.0 - 1e-12)) throw NearSingularError("z is closer to the spectrum than the predicted clearance");
    const Eigen::MatrixXcd R = resolvent_matrix(H.matrix, z);
    const int n = H.n_sites, nb = H.n_orb;
    CtReport rep;
    rep.clearance = dist;
    rep.predicted = d;
    std::vector<DecaySample> samples;
    for (int l = 0; l < n; ++l)
        for (int k = 0; k < n; ++k) {
            if (l == k) continue;
            double v = 0.0;
            for (int a = 0; a < nb; ++a)
                for (int b = 0; b < nb; ++b) v = std::max(v, std::abs(R(l * nb + a, k * nb + b)));
            const double r = displaced_separation(cfg, u, l, k).norm();
            rep.pairs.push_back({l, k, r, v, 0.0});
            samples.push_back({r, v});
        }
    const FitWindow w = window ? *window : FitWindow{0.0, kInf, 0.1};
    const auto env = envelope(apply_window(samples, w));
    bool any = false;
    for (const auto& s : env) any = any || s.value > kDecayFloor;
    if (!any) {
        // All off-diagonal entries vanish: report the steepest resolvable rate.
        double r_min = kInf;
        for (const auto& s : env) r_min = std::min(r_min, s.r);
        rep.fit.saturated = true;
        rep.fit.eta_hat = std::log(1.0 / kDecayFloor) / r_min;
        rep.fit.r_squared = 1.0;
        rep.fit.r_min = r_min;
        rep.fit.r_max = r_min;
        rep.fit.log_prefactor = std::log(kDecayFloor);
    } else {
        rep.fit = fit_decay(env);
    }
    rep.gamma = 0.5 * std::max(rep.fit.eta_hat, 0.0);
    for (auto& p : rep.pairs) {
        p.bound = 2.0 / d * std::exp(-rep.gamma * p.r);
        if (p.value > p.bound) ++rep.violations;
    }
    return rep;
}

struct LocalityRow {
    int l = 0;
    int m = 0;
    int i = 0;
    int j = 0;  // second direction (order 2)
    double r = 0.0;
    double value = 0.0;
};

struct LocalityResult {
    int order = 1;
    DecayFit fit;
    FitWindow window;
    std::vector<LocalityRow> table;
};

struct LocalityOptions {
    std::optional<FitWindow> window;
    bool use_envelope = true;
    int threads = 1;
};

// Decay of dO_l/du(m) (order 1) or d^2 O_l / du(m)_i du(m)_j (order 2)
// against r_lm (order 1) or 2 r_lm (order 2).
inline LocalityResult locality_experiment(const ResponseEngine& E, int order, const LocalityOptions& opt = {}) {
    if (order != 1 && order != 2) throw InvalidArgument("locality order must be 1 or 2");
    const SystemState& st = E.state();
    const int n = st.n_sites(), dim = st.cfg.dim();
    LocalityResult res;
    res.order = order;
    res.window = opt.window ? *opt.window : default_window(st.cfg);
    if (order == 2) {
        res.window.r_lo *= 2.0;
        res.window.r_hi *= 2.0;
    }
    std::vector<std::vector<LocalityRow>> slots;
    if (order == 1) {
        slots.resize(static_cast<std::size_t>(n) * dim);
        parallel_for(slots.size(), opt.threads, [&](std::size_t q) {
            const int m = static_cast<int>(q) / dim, i = static_cast<int>(q) % dim;
            const Eigen::VectorXd g = E.site_gradients(m, i);
            for (int l = 0; l < n; ++l) {
                const double r = displaced_separation(st.cfg, st.u, l, m).norm();
                slots[q].push_back({l, m, i, i, r, g[l]});
            }
        });
    } else {
        slots.resize(static_cast<std::size_t>(n) * dim * dim);
        parallel_for(slots.size(), opt.threads, [&](std::size_t q) {
            const int m = static_cast<int>(q) / (dim * dim);
            const int i = static_cast<int>(q) / dim % dim, j = static_cast<int>(q) % dim;
            const Eigen::VectorXd h = E.site_hessians(m, i, m, j);
            for (int l = 0; l < n; ++l) {
                const double r = 2.0 * displaced_separation(st.cfg, st.u, l, m).norm();
                slots[q].push_back({l, m, i, j, r, h[l]});
            }
        });
    }
    std::vector<DecaySample> samples;
    for (const auto& s : slots)
        for (const auto& row : s) {
            res.table.push_back(row);
            samples.push_back({row.r, row.value});
        }
    auto win = apply_window(samples, res.window);
    res.fit = fit_decay(opt.use_envelope ? envelope(win) : win);
    return res;
}

// Inverse of an operator after a finite-rank update, applied through the
// base inverse action: (A + U V^T)^-1 = A^-1 - A^-1 U (I + V^T A^-1 U)^-1 V^T A^-1.
template <class Scalar>
class WoodburyInverse {
public:
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Action = std::function<Matrix(const Matrix&)>;

    WoodburyInverse(Action base_inverse, const Matrix& U, const Matrix& V) : base_(std::move(base_inverse)) {
        if (U.rows() != V.rows() || U.cols() != V.cols()) throw InvalidArgument("update factors must have equal shapes");
        rank_ = static_cast<int>(U.cols());
        if (rank_ == 0) return;
        AiU_ = base_(U);
        Vt_ = V.adjoint();
        const Matrix C = Matrix::Identity(rank_, rank_) + Vt_ * AiU_;
        Eigen::FullPivLU<Matrix> lu(C);
        const double cscale = std::max(1.0, static_cast<double>(C.cwiseAbs().maxCoeff()));
        lu.setThreshold(1e-12);
        if (!lu.isInvertible() || std::abs(lu.determinant()) < 1e-14 * std::pow(cscale, rank_))
            throw UpdateError("I + P A^-1 is singular on the range of the update");
        capacitance_ = lu;
    }

    // Update P given densely; factored as P = U V^* from its SVD, dropping
    // singular values below tol * max.
    static WoodburyInverse from_dense(Action base_inverse, const Matrix& P, double tol = 1e-13) {
        Eigen::JacobiSVD<Matrix> svd(P, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const auto& s = svd.singularValues();
        const double smax = s.size() ? static_cast<double>(s[0]) : 0.0;
        int k = 0;
        while (k < s.size() && smax > 0 && static_cast<double>(s[k]) > tol * smax) ++k;
        Matrix U = svd.matrixU().leftCols(k) * s.head(k).template cast<Scalar>().asDiagonal();
        Matrix V = svd.matrixV().leftCols(k);
        return WoodburyInverse(std::move(base_inverse), U, V);
    }

    int rank() const { return rank_; }

    Matrix apply(const Matrix& X) const {
        Matrix Y = base_(X);
        if (rank_ == 0) return Y;
        return Y - AiU_ * capacitance_.solve(Vt_ * Y);
    }

    Action action() const {
        auto self = std::make_shared<WoodburyInverse>(*this);
        return [self](const Matrix& X) { return self->apply(X); };
    }

private:
    Action base_;
    int rank_ = 0;
    Matrix AiU_, Vt_;
    Eigen::FullPivLU<Matrix> capacitance_;
};

inline std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)> dense_inverse_action(const Eigen::MatrixXd& A) {
    auto lu = std::make_shared<Eigen::PartialPivLU<Eigen::MatrixXd>>(A);
    return [lu](const Eigen::MatrixXd& X) { return Eigen::MatrixXd(lu->solve(X)); };
}

// Defect versus reference comparison on a common index set.
struct DefectBin {
    double d_lo = 0.0;
    double d_hi = 0.0;
    int pairs = 0;
    double mean_deviation = 0.0;  // mean over pairs of | |g| - |g_ref| | / |g_ref|
    double max_deviation = 0.0;
    double mean_constant = 0.0;      // mean |g| exp(eta_ref r)
    double mean_constant_ref = 0.0;  // same for the reference
};

struct DefectComparison {
    std::vector<int> defect_to_ref;  // -1 for sites without a reference partner
    std::vector<DefectBin> bins;
    std::optional<DecayFit> deviation_fit;  // bin deviation vs distance to the defect
    double eta_ref = 0.0;
    int in_gap_count = 0;
    std::vector<double> in_gap_values;
    double density_l2 = 0.0;                // |rho - rho_ref| over matched sites
    std::vector<DecaySample> density_profile;  // (distance to defect, |rho - rho_ref|)
    std::optional<DecayFit> density_fit;
    // Hamiltonian perturbation on matched sites: entries above 1e-12 and their
    // largest distance from the defect.
    int perturbed_entries = 0;
    double perturbation_reach = 0.0;
};

struct DefectOptions {
    std::optional<double> eta_ref;  // otherwise fitted on the reference
    int n_bins = 4;
    double pair_r_max = kInf;   // only pairs with r_lm <= pair_r_max enter the bins
    double rel_floor = 1e-8;    // pairs with |g_ref| below rel_floor * max|g_ref| are skipped
    double gap_delta = 0.05;    // distance from reference bands for in-gap eigenvalues
    std::vector<std::pair<double, double>> bands;  // reference band intervals; default from the reference spectrum
    double density_floor = kDecayFloor;
    int threads = 1;
};

// Number of eigenvalues at distance > delta from every band interval.
inline std::vector<double> isolated_eigenvalues(const Eigen::VectorXd& values,
                                                const std::vector<std::pair<double, double>>& bands, double delta) {
    std::vector<double> out;
    for (Eigen::Index s = 0; s < values.size(); ++s) {
        bool near = false;
        for (const auto& [lo, hi] : bands)
            if (values[s] >= lo - delta && values[s] <= hi + delta) {
                near = true;
                break;
            }
        if (!near) out.push_back(values[s]);
    }
    return out;
}

// Occupied and empty parts of a finite spectrum as two intervals.
inline std::vector<std::pair<double, double>> spectrum_intervals(const Eigen::VectorXd& values, double mu) {
    double lo_min = kInf, lo_max = -kInf, hi_min = kInf, hi_max = -kInf;
    for (Eigen::Index s = 0; s < values.size(); ++s) {
        if (values[s] < mu) {
            lo_min = std::min(lo_min, values[s]);
            lo_max = std::max(lo_max, values[s]);
        } else {
            hi_min = std::min(hi_min, values[s]);
            hi_max = std::max(hi_max, values[s]);
        }
    }
    std::vector<std::pair<double, double>> out;
    if (lo_min <= lo_max) out.push_back({lo_min, lo_max});
    if (hi_min <= hi_max) out.push_back({hi_min, hi_max});
    return out;
}

inline double distance_to_defect(const Configuration& cfg, int site) {
    return cfg.reduce(cfg.site(site) - cfg.defect_center()).norm();
}

inline DefectComparison defect_comparison(const ResponseEngine& def, const ResponseEngine& ref,
                                          const DefectOptions& opt = {}) {
    const SystemState& sd = def.state();
    const SystemState& sr = ref.state();
    const Configuration& cd_ = sd.cfg;
    const Configuration& cr = sr.cfg;
    if (cd_.dim() != cr.dim()) throw GeometryError("defect and reference dimensions differ");
    const double R = cd_.defect_radius().value_or(0.0);
    const Vec3 c = cd_.defect_center();
    DefectComparison out;
    out.defect_to_ref.assign(cd_.size(), -1);
    std::vector<bool> ref_used(cr.size(), false);
    for (int i = 0; i < cd_.size(); ++i) {
        const int j = cr.find_site(cd_.site(i));
        if (j >= 0 && cr.species(j) == cd_.species(i)) {
            out.defect_to_ref[i] = j;
            ref_used[j] = true;
        } else if (cr.reduce(cd_.site(i) - c).norm() > R + 1e-9) {
            throw GeometryError("defect site " + std::to_string(i) + " outside the defect ball has no reference partner");
        }
    }
    for (int j = 0; j < cr.size(); ++j)
        if (!ref_used[j] && cr.reduce(cr.site(j) - c).norm() > R + 1e-9)
            throw GeometryError("reference site " + std::to_string(j) + " outside the defect ball is missing");

    const int dim = cd_.dim();
    const int nd = cd_.size();
    // Gradient tables.
    const auto gd = def.gradient_table(opt.threads);
    const auto gr = ref.gradient_table(opt.threads);
    double gmax = 0.0;
    for (const auto& G : gr) gmax = std::max(gmax, G.cwiseAbs().maxCoeff());
    if (opt.eta_ref) {
        out.eta_ref = *opt.eta_ref;
    } else {
        LocalityOptions lo;
        lo.threads = opt.threads;
        out.eta_ref = locality_experiment(ref, 1, lo).fit.eta_hat;
    }

    struct PairDev {
        double dist, dev, c_def, c_ref;
    };
    std::vector<PairDev> devs;
    for (int l = 0; l < nd; ++l) {
        const int lr = out.defect_to_ref[l];
        if (lr < 0) continue;
        for (int m = 0; m < nd; ++m) {
            const int mr = out.defect_to_ref[m];
            if (mr < 0) continue;
            const double r = cd_.distance(l, m);
            if (r > opt.pair_r_max + 1e-12) continue;
            for (int i = 0; i < dim; ++i) {
                const double a = gd[i](l, m), b = gr[i](lr, mr);
                if (std::abs(b) <= opt.rel_floor * gmax) continue;
                const double w = std::exp(out.eta_ref * r);
                const double dd = std::min(distance_to_defect(cd_, l), distance_to_defect(cd_, m));
                devs.push_back({dd, std::abs(std::abs(a) - std::abs(b)) / std::abs(b), std::abs(a) * w, std::abs(b) * w});
            }
        }
    }
    if (!devs.empty() && opt.n_bins > 0) {
        double dmin = kInf, dmax = -kInf;
        for (const auto& p : devs) {
            dmin = std::min(dmin, p.dist);
            dmax = std::max(dmax, p.dist);
        }
        const double width = (dmax - dmin) / opt.n_bins;
        out.bins.resize(opt.n_bins);
        for (int b = 0; b < opt.n_bins; ++b) {
            out.bins[b].d_lo = dmin + b * width;
            out.bins[b].d_hi = dmin + (b + 1) * width;
        }
        for (const auto& p : devs) {
            int b = width > 0 ? static_cast<int>((p.dist - dmin) / width) : 0;
            b = std::clamp(b, 0, opt.n_bins - 1);
            auto& bin = out.bins[b];
            ++bin.pairs;
            bin.mean_deviation += p.dev;
            bin.max_deviation = std::max(bin.max_deviation, p.dev);
            bin.mean_constant += p.c_def;
            bin.mean_constant_ref += p.c_ref;
        }
        for (auto& bin : out.bins)
            if (bin.pairs > 0) {
                bin.mean_deviation /= bin.pairs;
                bin.mean_constant /= bin.pairs;
                bin.mean_constant_ref /= bin.pairs;
            }
        std::vector<DecaySample> bs;
        for (const auto& bin : out.bins)
            if (bin.pairs > 0) bs.push_back({0.5 * (bin.d_lo + bin.d_hi), bin.mean_deviation});
        try {
            out.deviation_fit = fit_decay(bs);
        } catch (const FitError&) {
        }
    }

    // Isolated eigenvalues of the defect Hamiltonian.
    const auto bands = opt.bands.empty() ? spectrum_intervals(sr.spec.values, sr.thermo.mu) : opt.bands;
    out.in_gap_values = isolated_eigenvalues(sd.spec.values, bands, opt.gap_delta);
    out.in_gap_count = static_cast<int>(out.in_gap_values.size());

    // Density deviation on matched sites.
    double acc = 0.0;
    for (int l = 0; l < nd; ++l) {
        const int lr = out.defect_to_ref[l];
        if (lr < 0) continue;
        const double dv = std::abs(sd.density.rho[l] - sr.density.rho[lr]);
        acc += dv * dv;
        out.density_profile.push_back({distance_to_defect(cd_, l), dv});
    }
    out.density_l2 = std::sqrt(acc);
    try {
        out.density_fit = fit_decay(out.density_profile, opt.density_floor);
    } catch (const FitError&) {
    }

    // Hamiltonian perturbation restricted to matched sites.
    const int nb = sd.H.n_orb;
    for (int l = 0; l < nd; ++l) {
        const int lr = out.defect_to_ref[l];
        if (lr < 0) continue;
        for (int k = 0; k < nd; ++k) {
            const int kr = out.defect_to_ref[k];
            if (kr < 0) continue;
            double dmax = 0.0;
            for (int a = 0; a < nb; ++a)
                for (int b = 0; b < nb; ++b)
                    dmax = std::max(dmax, std::abs(sd.H.matrix(l * nb + a, k * nb + b) -
                                                   sr.H.matrix(lr * nb + a, kr * nb + b)));
            if (dmax > 1e-12) {
                ++out.perturbed_entries;
                out.perturbation_reach = std::max(
                    out.perturbation_reach, std::min(distance_to_defect(cd_, l), distance_to_defect(cd_, k)));
            }
        }
    }
    return out;
}

}  // namespace tbloc
