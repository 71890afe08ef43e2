#pragma once

#include <Eigen/Dense>

#include <memory>
#include <mutex>
#include <vector>

#include "tbloc/spectral.hpp"

namespace tbloc {

// Contour functionals shared by the density, stability and response
// formulas. With I_o[g] = -(1/2 pi i) \oint o(z) g(z) dz and R = (H - z)^-1:
//   values()_l             = I_o[R_ll]                       (local observable)
//   first_order(X)_l       = I_o[-(R X R)_ll]                (response to H -> H + X)
//   pair_kernel()_lk       = first_order(E_k)_l = (1/2 pi i) \oint o sum_ab (R^ab_lk)^2 dz
//   second_order(X, Y)_l   = I_o[(R X R Y R + R Y R X R)_ll]
// where subscripts ll include the trace over orbitals of site l.
class ContourKernels {
public:
    virtual ~ContourKernels() = default;
    virtual Eigen::VectorXd values() const = 0;
    virtual Eigen::VectorXd first_order(const Eigen::MatrixXd& X) const = 0;
    virtual Eigen::MatrixXd pair_kernel() const = 0;
    virtual Eigen::VectorXd second_order(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) const = 0;
    int n_sites() const { return n_sites_; }
    int n_orb() const { return n_orb_; }

protected:
    ContourKernels(int n_sites, int n_orb) : n_sites_(n_sites), n_orb_(n_orb) {}

    Eigen::VectorXd site_trace(const Eigen::VectorXd& per_row) const {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(n_sites_);
        for (int l = 0; l < n_sites_; ++l)
            for (int a = 0; a < n_orb_; ++a) out[l] += per_row[l * n_orb_ + a];
        return out;
    }

    int n_sites_;
    int n_orb_;
};

// Trapezoidal quadrature on a contour, with LU resolvents at every node.
class QuadratureKernels final : public ContourKernels {
public:
    QuadratureKernels(const Hamiltonian& H, Observable obs, Contour C)
        : ContourKernels(H.n_sites, H.n_orb), H_(H.matrix), obs_(std::move(obs)), C_(std::move(C)) {
        detail::check_contour(C_);
        const double bytes = 16.0 * static_cast<double>(H_.rows()) * H_.rows() * C_.n_quad();
        cache_ = bytes <= 256.0 * 1024 * 1024;
        if (cache_) {
            resolvents_.reserve(C_.n_quad());
            for (int q = 0; q < C_.n_quad(); ++q) resolvents_.push_back(resolvent_matrix(H_, C_.nodes[q]));
        }
    }

    const Contour& contour() const { return C_; }

    Eigen::VectorXd values() const override {
        Eigen::VectorXcd acc = Eigen::VectorXcd::Zero(H_.rows());
        for_nodes([&](int, cd w, const Eigen::MatrixXcd& R) { acc += w * R.diagonal(); });
        return finish(acc, -1.0);
    }

    Eigen::VectorXd first_order(const Eigen::MatrixXd& X) const override {
        Eigen::VectorXcd acc = Eigen::VectorXcd::Zero(H_.rows());
        const Eigen::MatrixXcd Xc = X.cast<cd>();
        for_nodes([&](int, cd w, const Eigen::MatrixXcd& R) {
            const Eigen::MatrixXcd Y = R * Xc;
            acc += w * Y.cwiseProduct(R).rowwise().sum();
        });
        return finish(acc, 1.0);
    }

    Eigen::MatrixXd pair_kernel() const override {
        Eigen::MatrixXcd acc = Eigen::MatrixXcd::Zero(n_sites_, n_sites_);
        for_nodes([&](int, cd w, const Eigen::MatrixXcd& R) {
            for (int l = 0; l < n_sites_; ++l)
                for (int k = 0; k < n_sites_; ++k) {
                    cd s = 0.0;
                    for (int a = 0; a < n_orb_; ++a)
                        for (int b = 0; b < n_orb_; ++b) {
                            const cd r = R(l * n_orb_ + a, k * n_orb_ + b);
                            s += r * r;
                        }
                    acc(l, k) += w * s;
                }
        });
        Eigen::MatrixXd out(n_sites_, n_sites_);
        for (int l = 0; l < n_sites_; ++l)
            for (int k = 0; k < n_sites_; ++k) out(l, k) = detail::checked_real(detail::mirror(acc(l, k)) / cd(0.0, 2.0 * kPi));
        return out;
    }

    Eigen::VectorXd second_order(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) const override {
        Eigen::VectorXcd acc = Eigen::VectorXcd::Zero(H_.rows());
        const Eigen::MatrixXcd Xc = X.cast<cd>(), Yc = Y.cast<cd>();
        for_nodes([&](int, cd w, const Eigen::MatrixXcd& R) {
            const Eigen::MatrixXcd A = R * Xc * R * Yc;
            acc += 2.0 * w * A.cwiseProduct(R).rowwise().sum();
        });
        return finish(acc, -1.0);
    }

private:
    template <class F>
    void for_nodes(F&& f) const {
        for (int q = 0; q < C_.n_quad(); ++q) {
            const cd w = C_.weights[q] * obs_.contour_value(C_.nodes[q]);
            if (cache_) f(q, w, resolvents_[q]);
            else f(q, w, resolvent_matrix(H_, C_.nodes[q]));
        }
    }

    // sign * (1/2 pi i) * acc, traced over orbitals.
    Eigen::VectorXd finish(const Eigen::VectorXcd& acc, double sign) const {
        Eigen::VectorXcd site = Eigen::VectorXcd::Zero(n_sites_);
        for (int l = 0; l < n_sites_; ++l)
            for (int a = 0; a < n_orb_; ++a) site[l] += detail::mirror(acc[l * n_orb_ + a]);
        Eigen::VectorXd out(n_sites_);
        for (int l = 0; l < n_sites_; ++l) out[l] = detail::checked_real(sign * site[l] / cd(0.0, 2.0 * kPi));
        return out;
    }

    Eigen::MatrixXd H_;
    Observable obs_;
    Contour C_;
    bool cache_ = false;
    std::vector<Eigen::MatrixXcd> resolvents_;
};

// The same functionals evaluated exactly in the eigenbasis: the contour
// integrals reduce to divided differences o[l_s, l_t] and o[l_s, l_t, l_r].
class SpectralKernels final : public ContourKernels {
public:
    SpectralKernels(const SpectralCache& spec, Observable obs)
        : ContourKernels(spec.n_sites, spec.n_orb), spec_(spec), obs_(std::move(obs)) {
        const int N = spec_.dimension();
        if (obs_.zero_temperature()) {
            const GapInfo g = spectral_gap(spec_.values, obs_.mu);
            if (g.at_mu) throw GapError("zero-temperature observable with an eigenvalue at mu", g.gap);
        }
        O1_.resize(N, N);
        for (int s = 0; s < N; ++s)
            for (int t = s; t < N; ++t) O1_(s, t) = O1_(t, s) = obs_.dd1(spec_.values[s], spec_.values[t]);
    }

    const Eigen::MatrixXd& first_divided_differences() const { return O1_; }

    Eigen::VectorXd values() const override { return local_observables_spectral(spec_, obs_); }

    Eigen::VectorXd first_order(const Eigen::MatrixXd& X) const override {
        const Eigen::MatrixXd& P = spec_.vectors;
        const Eigen::MatrixXd Xt = P.transpose() * X * P;
        return first_order_eigenbasis(Xt);
    }

    // Same as first_order with X already rotated into the eigenbasis.
    Eigen::VectorXd first_order_eigenbasis(const Eigen::MatrixXd& Xt) const {
        const Eigen::MatrixXd& P = spec_.vectors;
        const Eigen::MatrixXd Z = P * O1_.cwiseProduct(Xt);
        return site_trace(Z.cwiseProduct(P).rowwise().sum());
    }

    Eigen::MatrixXd pair_kernel() const override {
        const Eigen::MatrixXd& P = spec_.vectors;
        const int N = spec_.dimension();
        Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n_sites_, n_sites_);
        Eigen::MatrixXd W(N, N);
        for (int l = 0; l < n_sites_; ++l)
            for (int a = 0; a < n_orb_; ++a) {
                const int row = l * n_orb_ + a;
                W = P * P.row(row).asDiagonal();
                const Eigen::VectorXd q = (W * O1_).cwiseProduct(W).rowwise().sum();
                K.row(l) += site_trace(q).transpose();
            }
        return K;
    }

    Eigen::VectorXd second_order(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) const override {
        const Eigen::MatrixXd& P = spec_.vectors;
        return second_order_eigenbasis(P.transpose() * X * P, P.transpose() * Y * P);
    }

    Eigen::VectorXd second_order_eigenbasis(const Eigen::MatrixXd& Xt, const Eigen::MatrixXd& Yt) const {
        const int N = spec_.dimension();
        ensure_second();
        Eigen::MatrixXd T = Eigen::MatrixXd::Zero(N, N);
        for (int t = 0; t < N; ++t) {
            const Eigen::Map<const Eigen::MatrixXd> O2t(O2_.data() + static_cast<std::size_t>(t) * N * N, N, N);
            // T_sr += o[s,t,r] X_st Y_tr
            T += O2t.cwiseProduct(Xt.col(t) * Yt.row(t));
        }
        const Eigen::MatrixXd& P = spec_.vectors;
        const Eigen::MatrixXd Z = P * T;
        return 2.0 * site_trace(Z.cwiseProduct(P).rowwise().sum());
    }

private:
    void ensure_second() const { std::call_once(*o2_once_, [this] { build_second(); }); }

    void build_second() const {
        const int N = spec_.dimension();
        O2_.assign(static_cast<std::size_t>(N) * N * N, 0.0);
        const Eigen::VectorXd& l = spec_.values;
        for (int t = 0; t < N; ++t)
            for (int s = 0; s < N; ++s)
                for (int r = s; r < N; ++r) {
                    const double v = obs_.dd2(l[s], l[t], l[r]);
                    O2_[static_cast<std::size_t>(t) * N * N + static_cast<std::size_t>(r) * N + s] = v;
                    O2_[static_cast<std::size_t>(t) * N * N + static_cast<std::size_t>(s) * N + r] = v;
                }
    }

    SpectralCache spec_;
    Observable obs_;
    Eigen::MatrixXd O1_;
    mutable std::vector<double> O2_;
    std::shared_ptr<std::once_flag> o2_once_ = std::make_shared<std::once_flag>();
};

}  // namespace tbloc
