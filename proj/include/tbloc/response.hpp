#pragma once

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <utility>
#include <vector>

#include "tbloc/kernels.hpp"
#include "tbloc/parallel.hpp"
#include "tbloc/scf.hpp"

namespace tbloc {

struct ResponseVector {
    Eigen::VectorXd phi;
    int m = 0;
    int i = 0;
};

// Derivatives of self-consistent site observables O_l at a converged state.
// The contour functionals come either from quadrature on explicit contours
// or from the exact eigenbasis evaluation; both give the same numbers.
class ResponseEngine {
public:
    ResponseEngine(const SystemState& state, Observable obs, std::shared_ptr<const ContourKernels> kf,
                   std::shared_ptr<const ContourKernels> ko)
        : state_(state), obs_(std::move(obs)), kf_(std::move(kf)), ko_(std::move(ko)) {
        const int n = state_.n_sites();
        v1_.resize(n);
        v2_.resize(n);
        for (int k = 0; k < n; ++k) {
            v1_[k] = state_.models.onsite.v1(state_.density.rho[k]);
            v2_[k] = state_.models.onsite.v2(state_.density.rho[k]);
        }
        stability_ = make_stability_operator(kf_->pair_kernel(), state_.density.rho, state_.models.onsite);
        lu_ = Eigen::PartialPivLU<Eigen::MatrixXd>(Eigen::MatrixXd::Identity(n, n) - stability_.L);
    }

    static ResponseEngine spectral(const SystemState& state, const Observable& obs) {
        auto kf = std::make_shared<SpectralKernels>(state.spec, state.fermi());
        auto ko = std::make_shared<SpectralKernels>(state.spec, obs);
        return ResponseEngine(state, obs, kf, ko);
    }

    static ResponseEngine quadrature(const SystemState& state, const Observable& obs, const Contour& C_f,
                                     const Contour& C_o) {
        auto kf = std::make_shared<QuadratureKernels>(state.H, state.fermi(), C_f);
        auto ko = std::make_shared<QuadratureKernels>(state.H, obs, C_o);
        return ResponseEngine(state, obs, kf, ko);
    }

    // Quadrature on contours built for the state's spectrum with enough nodes
    // for ~1e-13 accuracy (at least n_min).
    static ResponseEngine quadrature(const SystemState& state, const Observable& obs, int n_min = 64,
                                     double margin = 0.5) {
        const Contour C_f = build_converged_contour(state.spec.values, state.fermi(), n_min, margin);
        const Contour C_o = build_converged_contour(state.spec.values, obs, n_min, margin);
        return quadrature(state, obs, C_f, C_o);
    }

    const SystemState& state() const { return state_; }
    const Observable& observable() const { return obs_; }
    const StabilityOperator& stability() const { return stability_; }
    const ContourKernels& fermi_kernels() const { return *kf_; }
    const ContourKernels& observable_kernels() const { return *ko_; }

    Eigen::VectorXd site_values() const { return ko_->values(); }

    Eigen::MatrixXd linear_derivative(int m, int i) const {
        return hamiltonian_derivative(state_.cfg, state_.u, state_.models.hop, m, i);
    }

    ResponseVector response_vector(int m, int i) const { return {kf_->first_order(linear_derivative(m, i)), m, i}; }

    Eigen::VectorXd density_response(int m, int i) const {
        {
            std::lock_guard<std::mutex> lock(*mutex_);
            auto it = drho_cache_.find({m, i});
            if (it != drho_cache_.end()) return it->second;
        }
        check_stable();
        const Eigen::VectorXd x = lu_.solve(response_vector(m, i).phi);
        std::lock_guard<std::mutex> lock(*mutex_);
        drho_cache_.emplace(std::make_pair(m, i), x);
        return x;
    }

    // Full first-order change of H: linear part plus v'(rho) d(rho) on the diagonal.
    Eigen::MatrixXd full_derivative(int m, int i) const {
        Eigen::MatrixXd D = linear_derivative(m, i);
        add_diagonal(D, v1_.cwiseProduct(density_response(m, i)));
        return D;
    }

    // dO_l/du(m)_i for every site l.
    Eigen::VectorXd site_gradients(int m, int i) const { return ko_->first_order(full_derivative(m, i)); }

    double site_gradient(int l, int m, int i) const {
        check_site(l);
        return site_gradients(m, i)[l];
    }

    // Second density response d^2 rho / du(m)_i du(n)_j.
    Eigen::VectorXd second_density_response(int m, int i, int n, int j) const {
        const Eigen::MatrixXd A = full_derivative(m, i), B = full_derivative(n, j);
        return lu_.solve(second_source(*kf_, A, B, m, i, n, j, Eigen::VectorXd::Zero(state_.n_sites())));
    }

    // d^2 O_l / du(m)_i du(n)_j for every site l.
    Eigen::VectorXd site_hessians(int m, int i, int n, int j) const {
        check_stable();
        const Eigen::MatrixXd A = full_derivative(m, i), B = full_derivative(n, j);
        const Eigen::VectorXd zero = Eigen::VectorXd::Zero(state_.n_sites());
        const Eigen::VectorXd d2rho = lu_.solve(second_source(*kf_, A, B, m, i, n, j, zero));
        return second_source(*ko_, A, B, m, i, n, j, d2rho);
    }

    double site_hessian(int l, int m, int n, int i, int j) const {
        check_site(l);
        return site_hessians(m, i, n, j)[l];
    }

    // Gradient of sum_l O_l with respect to the listed degrees of freedom
    // (dof index = site * dim + direction).
    Eigen::VectorXd total_gradient(const std::vector<int>& dofs, int threads = 1) const {
        const int dim = state_.cfg.dim();
        Eigen::VectorXd g(dofs.size());
        parallel_for(dofs.size(), threads, [&](std::size_t q) {
            g[q] = site_gradients(dofs[q] / dim, dofs[q] % dim).sum();
        });
        return g;
    }

    // values[i](l, m) = dO_l/du(m)_i for all sites.
    std::vector<Eigen::MatrixXd> gradient_table(int threads = 1) const {
        const int n = state_.n_sites(), dim = state_.cfg.dim();
        std::vector<Eigen::MatrixXd> out(dim, Eigen::MatrixXd::Zero(n, n));
        parallel_for(static_cast<std::size_t>(n) * dim, threads, [&](std::size_t q) {
            const int m = static_cast<int>(q) / dim, i = static_cast<int>(q) % dim;
            out[i].col(m) = site_gradients(m, i);
        });
        return out;
    }

private:
    void check_site(int l) const {
        if (l < 0 || l >= state_.n_sites()) throw InvalidArgument("site index out of range");
    }

    void check_stable() const {
        if (!(stability_.margin > 0)) throw StabilityError("I - L is singular at this state");
    }

    void add_diagonal(Eigen::MatrixXd& D, const Eigen::VectorXd& w) const {
        const int nb = state_.H.n_orb;
        for (int k = 0; k < state_.n_sites(); ++k)
            for (int a = 0; a < nb; ++a) D(k * nb + a, k * nb + a) += w[k];
    }

    // second_order(A, B) + first_order(d2H^L + diag(v'' drho_a drho_b + v' d2rho)).
    Eigen::VectorXd second_source(const ContourKernels& K, const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, int m,
                                  int i, int n, int j, const Eigen::VectorXd& d2rho) const {
        Eigen::MatrixXd D = hamiltonian_second_derivative(state_.cfg, state_.u, state_.models.hop, m, i, n, j);
        const Eigen::VectorXd w =
            v2_.cwiseProduct(density_response(m, i)).cwiseProduct(density_response(n, j)) + v1_.cwiseProduct(d2rho);
        add_diagonal(D, w);
        return K.second_order(A, B) + K.first_order(D);
    }

    SystemState state_;
    Observable obs_;
    std::shared_ptr<const ContourKernels> kf_, ko_;
    Eigen::VectorXd v1_, v2_;
    StabilityOperator stability_;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
    mutable std::map<std::pair<int, int>, Eigen::VectorXd> drho_cache_;
    std::shared_ptr<std::mutex> mutex_ = std::make_shared<std::mutex>();
};

// Operation-level entry points on explicit contours.
inline ResponseVector response_vector(const SystemState& state, int m, int i, const Contour& C_f) {
    const QuadratureKernels K(state.H, state.fermi(), C_f);
    return {K.first_order(hamiltonian_derivative(state.cfg, state.u, state.models.hop, m, i)), m, i};
}

inline double site_gradient(const SystemState& state, const Observable& obs, const Contour& C_f, const Contour& C_o,
                            int l, int m, int i) {
    return ResponseEngine::quadrature(state, obs, C_f, C_o).site_gradient(l, m, i);
}

// Solved-state factory: maps a displacement to a converged state, warm
// starting from the previous density.
class StateBuilder {
public:
    StateBuilder(Configuration cfg, Models models, Thermo thermo, ScfParams params,
                 std::optional<Eigen::VectorXd> rho_guess = std::nullopt)
        : cfg_(std::move(cfg)), models_(std::move(models)), thermo_(thermo), params_(params),
          guess_(std::move(rho_guess)) {}

    SystemState operator()(const Displacement& u) const {
        SystemState s = solve_state(cfg_, u, models_, thermo_, params_, guess_);
        return s;
    }

    SystemState solve(const Displacement& u, const std::optional<Eigen::VectorXd>& guess) const {
        return solve_state(cfg_, u, models_, thermo_, params_, guess ? guess : guess_);
    }

    const Configuration& cfg() const { return cfg_; }
    const Models& models() const { return models_; }
    const Thermo& thermo() const { return thermo_; }
    const ScfParams& params() const { return params_; }
    StateBuilder with_thermo(const Thermo& t) const { return StateBuilder(cfg_, models_, t, params_, guess_); }
    StateBuilder with_params(const ScfParams& p) const { return StateBuilder(cfg_, models_, thermo_, p, guess_); }
    StateBuilder with_guess(std::optional<Eigen::VectorXd> g) const {
        return StateBuilder(cfg_, models_, thermo_, params_, std::move(g));
    }

private:
    Configuration cfg_;
    Models models_;
    Thermo thermo_;
    ScfParams params_;
    std::optional<Eigen::VectorXd> guess_;
};

struct Dof {
    int site = 0;
    int dir = 0;
};

// Central finite differences of a displacement-dependent quantity, one dof
// per derivative order (1 or 2). Richardson extrapolation combines steps h
// and h/2. Solver failures at stencil points surface as OracleError.
template <class Value>
Value fd_oracle(const std::function<Value(const Displacement&)>& quantity, const Displacement& u0,
                const std::vector<Dof>& dofs, double step, bool richardson = false) {
    if (!(step >= 1e-7 && step <= 1e-2)) throw InvalidArgument("finite-difference step must lie in [1e-7, 1e-2]");
    if (dofs.empty() || dofs.size() > 2) throw InvalidArgument("finite-difference order must be 1 or 2");
    auto eval = [&](const Displacement& u) -> Value {
        try {
            return quantity(u);
        } catch (const OracleError&) {
            throw;
        } catch (const Error& e) {
            throw OracleError(std::string("quantity failed at a stencil point: ") + e.what());
        }
    };
    auto shifted = [&](std::initializer_list<std::pair<Dof, double>> moves) {
        Displacement u = u0;
        for (const auto& [d, s] : moves) u(d.dir, d.site) += s;
        return u;
    };
    auto central = [&](double h) -> Value {
        if (dofs.size() == 1) {
            const Dof a = dofs[0];
            return (eval(shifted({{a, h}})) - eval(shifted({{a, -h}}))) / (2.0 * h);
        }
        const Dof a = dofs[0], b = dofs[1];
        return (eval(shifted({{a, h}, {b, h}})) - eval(shifted({{a, h}, {b, -h}})) - eval(shifted({{a, -h}, {b, h}})) +
                eval(shifted({{a, -h}, {b, -h}}))) /
               (4.0 * h * h);
    };
    const Value d1 = central(step);
    if (!richardson) return d1;
    const Value d2 = central(0.5 * step);
    return (4.0 * d2 - d1) / 3.0;
}

}  // namespace tbloc
