#pragma once

// Core HMM data model: discretized-Gaussian emissions on a TrendGrid and the
// forward-filter prediction loop used to turn returns into position signals.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hmmtrend/error.hpp"
#include "hmmtrend/grid.hpp"
#include "hmmtrend/numeric.hpp"

namespace hmmtrend {

/// Probability mass over the grid proportional to Norm(g; mu, sigma2).
/// Levels whose density underflows relative to the peak carry exactly zero mass.
inline std::vector<double> discretized_gaussian_pmf(const TrendGrid& grid, double mu, double sigma2) {
    if (!(sigma2 > 0.0) || !std::isfinite(sigma2) || !std::isfinite(mu))
        throw InvalidParameter("discretized gaussian needs finite mu and sigma2 > 0");
    const auto& g = grid.values();
    std::vector<double> p(g.size());
    double peak = kNegInf;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = g[i] - mu;
        p[i] = -0.5 * d * d / sigma2;
        peak = std::max(peak, p[i]);
    }
    double total = 0.0;
    for (double& v : p) {
        v = std::exp(v - peak);
        total += v;
    }
    for (double& v : p) v /= total;
    return p;
}

/// Theta = {A, pi, mu, sigma2} on a fixed TrendGrid. Immutable; the emission
/// table and the per-state discretized means are computed once on construction.
class HmmParams {
public:
    HmmParams(Eigen::MatrixXd A, Eigen::VectorXd pi, Eigen::VectorXd mu, Eigen::VectorXd sigma2,
              TrendGrid grid)
        : A_(std::move(A)),
          pi_(std::move(pi)),
          mu_(std::move(mu)),
          sigma2_(std::move(sigma2)),
          grid_(std::move(grid)) {
        validate();
        build_tables();
    }

    std::size_t K() const noexcept { return static_cast<std::size_t>(mu_.size()); }
    const Eigen::MatrixXd& A() const noexcept { return A_; }
    const Eigen::VectorXd& pi() const noexcept { return pi_; }
    const Eigen::VectorXd& mu() const noexcept { return mu_; }
    const Eigen::VectorXd& sigma2() const noexcept { return sigma2_; }
    const TrendGrid& grid() const noexcept { return grid_; }
    double variance_floor() const noexcept { return 0.5 * grid_.tick() * grid_.tick(); }

    /// Mean of the grid-renormalized emission of state k (mu*_k).
    const Eigen::VectorXd& discretized_mean() const noexcept { return mu_star_; }

    double log_emission(std::size_t k, std::size_t grid_index) const {
        return log_pmf_[k * grid_.size() + grid_index];
    }

    /// Log emission of every state at the grid point nearest to dy.
    void log_emissions(double dy, std::span<double> out) const {
        const std::size_t gi = grid_.snap(dy);
        for (std::size_t k = 0; k < K(); ++k) out[k] = log_pmf_[k * grid_.size() + gi];
    }

private:
    void validate() const {
        const auto K = mu_.size();
        if (K < 1) throw InvalidParameter("HMM needs at least one state");
        if (A_.rows() != K || A_.cols() != K || pi_.size() != K || sigma2_.size() != K)
            throw InvalidParameter("HMM parameter dimensions disagree");
        for (Eigen::Index i = 0; i < K; ++i) {
            double row = 0.0;
            for (Eigen::Index j = 0; j < K; ++j) {
                const double a = A_(i, j);
                if (!(a >= 0.0 && a <= 1.0))
                    throw InvalidParameter("transition entries must lie in [0, 1]");
                row += a;
            }
            if (std::abs(row - 1.0) > 1e-12)
                throw InvalidParameter("transition row " + std::to_string(i) + " does not sum to 1");
        }
        double s = 0.0;
        for (Eigen::Index k = 0; k < K; ++k) {
            if (!(pi_(k) >= 0.0)) throw InvalidParameter("initial probabilities must be >= 0");
            s += pi_(k);
        }
        if (std::abs(s - 1.0) > 1e-12) throw InvalidParameter("initial probabilities must sum to 1");
        const double floor = variance_floor();
        for (Eigen::Index k = 0; k < K; ++k) {
            if (!std::isfinite(mu_(k))) throw InvalidParameter("emission mean must be finite");
            if (!(sigma2_(k) >= floor * (1.0 - 1e-12)) || !std::isfinite(sigma2_(k)))
                throw InvalidParameter("emission variance below the tick^2/2 floor");
        }
    }

    void build_tables() {
        const std::size_t G = grid_.size();
        log_pmf_.resize(K() * G);
        mu_star_.resize(static_cast<Eigen::Index>(K()));
        for (std::size_t k = 0; k < K(); ++k) {
            const auto pmf = discretized_gaussian_pmf(grid_, mu_(k), sigma2_(k));
            double m = 0.0;
            for (std::size_t g = 0; g < G; ++g) log_pmf_[k * G + g] = pmf[g] > 0.0 ? std::log(pmf[g]) : kNegInf;
            // mirrored pairs, so a symmetric pmf has a mean of exactly zero
            for (std::size_t g = 0; g < G / 2; ++g) m += (pmf[G - 1 - g] - pmf[g]) * grid_[G - 1 - g];
            mu_star_(static_cast<Eigen::Index>(k)) = m;
        }
    }

    Eigen::MatrixXd A_;
    Eigen::VectorXd pi_;
    Eigen::VectorXd mu_;
    Eigen::VectorXd sigma2_;
    TrendGrid grid_;
    std::vector<double> log_pmf_;
    Eigen::VectorXd mu_star_;
};

/// Relabels states: new state i is old state perm[i].
inline HmmParams permuted(const HmmParams& p, std::span<const std::size_t> perm) {
    const auto K = static_cast<Eigen::Index>(p.K());
    Eigen::MatrixXd A(K, K);
    Eigen::VectorXd pi(K), mu(K), s2(K);
    for (Eigen::Index i = 0; i < K; ++i) {
        const auto pi_i = static_cast<Eigen::Index>(perm[i]);
        pi(i) = p.pi()(pi_i);
        mu(i) = p.mu()(pi_i);
        s2(i) = p.sigma2()(pi_i);
        for (Eigen::Index j = 0; j < K; ++j) A(i, j) = p.A()(pi_i, static_cast<Eigen::Index>(perm[j]));
    }
    return HmmParams(A, pi, mu, s2, p.grid());
}

/// Row-stochastic matrix with beta on the diagonal and (1-beta)/(K-1) elsewhere.
inline Eigen::MatrixXd sticky_transition(std::size_t K, double beta) {
    const auto n = static_cast<Eigen::Index>(K);
    if (K == 1) return Eigen::MatrixXd::Ones(1, 1);
    Eigen::MatrixXd A = Eigen::MatrixXd::Constant(n, n, (1.0 - beta) / static_cast<double>(K - 1));
    A.diagonal().setConstant(beta);
    return A;
}

struct FilterState {
    Eigen::VectorXd omega_filt;  // p(m_t | dy_1..t)
    Eigen::VectorXd omega_pred;  // p(m_t | dy_1..t-1)
    std::size_t t = 0;
};

namespace detail {

// Bayes update of `pred` with the emission at dy, in log space. Returns the
// log normalizer log p(dy_t | dy_1..t-1).
inline double bayes_update(const HmmParams& params, const Eigen::VectorXd& pred, double dy,
                           std::size_t t, Eigen::VectorXd& filt) {
    const std::size_t K = params.K();
    const std::size_t gi = params.grid().snap(dy);
    double buf[64];
    std::vector<double> heap;
    double* lw = buf;
    if (K > 64) {
        heap.resize(K);
        lw = heap.data();
    }
    for (std::size_t k = 0; k < K; ++k) {
        const double pk = pred(static_cast<Eigen::Index>(k));
        lw[k] = pk > 0.0 ? std::log(pk) + params.log_emission(k, gi) : kNegInf;
    }
    const double z = log_sum_exp(std::span<const double>(lw, K));
    if (!std::isfinite(z)) throw DegenerateLikelihood(t);
    filt.resize(static_cast<Eigen::Index>(K));
    for (std::size_t k = 0; k < K; ++k) filt(static_cast<Eigen::Index>(k)) = std::exp(lw[k] - z);
    return z;
}

}  // namespace detail

inline FilterState init_filter(const HmmParams& params, double dy1) {
    FilterState s;
    s.t = 1;
    s.omega_pred = params.pi();
    detail::bayes_update(params, s.omega_pred, dy1, 1, s.omega_filt);
    return s;
}

/// omega_pred_k = sum_j a_{jk} omega_filt_j, then Bayes update with dy.
inline FilterState filter_step(const FilterState& prev, const HmmParams& params, double dy) {
    FilterState s;
    s.t = prev.t + 1;
    s.omega_pred = params.A().transpose() * prev.omega_filt;
    detail::bayes_update(params, s.omega_pred, dy, s.t, s.omega_filt);
    return s;
}

/// Expected next return under the predictive state distribution, using the
/// discretized means mu*.
inline double predict_return(const FilterState& state, const HmmParams& params) {
    return state.omega_pred.dot(params.discretized_mean());
}

/// log p(dy_1..T | Theta) from the forward recursion's normalizers.
inline double log_likelihood(std::span<const double> returns, const HmmParams& params) {
    if (returns.empty()) throw InvalidInput("log_likelihood needs at least one return");
    Eigen::VectorXd pred = params.pi();
    Eigen::VectorXd filt;
    double ll = 0.0;
    for (std::size_t t = 0; t < returns.size(); ++t) {
        if (t > 0) pred.noalias() = params.A().transpose() * filt;
        ll += detail::bayes_update(params, pred, returns[t], t + 1, filt);
    }
    return ll;
}

/// Map from predicted return to a position in [-1, 1].
struct TransferFunction {
    enum class Kind { sign, linear_clip, identity };
    Kind kind = Kind::sign;
    double scale = 1.0;  // linear_clip only

    double operator()(double x) const {
        switch (kind) {
            case Kind::sign: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            case Kind::linear_clip: return std::clamp(scale * x, -1.0, 1.0);
            case Kind::identity: return std::clamp(x, -1.0, 1.0);
        }
        return 0.0;
    }

    static TransferFunction parse(std::string_view name, double scale = 1.0) {
        if (name == "sign") return {Kind::sign, scale};
        if (name == "linear" || name == "linear-clip") return {Kind::linear_clip, scale};
        if (name == "identity") return {Kind::identity, scale};
        throw InvalidParameter("unknown transfer function '" + std::string(name) + "'");
    }
};

/// signal[t] = tf(prediction of returns[t] made from returns[0..t-1]); the
/// filter then absorbs returns[t]. signal[0] uses the prior pi.
inline std::vector<double> run_hmm_signal(std::span<const double> returns, const HmmParams& params,
                                          const TransferFunction& tf) {
    if (returns.empty()) throw InvalidInput("run_hmm_signal needs at least one return");
    std::vector<double> signal(returns.size());
    FilterState state;
    state.omega_pred = params.pi();
    signal[0] = tf(predict_return(state, params));
    state = init_filter(params, returns[0]);
    for (std::size_t t = 1; t < returns.size(); ++t) {
        Eigen::VectorXd pred = params.A().transpose() * state.omega_filt;
        signal[t] = tf(pred.dot(params.discretized_mean()));
        state.t = t + 1;
        state.omega_pred = std::move(pred);
        detail::bayes_update(params, state.omega_pred, returns[t], state.t, state.omega_filt);
    }
    return signal;
}

}  // namespace hmmtrend
