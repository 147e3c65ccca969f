#pragma once

// Baum-Welch EM for the discretized-Gaussian HMM, plus penalized-likelihood
// selection of the state count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <boost/math/tools/roots.hpp>
#include <Eigen/Dense>

#include "hmmtrend/error.hpp"
#include "hmmtrend/grid.hpp"
#include "hmmtrend/hmm.hpp"
#include "hmmtrend/numeric.hpp"

namespace hmmtrend {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ForwardBackward {
    RowMatrix alpha;  // T x K, alpha_t normalized to sum 1 (the filtering distribution)
    RowMatrix beta;   // T x K, scaled by the forward normalizers
    RowMatrix gamma;  // T x K, smoothed state marginals
    std::vector<double> log_scale;  // per-t log p(z_t | z_1..t-1)
    double loglik = 0.0;
};

namespace detail {

// Emission rows shifted by their per-t maximum: out(t,k) = exp(log b_k(z_t) - m_t).
inline RowMatrix scaled_emissions(std::span<const std::size_t> snapped, const HmmParams& p,
                                  std::vector<double>& shift) {
    const auto T = static_cast<Eigen::Index>(snapped.size());
    const auto K = static_cast<Eigen::Index>(p.K());
    RowMatrix b(T, K);
    shift.resize(snapped.size());
    for (Eigen::Index t = 0; t < T; ++t) {
        double m = kNegInf;
        for (Eigen::Index k = 0; k < K; ++k) {
            b(t, k) = p.log_emission(static_cast<std::size_t>(k), snapped[t]);
            m = std::max(m, b(t, k));
        }
        if (!std::isfinite(m)) throw DegenerateLikelihood(static_cast<std::size_t>(t) + 1);
        for (Eigen::Index k = 0; k < K; ++k) b(t, k) = std::exp(b(t, k) - m);
        shift[t] = m;
    }
    return b;
}

inline std::vector<std::size_t> snap_all(std::span<const double> data, const TrendGrid& grid) {
    std::vector<std::size_t> idx(data.size());
    for (std::size_t t = 0; t < data.size(); ++t) idx[t] = grid.snap(data[t]);
    return idx;
}

struct TransitionCounts {
    Eigen::MatrixXd xi_sum;
};

inline ForwardBackward forward_backward_impl(std::span<const std::size_t> snapped,
                                             const HmmParams& p, TransitionCounts* counts) {
    if (snapped.empty()) throw InvalidInput("forward_backward needs data");
    const auto T = static_cast<Eigen::Index>(snapped.size());
    const auto K = static_cast<Eigen::Index>(p.K());
    std::vector<double> shift;
    const RowMatrix b = scaled_emissions(snapped, p, shift);
    const Eigen::MatrixXd& A = p.A();

    ForwardBackward fb;
    fb.alpha.resize(T, K);
    fb.beta.resize(T, K);
    fb.log_scale.resize(snapped.size());
    std::vector<double> c(snapped.size());

    Eigen::VectorXd tmp(K);
    for (Eigen::Index t = 0; t < T; ++t) {
        if (t == 0)
            tmp = p.pi();
        else
            tmp.noalias() = A.transpose() * fb.alpha.row(t - 1).transpose();
        double ct = 0.0;
        for (Eigen::Index k = 0; k < K; ++k) {
            tmp(k) *= b(t, k);
            ct += tmp(k);
        }
        if (!(ct > 0.0) || !std::isfinite(ct)) throw DegenerateLikelihood(static_cast<std::size_t>(t) + 1);
        fb.alpha.row(t) = tmp.transpose() / ct;
        c[t] = ct;
        fb.log_scale[t] = shift[t] + std::log(ct);
        fb.loglik += fb.log_scale[t];
    }

    fb.beta.row(T - 1).setOnes();
    for (Eigen::Index t = T - 2; t >= 0; --t) {
        for (Eigen::Index k = 0; k < K; ++k) tmp(k) = b(t + 1, k) * fb.beta(t + 1, k);
        fb.beta.row(t) = (A * tmp).transpose() / c[t + 1];
    }
    fb.gamma = fb.alpha.cwiseProduct(fb.beta);
    for (Eigen::Index t = 0; t < T; ++t) {
        const double s = fb.gamma.row(t).sum();
        fb.gamma.row(t) /= s;
    }

    if (counts) {
        counts->xi_sum = Eigen::MatrixXd::Zero(K, K);
        for (Eigen::Index t = 0; t + 1 < T; ++t) {
            for (Eigen::Index k = 0; k < K; ++k) tmp(k) = b(t + 1, k) * fb.beta(t + 1, k) / c[t + 1];
            counts->xi_sum.noalias() += fb.alpha.row(t).transpose() * tmp.transpose();
        }
        counts->xi_sum = counts->xi_sum.cwiseProduct(A);
    }
    return fb;
}

}  // namespace detail

/// Scaled forward-backward pass. gamma rows sum to one; loglik matches
/// log_likelihood() for the same data and parameters.
inline ForwardBackward forward_backward(std::span<const double> data, const HmmParams& params) {
    const auto snapped = detail::snap_all(data, params.grid());
    return detail::forward_backward_impl(snapped, params, nullptr);
}

struct DiscretizedGaussianFit {
    double mu;
    double sigma2;
};

/// Maximizes sum_g w_g log pmf(g; mu, sigma2) over the grid with sigma2 >= floor.
/// The family is exponential with sufficient statistics (g, g^2), so the optimum
/// matches the pmf's first two moments to the weighted ones; with the variance
/// pinned at the floor only the mean is matched.
inline DiscretizedGaussianFit fit_discretized_gaussian(const TrendGrid& grid, std::span<const double> w,
                                                       double floor) {
    const auto& g = grid.values();
    double W = 0.0, m1 = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        W += w[i];
        m1 += w[i] * g[i];
        m2 += w[i] * g[i] * g[i];
    }
    if (!(W > 0.0)) throw FitError("discretized gaussian fit with zero total weight");
    m1 /= W;
    m2 /= W;
    const double emp_var = std::max(0.0, m2 - m1 * m1);

    std::vector<double> p(g.size());
    auto moments = [&](double mu, double s2, double& mean, double& var) {
        double peak = kNegInf;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double d = g[i] - mu;
            p[i] = -0.5 * d * d / s2;
            peak = std::max(peak, p[i]);
        }
        double z = 0.0, s1 = 0.0, s2m = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double e = std::exp(p[i] - peak);
            z += e;
            s1 += e * g[i];
            s2m += e * g[i] * g[i];
        }
        mean = s1 / z;
        var = std::max(0.0, s2m / z - mean * mean);
    };

    const double span = grid.omega() + grid.tick();
    boost::math::tools::eps_tolerance<double> tol(52);
    auto best_mean = [&](double s2) {
        const double reach = span + 20.0 * std::sqrt(s2);
        auto f = [&](double mu) {
            double mean, var;
            moments(mu, s2, mean, var);
            return mean - m1;
        };
        double lo = -reach, hi = reach;
        const double flo = f(lo), fhi = f(hi);
        if (flo >= 0.0) return lo;
        if (fhi <= 0.0) return hi;
        std::uintmax_t it = 200;
        const auto r = boost::math::tools::toms748_solve(f, lo, hi, flo, fhi, tol, it);
        return 0.5 * (r.first + r.second);
    };
    auto var_gap = [&](double log_s2) {
        const double s2 = std::exp(log_s2);
        const double mu = best_mean(s2);
        double mean, var;
        moments(mu, s2, mean, var);
        return emp_var - var;
    };

    const double lo = std::log(floor);
    const double hi = std::log(std::max(floor, 16.0 * span * span) * 4.0);
    const double glo = var_gap(lo);
    if (glo <= 0.0) return {best_mean(floor), floor};
    const double ghi = var_gap(hi);
    if (ghi >= 0.0) {
        const double s2 = std::exp(hi);
        return {best_mean(s2), s2};
    }
    std::uintmax_t it = 200;
    const auto r = boost::math::tools::toms748_solve(var_gap, lo, hi, glo, ghi, tol, it);
    const double s2 = std::exp(0.5 * (r.first + r.second));
    return {best_mean(s2), std::max(s2, floor)};
}

struct EmConfig {
    enum class Init { flat_start, from_params };
    int max_iterations = 200;
    double tol = 1e-6;
    std::optional<double> variance_floor;  // defaults to tick^2 / 2
    bool tied_variance = false;
    Init init = Init::flat_start;
    std::optional<HmmParams> initial;  // used with Init::from_params

    void validate() const {
        if (max_iterations < 1) throw InvalidParameter("max_iterations must be >= 1");
        if (!(tol > 0.0)) throw InvalidParameter("EM tolerance must be > 0");
        if (variance_floor && !(*variance_floor > 0.0)) throw InvalidParameter("variance floor must be > 0");
        if (init == Init::from_params && !initial) throw InvalidParameter("from_params init needs initial parameters");
    }
};

struct EmTrace {
    std::vector<double> loglik;
    int iterations = 0;
    bool converged = false;
};

struct EmResult {
    HmmParams params;
    EmTrace trace;
};

/// A = uniform, emissions at the global mean/variance, means nudged apart by
/// state-indexed offsets of 0.1 global sd so EM can separate the states.
inline HmmParams flat_start(std::span<const double> data, const TrendGrid& grid, std::size_t K,
                            double floor) {
    const auto n = static_cast<Eigen::Index>(K);
    double m = mean_of(data);
    double v = 0.0;
    for (double x : data) v += (x - m) * (x - m);
    v = std::max(v / static_cast<double>(data.size()), floor);
    const double sd = std::sqrt(v);
    Eigen::VectorXd mu(n), s2 = Eigen::VectorXd::Constant(n, v);
    for (Eigen::Index k = 0; k < n; ++k)
        mu(k) = m + 0.1 * sd * (2.0 * static_cast<double>(k) - static_cast<double>(K - 1));
    return HmmParams(Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(K)),
                     Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(K)), mu, s2, grid);
}

namespace detail {

inline HmmParams m_step(std::span<const std::size_t> snapped, const ForwardBackward& fb,
                        const TransitionCounts& counts, const HmmParams& cur, double floor, bool tied) {
    const std::size_t K = cur.K();
    const auto n = static_cast<Eigen::Index>(K);
    const TrendGrid& grid = cur.grid();
    const std::size_t G = grid.size();

    // Occupation weights accumulated per grid level.
    std::vector<double> w(K * G, 0.0);
    for (std::size_t t = 0; t < snapped.size(); ++t)
        for (std::size_t k = 0; k < K; ++k)
            w[k * G + snapped[t]] += fb.gamma(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k));

    Eigen::VectorXd mu = cur.mu(), s2 = cur.sigma2();
    if (!tied) {
        for (std::size_t k = 0; k < K; ++k) {
            std::span<const double> wk(w.data() + k * G, G);
            double W = 0.0;
            for (double x : wk) W += x;
            if (!(W > 1e-300)) continue;
            const auto fit = fit_discretized_gaussian(grid, wk, floor);
            mu(static_cast<Eigen::Index>(k)) = fit.mu;
            s2(static_cast<Eigen::Index>(k)) = fit.sigma2;
        }
    } else {
        // Shared variance: the profile objective over log sigma2 is unimodal;
        // maximize it by golden section, keeping the incumbent if no better.
        std::vector<double> Wk(K, 0.0);
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t g = 0; g < G; ++g) Wk[k] += w[k * G + g];
        auto objective = [&](double s2v, Eigen::VectorXd* mu_out) {
            double q = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                if (!(Wk[k] > 1e-300)) continue;
                // Mean matching at fixed variance.
                std::span<const double> wk(w.data() + k * G, G);
                double m1 = 0.0;
                for (std::size_t g = 0; g < G; ++g) m1 += wk[g] * grid[g];
                m1 /= Wk[k];
                auto mean_at = [&](double mu_c) {
                    const auto pmf = discretized_gaussian_pmf(grid, mu_c, s2v);
                    double e = 0.0;
                    for (std::size_t g = 0; g < G; ++g) e += pmf[g] * grid[g];
                    return e - m1;
                };
                const double reach = grid.omega() + grid.tick() + 20.0 * std::sqrt(s2v);
                double mu_k;
                const double flo = mean_at(-reach), fhi = mean_at(reach);
                if (flo >= 0.0) {
                    mu_k = -reach;
                } else if (fhi <= 0.0) {
                    mu_k = reach;
                } else {
                    std::uintmax_t it = 200;
                    const auto r = boost::math::tools::toms748_solve(
                        mean_at, -reach, reach, flo, fhi, boost::math::tools::eps_tolerance<double>(52), it);
                    mu_k = 0.5 * (r.first + r.second);
                }
                const auto pmf = discretized_gaussian_pmf(grid, mu_k, s2v);
                for (std::size_t g = 0; g < G; ++g)
                    if (wk[g] > 0.0) q += wk[g] * (pmf[g] > 0.0 ? std::log(pmf[g]) : -1e300);
                if (mu_out) (*mu_out)(static_cast<Eigen::Index>(k)) = mu_k;
            }
            return q;
        };
        const double span = grid.omega() + grid.tick();
        double a = std::log(floor), bnd = std::log(std::max(floor, 64.0 * span * span));
        const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
        double x1 = bnd - phi * (bnd - a), x2 = a + phi * (bnd - a);
        double f1 = objective(std::exp(x1), nullptr), f2 = objective(std::exp(x2), nullptr);
        for (int i = 0; i < 120 && bnd - a > 1e-13; ++i) {
            if (f1 < f2) {
                a = x1; x1 = x2; f1 = f2;
                x2 = a + phi * (bnd - a);
                f2 = objective(std::exp(x2), nullptr);
            } else {
                bnd = x2; x2 = x1; f2 = f1;
                x1 = bnd - phi * (bnd - a);
                f1 = objective(std::exp(x1), nullptr);
            }
        }
        const double s2_new = std::max(floor, std::exp(0.5 * (a + bnd)));
        Eigen::VectorXd mu_new = mu;
        objective(s2_new, &mu_new);
        mu = mu_new;
        s2.setConstant(s2_new);
    }

    Eigen::MatrixXd A = cur.A();
    for (Eigen::Index i = 0; i < n; ++i) {
        const double row = counts.xi_sum.row(i).sum();
        if (row > 1e-300) A.row(i) = counts.xi_sum.row(i) / row;
    }
    Eigen::VectorXd pi = fb.gamma.row(0).transpose();
    pi /= pi.sum();
    return HmmParams(A, pi, mu, s2, grid);
}

}  // namespace detail

/// Baum-Welch EM. Every trace entry is log p(data | Theta_i) for the i-th
/// iterate; the returned parameters are the last iterate scored.
inline EmResult baum_welch(std::span<const double> data, const TrendGrid& grid, std::size_t K,
                           const EmConfig& cfg = {}) {
    cfg.validate();
    if (K < 1) throw InvalidParameter("K must be >= 1");
    if (data.size() < 10 * K)
        throw InsufficientData("Baum-Welch needs at least 10*K observations, got " + std::to_string(data.size()));
    const double floor = cfg.variance_floor.value_or(0.5 * grid.tick() * grid.tick());
    const auto snapped = detail::snap_all(data, grid);
    {
        std::vector<std::size_t> distinct(snapped.begin(), snapped.end());
        std::sort(distinct.begin(), distinct.end());
        const auto n = static_cast<std::size_t>(std::unique(distinct.begin(), distinct.end()) - distinct.begin());
        if (n < K)
            throw FitError("K=" + std::to_string(K) + " exceeds the " + std::to_string(n) +
                           " distinct grid levels in the data");
    }

    HmmParams params = cfg.init == EmConfig::Init::from_params ? *cfg.initial : flat_start(data, grid, K, floor);
    if (params.K() != K || !(params.grid() == grid))
        throw InvalidParameter("initial parameters disagree with K or grid");

    EmTrace trace;
    for (int it = 0; it < cfg.max_iterations; ++it) {
        detail::TransitionCounts counts;
        const auto fb = detail::forward_backward_impl(snapped, params, &counts);
        trace.loglik.push_back(fb.loglik);
        trace.iterations = it + 1;
        if (it > 0) {
            const double prev = trace.loglik[trace.loglik.size() - 2];
            if (std::abs(fb.loglik - prev) <= cfg.tol * std::abs(prev)) {
                trace.converged = true;
                break;
            }
        }
        if (it + 1 == cfg.max_iterations) break;
        params = detail::m_step(snapped, fb, counts, params, floor, cfg.tied_variance);
    }
    return {std::move(params), std::move(trace)};
}

inline std::size_t free_parameter_count(std::size_t K, bool tied) {
    const std::size_t emissions = tied ? K + 1 : 2 * K;
    return K * (K - 1) + (K - 1) + emissions;
}

enum class Criterion { bic, aic };

struct KScore {
    std::size_t K = 0;
    bool ok = false;
    double loglik = 0.0;
    double aic = 0.0;  // loglik - p            (larger is better)
    double bic = 0.0;  // loglik - p/2 * ln T   (larger is better)
    int iterations = 0;
    bool converged = false;
    std::string error;
    std::optional<HmmParams> params;
};

struct KSelection {
    std::size_t best_k = 0;
    std::vector<KScore> scores;
};

/// Fits every K in k_range and picks the maximizer of the penalized log-likelihood.
inline KSelection select_k_penalized(std::span<const double> data, const TrendGrid& grid,
                                     std::span<const std::size_t> k_range, const EmConfig& cfg = {},
                                     Criterion criterion = Criterion::bic) {
    if (k_range.empty()) throw InvalidParameter("k_range must not be empty");
    KSelection sel;
    const double logT = std::log(static_cast<double>(data.size()));
    double best = kNegInf;
    for (std::size_t K : k_range) {
        KScore s;
        s.K = K;
        try {
            EmConfig c = cfg;
            c.init = EmConfig::Init::flat_start;
            c.initial.reset();
            auto r = baum_welch(data, grid, K, c);
            const auto p = static_cast<double>(free_parameter_count(K, cfg.tied_variance));
            s.loglik = r.trace.loglik.back();
            s.aic = s.loglik - p;
            s.bic = s.loglik - 0.5 * p * logT;
            s.iterations = r.trace.iterations;
            s.converged = r.trace.converged;
            s.params = std::move(r.params);
            s.ok = true;
            const double score = criterion == Criterion::bic ? s.bic : s.aic;
            if (score > best) {
                best = score;
                sel.best_k = K;
            }
        } catch (const Error& e) {
            s.error = e.what();
        }
        sel.scores.push_back(std::move(s));
    }
    if (sel.best_k == 0) throw FitError("every K in the sweep failed");
    return sel;
}

inline void write_score_csv(std::ostream& os, const KSelection& sel) {
    os << "K,loglik,AIC,BIC,iterations,converged\n";
    os.precision(17);
    for (const auto& s : sel.scores) {
        if (!s.ok) continue;
        os << s.K << ',' << s.loglik << ',' << s.aic << ',' << s.bic << ',' << s.iterations << ','
           << (s.converged ? 1 : 0) << '\n';
    }
}

}  // namespace hmmtrend
