#pragma once

// Bridge-sampling estimate of the marginal likelihood p(y | K) from an MCMC
// chain, and model choice over K by maximizing it.
//
// Two importance densities q are available. The default is an equal-weight
// mixture of complete-data conditional posteriors, one per stored draw of the
// randomly relabelled chain; it inherits the chain's coverage of every
// labelling mode. The alternative is a Gaussian in unconstrained coordinates
// (additive log-ratio per transition row, means, log variances) fitted to
// mean-ordered draws and symmetrized over all K! relabellings.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "hmmtrend/error.hpp"
#include "hmmtrend/mcmc.hpp"
#include "hmmtrend/numeric.hpp"

namespace hmmtrend {

struct BridgeEstimate {
    double log_marginal = 0.0;
    double standard_error = 0.0;  // relative MSE, approximately the SE of log_marginal
    std::size_t L = 0;            // draws from q
    std::size_t N = 0;            // posterior draws
    int iterations = 0;
};

struct BridgeConfig {
    enum class Proposal { conditional_mixture, symmetric_gaussian };
    Proposal proposal = Proposal::conditional_mixture;
    std::size_t components = 1000;  // conditional_mixture only
    std::size_t max_draws = 4000;
    std::uint64_t seed = 7;
    double tol = 1e-8;
    int max_iterations = 10000;
};

inline std::size_t coordinate_count(std::size_t K) { return K * (K - 1) + 2 * K; }

inline Eigen::VectorXd to_coords(const McmcDraw& d) {
    const std::size_t K = d.K();
    const auto n = static_cast<Eigen::Index>(K);
    Eigen::VectorXd phi(static_cast<Eigen::Index>(coordinate_count(K)));
    Eigen::Index c = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double ref = std::log(d.A(i, n - 1));
        for (Eigen::Index j = 0; j + 1 < n; ++j) phi(c++) = std::log(d.A(i, j)) - ref;
    }
    for (Eigen::Index k = 0; k < n; ++k) phi(c++) = d.mu(k);
    for (Eigen::Index k = 0; k < n; ++k) phi(c++) = std::log(d.sigma2(k));
    return phi;
}

inline McmcDraw from_coords(const Eigen::VectorXd& phi, std::size_t K) {
    const auto n = static_cast<Eigen::Index>(K);
    McmcDraw d{Eigen::MatrixXd(n, n), Eigen::VectorXd(n), Eigen::VectorXd(n)};
    Eigen::Index c = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double m = 0.0;
        for (Eigen::Index j = 0; j + 1 < n; ++j) m = std::max(m, phi(c + j));
        double s = 0.0;
        for (Eigen::Index j = 0; j + 1 < n; ++j) s += (d.A(i, j) = std::exp(phi(c + j) - m));
        s += (d.A(i, n - 1) = std::exp(-m));
        d.A.row(i) /= s;
        c += n - 1;
    }
    for (Eigen::Index k = 0; k < n; ++k) d.mu(k) = phi(c++);
    for (Eigen::Index k = 0; k < n; ++k) d.sigma2(k) = std::exp(phi(c++));
    return d;
}

// log |d(coords)/d(theta)|^{-1}: sum of log a_ij plus sum of log sigma2_k.
inline double log_coords_jacobian(const McmcDraw& d) {
    return d.A.array().log().sum() + d.sigma2.array().log().sum();
}

/// Label-symmetrized Gaussian importance density, evaluated on the original
/// parameter scale.
class SymmetricGaussianProposal {
public:
    SymmetricGaussianProposal(std::span<const McmcDraw> fit_draws, std::size_t K) : K_(K) {
        const auto d = static_cast<Eigen::Index>(coordinate_count(K));
        const auto n = static_cast<double>(fit_draws.size());
        mean_ = Eigen::VectorXd::Zero(d);
        std::vector<Eigen::VectorXd> xs;
        xs.reserve(fit_draws.size());
        for (const auto& dr : fit_draws) {
            xs.push_back(to_coords(identified(dr)));
            mean_ += xs.back();
        }
        mean_ /= n;
        Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
        for (const auto& x : xs) cov.noalias() += (x - mean_) * (x - mean_).transpose();
        cov /= n - 1.0;
        cov.diagonal().array() += 1e-10 * (1.0 + cov.diagonal().mean());
        llt_.compute(cov);
        if (llt_.info() != Eigen::Success) throw BridgeFailure("importance covariance is not positive definite");
        log_norm_ = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi) -
                    llt_.matrixL().toDenseMatrix().diagonal().array().log().sum();

        std::vector<std::size_t> p(K);
        std::iota(p.begin(), p.end(), 0);
        do perms_.push_back(p);
        while (std::next_permutation(p.begin(), p.end()));
        log_nperm_ = std::log(static_cast<double>(perms_.size()));
    }

    double log_density(const McmcDraw& d) const {
        std::vector<double> terms;
        terms.reserve(perms_.size());
        for (const auto& p : perms_) {
            const Eigen::VectorXd z = llt_.matrixL().solve(to_coords(permuted(d, p)) - mean_);
            terms.push_back(log_norm_ - 0.5 * z.squaredNorm());
        }
        return log_sum_exp(terms) - log_nperm_ - log_coords_jacobian(d);
    }

    McmcDraw sample(std::mt19937_64& rng) const {
        std::normal_distribution<double> n01;
        Eigen::VectorXd z(mean_.size());
        for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = n01(rng);
        const Eigen::VectorXd phi = mean_ + llt_.matrixL() * z;
        std::uniform_int_distribution<std::size_t> pick(0, perms_.size() - 1);
        return permuted(from_coords(phi, K_), perms_[pick(rng)]);
    }

    const Eigen::VectorXd& mean() const noexcept { return mean_; }

private:
    std::size_t K_;
    Eigen::VectorXd mean_;
    Eigen::LLT<Eigen::MatrixXd> llt_;
    double log_norm_ = 0.0;
    std::vector<std::vector<std::size_t>> perms_;
    double log_nperm_ = 0.0;
};

/// Equal-weight mixture of p(theta | S_s, y) over stored draws s. Rows of A
/// are Dirichlet given the transition counts. Under the conjugate prior the
/// emissions are normal-inverse-gamma given the path; under the hierarchical
/// prior mu_k is normal given the draw's sigma2_k and sigma2_k inverse gamma
/// given the draw's mu_k and variance scale.
class ConditionalMixtureProposal {
public:
    ConditionalMixtureProposal(std::span<const McmcDraw> draws, std::span<const PathStats> paths,
                               const McmcPrior& prior, std::size_t K)
        : K_(K), conjugate_(prior.variance == McmcPrior::Variance::conjugate) {
        if (draws.size() != paths.size() || draws.empty())
            throw InvalidInput("conditional proposal needs one path per draw");
        const auto n = static_cast<Eigen::Index>(K);
        const double off = prior.off_diag(K);
        for (std::size_t s = 0; s < draws.size(); ++s) {
            const PathStats& ps = paths[s];
            Component c;
            c.alpha = ps.transitions;
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < n; ++j) c.alpha(i, j) += i == j ? prior.e_diag : off;
            c.row_norm = Eigen::VectorXd(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                double tot = 0.0, lg = 0.0;
                for (Eigen::Index j = 0; j < n; ++j) {
                    tot += c.alpha(i, j);
                    lg += std::lgamma(c.alpha(i, j));
                }
                c.row_norm(i) = std::lgamma(tot) - lg;
            }
            c.m = c.v = c.shape = c.rate = Eigen::VectorXd(n);
            for (Eigen::Index k = 0; k < n; ++k) {
                const double cnt = ps.count(k), sum = ps.sum(k);
                c.shape(k) = prior.c0 + 0.5 * cnt;
                if (conjugate_) {
                    const double kn = prior.kappa0 + cnt;
                    const double ybar = cnt > 0.0 ? sum / cnt : 0.0;
                    const double ss = std::max(0.0, ps.sum_sq(k) - cnt * ybar * ybar);
                    const double dev = ybar - prior.b0;
                    c.rate(k) = prior.C0 + 0.5 * (ss + prior.kappa0 * cnt * dev * dev / kn);
                    c.m(k) = (prior.kappa0 * prior.b0 + sum) / kn;
                    c.v(k) = kn;  // precision multiplier of sigma2
                } else {
                    const double s2 = draws[s].sigma2(k), mu = draws[s].mu(k);
                    const double prec = 1.0 / prior.B0 + cnt / s2;
                    c.v(k) = 1.0 / prec;
                    c.m(k) = c.v(k) * (prior.b0 / prior.B0 + sum / s2);
                    const double ss = std::max(0.0, ps.sum_sq(k) - 2.0 * mu * sum + cnt * mu * mu);
                    c.rate(k) = ps.C0 + 0.5 * ss;
                }
            }
            c.ig_norm = (c.shape.array() * c.rate.array().log()).sum();
            for (Eigen::Index k = 0; k < n; ++k) c.ig_norm -= std::lgamma(c.shape(k));
            comps_.push_back(std::move(c));
        }
        log_count_ = std::log(static_cast<double>(comps_.size()));
    }

    double log_density(const McmcDraw& d) const {
        const auto n = static_cast<Eigen::Index>(K_);
        const Eigen::MatrixXd logA = d.A.array().log().matrix();
        const Eigen::VectorXd logs2 = d.sigma2.array().log().matrix();
        const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
        std::vector<double> terms(comps_.size());
        for (std::size_t s = 0; s < comps_.size(); ++s) {
            const Component& c = comps_[s];
            double lq = c.ig_norm;
            if (K_ > 1) lq += c.row_norm.sum() + ((c.alpha.array() - 1.0) * logA.array()).sum();
            for (Eigen::Index k = 0; k < n; ++k) {
                const double s2 = d.sigma2(k), dm = d.mu(k) - c.m(k);
                lq -= (c.shape(k) + 1.0) * logs2(k) + c.rate(k) / s2;
                if (conjugate_)
                    lq += -half_log_2pi - 0.5 * (logs2(k) - std::log(c.v(k))) - 0.5 * c.v(k) * dm * dm / s2;
                else
                    lq += -half_log_2pi - 0.5 * std::log(c.v(k)) - 0.5 * dm * dm / c.v(k);
            }
            terms[s] = lq;
        }
        return log_sum_exp(terms) - log_count_;
    }

    McmcDraw sample(std::mt19937_64& rng) const {
        std::uniform_int_distribution<std::size_t> pick(0, comps_.size() - 1);
        std::normal_distribution<double> n01;
        const Component& c = comps_[pick(rng)];
        const auto n = static_cast<Eigen::Index>(K_);
        McmcDraw d{Eigen::MatrixXd::Ones(n, n), Eigen::VectorXd(n), Eigen::VectorXd(n)};
        if (K_ > 1)
            for (Eigen::Index i = 0; i < n; ++i) {
                for (Eigen::Index j = 0; j < n; ++j) d.A(i, j) = detail::draw_gamma(rng, c.alpha(i, j), 1.0);
                d.A.row(i) /= d.A.row(i).sum();
            }
        for (Eigen::Index k = 0; k < n; ++k) {
            d.sigma2(k) = 1.0 / detail::draw_gamma(rng, c.shape(k), c.rate(k));
            const double sd = conjugate_ ? std::sqrt(d.sigma2(k) / c.v(k)) : std::sqrt(c.v(k));
            d.mu(k) = c.m(k) + sd * n01(rng);
        }
        return d;
    }

private:
    struct Component {
        Eigen::MatrixXd alpha;
        Eigen::VectorXd row_norm, m, v, shape, rate;
        double ig_norm = 0.0;
    };
    std::size_t K_;
    bool conjugate_;
    std::vector<Component> comps_;
    double log_count_ = 0.0;
};

/// Iterated optimal-bridge estimate of log p(y | K). Odd-indexed chain draws
/// fit q; up to `cfg.max_draws` of the even-indexed draws enter the estimator,
/// alongside the same number of draws from q.
inline BridgeEstimate bridge_marginal_likelihood(const McmcChain& chain, std::span<const double> data,
                                                 const McmcPrior& prior, const BridgeConfig& cfg = {}) {
    if (chain.draws.size() < 1000) throw InsufficientData("bridge sampling needs at least 1000 chain draws");
    const std::size_t K = chain.K;

    std::vector<McmcDraw> fit;
    std::vector<PathStats> fit_paths;
    std::vector<std::size_t> est_idx;
    for (std::size_t i = 0; i < chain.draws.size(); ++i) {
        if (i % 2) fit.push_back(chain.draws[i]);
        else est_idx.push_back(i);
    }
    const std::size_t N = std::min(est_idx.size(), cfg.max_draws);
    const std::size_t stride = est_idx.size() / N;

    std::optional<SymmetricGaussianProposal> gauss;
    std::optional<ConditionalMixtureProposal> cond;
    if (cfg.proposal == BridgeConfig::Proposal::conditional_mixture) {
        if (chain.paths.size() != chain.draws.size())
            throw InvalidInput("chain carries no path statistics; use the Gaussian proposal");
        if (cfg.components == 0) throw InvalidParameter("proposal needs at least one component");
        std::vector<McmcDraw> cd;
        const std::size_t m = std::min(cfg.components, fit.size()), step = fit.size() / m;
        for (std::size_t j = 0; j < m; ++j) {
            const std::size_t i = 2 * (j * step) + 1;
            cd.push_back(chain.draws[i]);
            fit_paths.push_back(chain.paths[i]);
        }
        cond.emplace(cd, fit_paths, prior, K);
    } else {
        gauss.emplace(fit, K);
    }
    auto q_log_density = [&](const McmcDraw& d) { return cond ? cond->log_density(d) : gauss->log_density(d); };

    std::vector<double> l2(N), l1(N);
    for (std::size_t j = 0; j < N; ++j) {
        const std::size_t i = est_idx[j * stride];
        l2[j] = chain.log_posterior[i] - q_log_density(chain.draws[i]);
        if (!std::isfinite(l2[j])) throw BridgeFailure("posterior draw outside importance support");
    }
    std::mt19937_64 rng(cfg.seed);
    bool any = false;
    for (std::size_t i = 0; i < N; ++i) {
        const McmcDraw d = cond ? cond->sample(rng) : gauss->sample(rng);
        const double lp = log_posterior(data, d, prior);
        l1[i] = std::isfinite(lp) ? lp - q_log_density(d) : kNegInf;
        if (std::isnan(l1[i])) l1[i] = kNegInf;
        any = any || std::isfinite(l1[i]);
    }
    if (!any) throw BridgeFailure("all importance weights are degenerate");

    std::vector<double> sorted = l2;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(N / 2), sorted.end());
    const double shift = sorted[N / 2];
    const double nn = static_cast<double>(N);
    const double ls1 = std::log(0.5), ls2 = std::log(0.5);  // N == L

    double logr = 0.0;
    std::vector<double> num(N), den(N);
    int it = 0;
    for (; it < cfg.max_iterations; ++it) {
        for (std::size_t i = 0; i < N; ++i) {
            const double a1 = l1[i] - shift;
            num[i] = a1 == kNegInf ? kNegInf : a1 - log_add_exp(ls1 + a1, ls2 + logr);
            den[i] = -log_add_exp(ls1 + (l2[i] - shift), ls2 + logr);
        }
        const double next = (log_sum_exp(num) - std::log(nn)) - (log_sum_exp(den) - std::log(nn));
        if (!std::isfinite(next)) throw BridgeFailure("bridge recursion diverged");
        const double change = std::abs(std::expm1(next - logr));
        logr = next;
        if (change < cfg.tol) break;
    }

    // Relative mean squared error; posterior-side variance from batch means.
    std::vector<double> f1(N), f2(N);
    for (std::size_t i = 0; i < N; ++i) {
        const double a1 = l1[i] - shift;
        f1[i] = a1 == kNegInf ? 0.0 : 1.0 / (0.5 + 0.5 * std::exp(logr - a1));
        f2[i] = 1.0 / (0.5 * std::exp(l2[i] - shift - logr) + 0.5);
    }
    const double m1 = mean_of(f1), m2 = mean_of(f2);
    const double v1 = sample_variance(f1) / nn;
    const double v2 = N >= 40 ? std::pow(detail::batch_mean_se(f2, 20).second, 2) : sample_variance(f2) / nn;
    const double re2 = (m1 > 0.0 ? v1 / (m1 * m1) : INFINITY) + v2 / (m2 * m2);

    BridgeEstimate out;
    out.log_marginal = logr + shift;
    out.standard_error = std::sqrt(re2);
    out.L = N;
    out.N = N;
    out.iterations = it + 1;
    if (!std::isfinite(out.log_marginal)) throw BridgeFailure("non-finite marginal likelihood estimate");
    return out;
}

struct BridgeScore {
    std::size_t K = 0;
    bool ok = false;
    BridgeEstimate estimate;
    std::string error;
};

struct BridgeSelection {
    std::size_t best_k = 0;
    std::vector<BridgeScore> scores;
    std::vector<std::string> warnings;
};

/// Runs a chain per K and keeps the K with the largest estimated log marginal
/// likelihood. The prior's Dirichlet off-diagonal follows each K unless fixed.
inline BridgeSelection select_k_bridge(std::span<const double> data, std::span<const std::size_t> k_range,
                                       const McmcPrior& prior, const McmcConfig& mcfg,
                                       const BridgeConfig& bcfg = {}) {
    if (k_range.empty()) throw InvalidParameter("k_range is empty");
    BridgeSelection sel;
    double best = kNegInf;
    for (std::size_t K : k_range) {
        BridgeScore s;
        s.K = K;
        if (K > 6)
            sel.warnings.push_back("K=" + std::to_string(K) + ": bridge sampling is unreliable above six states");
        try {
            const auto chain = mcmc_sample(data, K, prior, mcfg);
            s.estimate = bridge_marginal_likelihood(chain, data, prior, bcfg);
            s.ok = true;
            if (s.estimate.log_marginal > best) {
                best = s.estimate.log_marginal;
                sel.best_k = K;
            }
        } catch (const Error& e) {
            s.error = e.what();
        }
        sel.scores.push_back(std::move(s));
    }
    if (sel.best_k == 0) throw FitError("bridge sampling failed for every K");
    return sel;
}

inline void write_bridge_csv(std::ostream& os, const BridgeSelection& sel) {
    const auto old = os.precision(12);
    os << "K,log_marginal,standard_error,ok\n";
    for (const auto& s : sel.scores)
        os << s.K << ',' << (s.ok ? s.estimate.log_marginal : NAN) << ','
           << (s.ok ? s.estimate.standard_error : NAN) << ',' << (s.ok ? 1 : 0) << '\n';
    os.precision(old);
}

}  // namespace hmmtrend
