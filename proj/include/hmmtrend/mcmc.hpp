#pragma once

// Data-augmented Gibbs sampling for Gaussian-emission HMMs: forward-filter
// backward-sample of the latent path, conjugate draws of transition rows and
// emission parameters, then a random relabelling of the states.
//
// The sampler works with continuous Gaussian emission densities so that every
// conditional is conjugate; the initial state is uniform.

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

#include <Eigen/Dense>

#include "hmmtrend/error.hpp"
#include "hmmtrend/grid.hpp"
#include "hmmtrend/hmm.hpp"
#include "hmmtrend/numeric.hpp"

namespace hmmtrend {

struct McmcDraw {
    Eigen::MatrixXd A;
    Eigen::VectorXd mu;
    Eigen::VectorXd sigma2;

    std::size_t K() const noexcept { return static_cast<std::size_t>(mu.size()); }
};

struct McmcPrior {
    enum class Variance { hierarchical, conjugate };

    Variance variance = Variance::hierarchical;
    double e_diag = 4.0;
    std::optional<double> e_off;  // 1/(K-1) when unset

    // hierarchical: mu_k ~ N(b0, B0), sigma2_k ~ IG(c0, C0), C0 ~ Gamma(g0, rate G0)
    // conjugate:    sigma2_k ~ IG(c0, C0), mu_k | sigma2_k ~ N(b0, sigma2_k / kappa0)
    double b0 = 0.0;
    double B0 = 1.0;
    double c0 = 2.5;
    double g0 = 0.5;
    double G0 = 1.0;
    double C0 = 1.0;
    double kappa0 = 0.25;

    double off_diag(std::size_t K) const { return e_off ? *e_off : (K > 1 ? 1.0 / static_cast<double>(K - 1) : 0.0); }

    void validate(std::size_t K) const {
        if (K == 0) throw InvalidParameter("K must be >= 1");
        if (!(e_diag > 0.0)) throw InvalidParameter("Dirichlet diagonal concentration must be positive");
        if (K > 1) {
            const double off = off_diag(K);
            if (!(off > 0.0)) throw InvalidParameter("Dirichlet off-diagonal concentration must be positive");
            if (!(e_diag > off)) throw InvalidParameter("prior needs e_ii > e_ij");
        }
        if (!(B0 > 0.0) || !(c0 > 0.0) || !(g0 > 0.0) || !(G0 > 0.0) || !(C0 > 0.0) || !(kappa0 > 0.0))
            throw InvalidParameter("prior scale and shape parameters must be positive");
    }

    // Centres the mean prior on the data with variance 4 * var(data). The
    // variance hyperprior is scaled so a typical state variance is half the
    // data variance (hierarchical) or equal to it (conjugate).
    static McmcPrior from_data(std::span<const double> data, Variance v = Variance::hierarchical) {
        if (data.size() < 2) throw InsufficientData("prior needs at least two observations");
        const double var = sample_variance(data);
        if (!(var > 0.0)) throw InvalidInput("data variance is zero");
        McmcPrior p;
        p.variance = v;
        p.b0 = mean_of(data);
        p.B0 = 4.0 * var;
        p.g0 = 0.5;
        p.G0 = p.g0 / (0.5 * (p.c0 - 1.0) * var);
        p.C0 = (p.c0 - 1.0) * var;
        p.kappa0 = 0.25;
        return p;
    }
};

struct McmcConfig {
    std::size_t burn_in = 2000;
    std::size_t run_length = 10000;
    std::uint64_t seed = 1;
    bool permute = true;

    void validate() const {
        if (run_length <= burn_in) throw InvalidParameter("run_length must exceed burn_in");
    }
};

// Statistics of the latent path sampled from a stored draw, with the variance
// scale in force for that sweep. They define the draw's complete-data
// conditional posterior.
struct PathStats {
    Eigen::MatrixXd transitions;  // counts i -> j
    Eigen::VectorXd count, sum, sum_sq;
    double C0 = 0.0;
};

struct McmcChain {
    std::size_t K = 0;
    std::vector<McmcDraw> draws;
    std::vector<PathStats> paths;  // aligned with draws
    std::vector<double> log_posterior;  // log p(y | theta) + log p(theta)
    std::vector<double> log_likelihood;
    std::size_t burn_in = 0;
    std::size_t run_length = 0;
    std::uint64_t seed = 0;
};

/// log p(y | theta) under continuous Gaussian emissions and a uniform initial state.
inline double continuous_log_likelihood(std::span<const double> data, const McmcDraw& d) {
    const auto K = static_cast<Eigen::Index>(d.K());
    Eigen::VectorXd a = Eigen::VectorXd::Constant(K, 1.0 / static_cast<double>(K)), e(K);
    double ll = 0.0;
    for (std::size_t t = 0; t < data.size(); ++t) {
        if (t > 0) a = d.A.transpose() * a;
        double m = kNegInf;
        for (Eigen::Index k = 0; k < K; ++k) m = std::max(m, e(k) = normal_log_pdf(data[t], d.mu(k), d.sigma2(k)));
        if (!std::isfinite(m)) return kNegInf;
        double s = 0.0;
        for (Eigen::Index k = 0; k < K; ++k) s += (a(k) *= std::exp(e(k) - m));
        if (!(s > 0.0)) return kNegInf;
        a /= s;
        ll += m + std::log(s);
    }
    return ll;
}

inline double log_prior(const McmcDraw& d, const McmcPrior& prior) {
    const std::size_t K = d.K();
    const auto n = static_cast<Eigen::Index>(K);
    double lp = 0.0;
    if (K > 1) {
        const double off = prior.off_diag(K);
        const double tot = prior.e_diag + off * static_cast<double>(K - 1);
        const double norm = std::lgamma(tot) - std::lgamma(prior.e_diag) - static_cast<double>(K - 1) * std::lgamma(off);
        for (Eigen::Index i = 0; i < n; ++i) {
            lp += norm;
            for (Eigen::Index j = 0; j < n; ++j) {
                if (!(d.A(i, j) > 0.0)) return kNegInf;
                lp += ((i == j ? prior.e_diag : off) - 1.0) * std::log(d.A(i, j));
            }
        }
    }
    for (Eigen::Index k = 0; k < n; ++k)
        if (!(d.sigma2(k) > 0.0)) return kNegInf;
    const double c0 = prior.c0;
    if (prior.variance == McmcPrior::Variance::conjugate) {
        for (Eigen::Index k = 0; k < n; ++k) {
            const double s2 = d.sigma2(k);
            lp += normal_log_pdf(d.mu(k), prior.b0, s2 / prior.kappa0);
            lp += c0 * std::log(prior.C0) - std::lgamma(c0) - (c0 + 1.0) * std::log(s2) - prior.C0 / s2;
        }
        return lp;
    }
    double inv_sum = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
        lp += normal_log_pdf(d.mu(k), prior.b0, prior.B0);
        lp -= (c0 + 1.0) * std::log(d.sigma2(k));
        inv_sum += 1.0 / d.sigma2(k);
    }
    // The scale hyperparameter C0 integrated out.
    const double Kc0 = static_cast<double>(K) * c0;
    lp += -static_cast<double>(K) * std::lgamma(c0) + prior.g0 * std::log(prior.G0) - std::lgamma(prior.g0) +
          std::lgamma(prior.g0 + Kc0) - (prior.g0 + Kc0) * std::log(prior.G0 + inv_sum);
    return lp;
}

inline double log_posterior(std::span<const double> data, const McmcDraw& d, const McmcPrior& prior) {
    const double lp = log_prior(d, prior);
    if (lp == kNegInf) return kNegInf;
    return lp + continuous_log_likelihood(data, d);
}

/// New state i is old state perm[i].
inline McmcDraw permuted(const McmcDraw& d, std::span<const std::size_t> perm) {
    const auto K = static_cast<Eigen::Index>(d.K());
    McmcDraw out{Eigen::MatrixXd(K, K), Eigen::VectorXd(K), Eigen::VectorXd(K)};
    for (Eigen::Index i = 0; i < K; ++i) {
        const auto pi = static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]);
        out.mu(i) = d.mu(pi);
        out.sigma2(i) = d.sigma2(pi);
        for (Eigen::Index j = 0; j < K; ++j) out.A(i, j) = d.A(pi, static_cast<Eigen::Index>(perm[static_cast<std::size_t>(j)]));
    }
    return out;
}

/// Expresses a draw as filter parameters on `grid`: uniform initial
/// distribution, variances raised to the tick floor where needed.
inline HmmParams to_params(const McmcDraw& d, const TrendGrid& grid) {
    const auto K = static_cast<Eigen::Index>(d.K());
    const double floor = 0.5 * grid.tick() * grid.tick();
    Eigen::MatrixXd A = d.A;
    for (Eigen::Index i = 0; i < K; ++i) A.row(i) /= A.row(i).sum();
    return HmmParams(A, Eigen::VectorXd::Constant(K, 1.0 / static_cast<double>(K)), d.mu,
                     d.sigma2.cwiseMax(floor), grid);
}

namespace detail {

inline double draw_gamma(std::mt19937_64& rng, double shape, double rate) {
    return std::gamma_distribution<double>(shape, 1.0 / rate)(rng);
}

inline McmcDraw initial_draw(std::span<const double> data, std::size_t K, const McmcPrior& prior) {
    const auto n = static_cast<Eigen::Index>(K);
    std::vector<double> sorted(data.begin(), data.end());
    std::sort(sorted.begin(), sorted.end());
    McmcDraw d{Eigen::MatrixXd(n, n), Eigen::VectorXd(n), Eigen::VectorXd::Constant(n, sample_variance(data))};
    const double off = prior.off_diag(K);
    const double tot = prior.e_diag + off * static_cast<double>(K - 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double q = (static_cast<double>(i) + 0.5) / static_cast<double>(K);
        d.mu(i) = sorted[static_cast<std::size_t>(q * static_cast<double>(sorted.size()))];
        for (Eigen::Index j = 0; j < n; ++j) d.A(i, j) = (i == j ? prior.e_diag : off) / tot;
    }
    return d;
}

}  // namespace detail

/// Runs `cfg.run_length` Gibbs sweeps and keeps the parameter value entering
/// each sweep after the first `cfg.burn_in`.
inline McmcChain mcmc_sample(std::span<const double> data, std::size_t K, const McmcPrior& prior,
                             const McmcConfig& cfg) {
    prior.validate(K);
    cfg.validate();
    if (data.size() < 10 * K)
        throw InsufficientData("MCMC needs at least 10*K observations, got " + std::to_string(data.size()));
    for (double y : data)
        if (!std::isfinite(y)) throw InvalidInput("non-finite observation");

    const std::size_t T = data.size();
    const auto n = static_cast<Eigen::Index>(K);
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> n01(0.0, 1.0);

    McmcChain chain;
    chain.K = K;
    chain.burn_in = cfg.burn_in;
    chain.run_length = cfg.run_length;
    chain.seed = cfg.seed;
    chain.draws.reserve(cfg.run_length - cfg.burn_in);

    McmcDraw theta = detail::initial_draw(data, K, prior);
    double C0 = prior.variance == McmcPrior::Variance::hierarchical ? prior.g0 / prior.G0 : prior.C0;
    const double off = prior.off_diag(K);

    std::vector<double> alpha(T * K);
    std::vector<std::size_t> S(T);
    std::vector<std::size_t> perm(K);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<double> logp(K), w(K);

    for (std::size_t sweep = 0; sweep < cfg.run_length; ++sweep) {
        // Forward filter.
        double ll = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            double* a = &alpha[t * K];
            double m = kNegInf;
            for (std::size_t k = 0; k < K; ++k) {
                const auto kk = static_cast<Eigen::Index>(k);
                logp[k] = normal_log_pdf(data[t], theta.mu(kk), theta.sigma2(kk));
                m = std::max(m, logp[k]);
            }
            if (!std::isfinite(m)) throw SamplerFailure("non-finite emission density at t=" + std::to_string(t + 1));
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                double pred = 0.0;
                if (t == 0) {
                    pred = 1.0 / static_cast<double>(K);
                } else {
                    const double* prev = &alpha[(t - 1) * K];
                    for (std::size_t i = 0; i < K; ++i)
                        pred += prev[i] * theta.A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
                }
                a[k] = pred * std::exp(logp[k] - m);
                s += a[k];
            }
            if (!(s > 0.0)) throw SamplerFailure("zero filtering mass at t=" + std::to_string(t + 1));
            for (std::size_t k = 0; k < K; ++k) a[k] /= s;
            ll += m + std::log(s);
        }
        const double lpost = ll + log_prior(theta, prior);
        if (!std::isfinite(lpost)) throw SamplerFailure("non-finite log posterior at sweep " + std::to_string(sweep));
        if (sweep >= cfg.burn_in) {
            chain.draws.push_back(theta);
            chain.log_posterior.push_back(lpost);
            chain.log_likelihood.push_back(ll);
        }

        // Backward sample.
        auto draw_from = [&](std::span<const double> p) {
            double tot = 0.0;
            for (double v : p) tot += v;
            double u = unif(rng) * tot;
            for (std::size_t k = 0; k < p.size(); ++k)
                if ((u -= p[k]) < 0.0) return k;
            return p.size() - 1;
        };
        S[T - 1] = draw_from(std::span<const double>(&alpha[(T - 1) * K], K));
        for (std::size_t t = T - 1; t-- > 0;) {
            for (std::size_t i = 0; i < K; ++i)
                w[i] = alpha[t * K + i] *
                       theta.A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(S[t + 1]));
            S[t] = draw_from(w);
        }

        // Sufficient statistics.
        Eigen::MatrixXd N = Eigen::MatrixXd::Zero(n, n);
        Eigen::VectorXd cnt = Eigen::VectorXd::Zero(n), sum = Eigen::VectorXd::Zero(n), sum_sq = Eigen::VectorXd::Zero(n);
        for (std::size_t t = 0; t < T; ++t) {
            const auto s = static_cast<Eigen::Index>(S[t]);
            cnt(s) += 1.0;
            sum(s) += data[t];
            sum_sq(s) += data[t] * data[t];
            if (t > 0) N(static_cast<Eigen::Index>(S[t - 1]), s) += 1.0;
        }
        if (sweep >= cfg.burn_in) chain.paths.push_back({N, cnt, sum, sum_sq, C0});

        // Transition rows.
        if (K > 1) {
            for (Eigen::Index i = 0; i < n; ++i) {
                double tot = 0.0;
                for (Eigen::Index j = 0; j < n; ++j)
                    tot += (theta.A(i, j) = detail::draw_gamma(rng, (i == j ? prior.e_diag : off) + N(i, j), 1.0));
                if (!(tot > 0.0)) throw SamplerFailure("degenerate Dirichlet draw");
                theta.A.row(i) /= tot;
            }
        }

        // Emissions.
        if (prior.variance == McmcPrior::Variance::hierarchical) {
            for (Eigen::Index k = 0; k < n; ++k) {
                const double prec = 1.0 / prior.B0 + cnt(k) / theta.sigma2(k);
                const double mean = (prior.b0 / prior.B0 + sum(k) / theta.sigma2(k)) / prec;
                theta.mu(k) = mean + n01(rng) / std::sqrt(prec);
            }
            Eigen::VectorXd ss = Eigen::VectorXd::Zero(n);
            for (std::size_t t = 0; t < T; ++t) {
                const auto s = static_cast<Eigen::Index>(S[t]);
                const double d = data[t] - theta.mu(s);
                ss(s) += d * d;
            }
            double inv_sum = 0.0;
            for (Eigen::Index k = 0; k < n; ++k) {
                theta.sigma2(k) = 1.0 / detail::draw_gamma(rng, prior.c0 + 0.5 * cnt(k), C0 + 0.5 * ss(k));
                inv_sum += 1.0 / theta.sigma2(k);
            }
            C0 = detail::draw_gamma(rng, prior.g0 + static_cast<double>(K) * prior.c0, prior.G0 + inv_sum);
        } else {
            Eigen::VectorXd ss = Eigen::VectorXd::Zero(n);
            for (std::size_t t = 0; t < T; ++t) {
                const auto s = static_cast<Eigen::Index>(S[t]);
                const double d = data[t] - sum(s) / cnt(s);
                ss(s) += d * d;
            }
            for (Eigen::Index k = 0; k < n; ++k) {
                const double kn = prior.kappa0 + cnt(k);
                const double ybar = cnt(k) > 0.0 ? sum(k) / cnt(k) : 0.0;
                const double dev = ybar - prior.b0;
                const double Cn = prior.C0 + 0.5 * (ss(k) + prior.kappa0 * cnt(k) * dev * dev / kn);
                theta.sigma2(k) = 1.0 / detail::draw_gamma(rng, prior.c0 + 0.5 * cnt(k), Cn);
                const double mean = (prior.kappa0 * prior.b0 + sum(k)) / kn;
                theta.mu(k) = mean + n01(rng) * std::sqrt(theta.sigma2(k) / kn);
            }
        }

        if (cfg.permute && K > 1) {
            std::shuffle(perm.begin(), perm.end(), rng);
            theta = permuted(theta, perm);
        }
    }
    return chain;
}

/// The draw with the largest log posterior; earliest on ties.
inline const McmcDraw& posterior_mode_draw(const McmcChain& chain) {
    if (chain.draws.empty()) throw InvalidInput("empty chain");
    std::size_t best = 0;
    for (std::size_t i = 1; i < chain.log_posterior.size(); ++i)
        if (chain.log_posterior[i] > chain.log_posterior[best]) best = i;
    return chain.draws[best];
}

inline HmmParams posterior_mode(const McmcChain& chain, const TrendGrid& grid) {
    return to_params(posterior_mode_draw(chain), grid);
}

/// Relabels a draw so its means are increasing.
inline McmcDraw identified(const McmcDraw& d) {
    std::vector<std::size_t> perm(d.K());
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
        return d.mu(static_cast<Eigen::Index>(a)) < d.mu(static_cast<Eigen::Index>(b));
    });
    return permuted(d, perm);
}

struct ErgodicCheck {
    double first_mean = 0.0;
    double second_mean = 0.0;
    double standard_error = 0.0;  // of the difference, from batch means
    bool stable = false;
};

namespace detail {

inline std::pair<double, double> batch_mean_se(std::span<const double> xs, std::size_t batches) {
    const double m = mean_of(xs);
    const std::size_t b = xs.size() / batches;
    if (b == 0) return {m, 0.0};
    double acc = 0.0;
    for (std::size_t i = 0; i < batches; ++i) {
        const double bm = mean_of(xs.subspan(i * b, b));
        acc += (bm - m) * (bm - m);
    }
    const double var_bm = acc / static_cast<double>(batches - 1);
    return {m, std::sqrt(var_bm / static_cast<double>(batches))};
}

}  // namespace detail

/// Compares first-half and second-half means of a chain trace.
inline ErgodicCheck ergodic_halves(std::span<const double> trace, std::size_t batches = 20) {
    if (trace.size() < 4 * batches) throw InsufficientData("trace too short for batch means");
    const std::size_t h = trace.size() / 2;
    const auto [m1, s1] = detail::batch_mean_se(trace.subspan(0, h), batches);
    const auto [m2, s2] = detail::batch_mean_se(trace.subspan(h, h), batches);
    ErgodicCheck c{m1, m2, std::sqrt(s1 * s1 + s2 * s2), false};
    c.stable = std::abs(m1 - m2) < 3.0 * c.standard_error;
    return c;
}

inline std::vector<double> autocorrelation(std::span<const double> xs, std::size_t max_lag) {
    const double m = mean_of(xs);
    double c0 = 0.0;
    for (double x : xs) c0 += (x - m) * (x - m);
    std::vector<double> out(max_lag + 1, 0.0);
    if (!(c0 > 0.0)) return out;
    for (std::size_t lag = 0; lag <= max_lag && lag < xs.size(); ++lag) {
        double c = 0.0;
        for (std::size_t t = lag; t < xs.size(); ++t) c += (xs[t] - m) * (xs[t - lag] - m);
        out[lag] = c / c0;
    }
    return out;
}

/// One row per draw: A (row-major), pi, mu, sigma2, log posterior.
inline void write_chain_csv(std::ostream& os, const McmcChain& chain) {
    const auto K = static_cast<Eigen::Index>(chain.K);
    for (Eigen::Index i = 0; i < K; ++i)
        for (Eigen::Index j = 0; j < K; ++j) os << "A_" << i + 1 << '_' << j + 1 << ',';
    for (Eigen::Index k = 0; k < K; ++k) os << "pi_" << k + 1 << ',';
    for (Eigen::Index k = 0; k < K; ++k) os << "mu_" << k + 1 << ',';
    for (Eigen::Index k = 0; k < K; ++k) os << "sigma2_" << k + 1 << ',';
    os << "log_posterior\n";
    const auto old = os.precision(17);
    for (std::size_t r = 0; r < chain.draws.size(); ++r) {
        const auto& d = chain.draws[r];
        for (Eigen::Index i = 0; i < K; ++i)
            for (Eigen::Index j = 0; j < K; ++j) os << d.A(i, j) << ',';
        for (Eigen::Index k = 0; k < K; ++k) os << 1.0 / static_cast<double>(K) << ',';
        for (Eigen::Index k = 0; k < K; ++k) os << d.mu(k) << ',';
        for (Eigen::Index k = 0; k < K; ++k) os << d.sigma2(k) << ',';
        os << chain.log_posterior[r] << '\n';
    }
    os.precision(old);
}

}  // namespace hmmtrend
