#pragma once

// Synthetic data from the trend-plus-noise generative model: a Markov latent
// trend state, discretized-Gaussian returns on the trend grid, and optionally
// transition dynamics keyed on an observed input series.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "hmmtrend/error.hpp"
#include "hmmtrend/hmm.hpp"

namespace hmmtrend {

struct SampledPath {
    std::vector<double> returns;
    std::vector<std::size_t> states;
};

namespace detail {

inline std::size_t draw_index(std::mt19937_64& rng, std::span<const double> cdf) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double x = u(rng) * cdf.back();
    for (std::size_t i = 0; i < cdf.size(); ++i)
        if (x < cdf[i]) return i;
    return cdf.size() - 1;
}

inline std::vector<double> cumulative(std::span<const double> p) {
    std::vector<double> c(p.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) c[i] = (s += p[i]);
    return c;
}

}  // namespace detail

/// Draws T returns from an HMM whose transition matrix at step t is chosen by
/// `regime(t)` out of `regimes` (all sharing emissions with `params`). A single
/// regime reproduces the plain HMM.
inline SampledPath sample_regime_hmm(const HmmParams& params, std::span<const Eigen::MatrixXd> regimes,
                                     const std::function<std::size_t(std::size_t)>& regime, std::size_t T,
                                     std::uint64_t seed) {
    const std::size_t K = params.K();
    std::mt19937_64 rng(seed);
    std::vector<std::vector<double>> emit_cdf(K);
    for (std::size_t k = 0; k < K; ++k)
        emit_cdf[k] = detail::cumulative(discretized_gaussian_pmf(params.grid(), params.mu()(k), params.sigma2()(k)));
    std::vector<std::vector<std::vector<double>>> trans_cdf;
    for (const auto& A : regimes) {
        if (A.rows() != static_cast<Eigen::Index>(K) || A.cols() != static_cast<Eigen::Index>(K))
            throw InvalidParameter("regime transition matrix has the wrong shape");
        std::vector<std::vector<double>> rows(K);
        for (std::size_t i = 0; i < K; ++i) {
            std::vector<double> r(K);
            for (std::size_t j = 0; j < K; ++j) r[j] = A(i, j);
            rows[i] = detail::cumulative(r);
        }
        trans_cdf.push_back(std::move(rows));
    }
    std::vector<double> pi(params.pi().data(), params.pi().data() + K);
    const auto pi_cdf = detail::cumulative(pi);

    SampledPath out;
    out.returns.resize(T);
    out.states.resize(T);
    std::size_t s = 0;
    for (std::size_t t = 0; t < T; ++t) {
        if (t == 0) {
            s = detail::draw_index(rng, pi_cdf);
        } else {
            const std::size_t r = regime(t);
            if (r >= trans_cdf.size()) throw InvalidParameter("regime index out of range");
            s = detail::draw_index(rng, trans_cdf[r][s]);
        }
        out.states[t] = s;
        out.returns[t] = params.grid()[detail::draw_index(rng, emit_cdf[s])];
    }
    return out;
}

inline SampledPath sample_hmm(const HmmParams& params, std::size_t T, std::uint64_t seed) {
    const Eigen::MatrixXd A = params.A();
    return sample_regime_hmm(params, std::span<const Eigen::MatrixXd>(&A, 1), [](std::size_t) { return 0; }, T,
                             seed);
}

}  // namespace hmmtrend
