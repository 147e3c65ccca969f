#pragma once

// Input-output HMM with a discrete input: the predictor domain is cut at the
// roots of a fitted spline, a full parameter set is learned per bucket, and
// the filter swaps parameter sets according to the bucket of x_t.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hmmtrend/baum_welch.hpp"
#include "hmmtrend/error.hpp"
#include "hmmtrend/ewma.hpp"
#include "hmmtrend/hmm.hpp"
#include "hmmtrend/spline.hpp"

namespace hmmtrend {

struct BucketPartition {
    double lo = 0.0;
    double hi = 0.0;
    std::vector<double> roots;  // increasing, strictly inside (lo, hi)
    std::vector<int> sign;      // spline sign per bucket; 0 when unknown

    std::size_t R() const noexcept { return roots.size() + 1; }

    // Values outside [lo, hi] fall in the boundary buckets; a root belongs to
    // the bucket on its right.
    std::size_t bucket_of(double x) const {
        return static_cast<std::size_t>(std::upper_bound(roots.begin(), roots.end(), x) - roots.begin());
    }

    static BucketPartition single(double lo, double hi) { return {lo, hi, {}, {0}}; }
};

/// Zero crossings by sign changes on a dense grid, each refined by bisection
/// to an interval below 1e-10.
inline BucketPartition spline_roots(const ZeroMeanSpline& g, std::size_t grid_points = 20001) {
    if (g.max_abs() < 1e-12) throw DegenerateSpline("spline is identically zero; it has no usable roots");
    BucketPartition p;
    p.lo = g.lo();
    p.hi = g.hi();
    const double h = (p.hi - p.lo) / static_cast<double>(grid_points - 1);
    double xa = p.lo, fa = g(xa);
    for (std::size_t i = 1; i < grid_points; ++i) {
        const double xb = i + 1 == grid_points ? p.hi : p.lo + h * static_cast<double>(i);
        const double fb = g(xb);
        if ((fa < 0.0 && fb > 0.0) || (fa > 0.0 && fb < 0.0)) {
            double a = xa, b = xb, f_a = fa;
            while (b - a > 1e-10) {
                const double m = 0.5 * (a + b);
                const double fm = g(m);
                if (fm == 0.0) {
                    a = b = m;
                    break;
                }
                if ((fm < 0.0) == (f_a < 0.0)) {
                    a = m;
                    f_a = fm;
                } else {
                    b = m;
                }
            }
            p.roots.push_back(0.5 * (a + b));
        }
        if (fb != 0.0) {
            xa = xb;
            fa = fb;
        }
    }
    std::vector<double> edges{p.lo};
    edges.insert(edges.end(), p.roots.begin(), p.roots.end());
    edges.push_back(p.hi);
    for (std::size_t r = 0; r + 1 < edges.size(); ++r) {
        const double v = g(0.5 * (edges[r] + edges[r + 1]));
        p.sign.push_back(v > 0.0 ? 1 : (v < 0.0 ? -1 : 0));
    }
    return p;
}

/// Returns grouped by the bucket of their predictor value, time order kept.
/// Samples with an undefined predictor are left out.
inline std::vector<std::vector<double>> bucket_data(std::span<const double> returns, const PredictorSeries& X,
                                                    const BucketPartition& partition) {
    if (returns.size() != X.values.size()) throw InvalidInput("returns and predictor are not aligned");
    std::vector<std::vector<double>> out(partition.R());
    for (std::size_t t = 0; t < returns.size(); ++t)
        if (std::isfinite(X.values[t])) out[partition.bucket_of(X.values[t])].push_back(returns[t]);
    return out;
}

struct IohmmParams {
    BucketPartition partition;
    std::vector<HmmParams> theta;  // one per bucket
    std::vector<std::string> warnings;

    void validate() const {
        if (theta.size() != partition.R()) throw InvalidParameter("need one parameter set per bucket");
        for (const auto& t : theta) {
            if (t.K() != theta.front().K()) throw InvalidParameter("buckets disagree on K");
            if (!(t.grid() == theta.front().grid())) throw InvalidParameter("buckets disagree on the trend grid");
        }
    }
};

namespace detail {

inline HmmParams sorted_by_mean(const HmmParams& p) {
    std::vector<std::size_t> perm(p.K());
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
        return p.mu()(static_cast<Eigen::Index>(a)) < p.mu()(static_cast<Eigen::Index>(b));
    });
    return permuted(p, perm);
}

}  // namespace detail

/// Baum-Welch per bucket. A bucket with fewer than 10*K observations takes the
/// estimate from all data instead. With more than one bucket, states are
/// ordered by mean in every parameter set so a filter state keeps its meaning
/// when the active set changes.
inline IohmmParams iohmm_learn(std::span<const double> returns, const PredictorSeries& X,
                               const BucketPartition& partition, const TrendGrid& grid, std::size_t K,
                               const EmConfig& cfg = {}) {
    const auto buckets = bucket_data(returns, X, partition);
    IohmmParams out;
    out.partition = partition;
    const std::size_t need = 10 * K;
    bool any = false;
    for (const auto& b : buckets) any = any || b.size() >= need;
    if (!any) throw InsufficientData("every bucket has fewer than 10*K observations");

    std::optional<HmmParams> pooled;
    for (std::size_t r = 0; r < buckets.size(); ++r) {
        if (buckets[r].size() >= need) {
            out.theta.push_back(baum_welch(buckets[r], grid, K, cfg).params);
            continue;
        }
        if (!pooled) {
            std::vector<double> all;
            for (std::size_t t = 0; t < returns.size(); ++t)
                if (std::isfinite(X.values[t])) all.push_back(returns[t]);
            pooled = baum_welch(all, grid, K, cfg).params;
        }
        out.warnings.push_back("bucket " + std::to_string(r + 1) + " has " + std::to_string(buckets[r].size()) +
                               " observations; using the pooled estimate");
        out.theta.push_back(*pooled);
    }
    if (out.theta.size() > 1)
        for (auto& t : out.theta) t = detail::sorted_by_mean(t);
    return out;
}

/// Single-bucket convenience: the collapse case.
inline IohmmParams iohmm_learn(std::span<const double> returns, const PredictorSeries& X, const TrendGrid& grid,
                               std::size_t K, const EmConfig& cfg = {}) {
    double lo = INFINITY, hi = -INFINITY;
    for (double x : X.values)
        if (std::isfinite(x)) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    return iohmm_learn(returns, X, BucketPartition::single(lo, hi), grid, K, cfg);
}

/// Partition from the roots of `spline`, then per-bucket learning.
inline IohmmParams iohmm_learn(std::span<const double> returns, const PredictorSeries& X, const ZeroMeanSpline& spline,
                               const TrendGrid& grid, std::size_t K, const EmConfig& cfg = {}) {
    return iohmm_learn(returns, X, spline_roots(spline), grid, K, cfg);
}

/// As run_hmm_signal, with the parameter set for step t chosen by the bucket
/// of X[t]. An undefined X[t] keeps the previous step's set (bucket 1 at t=0).
inline std::vector<double> iohmm_signal(std::span<const double> returns, const PredictorSeries& X,
                                        const IohmmParams& params, const TransferFunction& tf) {
    params.validate();
    if (returns.empty()) throw InvalidInput("iohmm_signal needs at least one return");
    if (returns.size() != X.values.size()) throw InvalidInput("returns and predictor are not aligned");
    std::size_t active = 0;
    auto pick = [&](std::size_t t) -> const HmmParams& {
        if (std::isfinite(X.values[t])) active = params.partition.bucket_of(X.values[t]);
        return params.theta[active];
    };

    std::vector<double> signal(returns.size());
    const HmmParams& p0 = pick(0);
    FilterState state;
    state.omega_pred = p0.pi();
    signal[0] = tf(predict_return(state, p0));
    state = init_filter(p0, returns[0]);
    for (std::size_t t = 1; t < returns.size(); ++t) {
        const HmmParams& p = pick(t);
        Eigen::VectorXd pred = p.A().transpose() * state.omega_filt;
        signal[t] = tf(pred.dot(p.discretized_mean()));
        state.t = t + 1;
        state.omega_pred = std::move(pred);
        detail::bayes_update(p, state.omega_pred, returns[t], state.t, state.omega_filt);
    }
    return signal;
}

}  // namespace hmmtrend
