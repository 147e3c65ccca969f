#pragma once

// Piecewise linear regression on prices: recursive binary segmentation with a
// slope-difference t-test at each candidate break, and the "default case"
// parameter set built from the segments.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <Eigen/Dense>

#include "hmmtrend/error.hpp"
#include "hmmtrend/grid.hpp"
#include "hmmtrend/hmm.hpp"

namespace hmmtrend {

struct Segment {
    std::size_t begin = 0;  // inclusive
    std::size_t end = 0;    // exclusive
    double slope = 0.0;      // price units per step
    double intercept = 0.0;  // fitted value at `begin`
    double sigma2 = 0.0;     // ML residual variance, SSE / n
    double slope_tstat = 0.0;

    std::size_t length() const noexcept { return end - begin; }
};

struct Segmentation {
    std::vector<std::size_t> change_points;  // first index of each segment after the first
    std::vector<double> change_pvalues;      // slope-difference test p-value per change point
    std::vector<Segment> segments;
    std::vector<double> residuals;  // per observation, from its segment's line
    double mean_level = 0.0;        // mean price, used to rescale slopes into returns
};

namespace detail {

struct LineFit {
    double slope = 0.0, intercept = 0.0, sse = 0.0, sxx = 0.0;
    std::size_t n = 0;
};

// Two-pass OLS of y[b..e) on the local index 0..n-1.
inline LineFit fit_line(std::span<const double> y, std::size_t b, std::size_t e) {
    LineFit f;
    f.n = e - b;
    const double n = static_cast<double>(f.n);
    const double xbar = 0.5 * (n - 1.0);
    double ybar = 0.0;
    for (std::size_t i = b; i < e; ++i) ybar += y[i];
    ybar /= n;
    double sxy = 0.0;
    for (std::size_t i = b; i < e; ++i) {
        const double dx = static_cast<double>(i - b) - xbar;
        f.sxx += dx * dx;
        sxy += dx * (y[i] - ybar);
    }
    f.slope = f.sxx > 0.0 ? sxy / f.sxx : 0.0;
    f.intercept = ybar - f.slope * xbar;
    for (std::size_t i = b; i < e; ++i) {
        const double r = y[i] - (f.intercept + f.slope * static_cast<double>(i - b));
        f.sse += r * r;
    }
    return f;
}

inline double slope_se2(const LineFit& f) {
    if (f.n <= 2 || !(f.sxx > 0.0)) return 0.0;
    return f.sse / static_cast<double>(f.n - 2) / f.sxx;
}

// Two-sided p-value for equal slopes on either side of a split.
inline double slope_difference_pvalue(const LineFit& l, const LineFit& r) {
    const double diff = l.slope - r.slope;
    const double scale = std::abs(l.slope) + std::abs(r.slope);
    if (std::abs(diff) <= 1e-10 * scale || diff == 0.0) return 1.0;
    const double se2 = slope_se2(l) + slope_se2(r);
    if (!(se2 > 0.0)) return 0.0;
    const double t = diff / std::sqrt(se2);
    const double df = static_cast<double>(l.n + r.n) - 4.0;
    if (df < 1.0) return 1.0;
    boost::math::students_t dist(df);
    return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

// Prefix sums for O(1) SSE of a straight-line fit over any index range.
class LinePrefix {
public:
    explicit LinePrefix(std::span<const double> y) : n_(y.size() + 1) {
        sx_.assign(n_, 0.0);
        sy_ = sxx_ = sxy_ = syy_ = sx_;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double x = static_cast<double>(i);
            sx_[i + 1] = sx_[i] + x;
            sy_[i + 1] = sy_[i] + y[i];
            sxx_[i + 1] = sxx_[i] + x * x;
            sxy_[i + 1] = sxy_[i] + x * y[i];
            syy_[i + 1] = syy_[i] + y[i] * y[i];
        }
    }

    double sse(std::size_t b, std::size_t e) const {
        const double n = static_cast<double>(e - b);
        const double sx = sx_[e] - sx_[b], sy = sy_[e] - sy_[b];
        const double cxx = sxx_[e] - sxx_[b] - sx * sx / n;
        const double cxy = sxy_[e] - sxy_[b] - sx * sy / n;
        const double cyy = syy_[e] - syy_[b] - sy * sy / n;
        if (!(cxx > 0.0)) return std::max(0.0, cyy);
        return std::max(0.0, cyy - cxy * cxy / cxx);
    }

    // Slope and its squared standard error over [b, e).
    std::pair<double, double> slope(std::size_t b, std::size_t e) const {
        const double n = static_cast<double>(e - b);
        const double sx = sx_[e] - sx_[b], sy = sy_[e] - sy_[b];
        const double cxx = sxx_[e] - sxx_[b] - sx * sx / n;
        const double cxy = sxy_[e] - sxy_[b] - sx * sy / n;
        if (!(cxx > 0.0) || n <= 2.0) return {0.0, 0.0};
        return {cxy / cxx, sse(b, e) / (n - 2.0) / cxx};
    }

private:
    std::size_t n_;
    std::vector<double> sx_, sy_, sxx_, sxy_, syy_;
};

inline void segment_recursive(std::span<const double> y, const LinePrefix& pre, std::size_t b, std::size_t e,
                              double alpha_level, std::size_t min_len, std::vector<std::size_t>& cps,
                              std::vector<double>& pvals) {
    if (e - b < 2 * min_len) return;
    std::size_t best = 0;
    double best_sse = std::numeric_limits<double>::infinity();
    for (std::size_t s = b + min_len; s + min_len <= e; ++s) {
        const double v = pre.sse(b, s) + pre.sse(s, e);
        if (v < best_sse) {
            best_sse = v;
            best = s;
        }
    }
    if (best == 0) return;
    double p = slope_difference_pvalue(fit_line(y, b, best), fit_line(y, best, e));
    if (!(p < alpha_level)) {
        // The least-squares split can sit on a level shift with equal slopes
        // either side; try the split with the largest slope contrast instead.
        double best_t = 0.0;
        std::size_t alt = 0;
        for (std::size_t s = b + min_len; s + min_len <= e; ++s) {
            const auto [sl, vl] = pre.slope(b, s);
            const auto [sr, vr] = pre.slope(s, e);
            if (!(vl + vr > 0.0)) continue;
            const double t = std::abs(sl - sr) / std::sqrt(vl + vr);
            if (t > best_t) {
                best_t = t;
                alt = s;
            }
        }
        if (alt == 0 || alt == best) return;
        p = slope_difference_pvalue(fit_line(y, b, alt), fit_line(y, alt, e));
        if (!(p < alpha_level)) return;
        best = alt;
    }
    segment_recursive(y, pre, b, best, alpha_level, min_len, cps, pvals);
    cps.push_back(best);
    pvals.push_back(p);
    segment_recursive(y, pre, best, e, alpha_level, min_len, cps, pvals);
}

}  // namespace detail

/// Splits `prices` into linear trends. A split is kept only when the slopes on
/// either side differ with two-sided t-test p-value below `alpha_level`.
inline Segmentation plr_segment(std::span<const double> prices, double alpha_level = 0.05,
                                std::size_t min_segment = 10) {
    if (min_segment < 3) throw InvalidParameter("minimum segment length must be >= 3");
    if (prices.size() < 2 * min_segment)
        throw InvalidInput("PLR needs at least " + std::to_string(2 * min_segment) + " prices");
    if (!(alpha_level > 0.0 && alpha_level < 1.0)) throw InvalidParameter("alpha_level must be in (0, 1)");

    Segmentation seg;
    const detail::LinePrefix pre(prices);
    detail::segment_recursive(prices, pre, 0, prices.size(), alpha_level, min_segment, seg.change_points,
                              seg.change_pvalues);

    std::vector<std::size_t> bounds{0};
    bounds.insert(bounds.end(), seg.change_points.begin(), seg.change_points.end());
    bounds.push_back(prices.size());
    seg.residuals.resize(prices.size());
    for (std::size_t i = 0; i + 1 < bounds.size(); ++i) {
        const auto f = detail::fit_line(prices, bounds[i], bounds[i + 1]);
        Segment s;
        s.begin = bounds[i];
        s.end = bounds[i + 1];
        s.slope = f.slope;
        s.intercept = f.intercept;
        s.sigma2 = f.sse / static_cast<double>(f.n);
        const double se2 = detail::slope_se2(f);
        s.slope_tstat = se2 > 0.0 ? f.slope / std::sqrt(se2) : (f.slope == 0.0 ? 0.0 : INFINITY);
        for (std::size_t t = s.begin; t < s.end; ++t)
            seg.residuals[t] = prices[t] - (f.intercept + f.slope * static_cast<double>(t - s.begin));
        seg.segments.push_back(s);
    }
    seg.mean_level = std::accumulate(prices.begin(), prices.end(), 0.0) / static_cast<double>(prices.size());
    return seg;
}

/// Durbin-Watson statistic: sum (e_t - e_{t-1})^2 / sum e_t^2, in [0, 4].
inline double durbin_watson(std::span<const double> residuals) {
    if (residuals.size() < 2) throw InvalidInput("Durbin-Watson needs at least two residuals");
    double num = 0.0, den = residuals[0] * residuals[0];
    for (std::size_t t = 1; t < residuals.size(); ++t) {
        const double d = residuals[t] - residuals[t - 1];
        num += d * d;
        den += residuals[t] * residuals[t];
    }
    if (!(den > 0.0)) throw InvalidInput("Durbin-Watson undefined for all-zero residuals");
    return num / den;
}

/// One-dimensional k-means with quantile seeding. Returns the cluster index of
/// every value; clusters are numbered by increasing centre.
inline std::vector<std::size_t> kmeans_1d(std::span<const double> v, std::size_t K, int max_iter = 100) {
    if (v.size() < K) throw InsufficientData("fewer values than clusters");
    std::vector<double> sorted(v.begin(), v.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> centre(K);
    for (std::size_t k = 0; k < K; ++k) {
        const double q = (static_cast<double>(k) + 0.5) / static_cast<double>(K);
        centre[k] = sorted[static_cast<std::size_t>(q * static_cast<double>(sorted.size()))];
    }
    std::vector<std::size_t> label(v.size(), 0);
    for (int it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < v.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (std::abs(v[i] - centre[k]) < std::abs(v[i] - centre[best])) best = k;
            if (best != label[i] || it == 0) changed = changed || best != label[i];
            label[i] = best;
        }
        std::vector<double> sum(K, 0.0);
        std::vector<std::size_t> cnt(K, 0);
        for (std::size_t i = 0; i < v.size(); ++i) {
            sum[label[i]] += v[i];
            ++cnt[label[i]];
        }
        for (std::size_t k = 0; k < K; ++k)
            if (cnt[k] > 0) centre[k] = sum[k] / static_cast<double>(cnt[k]);
        if (!changed && it > 0) break;
    }
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return centre[a] < centre[b]; });
    std::vector<std::size_t> rank(K);
    for (std::size_t r = 0; r < K; ++r) rank[order[r]] = r;
    for (auto& l : label) l = rank[l];
    std::vector<std::size_t> cnt(K, 0);
    for (auto l : label) ++cnt[l];
    for (std::size_t k = 0; k < K; ++k)
        if (cnt[k] == 0) throw InsufficientData("segment slopes form fewer than K distinct clusters");
    return label;
}

/// Sticky default parameters: beta on the diagonal, (1-beta)/(K-1) elsewhere,
/// uniform pi, and per-state (mu, sigma2) from K clusters of segment slopes.
/// Slopes and residual variances are divided by the mean price level (and its
/// square) to express them in return units, then floored at tick^2/2.
inline HmmParams default_theta(std::size_t K, double beta, const TrendGrid& grid, const Segmentation& seg) {
    if (K < 2) throw InvalidParameter("default parameters need K >= 2");
    if (!(beta > 0.0 && beta < 1.0)) throw InvalidParameter("beta must be in (0, 1)");
    if (seg.segments.size() < K)
        throw InsufficientData("insufficient segments: " + std::to_string(seg.segments.size()) + " < K=" +
                               std::to_string(K));
    if (!(seg.mean_level > 0.0)) throw InvalidInput("mean price level must be positive");

    std::vector<double> slopes;
    for (const auto& s : seg.segments) slopes.push_back(s.slope);
    const auto label = kmeans_1d(slopes, K);

    const auto n = static_cast<Eigen::Index>(K);
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(n), s2(n);
    std::vector<double> sse(K, 0.0), len(K, 0.0), cnt(K, 0.0);
    for (std::size_t i = 0; i < seg.segments.size(); ++i) {
        const auto& s = seg.segments[i];
        mu(static_cast<Eigen::Index>(label[i])) += s.slope;
        cnt[label[i]] += 1.0;
        sse[label[i]] += s.sigma2 * static_cast<double>(s.length());
        len[label[i]] += static_cast<double>(s.length());
    }
    const double floor = 0.5 * grid.tick() * grid.tick();
    const double L = seg.mean_level;
    for (std::size_t k = 0; k < K; ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        mu(i) = mu(i) / cnt[k] / L;
        s2(i) = std::max(floor, sse[k] / len[k] / (L * L));
    }
    return HmmParams(sticky_transition(K, beta), Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(K)), mu,
                     s2, grid);
}

}  // namespace hmmtrend
