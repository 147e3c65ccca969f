#pragma once

// Cubic B-spline regression with the integral over the fitted domain pinned to
// zero, and the rolling day-by-day forecaster built on it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "hmmtrend/error.hpp"
#include "hmmtrend/ewma.hpp"

namespace hmmtrend {

class ZeroMeanSpline {
public:
    ZeroMeanSpline() = default;

    // `knots` are the distinct, increasing breakpoints including both ends.
    ZeroMeanSpline(std::vector<double> knots, Eigen::VectorXd coefficients, PredictorKind kind)
        : knots_(std::move(knots)), coef_(std::move(coefficients)), kind_(kind) {
        if (knots_.size() < 2) throw InvalidParameter("spline needs at least two knots");
        for (std::size_t i = 1; i < knots_.size(); ++i)
            if (!(knots_[i] > knots_[i - 1])) throw InvalidParameter("spline knots must be strictly increasing");
        if (static_cast<std::size_t>(coef_.size()) != knots_.size() + 2)
            throw InvalidParameter("spline needs knots+2 coefficients");
        aug_.assign(3, knots_.front());
        aug_.insert(aug_.end(), knots_.begin(), knots_.end());
        aug_.insert(aug_.end(), 3, knots_.back());
    }

    static std::vector<double> uniform_knots(double lo, double hi, std::size_t count) {
        std::vector<double> k(count);
        for (std::size_t i = 0; i < count; ++i)
            k[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
        k.back() = hi;
        return k;
    }

    double lo() const noexcept { return knots_.front(); }
    double hi() const noexcept { return knots_.back(); }
    const std::vector<double>& knots() const noexcept { return knots_; }
    const Eigen::VectorXd& coefficients() const noexcept { return coef_; }
    PredictorKind kind() const noexcept { return kind_; }
    std::size_t basis_size() const noexcept { return knots_.size() + 2; }

    // Index of the knot interval holding x (after clamping), 0-based.
    std::size_t span_of(double x) const {
        x = std::clamp(x, lo(), hi());
        const auto it = std::upper_bound(knots_.begin(), knots_.end(), x);
        const auto i = static_cast<std::size_t>(it - knots_.begin());
        return std::min(i == 0 ? 0 : i - 1, knots_.size() - 2);
    }

    // The four nonzero basis values at x; first index is span_of(x).
    std::pair<std::size_t, std::array<double, 4>> basis(double x) const {
        x = std::clamp(x, lo(), hi());
        const std::size_t j = span_of(x);
        const std::size_t s = j + 3;  // position in the augmented knot vector
        std::array<double, 4> N{1.0, 0.0, 0.0, 0.0};
        std::array<double, 4> left{}, right{};
        for (std::size_t d = 1; d <= 3; ++d) {
            left[d] = x - aug_[s + 1 - d];
            right[d] = aug_[s + d] - x;
            double saved = 0.0;
            for (std::size_t r = 0; r < d; ++r) {
                const double tmp = N[r] / (right[r + 1] + left[d - r]);
                N[r] = saved + right[r + 1] * tmp;
                saved = left[d - r] * tmp;
            }
            N[d] = saved;
        }
        return {j, N};
    }

    double operator()(double x) const {
        const auto [j, N] = basis(x);
        double v = 0.0;
        for (std::size_t r = 0; r < 4; ++r) v += coef_(static_cast<Eigen::Index>(j + r)) * N[r];
        return v;
    }

    // Exact integrals of the basis functions over the domain.
    Eigen::VectorXd basis_integrals() const {
        Eigen::VectorXd w(static_cast<Eigen::Index>(basis_size()));
        for (std::size_t i = 0; i < basis_size(); ++i) w(static_cast<Eigen::Index>(i)) = (aug_[i + 4] - aug_[i]) / 4.0;
        return w;
    }

    double integral() const { return basis_integrals().dot(coef_); }

    double max_abs(std::size_t samples = 4001) const {
        double m = 0.0;
        for (std::size_t i = 0; i < samples; ++i)
            m = std::max(m, std::abs((*this)(lo() + (hi() - lo()) * static_cast<double>(i) / static_cast<double>(samples - 1))));
        return m;
    }

private:
    std::vector<double> knots_;
    Eigen::VectorXd coef_;
    PredictorKind kind_ = PredictorKind::vol_ratio;
    std::vector<double> aug_;
};

/// Least-squares cubic spline on `knots` uniform breakpoints over the domain,
/// subject to a zero integral, fitted to y less its sample mean so constant
/// offsets in the target do not leak into the shape. Non-finite pairs are skipped. The domain
/// defaults to [min x, max x]; a supplied domain must be 90% covered by x.
inline ZeroMeanSpline fit_zero_mean_spline(std::span<const double> x, std::span<const double> y, std::size_t knots,
                                           PredictorKind kind,
                                           std::optional<std::pair<double, double>> domain = std::nullopt) {
    if (x.size() != y.size()) throw InvalidInput("x and y lengths differ");
    if (knots < 2) throw InvalidParameter("spline needs at least two knots");
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (std::isfinite(x[i]) && std::isfinite(y[i])) {
            xs.push_back(x[i]);
            ys.push_back(y[i]);
        }
    if (xs.size() < 10 * knots)
        throw InsufficientData("spline fit needs at least " + std::to_string(10 * knots) + " samples, got " +
                               std::to_string(xs.size()));
    const auto [xmin, xmax] = std::minmax_element(xs.begin(), xs.end());
    double lo = *xmin, hi = *xmax;
    if (domain) {
        if (!(domain->second > domain->first)) throw InvalidParameter("empty spline domain");
        if (*xmax - *xmin < 0.9 * (domain->second - domain->first))
            throw InvalidInput("predictor samples cover less than 90% of the spline domain");
        lo = domain->first;
        hi = domain->second;
    }
    if (!(hi > lo)) throw FitError("predictor samples are all equal; spline domain is empty");

    const ZeroMeanSpline shape(ZeroMeanSpline::uniform_knots(lo, hi, knots),
                               Eigen::VectorXd::Zero(static_cast<Eigen::Index>(knots + 2)), kind);
    const auto p = static_cast<Eigen::Index>(shape.basis_size());
    const auto n = static_cast<Eigen::Index>(xs.size());

    double ybar = 0.0;
    for (double v : ys) ybar += v;
    ybar /= static_cast<double>(ys.size());

    std::vector<std::size_t> per_span(knots - 1, 0);
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(n, p);
    Eigen::VectorXd Y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto [j, N] = shape.basis(xs[static_cast<std::size_t>(i)]);
        ++per_span[j];
        for (std::size_t r = 0; r < 4; ++r) B(i, static_cast<Eigen::Index>(j + r)) = N[r];
        Y(i) = ys[static_cast<std::size_t>(i)] - ybar;
    }
    for (std::size_t j = 0; j < per_span.size(); ++j)
        if (per_span[j] == 0) {
            std::ostringstream os;
            os << "empty knot span " << j + 1 << " [" << shape.knots()[j] << ", " << shape.knots()[j + 1] << ")";
            throw FitError(os.str());
        }

    // Coefficients restricted to the null space of the integral weights.
    const Eigen::VectorXd w = shape.basis_integrals();
    Eigen::HouseholderQR<Eigen::MatrixXd> wqr(w);
    const Eigen::MatrixXd Q = wqr.householderQ();
    const Eigen::MatrixXd Z = Q.rightCols(p - 1);
    const Eigen::MatrixXd BZ = B * Z;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(BZ);
    if (qr.rank() < p - 1) throw FitError("rank-deficient spline design");
    const Eigen::VectorXd c = Z * qr.solve(Y);
    return ZeroMeanSpline(shape.knots(), c, kind);
}

inline void to_json(nlohmann::json& j, const ZeroMeanSpline& s) {
    j = nlohmann::json{{"kind", to_string(s.kind())},
                       {"domain", {s.lo(), s.hi()}},
                       {"knots", s.knots()},
                       {"coefficients", std::vector<double>(s.coefficients().data(),
                                                            s.coefficients().data() + s.coefficients().size())}};
}

inline void from_json(const nlohmann::json& j, ZeroMeanSpline& s) {
    try {
        const auto knots = j.at("knots").get<std::vector<double>>();
        const auto c = j.at("coefficients").get<std::vector<double>>();
        s = ZeroMeanSpline(knots, Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<Eigen::Index>(c.size())),
                           parse_predictor_kind(j.at("kind").get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed spline JSON: ") + e.what());
    }
}

struct RollingSplineConfig {
    std::size_t window_days = 66;
    std::size_t knots = 10;
    NormalizeConfig normalize;
    std::optional<std::pair<double, double>> domain;
};

struct RollingForecast {
    // Empty for warm-up days; otherwise one forecast (in normalized units) per
    // return of the day, 0 where the predictor is undefined.
    std::vector<std::vector<double>> per_day;
    std::vector<std::optional<ZeroMeanSpline>> splines;
    std::vector<double> normalized;  // the standardized returns used for fitting
};

/// Day n is forecast from a spline fitted on days n-W .. n-1 and evaluated at
/// day n's predictor values. Returns and predictor are flat, `per_day` each day.
inline RollingForecast rolling_spline_forecast(std::span<const double> returns, const PredictorSeries& X,
                                               std::size_t per_day, const RollingSplineConfig& cfg = {}) {
    if (per_day == 0) throw InvalidParameter("per_day must be positive");
    if (returns.size() != X.values.size()) throw InvalidInput("returns and predictor are not aligned");
    if (returns.size() % per_day != 0) throw InvalidInput("series length is not a whole number of days");
    if (cfg.window_days < 1) throw InvalidParameter("window must be at least one day");
    const std::size_t days = returns.size() / per_day;

    RollingForecast out;
    out.normalized = normalize_returns(returns, cfg.normalize);
    out.per_day.resize(days);
    out.splines.resize(days);
    for (std::size_t n = cfg.window_days; n < days; ++n) {
        const std::size_t b = (n - cfg.window_days) * per_day, e = n * per_day;
        const std::span<const double> xw(X.values.data() + b, e - b), yw(out.normalized.data() + b, e - b);
        std::vector<double>& f = out.per_day[n];
        f.assign(per_day, 0.0);
        double xmin = INFINITY, xmax = -INFINITY;
        for (std::size_t i = 0; i < xw.size(); ++i)
            if (std::isfinite(xw[i]) && std::isfinite(yw[i])) {
                xmin = std::min(xmin, xw[i]);
                xmax = std::max(xmax, xw[i]);
            }
        if (!(xmax > xmin)) continue;  // constant predictor carries no information
        const auto spline = fit_zero_mean_spline(xw, yw, cfg.knots, X.kind, cfg.domain);
        for (std::size_t i = 0; i < per_day; ++i) {
            const double x = X.values[e + i];
            if (std::isfinite(x)) f[i] = spline(x);
        }
        out.splines[n] = spline;
    }
    return out;
}

}  // namespace hmmtrend
