#pragma once

// Exponentially weighted volatility and mean over a truncated window, the
// volatility-ratio and seasonal predictors, and return normalization.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hmmtrend/error.hpp"

namespace hmmtrend {

struct EwmaConfig {
    double lambda = 0.79;
    std::size_t psi = 100;

    void validate() const {
        if (!(lambda > 0.0 && lambda < 1.0)) throw InvalidParameter("EWMA lambda must be in (0, 1)");
        if (psi < 1) throw InvalidParameter("EWMA window must be >= 1");
    }
};

struct EwmaSeries {
    std::vector<double> value;
    std::vector<bool> warmup;  // fewer than psi+1 observations contributed
};

/// sigma[t] = sqrt((1-lambda) * sum_{tau=0..psi} lambda^tau y[t-tau]^2), the
/// forecast for t+1 made with data up to t.
inline EwmaSeries ewma_vol(std::span<const double> returns, const EwmaConfig& cfg) {
    cfg.validate();
    if (returns.size() < cfg.psi)
        throw InsufficientData("EWMA needs at least " + std::to_string(cfg.psi) + " returns");
    EwmaSeries out;
    out.value.resize(returns.size());
    out.warmup.resize(returns.size());
    for (std::size_t t = 0; t < returns.size(); ++t) {
        double s = 0.0, w = 1.0;
        for (std::size_t tau = 0; tau <= cfg.psi && tau <= t; ++tau) {
            s += w * returns[t - tau] * returns[t - tau];
            w *= cfg.lambda;
        }
        out.value[t] = std::sqrt((1.0 - cfg.lambda) * s);
        out.warmup[t] = t < cfg.psi;
    }
    return out;
}

/// Weighted mean over the same truncated window, weights normalized to one.
inline EwmaSeries ewma_mean(std::span<const double> returns, const EwmaConfig& cfg) {
    cfg.validate();
    EwmaSeries out;
    out.value.resize(returns.size());
    out.warmup.resize(returns.size());
    for (std::size_t t = 0; t < returns.size(); ++t) {
        double s = 0.0, ws = 0.0, w = 1.0;
        for (std::size_t tau = 0; tau <= cfg.psi && tau <= t; ++tau) {
            s += w * returns[t - tau];
            ws += w;
            w *= cfg.lambda;
        }
        out.value[t] = s / ws;
        out.warmup[t] = t < cfg.psi;
    }
    return out;
}

enum class PredictorKind { vol_ratio, seasonal };

inline const char* to_string(PredictorKind k) { return k == PredictorKind::vol_ratio ? "volratio" : "seasonal"; }

inline PredictorKind parse_predictor_kind(const std::string& s) {
    if (s == "volratio" || s == "vol_ratio") return PredictorKind::vol_ratio;
    if (s == "seasonal") return PredictorKind::seasonal;
    throw InvalidParameter("unknown predictor kind '" + s + "'");
}

/// One value per return; NaN marks an undefined sample (warm-up or a zero
/// denominator). values[t] is known before returns[t] is observed.
struct PredictorSeries {
    PredictorKind kind = PredictorKind::vol_ratio;
    std::vector<double> values;
};

inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

/// Ratio of fast- to slow-window EWMA volatility forecasts. values[t] uses the
/// forecasts made at t-1.
inline PredictorSeries vol_ratio(std::span<const double> returns, double lambda = 0.79, std::size_t psi_fast = 50,
                                 std::size_t psi_slow = 100) {
    if (psi_fast > psi_slow) throw InvalidParameter("fast window longer than slow window");
    const auto fast = ewma_vol(returns, {lambda, psi_fast});
    const auto slow = ewma_vol(returns, {lambda, psi_slow});
    PredictorSeries out{PredictorKind::vol_ratio, std::vector<double>(returns.size(), kUndefined)};
    for (std::size_t t = 1; t < returns.size(); ++t) {
        if (slow.warmup[t - 1] || !(slow.value[t - 1] > 0.0)) continue;
        out.values[t] = fast.value[t - 1] / slow.value[t - 1];
    }
    return out;
}

inline constexpr int kSessionOpenMinute = 60;    // 01:00
inline constexpr int kSessionCloseMinute = 915;  // 15:15
inline constexpr int kSessionBars = kSessionCloseMinute - kSessionOpenMinute + 1;

/// Minute-of-session bucket: 01:00 -> 1, 15:15 -> 856.
inline int seasonal_index(int minute_of_day) {
    if (minute_of_day < kSessionOpenMinute || minute_of_day > kSessionCloseMinute)
        throw OutOfSession("minute " + std::to_string(minute_of_day) + " is outside the 01:00-15:15 session");
    return minute_of_day - kSessionOpenMinute + 1;
}

inline int seasonal_index(int hour, int minute) {
    if (minute < 0 || minute > 59 || hour < 0 || hour > 23) throw InvalidInput("invalid clock time");
    return seasonal_index(hour * 60 + minute);
}

/// Seasonal predictor for `days` sessions of per-day returns between
/// consecutive bars: the return ending at bar b (2..856) carries index b.
inline PredictorSeries seasonal_series(std::size_t days, std::size_t returns_per_day = kSessionBars - 1) {
    PredictorSeries out{PredictorKind::seasonal, {}};
    out.values.reserve(days * returns_per_day);
    for (std::size_t d = 0; d < days; ++d)
        for (std::size_t i = 0; i < returns_per_day; ++i)
            out.values.push_back(static_cast<double>(kSessionBars - returns_per_day + i + 1));
    return out;
}

struct NormalizeConfig {
    EwmaConfig mean{0.99, 500};
    EwmaConfig vol{0.99, 500};
};

/// (y[t] - mean forecast) / volatility forecast, both made with data up to
/// t-1. NaN during warm-up and where the volatility forecast is zero.
inline std::vector<double> normalize_returns(std::span<const double> returns, const NormalizeConfig& cfg = {}) {
    cfg.mean.validate();
    cfg.vol.validate();
    std::vector<double> out(returns.size(), kUndefined);
    if (returns.size() < 2) return out;
    const auto m = ewma_mean(returns, cfg.mean);
    std::vector<double> dev(returns.size());
    for (std::size_t t = 0; t < returns.size(); ++t) dev[t] = returns[t] - m.value[t];
    if (returns.size() < cfg.vol.psi) return out;
    const auto v = ewma_vol(dev, cfg.vol);
    for (std::size_t t = 1; t < returns.size(); ++t) {
        if (m.warmup[t - 1] || v.warmup[t - 1]) continue;
        if (!(v.value[t - 1] > 1e-9 * std::abs(m.value[t - 1]))) continue;
        out[t] = (returns[t] - m.value[t - 1]) / v.value[t - 1];
    }
    return out;
}

}  // namespace hmmtrend
