#pragma once

// Strategy simulation with costs and intraday flattening, Sharpe and
// correlation reporting, and the synthetic market generator.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "hmmtrend/bars.hpp"
#include "hmmtrend/error.hpp"
#include "hmmtrend/ewma.hpp"
#include "hmmtrend/hmm.hpp"
#include "hmmtrend/synthetic.hpp"

namespace hmmtrend {

/// Costs in return units: `proportional` per unit of position change and
/// `fixed` per trade (any nonzero change).
struct CostModel {
    double proportional = 0.0;
    double fixed = 0.0;

    void validate() const {
        if (!(proportional >= 0.0) || !(fixed >= 0.0)) throw InvalidParameter("costs must be >= 0");
    }

    /// Half a tick of slippage per unit turnover at the reference price.
    static CostModel half_tick(double tick, double price) { return {0.5 * tick / price, 0.0}; }
    static CostModel from_bps(double bps) { return {bps * 1e-4, 0.0}; }

    double operator()(double turnover) const { return turnover > 0.0 ? proportional * turnover + fixed : 0.0; }
};

/// Signal made at t (using data up to and including t) becomes the position
/// held over return t+1. Nothing is held over the first return.
inline std::vector<double> lag_signal(std::span<const double> signal) {
    std::vector<double> pos(signal.size(), 0.0);
    for (std::size_t t = 1; t < signal.size(); ++t) pos[t] = signal[t - 1];
    return pos;
}

struct Simulation {
    std::vector<double> gross;  // position * return
    std::vector<double> net;    // after costs
    std::size_t trades = 0;
};

/// positions[t] is held over returns[t] and must depend on returns[0..t-1]
/// only (run_hmm_signal output already has this form). The book starts each
/// day flat and is flattened after the day's last return; the costs of those
/// trades land on the first and last return of the day.
inline Simulation simulate(std::span<const double> positions, std::span<const double> returns, std::size_t per_day,
                           const CostModel& cost = {}) {
    cost.validate();
    if (positions.size() != returns.size()) throw InvalidInput("positions and returns are not aligned");
    if (per_day == 0 || returns.size() % per_day != 0)
        throw InvalidInput("series length is not a whole number of days");
    Simulation out;
    out.gross.resize(returns.size());
    out.net.resize(returns.size());
    for (std::size_t t = 0; t < returns.size(); ++t) {
        const double s = positions[t];
        if (!std::isfinite(s)) throw InvalidInput("non-finite position at t=" + std::to_string(t));
        const bool open = t % per_day == 0, close = t % per_day == per_day - 1;
        const double before = open ? 0.0 : positions[t - 1];
        double c = cost(std::abs(s - before));
        out.trades += s != before;
        if (close) {
            c += cost(std::abs(s));
            out.trades += s != 0.0;
        }
        out.gross[t] = s * returns[t];
        out.net[t] = out.gross[t] - c;
    }
    return out;
}

inline std::vector<double> daily_sums(std::span<const double> x, std::size_t per_day) {
    if (per_day == 0 || x.size() % per_day != 0) throw InvalidInput("series length is not a whole number of days");
    std::vector<double> out(x.size() / per_day, 0.0);
    for (std::size_t t = 0; t < x.size(); ++t) out[t / per_day] += x[t];
    return out;
}

/// A statistic that can be undefined (zero variance).
struct Statistic {
    double value = std::nan("");
    bool defined = false;
};

inline Statistic sharpe(std::span<const double> daily, double N = 258.0, double r = 0.0) {
    if (daily.size() < 2) throw InsufficientData("Sharpe ratio needs at least two days");
    double mean = 0.0, scale = 0.0;
    for (double x : daily) {
        mean += x;
        scale = std::max(scale, std::abs(x));
    }
    mean /= static_cast<double>(daily.size());
    double ss = 0.0;
    for (double x : daily) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(daily.size() - 1));
    if (!(sd > 1e-14 * scale)) return {};
    return {std::sqrt(N) * (mean - r) / sd, true};
}

inline Statistic correlation(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw InvalidInput("correlation inputs differ in length");
    if (a.size() < 2) throw InsufficientData("correlation needs at least two points");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (!(saa > 0.0) || !(sbb > 0.0)) return {};
    return {std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0), true};
}

struct StrategyResult {
    std::string name;
    std::vector<double> daily_pre;
    std::vector<double> daily_post;
    Statistic sharpe_pre;
    Statistic sharpe_post;
    std::size_t trades = 0;
};

inline StrategyResult evaluate_strategy(std::string name, std::span<const double> positions,
                                        std::span<const double> returns, std::size_t per_day,
                                        const CostModel& cost) {
    const auto sim = simulate(positions, returns, per_day, cost);
    StrategyResult r;
    r.name = std::move(name);
    r.daily_pre = daily_sums(sim.gross, per_day);
    r.daily_post = daily_sums(sim.net, per_day);
    r.sharpe_pre = sharpe(r.daily_pre);
    r.sharpe_post = sharpe(r.daily_post);
    r.trades = sim.trades;
    return r;
}

struct BacktestReport {
    nlohmann::json config;
    std::vector<Date> dates;
    std::vector<StrategyResult> strategies;  // the first is the primary strategy

    const StrategyResult& find(const std::string& name) const {
        for (const auto& s : strategies)
            if (s.name == name) return s;
        throw InvalidInput("no strategy named '" + name + "'");
    }
};

/// Runs each named position series through `simulate`; a long-only benchmark
/// is appended when not already present.
inline BacktestReport run_backtest(const std::vector<std::pair<std::string, std::vector<double>>>& positions,
                                   std::span<const double> returns, std::size_t per_day, const CostModel& cost,
                                   std::vector<Date> dates = {}, nlohmann::json config = nlohmann::json::object()) {
    if (positions.empty()) throw InvalidParameter("no strategies to backtest");
    BacktestReport rep;
    rep.config = std::move(config);
    rep.dates = std::move(dates);
    bool have_long = false;
    for (const auto& [name, pos] : positions) {
        rep.strategies.push_back(evaluate_strategy(name, pos, returns, per_day, cost));
        have_long = have_long || name == "long_only";
    }
    if (!have_long) {
        const std::vector<double> ones(returns.size(), 1.0);
        rep.strategies.push_back(evaluate_strategy("long_only", ones, returns, per_day, cost));
    }
    if (!rep.dates.empty() && rep.dates.size() != rep.strategies.front().daily_pre.size())
        throw InvalidInput("dates do not match the number of days");
    return rep;
}

namespace detail {

inline nlohmann::json stat_json(const Statistic& s) { return s.defined ? nlohmann::json(s.value) : nlohmann::json(); }

}  // namespace detail

inline nlohmann::json report_to_json(const BacktestReport& rep) {
    using nlohmann::json;
    const auto& primary = rep.strategies.front();
    json strategies = json::object(), corr = json::object();
    for (const auto& s : rep.strategies)
        strategies[s.name] = {{"daily_returns_pre", s.daily_pre},
                              {"daily_returns", s.daily_post},
                              {"sharpe_pre", detail::stat_json(s.sharpe_pre)},
                              {"sharpe_post", detail::stat_json(s.sharpe_post)},
                              {"trade_count", s.trades}};
    for (std::size_t i = 0; i < rep.strategies.size(); ++i)
        for (std::size_t j = i + 1; j < rep.strategies.size(); ++j)
            corr[rep.strategies[i].name + "~" + rep.strategies[j].name] =
                detail::stat_json(correlation(rep.strategies[i].daily_pre, rep.strategies[j].daily_pre));
    json dates = json::array();
    for (const auto& d : rep.dates) dates.push_back(format_date(d));
    return {{"config", rep.config},
            {"strategy", primary.name},
            {"dates", dates},
            {"daily_returns", primary.daily_post},
            {"sharpe_pre", detail::stat_json(primary.sharpe_pre)},
            {"sharpe_post", detail::stat_json(primary.sharpe_post)},
            {"correlations", corr},
            {"trade_count", primary.trades},
            {"strategies", strategies}};
}

/// Cumulative post-cost daily returns, `date,strategy,cumret`.
inline void write_cumret_csv(std::ostream& os, const BacktestReport& rep) {
    os << "date,strategy,cumret\n";
    for (const auto& s : rep.strategies) {
        double c = 0.0;
        for (std::size_t d = 0; d < s.daily_post.size(); ++d) {
            c += s.daily_post[d];
            os << (rep.dates.empty() ? std::to_string(d + 1) : format_date(rep.dates[d])) << ',' << s.name << ','
               << c << '\n';
        }
    }
}

/// Transition matrices keyed on an observed input: regime r applies at step t
/// when X[t] falls in the r-th interval cut by `cuts`.
struct InputDependence {
    std::vector<Eigen::MatrixXd> regimes;
    std::vector<double> cuts;  // increasing; regimes.size() == cuts.size() + 1
    PredictorSeries X;
};

struct SyntheticSpec {
    HmmParams params;  // emissions on a grid of log returns
    std::size_t days = 258;
    std::uint64_t seed = 1;
    InstrumentSpec instrument;
    double start_price = 1300.0;
    Date start{std::chrono::year{2011}, std::chrono::January, std::chrono::day{3}};
    std::optional<InputDependence> input;
};

struct SyntheticMarket {
    BarSeries bars;
    std::vector<double> returns;     // model returns before price rounding
    std::vector<std::size_t> states;  // latent state behind each return
    std::optional<PredictorSeries> X;
};

inline std::vector<Date> business_days(Date start, std::size_t n) {
    std::vector<Date> out;
    std::chrono::sys_days d{start};
    while (out.size() < n) {
        if (is_weekday(Date{d})) out.push_back(Date{d});
        d += std::chrono::days{1};
    }
    return out;
}

/// Prices follow the latent-trend model: the log price accumulates the sampled
/// returns and each bar is rounded onto the tick grid. The latent chain runs
/// on across days; the first bar of a day repeats the previous close.
inline SyntheticMarket generate_synthetic(const SyntheticSpec& spec) {
    spec.instrument.validate();
    if (spec.days == 0) throw InvalidParameter("synthetic market needs at least one day");
    if (!(spec.start_price > spec.instrument.tick)) throw InvalidParameter("start price must exceed the tick size");
    const std::size_t per_day = spec.instrument.bars_per_day() - 1;
    const std::size_t T = spec.days * per_day;

    SampledPath path;
    SyntheticMarket out;
    if (spec.input) {
        const auto& in = *spec.input;
        if (in.regimes.size() != in.cuts.size() + 1) throw InvalidParameter("need one regime per input interval");
        if (in.X.values.size() != T) throw InvalidParameter("input series must have one value per return");
        auto regime = [&](std::size_t t) -> std::size_t {
            const double x = in.X.values[t];
            if (!std::isfinite(x)) return 0;
            return static_cast<std::size_t>(std::upper_bound(in.cuts.begin(), in.cuts.end(), x) - in.cuts.begin());
        };
        path = sample_regime_hmm(spec.params, in.regimes, regime, T, spec.seed);
        out.X = in.X;
    } else {
        path = sample_hmm(spec.params, T, spec.seed);
    }

    const double tick = spec.instrument.tick;
    auto on_grid = [&](double logp) { return std::max(tick, std::round(std::exp(logp) / tick) * tick); };
    out.bars.spec = spec.instrument;
    const auto dates = business_days(spec.start, spec.days);
    double logp = std::log(spec.start_price);
    for (std::size_t d = 0; d < spec.days; ++d) {
        TradingDay day{dates[d], {}};
        day.close.reserve(per_day + 1);
        day.close.push_back(on_grid(logp));
        for (std::size_t i = 0; i < per_day; ++i) {
            logp += path.returns[d * per_day + i];
            day.close.push_back(on_grid(logp));
        }
        out.bars.days.push_back(std::move(day));
    }
    out.returns = std::move(path.returns);
    out.states = std::move(path.states);
    return out;
}

}  // namespace hmmtrend
