#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hmmtrend/backtest.hpp"
#include "hmmtrend/bars.hpp"
#include "hmmtrend/baum_welch.hpp"
#include "hmmtrend/bridge.hpp"
#include "hmmtrend/ewma.hpp"
#include "hmmtrend/io.hpp"
#include "hmmtrend/iohmm.hpp"
#include "hmmtrend/mcmc.hpp"
#include "hmmtrend/plr.hpp"
#include "hmmtrend/spline.hpp"

namespace ht = hmmtrend;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    // paths
    std::string data, model, out;
    // instrument
    std::string symbol = "ES";
    double tick = 0.25;
    int roll_offset = 12;
    // learning
    std::string learner = "bw";
    std::string init = "flat";
    std::size_t k = 0;
    std::string k_range = "1..10";
    std::string criterion = "bic";
    std::size_t train_days = 0;
    int max_iter = 200;
    double tol = 1e-6;
    bool tied = false;
    double beta = 0.95;
    double plr_alpha = 0.05;
    std::size_t burn_in = 2000;
    std::size_t run_length = 10000;
    std::uint64_t seed = 1;
    // predictors
    std::string predictor = "volratio";
    std::size_t knots = 0;  // 6 for volratio, 10 for seasonal
    std::size_t window_days = 66;
    double ewma_lambda = 0.79;
    std::size_t psi_fast = 50;
    std::size_t psi_slow = 100;
    // backtest
    std::string tf = "sign";
    double tf_scale = 0.0;  // 0: one return tick maps to a full position
    double cost_bps = -1.0;  // negative: half a tick at the mean price
    double cost_fixed = 0.0;
    bool spline_strategy = false;
    // synthetic
    std::size_t days = 258;
    std::size_t synth_k = 2;
    double synth_beta = 0.95;
    double synth_mu_ticks = 0.5;
    double synth_sd_ticks = 1.5;
    double start_price = 1300.0;

    ht::InstrumentSpec instrument() const {
        ht::InstrumentSpec s;
        s.symbol = symbol;
        s.tick = tick;
        s.roll_offset_days = roll_offset;
        s.validate();
        return s;
    }

    std::size_t knot_count() const {
        if (knots) return knots;
        return ht::parse_predictor_kind(predictor) == ht::PredictorKind::vol_ratio ? 6 : 10;
    }

    ht::EmConfig em() const {
        ht::EmConfig c;
        c.max_iterations = max_iter;
        c.tol = tol;
        c.tied_variance = tied;
        c.validate();
        return c;
    }

    ht::McmcConfig mcmc() const {
        ht::McmcConfig c;
        c.burn_in = burn_in;
        c.run_length = run_length;
        c.seed = seed;
        c.validate();
        return c;
    }

    json to_json() const {
        return {{"data", data},
                {"model", model},
                {"out", out},
                {"symbol", symbol},
                {"tick", tick},
                {"roll-offset", roll_offset},
                {"learner", learner},
                {"init", init},
                {"k", k},
                {"k-range", k_range},
                {"criterion", criterion},
                {"train-days", train_days},
                {"max-iter", max_iter},
                {"tol", tol},
                {"tied", tied},
                {"beta", beta},
                {"plr-alpha", plr_alpha},
                {"burn-in", burn_in},
                {"run-length", run_length},
                {"seed", seed},
                {"predictor", predictor},
                {"knots", knot_count()},
                {"window-days", window_days},
                {"ewma-lambda", ewma_lambda},
                {"psi-fast", psi_fast},
                {"psi-slow", psi_slow},
                {"tf", tf},
                {"tf-scale", tf_scale},
                {"cost-bps", cost_bps},
                {"cost-fixed", cost_fixed},
                {"spline-strategy", spline_strategy},
                {"days", days},
                {"synth-k", synth_k},
                {"synth-beta", synth_beta},
                {"synth-mu-ticks", synth_mu_ticks},
                {"synth-sd-ticks", synth_sd_ticks},
                {"start-price", start_price}};
    }
};

std::vector<std::size_t> parse_k_range(const std::string& s) {
    std::vector<std::size_t> ks;
    auto num = [&](const std::string& t) -> std::size_t {
        std::size_t pos = 0;
        long v = 0;
        try {
            v = std::stol(t, &pos);
        } catch (const std::exception&) {
            throw UsageError("invalid k range '" + s + "'");
        }
        if (pos != t.size() || v < 1) throw UsageError("invalid k range '" + s + "'");
        return static_cast<std::size_t>(v);
    };
    const auto dots = s.find("..");
    const auto dash = s.find('-');
    if (dots != std::string::npos || dash != std::string::npos) {
        const bool d = dots != std::string::npos;
        const std::size_t a = num(s.substr(0, d ? dots : dash)), b = num(s.substr(d ? dots + 2 : dash + 1));
        if (a > b) throw UsageError("invalid k range '" + s + "': start exceeds end");
        for (std::size_t k = a; k <= b; ++k) ks.push_back(k);
    } else {
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) ks.push_back(num(item));
    }
    if (ks.empty()) throw UsageError("empty k range");
    return ks;
}

std::string need(const std::string& v, const char* what) {
    if (v.empty()) throw UsageError(std::string("missing --") + what);
    return v;
}

std::string sibling(const std::string& out, const std::string& suffix) {
    std::filesystem::path p(out);
    return (p.parent_path() / (p.stem().string() + suffix)).string();
}

struct Market {
    ht::BarSeries bars;
    std::vector<double> returns;
    std::size_t per_day = 0;
    double mean_price = 0.0;
    double return_tick = 0.0;
};

Market load_market(const RunConfig& cfg) {
    Market m;
    m.bars = ht::read_bars_file(need(cfg.data, "data"), cfg.instrument());
    if (m.bars.days.empty()) throw ht::InvalidInput(cfg.data + " holds no complete days");
    m.per_day = m.bars.bars_per_day() - 1;
    m.mean_price = ht::mean_price(m.bars);
    m.return_tick = cfg.tick / m.mean_price;
    m.returns = ht::to_returns(m.bars);
    return m;
}

ht::PredictorSeries make_predictor(const RunConfig& cfg, ht::PredictorKind kind, std::span<const double> returns,
                                   std::size_t per_day) {
    if (kind == ht::PredictorKind::seasonal) return ht::seasonal_series(returns.size() / per_day, per_day);
    return ht::vol_ratio(returns, cfg.ewma_lambda, cfg.psi_fast, cfg.psi_slow);
}

ht::TransferFunction transfer(const RunConfig& cfg, double return_tick) {
    return ht::TransferFunction::parse(cfg.tf, cfg.tf_scale > 0.0 ? cfg.tf_scale : 1.0 / return_tick);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw ht::InvalidInput("cannot write " + path);
    os << text;
}

int cmd_synth(const RunConfig& cfg) {
    const auto inst = cfg.instrument();
    const double r = cfg.tick / cfg.start_price;
    const std::size_t K = cfg.synth_k;
    if (K < 1) throw UsageError("synth-k must be >= 1");
    const auto half = std::max(4.0, std::ceil(4.0 * cfg.synth_sd_ticks + cfg.synth_mu_ticks));
    const ht::TrendGrid grid(r, half * r);
    Eigen::VectorXd mu = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(K), -cfg.synth_mu_ticks * r,
                                                    cfg.synth_mu_ticks * r);
    if (K == 1) mu(0) = cfg.synth_mu_ticks * r;
    const Eigen::MatrixXd A = K == 1 ? Eigen::MatrixXd::Ones(1, 1) : ht::sticky_transition(K, cfg.synth_beta);
    const ht::HmmParams truth(A, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(K), 1.0 / static_cast<double>(K)),
                              mu, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(K),
                                                            std::pow(cfg.synth_sd_ticks * r, 2)),
                              grid);
    ht::SyntheticSpec spec{truth, cfg.days, cfg.seed, inst, cfg.start_price};
    const auto market = ht::generate_synthetic(spec);
    const std::string out = need(cfg.out, "out");
    ht::write_bars_file(out, market.bars);
    json t = ht::hmm_to_json(truth);
    t["states"] = market.states;
    ht::write_json_file(sibling(out, ".truth.json"), t);
    std::cout << "wrote " << market.bars.days.size() << " days to " << out << '\n';
    return 0;
}

int cmd_ingest(const RunConfig& cfg) {
    const auto bars = ht::ingest_ticks_file(need(cfg.data, "data"), cfg.instrument());
    bars.validate();
    ht::write_bars_file(need(cfg.out, "out"), bars);
    std::cout << "wrote " << bars.days.size() << " days to " << cfg.out << '\n';
    return 0;
}

int cmd_learn(const RunConfig& cfg) {
    if (cfg.k == 0) throw UsageError("learn needs --k");
    const std::string out = need(cfg.out, "out");
    const auto m = load_market(cfg);
    const auto returns = ht::trailing_days(m.returns, m.per_day, cfg.train_days);
    const auto grid = ht::TrendGrid::covering(m.return_tick, returns);
    std::ostringstream trace;
    trace.precision(17);
    json model;

    auto train_prices = [&] {
        std::vector<double> prices;
        const std::size_t first = cfg.train_days && cfg.train_days < m.bars.days.size()
                                      ? m.bars.days.size() - cfg.train_days
                                      : 0;
        for (std::size_t d = first; d < m.bars.days.size(); ++d)
            prices.insert(prices.end(), m.bars.days[d].close.begin(), m.bars.days[d].close.end());
        return prices;
    };

    if (cfg.learner == "bw") {
        auto em = cfg.em();
        if (cfg.init == "plr") {
            em.init = ht::EmConfig::Init::from_params;
            em.initial = ht::default_theta(cfg.k, cfg.beta, grid, ht::plr_segment(train_prices(), cfg.plr_alpha));
        }
        const auto r = ht::baum_welch(returns, grid, cfg.k, em);
        model = ht::hmm_to_json(r.params);
        trace << "iteration,loglik\n";
        for (std::size_t i = 0; i < r.trace.loglik.size(); ++i) trace << i << ',' << r.trace.loglik[i] << '\n';
    } else if (cfg.learner == "plr") {
        const auto seg = ht::plr_segment(train_prices(), cfg.plr_alpha);
        model = ht::hmm_to_json(ht::default_theta(cfg.k, cfg.beta, grid, seg));
        trace << "begin,end,slope,sigma2\n";
        for (const auto& s : seg.segments) trace << s.begin << ',' << s.end << ',' << s.slope << ',' << s.sigma2 << '\n';
        std::cerr << "durbin-watson " << ht::durbin_watson(seg.residuals) << '\n';
    } else if (cfg.learner == "mcmc") {
        const auto prior = ht::McmcPrior::from_data(returns);
        const auto chain = ht::mcmc_sample(returns, cfg.k, prior, cfg.mcmc());
        model = ht::hmm_to_json(ht::posterior_mode(chain, grid));
        ht::write_chain_csv(trace, chain);
        const auto erg = ht::ergodic_halves(chain.log_posterior);
        json summary = {{"K", cfg.k},
                        {"draws", chain.draws.size()},
                        {"burn_in", chain.burn_in},
                        {"seed", chain.seed},
                        {"log_posterior_first_half", erg.first_mean},
                        {"log_posterior_second_half", erg.second_mean},
                        {"log_posterior_se", erg.standard_error},
                        {"stable", erg.stable}};
        ht::write_json_file(sibling(out, ".chain.json"), summary);
    } else if (cfg.learner == "iohmm") {
        const auto kind = ht::parse_predictor_kind(cfg.predictor);
        const auto X = make_predictor(cfg, kind, returns, m.per_day);
        const auto y = ht::normalize_returns(returns);
        const auto spline = ht::fit_zero_mean_spline(X.values, y, cfg.knot_count(), kind);
        const auto io = ht::iohmm_learn(returns, X, spline, grid, cfg.k, cfg.em());
        model = ht::iohmm_to_json(io);
        model["predictor"] = ht::to_string(kind);
        model["spline"] = spline;
        trace << "bucket,lo,hi,sign\n";
        for (std::size_t r = 0; r < io.partition.R(); ++r)
            trace << r + 1 << ',' << (r == 0 ? io.partition.lo : io.partition.roots[r - 1]) << ','
                  << (r + 1 == io.partition.R() ? io.partition.hi : io.partition.roots[r]) << ','
                  << io.partition.sign[r] << '\n';
        for (const auto& w : io.warnings) std::cerr << "warning: " << w << '\n';
    } else {
        throw UsageError("unknown learner '" + cfg.learner + "' (plr|bw|mcmc|iohmm)");
    }
    model["learner"] = cfg.learner;
    ht::write_json_file(out, model);
    write_text(sibling(out, ".trace.csv"), trace.str());
    std::cout << "wrote " << cfg.learner << " model with K=" << cfg.k << " to " << out << '\n';
    return 0;
}

int cmd_select_k(const RunConfig& cfg) {
    const auto ks = parse_k_range(cfg.k_range);
    const std::string out = need(cfg.out, "out");
    const auto m = load_market(cfg);
    const auto returns = ht::trailing_days(m.returns, m.per_day, cfg.train_days);
    std::ostringstream table;
    std::size_t best = 0;
    if (cfg.learner == "mcmc" || cfg.criterion == "bridge") {
        const auto sel = ht::select_k_bridge(returns, ks, ht::McmcPrior::from_data(returns), cfg.mcmc());
        for (const auto& w : sel.warnings) std::cerr << "warning: " << w << '\n';
        ht::write_bridge_csv(table, sel);
        best = sel.best_k;
    } else {
        if (cfg.criterion != "bic" && cfg.criterion != "aic")
            throw UsageError("unknown criterion '" + cfg.criterion + "' (bic|aic|bridge)");
        const auto grid = ht::TrendGrid::covering(m.return_tick, returns);
        const auto sel = ht::select_k_penalized(returns, grid, ks, cfg.em(),
                                                cfg.criterion == "aic" ? ht::Criterion::aic : ht::Criterion::bic);
        ht::write_score_csv(table, sel);
        best = sel.best_k;
    }
    write_text(out, table.str());
    std::cout << "best K=" << best << '\n';
    return 0;
}

int cmd_fit_spline(const RunConfig& cfg) {
    const auto kind = ht::parse_predictor_kind(cfg.predictor);
    const auto m = load_market(cfg);
    const auto returns = ht::trailing_days(m.returns, m.per_day, cfg.train_days);
    const auto X = make_predictor(cfg, kind, returns, m.per_day);
    const auto spline = ht::fit_zero_mean_spline(X.values, ht::normalize_returns(returns), cfg.knot_count(), kind);
    json j = spline;
    try {
        j["roots"] = ht::spline_roots(spline).roots;
    } catch (const ht::DegenerateSpline&) {
        j["roots"] = json::array();
    }
    ht::write_json_file(need(cfg.out, "out"), j);
    std::cout << "spline with " << j["roots"].size() + 1 << " buckets written to " << cfg.out << '\n';
    return 0;
}

int cmd_backtest(const RunConfig& cfg) {
    const std::string out = need(cfg.out, "out");
    if (cfg.model.empty()) throw UsageError("backtest needs --model");
    if (!std::filesystem::exists(cfg.model)) throw ht::InvalidInput("model file " + cfg.model + " not found");
    const json mj = ht::read_json_file(cfg.model);
    const auto m = load_market(cfg);
    const auto tf = transfer(cfg, m.return_tick);

    std::vector<std::pair<std::string, std::vector<double>>> positions;
    const auto model = ht::model_from_json(mj);
    const std::string name = mj.value("learner", std::string(mj.value("type", "hmm")));
    if (const auto* p = std::get_if<ht::HmmParams>(&model)) {
        positions.push_back({name, ht::run_hmm_signal(m.returns, *p, tf)});
    } else {
        const auto& io = std::get<ht::IohmmParams>(model);
        const auto kind = ht::parse_predictor_kind(mj.value("predictor", std::string("volratio")));
        const auto X = make_predictor(cfg, kind, m.returns, m.per_day);
        positions.push_back({name, ht::iohmm_signal(m.returns, X, io, tf)});
    }
    if (cfg.spline_strategy) {
        const auto kind = ht::parse_predictor_kind(cfg.predictor);
        ht::RollingSplineConfig sc;
        sc.window_days = cfg.window_days;
        sc.knots = cfg.knot_count();
        const auto X = make_predictor(cfg, kind, m.returns, m.per_day);
        const auto fc = ht::rolling_spline_forecast(m.returns, X, m.per_day, sc);
        const auto stf = ht::TransferFunction::parse(cfg.tf, cfg.tf_scale > 0.0 ? cfg.tf_scale : 1.0);
        std::vector<double> pos(m.returns.size(), 0.0);
        for (std::size_t d = 0; d < fc.per_day.size(); ++d)
            for (std::size_t i = 0; i < fc.per_day[d].size(); ++i) pos[d * m.per_day + i] = stf(fc.per_day[d][i]);
        positions.push_back({std::string("spline_") + ht::to_string(kind), std::move(pos)});
    }

    ht::CostModel cost = cfg.cost_bps >= 0.0 ? ht::CostModel::from_bps(cfg.cost_bps)
                                             : ht::CostModel::half_tick(cfg.tick, m.mean_price);
    cost.fixed = cfg.cost_fixed;
    std::vector<ht::Date> dates;
    for (const auto& d : m.bars.days) dates.push_back(d.date);
    json config = cfg.to_json();
    config["cost_proportional"] = cost.proportional;
    const auto rep = ht::run_backtest(positions, m.returns, m.per_day, cost, dates, config);
    ht::write_json_file(out, ht::report_to_json(rep));
    std::ostringstream csv;
    csv.precision(12);
    ht::write_cumret_csv(csv, rep);
    write_text(sibling(out, ".cumret.csv"), csv.str());
    for (const auto& s : rep.strategies) {
        std::cout << s.name << ": sharpe_pre=";
        if (s.sharpe_pre.defined) std::cout << s.sharpe_pre.value; else std::cout << "undefined";
        std::cout << " sharpe_post=";
        if (s.sharpe_post.defined) std::cout << s.sharpe_post.value; else std::cout << "undefined";
        std::cout << " trades=" << s.trades << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Regime-switching intraday momentum: learning, prediction and backtesting"};
    app.set_config("--config", "", "key=value configuration file; command-line flags override it");
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.fallthrough();
    app.require_subcommand(1, 1);
    RunConfig cfg;

    app.add_option("--data", cfg.data, "input bars CSV (ticks CSV for ingest)");
    app.add_option("--model", cfg.model, "model JSON for backtest");
    app.add_option("--out", cfg.out, "output path");
    app.add_option("--seed", cfg.seed, "random seed")->capture_default_str();
    app.add_option("--symbol", cfg.symbol)->capture_default_str();
    app.add_option("--tick", cfg.tick, "price tick size")->capture_default_str();
    app.add_option("--roll-offset", cfg.roll_offset, "roll this many days before expiry")->capture_default_str();
    app.add_option("--learner", cfg.learner, "plr|bw|mcmc|iohmm")
        ->check(CLI::IsMember({"plr", "bw", "mcmc", "iohmm"}))
        ->capture_default_str();
    app.add_option("--init", cfg.init, "Baum-Welch start: flat|plr (segmentation defaults)")
        ->check(CLI::IsMember({"flat", "plr"}))
        ->capture_default_str();
    app.add_option("--k", cfg.k, "number of hidden states");
    app.add_option("--k-range", cfg.k_range, "K sweep, e.g. 1..10 or 2,3,4")->capture_default_str();
    app.add_option("--criterion", cfg.criterion, "bic|aic|bridge")->capture_default_str();
    app.add_option("--train-days", cfg.train_days, "learn on the last N days only (0 = all)")->capture_default_str();
    app.add_option("--max-iter", cfg.max_iter)->capture_default_str();
    app.add_option("--tol", cfg.tol)->capture_default_str();
    app.add_flag("--tied", cfg.tied, "tie emission variances");
    app.add_option("--beta", cfg.beta, "diagonal of the default sticky transition matrix")->capture_default_str();
    app.add_option("--plr-alpha", cfg.plr_alpha)->capture_default_str();
    app.add_option("--burn-in", cfg.burn_in)->capture_default_str();
    app.add_option("--run-length", cfg.run_length)->capture_default_str();
    app.add_option("--predictor", cfg.predictor, "volratio|seasonal")
        ->check(CLI::IsMember({"volratio", "seasonal"}))
        ->capture_default_str();
    app.add_option("--knots", cfg.knots, "spline knots (default 6 volratio, 10 seasonal)");
    app.add_option("--window-days", cfg.window_days)->capture_default_str();
    app.add_option("--ewma-lambda", cfg.ewma_lambda)->capture_default_str();
    app.add_option("--psi-fast", cfg.psi_fast)->capture_default_str();
    app.add_option("--psi-slow", cfg.psi_slow)->capture_default_str();
    app.add_option("--tf", cfg.tf, "sign|linear|identity")
        ->check(CLI::IsMember({"sign", "linear", "identity"}))
        ->capture_default_str();
    app.add_option("--tf-scale", cfg.tf_scale, "linear transfer scale (0 = one return tick)")->capture_default_str();
    app.add_option("--cost-bps", cfg.cost_bps, "proportional cost per unit turnover in bp (default half a tick)");
    app.add_option("--cost-fixed", cfg.cost_fixed, "fixed cost per trade, return units")->capture_default_str();
    app.add_flag("--spline-strategy", cfg.spline_strategy, "also backtest the rolling spline forecast");
    app.add_option("--days", cfg.days)->capture_default_str();
    app.add_option("--synth-k", cfg.synth_k)->capture_default_str();
    app.add_option("--synth-beta", cfg.synth_beta)->capture_default_str();
    app.add_option("--synth-mu-ticks", cfg.synth_mu_ticks)->capture_default_str();
    app.add_option("--synth-sd-ticks", cfg.synth_sd_ticks)->capture_default_str();
    app.add_option("--start-price", cfg.start_price)->capture_default_str();

    auto* synth = app.add_subcommand("synth", "generate a synthetic market as bars CSV");
    auto* ingest = app.add_subcommand("ingest", "aggregate a tick CSV onto the minute grid");
    auto* learn = app.add_subcommand("learn", "learn a model and write it as JSON");
    auto* select = app.add_subcommand("select-k", "sweep K and write the score table");
    auto* spline = app.add_subcommand("fit-spline", "fit a zero-mean spline predictor");
    auto* backtest = app.add_subcommand("backtest", "run a model through the backtest");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    try {
        if (synth->parsed()) return cmd_synth(cfg);
        if (ingest->parsed()) return cmd_ingest(cfg);
        if (learn->parsed()) return cmd_learn(cfg);
        if (select->parsed()) return cmd_select_k(cfg);
        if (spline->parsed()) return cmd_fit_spline(cfg);
        if (backtest->parsed()) return cmd_backtest(cfg);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const ht::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
