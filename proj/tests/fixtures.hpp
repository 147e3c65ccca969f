#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "hmmtrend/ewma.hpp"
#include "hmmtrend/hmm.hpp"
#include "hmmtrend/synthetic.hpp"
#include "oracles.hpp"

namespace fixtures {

struct Instance {
    hmmtrend::HmmParams params;
    oracle::SmallHmm small;
    std::vector<double> returns;
};

inline std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
    std::gamma_distribution<double> g(1.0, 1.0);
    std::vector<double> v(n);
    double s = 0.0;
    for (double& x : v) s += (x = g(rng) + 1e-3);
    for (double& x : v) x /= s;
    return v;
}

// Random small HMM (K <= 3, grid <= 7 points) with T <= 6 observations.
inline Instance random_instance(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> kd(1, 3), td(1, 6), hd(1, 3);
    const std::size_t K = kd(rng), T = td(rng), half = hd(rng);
    const double tick = 0.1;
    hmmtrend::TrendGrid grid(tick, static_cast<double>(half) * tick);
    std::uniform_real_distribution<double> mud(-grid.omega(), grid.omega());
    std::uniform_real_distribution<double> sd(0.5 * tick * tick, 4.0 * tick * tick);

    oracle::SmallHmm s;
    s.grid = grid.values();
    Eigen::MatrixXd A(K, K);
    Eigen::VectorXd pi(K), mu(K), s2(K);
    for (std::size_t i = 0; i < K; ++i) {
        auto row = random_simplex(rng, K);
        // make rows sum to exactly 1 in floating point
        double rest = 1.0;
        for (std::size_t j = 0; j + 1 < K; ++j) rest -= row[j];
        row[K - 1] = rest;
        s.A.push_back(row);
        for (std::size_t j = 0; j < K; ++j) A(i, j) = row[j];
    }
    auto p0 = random_simplex(rng, K);
    double rest = 1.0;
    for (std::size_t j = 0; j + 1 < K; ++j) rest -= p0[j];
    p0[K - 1] = rest;
    s.pi = p0;
    for (std::size_t k = 0; k < K; ++k) {
        pi(k) = p0[k];
        s.mu.push_back(mu(k) = mud(rng));
        s.sigma2.push_back(s2(k) = sd(rng));
    }
    std::uniform_int_distribution<std::size_t> gd(0, grid.size() - 1);
    std::vector<double> y(T);
    for (double& v : y) v = grid[gd(rng)];
    return {hmmtrend::HmmParams(A, pi, mu, s2, grid), s, y};
}

struct PlantedSeasonal {
    std::vector<double> returns;
    hmmtrend::PredictorSeries X;
    std::vector<double> g;  // planted signal in normalized units, per return
    std::size_t per_day = 0;
};

// Returns = scale * (g(X) + N(0,1)) with X the seasonal index and g a full
// sine period over the session.
inline PlantedSeasonal planted_seasonal(std::size_t days, double amplitude, std::uint64_t seed,
                                        double scale = 1e-4) {
    PlantedSeasonal out;
    out.per_day = hmmtrend::kSessionBars - 1;
    out.X = hmmtrend::seasonal_series(days, out.per_day);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    for (double x : out.X.values) {
        const double g = amplitude * std::sin(2.0 * M_PI * (x - 2.0) / static_cast<double>(out.per_day));
        out.g.push_back(g);
        out.returns.push_back(scale * (g + n01(rng)));
    }
    return out;
}

// Two-state trend model whose transition matrix follows the sign of an
// observed input: x < 0 favours the down state, x > 0 the up state. The input
// holds its sign over blocks of random length and is known one step ahead.
struct PlantedInput {
    hmmtrend::HmmParams params;
    std::vector<Eigen::MatrixXd> regimes;
    std::vector<double> returns;
    std::vector<std::size_t> states;
    hmmtrend::PredictorSeries X;
};

inline PlantedInput planted_input(std::size_t T, std::uint64_t seed, double mean_block = 60.0) {
    const hmmtrend::TrendGrid grid(1.0, 8.0);
    Eigen::MatrixXd A(2, 2);
    A << 0.9, 0.1, 0.1, 0.9;
    PlantedInput out{hmmtrend::HmmParams(A, Eigen::Vector2d(0.5, 0.5), Eigen::Vector2d(-0.8, 0.8),
                                         Eigen::Vector2d(1.5, 1.5), grid),
                     {},
                     {},
                     {},
                     {hmmtrend::PredictorKind::vol_ratio, {}}};
    Eigen::MatrixXd down(2, 2), up(2, 2);
    down << 0.97, 0.03, 0.30, 0.70;
    up << 0.70, 0.30, 0.03, 0.97;
    out.regimes = {down, up};

    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::geometric_distribution<int> block(1.0 / mean_block);
    std::uniform_real_distribution<double> mag(0.05, 1.0);
    bool positive = rng() & 1U;
    while (out.X.values.size() < T) {
        const std::size_t len = 1 + static_cast<std::size_t>(block(rng));
        for (std::size_t i = 0; i < len && out.X.values.size() < T; ++i)
            out.X.values.push_back(positive ? mag(rng) : -mag(rng));
        positive = !positive;
    }
    const auto& xs = out.X.values;
    auto path = hmmtrend::sample_regime_hmm(
        out.params, out.regimes, [&](std::size_t t) -> std::size_t { return xs[t] > 0.0 ? 1 : 0; }, T, seed);
    out.returns = std::move(path.returns);
    out.states = std::move(path.states);
    return out;
}

inline double correlation(const std::vector<double>& a, const std::vector<double>& b) {
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
    return sab / std::sqrt(saa * sbb);
}

}  // namespace fixtures
