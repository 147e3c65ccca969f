#include "catch_amalgamated.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "hmmtrend/plr.hpp"

using namespace hmmtrend;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

std::vector<double> two_piece(std::size_t n_each, double start) {
    std::vector<double> y;
    for (std::size_t i = 0; i < n_each; ++i) y.push_back(start + static_cast<double>(i));
    const double top = y.back();
    for (std::size_t i = 1; i <= n_each; ++i) y.push_back(top - static_cast<double>(i));
    return y;
}

std::vector<double> noisy_trend(std::mt19937_64& rng, std::size_t n, double slope, double sd) {
    std::normal_distribution<double> e(0.0, sd);
    std::vector<double> y(n);
    for (std::size_t t = 0; t < n; ++t) y[t] = 1000.0 + slope * static_cast<double>(t) + e(rng);
    return y;
}

}  // namespace

TEST_CASE("noiseless two-piece series has one break", "[learn_plr]") {
    const auto y = two_piece(100, 1000.0);
    const auto seg = plr_segment(y, 0.05);
    REQUIRE(seg.change_points.size() == 1);
    CHECK(seg.change_points[0] >= 98);
    CHECK(seg.change_points[0] <= 102);
    REQUIRE(seg.segments.size() == 2);
    CHECK_THAT(seg.segments[0].slope, WithinAbs(1.0, 1e-6));
    CHECK_THAT(seg.segments[1].slope, WithinAbs(-1.0, 1e-6));
    CHECK(seg.change_pvalues[0] < 0.05);
}

TEST_CASE("a level jump does not hide a slope change", "[learn_plr]") {
    // Straight line, jump, then up-and-down: the least-squares split is the
    // jump at 200 and the fitted slopes on either side agree.
    std::mt19937_64 rng(5);
    std::normal_distribution<double> e(0.0, 0.5);
    std::vector<double> y;
    for (std::size_t t = 0; t < 200; ++t) y.push_back(0.2 * static_cast<double>(t));
    double v = y.back() + 300.0;
    for (std::size_t t = 0; t < 100; ++t) y.push_back(v += 0.6);
    for (std::size_t t = 0; t < 100; ++t) y.push_back(v -= 0.2);
    for (double& x : y) x += e(rng);
    const auto seg = plr_segment(y, 0.05);
    REQUIRE(seg.segments.size() >= 2);
    bool near_turn = false;
    for (std::size_t cp : seg.change_points) near_turn = near_turn || (cp >= 290 && cp <= 310);
    CHECK(near_turn);
}

TEST_CASE("pure line has no break", "[learn_plr]") {
    std::vector<double> y(300);
    for (std::size_t t = 0; t < y.size(); ++t) y[t] = 500.0 + 0.37 * static_cast<double>(t);
    const auto seg = plr_segment(y, 0.05);
    CHECK(seg.change_points.empty());
    REQUIRE(seg.segments.size() == 1);
    CHECK_THAT(seg.segments[0].slope, WithinAbs(0.37, 1e-9));
    CHECK(seg.segments[0].sigma2 < 1e-18);
}

TEST_CASE("segment variance is the ML estimate", "[learn_plr]") {
    std::mt19937_64 rng(3);
    const auto y = noisy_trend(rng, 80, 0.2, 1.5);
    const auto seg = plr_segment(y, 1e-12);
    REQUIRE(seg.segments.size() == 1);
    double sse = 0.0;
    for (double r : seg.residuals) sse += r * r;
    CHECK_THAT(seg.segments[0].sigma2, WithinRel(sse / 80.0, 1e-12));
    double sr = 0.0;
    for (double r : seg.residuals) sr += r;
    CHECK_THAT(sr, WithinAbs(0.0, 1e-8));
}

TEST_CASE("plr input validation", "[learn_plr]") {
    std::vector<double> y(19, 1.0);
    CHECK_THROWS_AS(plr_segment(y, 0.05), InvalidInput);
    y.push_back(1.0);
    CHECK_NOTHROW(plr_segment(y, 0.05));
    CHECK_THROWS_AS(plr_segment(y, 0.0), InvalidParameter);
}

TEST_CASE("segmentation invariants on random piecewise series", "[learn_plr][property]") {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> pieces(1, 5), len(10, 120);
    std::uniform_real_distribution<double> slope(-2.0, 2.0), sd(0.1, 3.0);
    std::normal_distribution<double> n01;
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<double> y;
        double level = 1000.0;
        const double s = sd(rng);
        const int P = pieces(rng);
        for (int p = 0; p < P; ++p) {
            const double b = slope(rng);
            const int L = len(rng);
            for (int i = 0; i < L; ++i) {
                level += b;
                y.push_back(level + s * n01(rng));
            }
        }
        if (y.size() < 20) continue;
        const double alpha = 0.01;
        const auto seg = plr_segment(y, alpha);
        REQUIRE(seg.change_points.size() == seg.change_pvalues.size());
        REQUIRE(seg.segments.size() == seg.change_points.size() + 1);
        for (double p : seg.change_pvalues) CHECK(p < alpha);
        for (std::size_t i = 0; i < seg.change_points.size(); ++i) {
            CHECK(seg.change_points[i] > 0);
            CHECK(seg.change_points[i] < y.size());
            if (i > 0) CHECK(seg.change_points[i] > seg.change_points[i - 1]);
        }
        for (const auto& sg : seg.segments) CHECK(sg.length() >= 10);
        CHECK(seg.segments.front().begin == 0);
        CHECK(seg.segments.back().end == y.size());
    }
}

TEST_CASE("durbin_watson", "[learn_plr]") {
    SECTION("alternating signs") {
        for (std::size_t n : {2u, 7u, 100u}) {
            std::vector<double> e(n);
            for (std::size_t t = 0; t < n; ++t) e[t] = t % 2 ? -1.0 : 1.0;
            const double nn = static_cast<double>(n);
            CHECK_THAT(durbin_watson(e), WithinAbs(4.0 * (nn - 1.0) / nn, 1e-14));
        }
    }
    SECTION("constant residuals") {
        std::vector<double> e(50, 2.5);
        CHECK(durbin_watson(e) == 0.0);
    }
    SECTION("iid residuals") {
        std::mt19937_64 rng(5);
        std::normal_distribution<double> n01;
        std::vector<double> e(10000);
        for (auto& v : e) v = n01(rng);
        CHECK_THAT(durbin_watson(e), WithinAbs(2.0, 0.1));
    }
    SECTION("errors") {
        CHECK_THROWS_AS(durbin_watson(std::vector<double>{1.0}), InvalidInput);
        CHECK_THROWS_AS(durbin_watson(std::vector<double>(10, 0.0)), InvalidInput);
    }
}

TEST_CASE("residuals around a trend pass Durbin-Watson", "[learn_plr][property]") {
    int pass = 0;
    const int seeds = 100;
    for (int s = 0; s < seeds; ++s) {
        std::mt19937_64 rng(1000 + s);
        const auto y = noisy_trend(rng, 1000, 0.05, 1.0);
        const auto seg = plr_segment(y, 0.05);
        const double dw = durbin_watson(seg.residuals);
        if (dw >= 1.6 && dw <= 2.4) ++pass;
    }
    CHECK(pass >= 95);
}

TEST_CASE("default_theta", "[learn_plr]") {
    const TrendGrid grid(1e-4, 0.01);
    const auto seg = plr_segment(two_piece(100, 1000.0), 0.05);

    SECTION("K=2 from the two-piece series") {
        const auto p = default_theta(2, 0.5, grid, seg);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) CHECK(p.A()(i, j) == 0.5);
        CHECK(p.pi()(0) == 0.5);
        CHECK_THAT(p.mu()(0), WithinRel(-1.0 / seg.mean_level, 1e-6));
        CHECK_THAT(p.mu()(1), WithinRel(1.0 / seg.mean_level, 1e-6));
        CHECK(p.sigma2()(0) == p.variance_floor());
    }
    SECTION("K=3 off-diagonals") {
        std::vector<double> y;
        double level = 1000.0;
        for (double b : {1.0, -1.0, 3.0})
            for (int i = 0; i < 60; ++i) y.push_back(level += b);
        const auto s3 = plr_segment(y, 0.05);
        REQUIRE(s3.segments.size() >= 3);
        const auto p = default_theta(3, 0.5, grid, s3);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) CHECK_THAT(p.A()(i, j), WithinAbs(i == j ? 0.5 : 0.25, 1e-15));
        CHECK(p.mu()(0) < p.mu()(1));
        CHECK(p.mu()(1) < p.mu()(2));
    }
    SECTION("errors") {
        CHECK_THROWS_AS(default_theta(3, 0.5, grid, seg), InsufficientData);
        CHECK_THROWS_AS(default_theta(1, 0.5, grid, seg), InvalidParameter);
        CHECK_THROWS_AS(default_theta(2, 1.0, grid, seg), InvalidParameter);
    }
    SECTION("output always valid on random segmentations") {
        std::mt19937_64 rng(8);
        std::uniform_real_distribution<double> slope(-3.0, 3.0);
        std::normal_distribution<double> n01;
        for (int rep = 0; rep < 50; ++rep) {
            std::vector<double> y;
            double level = 2000.0;
            for (int p = 0; p < 6; ++p) {
                const double b = slope(rng);
                for (int i = 0; i < 50; ++i) y.push_back((level += b) + 0.3 * n01(rng));
            }
            const auto sg = plr_segment(y, 0.01);
            if (sg.segments.size() < 2) continue;
            const auto p = default_theta(2, 0.7, grid, sg);
            CHECK(((p.A().rowwise().sum().array() - 1.0).abs() < 1e-12).all());
            CHECK((p.sigma2().array() >= p.variance_floor()).all());
        }
    }
}
