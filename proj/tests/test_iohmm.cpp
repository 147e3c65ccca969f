#include "catch_amalgamated.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "fixtures.hpp"
#include "hmmtrend/baum_welch.hpp"
#include "hmmtrend/io.hpp"
#include "hmmtrend/iohmm.hpp"
#include "hmmtrend/spline.hpp"

using namespace hmmtrend;
using Catch::Matchers::WithinAbs;

namespace {

bool same(const HmmParams& a, const HmmParams& b) {
    return a.A() == b.A() && a.pi() == b.pi() && a.mu() == b.mu() && a.sigma2() == b.sigma2() && a.grid() == b.grid();
}

ZeroMeanSpline fit_to(double lo, double hi, double (*f)(double), std::size_t n = 2001) {
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
        y[i] = f(x[i]);
    }
    return fit_zero_mean_spline(x, y, 10, PredictorKind::vol_ratio);
}

std::size_t dominant_state(const HmmParams& p) {
    // stationary distribution of a 2-state chain
    const double up = p.A()(0, 1) / (p.A()(0, 1) + p.A()(1, 0));
    return up > 0.5 ? 1 : 0;
}

HmmParams two_state(const TrendGrid& g, double a00, double a11, double m0, double m1, double p0) {
    Eigen::MatrixXd A(2, 2);
    A << a00, 1.0 - a00, 1.0 - a11, a11;
    return HmmParams(A, Eigen::Vector2d(p0, 1.0 - p0), Eigen::Vector2d(m0, m1), Eigen::Vector2d(1.0, 2.0), g);
}

}  // namespace

TEST_CASE("spline_roots on constructed functions", "[iohmm]") {
    SECTION("centred line has one root") {
        const auto g = fit_to(-1.0, 1.0, [](double x) { return x; });
        const auto p = spline_roots(g);
        REQUIRE(p.R() == 2);
        CHECK_THAT(p.roots[0], WithinAbs(0.0, 1e-6));
        CHECK(p.sign == std::vector<int>{-1, 1});
    }
    SECTION("sine over a period has two interior roots") {
        const auto g = fit_to(-std::numbers::pi / 2, 1.5 * std::numbers::pi, [](double x) { return std::sin(x); });
        const auto p = spline_roots(g);
        REQUIRE(p.R() == 3);
        CHECK_THAT(p.roots[0], WithinAbs(0.0, 1e-3));
        CHECK_THAT(p.roots[1], WithinAbs(std::numbers::pi, 1e-3));
        CHECK(p.sign == std::vector<int>{-1, 1, -1});
    }
    SECTION("identically zero spline") {
        const ZeroMeanSpline z(ZeroMeanSpline::uniform_knots(0.0, 1.0, 5), Eigen::VectorXd::Zero(7),
                               PredictorKind::seasonal);
        CHECK_THROWS_AS(spline_roots(z), DegenerateSpline);
    }
}

TEST_CASE("spline_roots partition property", "[iohmm][property]") {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> n01;
    for (int rep = 0; rep < 100; ++rep) {
        Eigen::VectorXd c(9);
        for (auto& v : c) v = n01(rng);
        const ZeroMeanSpline g(ZeroMeanSpline::uniform_knots(-2.0, 3.0, 7), c, PredictorKind::vol_ratio);
        const auto p = spline_roots(g);
        REQUIRE(p.sign.size() == p.R());
        std::vector<double> edges{p.lo};
        edges.insert(edges.end(), p.roots.begin(), p.roots.end());
        edges.push_back(p.hi);
        for (std::size_t r = 0; r + 1 < edges.size(); ++r) {
            REQUIRE(edges[r] < edges[r + 1]);
            if (r > 0) CHECK(std::abs(g(edges[r])) < 1e-8);
            const double w = edges[r + 1] - edges[r];
            for (int i = 1; i < 50; ++i) {
                const double x = edges[r] + w * i / 50.0;
                const double v = g(x);
                // Tangent touches without a crossing are not roots; skip near-zero values.
                if (std::abs(v) > 1e-6) CHECK((v > 0 ? 1 : -1) == p.sign[r]);
                CHECK(p.bucket_of(x) == r);
            }
        }
    }
}

TEST_CASE("bucket_data", "[iohmm]") {
    std::vector<double> y{1, 2, 3, 4, 5, 6};
    SECTION("single bucket keeps everything in order") {
        const PredictorSeries X{PredictorKind::vol_ratio, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}};
        const auto b = bucket_data(y, X, BucketPartition::single(0.0, 1.0));
        REQUIRE(b.size() == 1);
        CHECK(b[0] == y);
    }
    SECTION("alternating input interleaves") {
        const PredictorSeries X{PredictorKind::vol_ratio, {-1, 1, -1, 1, -1, 1}};
        const BucketPartition p{-1.0, 1.0, {0.0}, {-1, 1}};
        const auto b = bucket_data(y, X, p);
        CHECK(b[0] == std::vector<double>{1, 3, 5});
        CHECK(b[1] == std::vector<double>{2, 4, 6});
    }
    SECTION("outside the domain clamps to the boundary buckets") {
        const PredictorSeries X{PredictorKind::vol_ratio, {-9, 9, 0.0, -0.5, 0.5, 40}};
        const BucketPartition p{-1.0, 1.0, {0.0}, {-1, 1}};
        const auto b = bucket_data(y, X, p);
        CHECK(b[0] == std::vector<double>{1, 4});
        CHECK(b[1] == std::vector<double>{2, 3, 5, 6});
    }
    SECTION("misaligned input") {
        const PredictorSeries X{PredictorKind::vol_ratio, {0.0}};
        CHECK_THROWS_AS(bucket_data(y, X, BucketPartition::single(0, 1)), InvalidInput);
    }
    SECTION("completeness on random partitions") {
        std::mt19937_64 rng(5);
        std::uniform_real_distribution<double> u(-2.0, 2.0);
        for (int rep = 0; rep < 50; ++rep) {
            BucketPartition p{-1.0, 1.0, {}, {}};
            const int nr = rep % 4;
            for (int i = 0; i < nr; ++i) p.roots.push_back(-1.0 + 2.0 * (i + 1) / (nr + 1));
            PredictorSeries X{PredictorKind::vol_ratio, {}};
            std::vector<double> r;
            for (int t = 0; t < 300; ++t) {
                X.values.push_back(u(rng));
                r.push_back(t);
            }
            const auto b = bucket_data(r, X, p);
            std::size_t total = 0;
            for (std::size_t k = 0; k < b.size(); ++k) {
                total += b[k].size();
                for (std::size_t i = 1; i < b[k].size(); ++i) CHECK(b[k][i] > b[k][i - 1]);
                for (double t : b[k]) CHECK(p.bucket_of(X.values[static_cast<std::size_t>(t)]) == k);
            }
            CHECK(total == r.size());
        }
    }
    SECTION("planted input gives opposing bucket means") {
        const auto d = fixtures::planted_input(6000, 11);
        const BucketPartition p{-1.0, 1.0, {0.0}, {-1, 1}};
        const auto b = bucket_data(d.returns, d.X, p);
        double m0 = 0, m1 = 0;
        for (double v : b[0]) m0 += v;
        for (double v : b[1]) m1 += v;
        CHECK(m0 / static_cast<double>(b[0].size()) < 0.0);
        CHECK(m1 / static_cast<double>(b[1].size()) > 0.0);
    }
}

TEST_CASE("iohmm_learn", "[iohmm]") {
    const auto d = fixtures::planted_input(6000, 3);
    const TrendGrid grid = d.params.grid();
    const BucketPartition split{-1.0, 1.0, {0.0}, {-1, 1}};

    SECTION("constant input collapses to plain Baum-Welch") {
        const PredictorSeries X{PredictorKind::vol_ratio, std::vector<double>(d.returns.size(), 0.3)};
        const auto io = iohmm_learn(d.returns, X, grid, 2);
        const auto bw = baum_welch(d.returns, grid, 2).params;
        REQUIRE(io.theta.size() == 1);
        CHECK(same(io.theta[0], bw));
        const auto tf = TransferFunction::parse("identity");
        CHECK(iohmm_signal(d.returns, X, io, tf) == run_hmm_signal(d.returns, bw, tf));
    }
    SECTION("bucket-dependent direction is recovered") {
        const auto io = iohmm_learn(d.returns, d.X, split, grid, 2);
        REQUIRE(io.theta.size() == 2);
        CHECK(io.warnings.empty());
        const double mu0 = io.theta[0].mu()(static_cast<Eigen::Index>(dominant_state(io.theta[0])));
        const double mu1 = io.theta[1].mu()(static_cast<Eigen::Index>(dominant_state(io.theta[1])));
        CHECK(mu0 < 0.0);
        CHECK(mu1 > 0.0);
        for (const auto& t : io.theta) CHECK(t.mu()(0) <= t.mu()(1));
    }
    SECTION("spline overload matches the explicit partition") {
        const auto g = fit_to(-1.0, 1.0, [](double x) { return x; });
        const auto a = iohmm_learn(d.returns, d.X, g, grid, 2);
        const auto b = iohmm_learn(d.returns, d.X, spline_roots(g), grid, 2);
        REQUIRE(a.theta.size() == 2);
        for (std::size_t r = 0; r < 2; ++r) CHECK(same(a.theta[r], b.theta[r]));
    }
    SECTION("reruns are bitwise equal") {
        const auto a = iohmm_learn(d.returns, d.X, split, grid, 2);
        const auto b = iohmm_learn(d.returns, d.X, split, grid, 2);
        for (std::size_t r = 0; r < 2; ++r) CHECK(same(a.theta[r], b.theta[r]));
    }
    SECTION("sparse bucket takes the pooled estimate") {
        PredictorSeries X{PredictorKind::vol_ratio, std::vector<double>(d.returns.size(), -0.5)};
        for (std::size_t t = 100; t < 105; ++t) X.values[t] = 0.5;
        const auto io = iohmm_learn(d.returns, X, split, grid, 2);
        REQUIRE(io.warnings.size() == 1);
        CHECK(io.warnings[0].find("bucket 2") != std::string::npos);
        const auto pooled = detail::sorted_by_mean(baum_welch(d.returns, grid, 2).params);
        CHECK(same(io.theta[1], pooled));
        CHECK_FALSE(same(io.theta[0], pooled));
    }
    SECTION("every bucket sparse") {
        const std::vector<double> y(d.returns.begin(), d.returns.begin() + 30);
        PredictorSeries X{PredictorKind::vol_ratio, {}};
        for (std::size_t t = 0; t < 30; ++t) X.values.push_back(t % 2 ? 0.5 : -0.5);
        CHECK_THROWS_AS(iohmm_learn(y, X, split, grid, 2), InsufficientData);
    }
}

TEST_CASE("iohmm_signal", "[iohmm]") {
    const TrendGrid g(1.0, 3.0);
    const HmmParams t1 = two_state(g, 0.9, 0.8, -1.0, 0.5, 0.3);
    const HmmParams t2 = two_state(g, 0.6, 0.95, -0.4, 1.2, 0.7);
    const BucketPartition split{-1.0, 1.0, {0.0}, {-1, 1}};
    const auto id = TransferFunction::parse("identity");

    SECTION("identical parameter sets reduce to the plain filter") {
        const auto d = fixtures::planted_input(500, 2);
        const HmmParams p = two_state(d.params.grid(), 0.9, 0.8, -1.0, 0.5, 0.3);
        const IohmmParams io{split, {p, p}, {}};
        CHECK(iohmm_signal(d.returns, d.X, io, id) == run_hmm_signal(d.returns, p, id));
        const IohmmParams one{BucketPartition::single(-1, 1), {p}, {}};
        CHECK(iohmm_signal(d.returns, d.X, one, id) == run_hmm_signal(d.returns, p, id));
    }
    SECTION("three-step hand trace") {
        const std::vector<double> y{1.0, -2.0, 0.0};
        const PredictorSeries X{PredictorKind::vol_ratio, {-0.5, 0.5, -0.5}};
        const IohmmParams io{split, {t1, t2}, {}};
        const auto s = iohmm_signal(y, X, io, id);

        FilterState prior;
        prior.omega_pred = t1.pi();
        const double e0 = predict_return(prior, t1);
        const FilterState f0 = init_filter(t1, y[0]);
        const FilterState f1 = filter_step(f0, t2, y[1]);
        const double e1 = predict_return(f1, t2);
        const FilterState f2 = filter_step(f1, t1, y[2]);
        const double e2 = predict_return(f2, t1);
        CHECK_THAT(s[0], WithinAbs(std::clamp(e0, -1.0, 1.0), 1e-14));
        CHECK_THAT(s[1], WithinAbs(std::clamp(e1, -1.0, 1.0), 1e-14));
        CHECK_THAT(s[2], WithinAbs(std::clamp(e2, -1.0, 1.0), 1e-14));
        // Independent arithmetic for the middle step.
        const double w0 = t1.pi()(0) * std::exp(t1.log_emission(0, g.snap(1.0)));
        const double w1 = t1.pi()(1) * std::exp(t1.log_emission(1, g.snap(1.0)));
        const double q0 = (w0 * t2.A()(0, 0) + w1 * t2.A()(1, 0)) / (w0 + w1);
        const double q1 = (w0 * t2.A()(0, 1) + w1 * t2.A()(1, 1)) / (w0 + w1);
        CHECK_THAT(e1, WithinAbs(q0 * t2.discretized_mean()(0) + q1 * t2.discretized_mean()(1), 1e-12));
    }
    SECTION("undefined input keeps the previous set") {
        const std::vector<double> y{1.0, -2.0, 0.0};
        const PredictorSeries X{PredictorKind::vol_ratio, {0.5, kUndefined, -0.5}};
        const PredictorSeries Xh{PredictorKind::vol_ratio, {0.5, 0.5, -0.5}};
        const IohmmParams io{split, {t1, t2}, {}};
        CHECK(iohmm_signal(y, X, io, id) == iohmm_signal(y, Xh, io, id));
    }
    SECTION("filter stays normalized across switches and matches the composition") {
        const auto d = fixtures::planted_input(3000, 9);
        const auto io = iohmm_learn(d.returns, d.X, split, d.params.grid(), 2);
        const TransferFunction lin = TransferFunction::parse("linear", 0.5);
        const auto s = iohmm_signal(d.returns, d.X, io, lin);
        FilterState st;
        for (std::size_t t = 0; t < d.returns.size(); ++t) {
            const HmmParams& p = io.theta[split.bucket_of(d.X.values[t])];
            if (t == 0) {
                st.omega_pred = p.pi();
                CHECK_THAT(s[0], WithinAbs(lin(predict_return(st, p)), 1e-12));
                st = init_filter(p, d.returns[0]);
            } else {
                st = filter_step(st, p, d.returns[t]);
                CHECK_THAT(s[t], WithinAbs(lin(predict_return(st, p)), 1e-12));
            }
            CHECK_THAT(st.omega_filt.sum(), WithinAbs(1.0, 1e-10));
            CHECK_THAT(st.omega_pred.sum(), WithinAbs(1.0, 1e-10));
        }
    }
    SECTION("errors") {
        const IohmmParams bad{split, {t1}, {}};
        const std::vector<double> y{0.0};
        const PredictorSeries X{PredictorKind::vol_ratio, {0.0}};
        CHECK_THROWS_AS(iohmm_signal(y, X, bad, id), InvalidParameter);
        const IohmmParams io{split, {t1, t2}, {}};
        CHECK_THROWS_AS(iohmm_signal({}, PredictorSeries{}, io, id), InvalidInput);
    }
}

TEST_CASE("model JSON round trip", "[iohmm][io]") {
    const TrendGrid g(0.25, 2.0);
    const HmmParams a = two_state(g, 0.9, 0.8, -0.3, 0.2, 0.4);
    const HmmParams b = two_state(g, 0.7, 0.75, -0.1, 0.6, 0.5);
    const IohmmParams io{{-1.5, 2.0, {0.123456789012345}, {-1, 1}}, {a, b}, {}};

    const auto back = iohmm_from_json(json::parse(iohmm_to_json(io).dump()));
    CHECK(back.partition.lo == io.partition.lo);
    CHECK(back.partition.hi == io.partition.hi);
    CHECK(back.partition.roots == io.partition.roots);
    CHECK(back.partition.sign == io.partition.sign);
    REQUIRE(back.theta.size() == 2);
    CHECK(same(back.theta[0], a));
    CHECK(same(back.theta[1], b));

    const auto m = model_from_json(json::parse(model_to_json(Model{a}).dump()));
    REQUIRE(std::holds_alternative<HmmParams>(m));
    CHECK(same(std::get<HmmParams>(m), a));

    auto j = hmm_to_json(a);
    j.erase("mu");
    CHECK_THROWS_AS(hmm_from_json(j), InvalidInput);
    auto k = hmm_to_json(a);
    k["A"][0][0] = 1.5;
    CHECK_THROWS_AS(hmm_from_json(k), InvalidParameter);
    CHECK_THROWS_AS(model_from_json(json{{"type", "forest"}}), InvalidInput);
    auto wrong = iohmm_to_json(io);
    wrong["theta"].erase(1);
    CHECK_THROWS_AS(iohmm_from_json(wrong), InvalidParameter);
}
