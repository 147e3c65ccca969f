#include "catch_amalgamated.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path workdir() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / ("hmmtrend_cli_" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string path(const std::string& name) { return (workdir() / name).string(); }

int run(const std::string& args) {
    const std::string cmd = std::string(HMMTREND_CLI) + " " + args + " > " + path("stdout.txt") + " 2> " +
                            path("stderr.txt");
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("cli synth, learn and backtest", "[cli]") {
    const std::string bars = path("bars.csv");
    REQUIRE(run("synth --out " + bars + " --days 12 --seed 4 --synth-k 2 --synth-beta 0.98 --synth-mu-ticks 0.8") == 0);
    REQUIRE(fs::exists(path("bars.truth.json")));

    SECTION("plr gives a K=2 model") {
        REQUIRE(run("learn --data " + bars + " --learner plr --k 2 --out " + path("plr.json")) == 0);
        const auto m = json::parse(slurp(path("plr.json")));
        CHECK(m.at("K") == 2);
        CHECK(m.at("learner") == "plr");
    }
    SECTION("bw with a seed is byte-for-byte reproducible") {
        REQUIRE(run("learn --data " + bars + " --learner bw --k 2 --seed 9 --out " + path("bw1.json")) == 0);
        REQUIRE(run("learn --data " + bars + " --learner bw --k 2 --seed 9 --out " + path("bw2.json")) == 0);
        CHECK(slurp(path("bw1.json")) == slurp(path("bw2.json")));
        CHECK(fs::exists(path("bw1.trace.csv")));
        REQUIRE(run("learn --data " + bars + " --learner bw --init plr --k 2 --out " + path("bwp.json")) == 0);
        const auto m = json::parse(slurp(path("bwp.json")));
        CHECK(m.at("K") == 2);
        CHECK(m.at("mu")[0].get<double>() < 0.0);
        CHECK(m.at("mu")[1].get<double>() > 0.0);
    }
    SECTION("mcmc smoke run emits a chain summary") {
        REQUIRE(run("learn --data " + bars + " --learner mcmc --k 2 --burn-in 50 --run-length 250 --out " +
                    path("mc.json")) == 0);
        const auto s = json::parse(slurp(path("mc.chain.json")));
        CHECK(s.at("draws") == 200);
        CHECK(fs::exists(path("mc.trace.csv")));
    }
    SECTION("config file with flag overrides") {
        std::ofstream(path("run.cfg")) << "# learning run\nlearner=plr\nk=3\ndata=" << bars << "\n";
        REQUIRE(run("learn --config " + path("run.cfg") + " --learner bw --k 2 --out " + path("cfg.json")) == 0);
        const auto m = json::parse(slurp(path("cfg.json")));
        CHECK(m.at("learner") == "bw");
        CHECK(m.at("K") == 2);
        std::ofstream(path("bad.cfg")) << "no_such_key=1\n";
        CHECK(run("learn --config " + path("bad.cfg") + " --k 2 --data " + bars + " --out " + path("x.json")) != 0);
        CHECK(slurp(path("stderr.txt")).find("no_such_key") != std::string::npos);
    }
    SECTION("backtest writes the report and the cumulative curve") {
        REQUIRE(run("learn --data " + bars + " --learner bw --k 2 --out " + path("m.json")) == 0);
        const std::string cmd = "backtest --data " + bars + " --model " + path("m.json") + " --seed 3 --out " +
                                path("r1.json");
        REQUIRE(run(cmd) == 0);
        const std::string first = slurp(path("r1.json"));
        REQUIRE(run(cmd) == 0);
        CHECK(slurp(path("r1.json")) == first);
        const auto r = json::parse(slurp(path("r1.json")));
        for (const char* key : {"config", "daily_returns", "sharpe_pre", "sharpe_post", "correlations", "trade_count"})
            CHECK(r.contains(key));
        CHECK(r.at("daily_returns").size() == 12);
        CHECK(r.at("strategies").contains("long_only"));
        CHECK(r.at("config").at("seed") == 3);
        CHECK(slurp(path("r1.cumret.csv")).rfind("date,strategy,cumret\n", 0) == 0);
    }
    SECTION("zero-signal model gives zero returns") {
        const json zero = {{"type", "hmm"},   {"A", {{0.9, 0.1}, {0.1, 0.9}}}, {"pi", {0.5, 0.5}},
                           {"mu", {0.0, 0.0}}, {"sigma2", {1e-7, 1e-7}},       {"tick", 0.25 / 1300.0},
                           {"omega", 8 * 0.25 / 1300.0}};
        std::ofstream(path("zero.json")) << zero.dump();
        REQUIRE(run("backtest --data " + bars + " --model " + path("zero.json") + " --out " + path("z.json")) == 0);
        const auto r = json::parse(slurp(path("z.json")));
        for (const auto& d : r.at("daily_returns")) CHECK(d.get<double>() == 0.0);
        CHECK(r.at("trade_count") == 0);
    }
    SECTION("errors exit nonzero with a diagnostic") {
        CHECK(run("backtest --data " + bars + " --model " + path("missing.json") + " --out " + path("x.json")) == 1);
        CHECK(slurp(path("stderr.txt")).find("missing.json") != std::string::npos);
        CHECK(run("select-k --data " + bars + " --k-range 5..2 --out " + path("k.csv")) == 2);
        CHECK(run("learn --data " + bars + " --learner nonsense --k 2 --out " + path("x.json")) != 0);
        CHECK(run("learn --data " + path("nope.csv") + " --k 2 --out " + path("x.json")) == 1);
    }
}

TEST_CASE("cli long-only on drifting data", "[cli]") {
    const std::string bars = path("drift.csv");
    REQUIRE(run("synth --out " + bars + " --days 20 --seed 2 --synth-k 1 --synth-mu-ticks 0.05") == 0);
    const json model = {{"type", "hmm"},  {"A", {{1.0}}},         {"pi", {1.0}},
                        {"mu", {0.0}},     {"sigma2", {1e-7}},     {"tick", 0.25 / 1300.0},
                        {"omega", 8 * 0.25 / 1300.0}};
    std::ofstream(path("flat.json")) << model.dump();
    REQUIRE(run("backtest --data " + bars + " --model " + path("flat.json") + " --out " + path("d.json")) == 0);
    const auto r = json::parse(slurp(path("d.json")));
    CHECK(r.at("strategies").at("long_only").at("sharpe_pre").get<double>() > 0.0);
}

TEST_CASE("cli select-k", "[cli]") {
    const std::string bars = path("three.csv");
    REQUIRE(run("synth --out " + bars + " --days 40 --seed 6 --synth-k 3 --synth-beta 0.97 --synth-mu-ticks 1.5") ==
            0);
    REQUIRE(run("select-k --data " + bars + " --k-range 1..6 --out " + path("sweep.csv")) == 0);
    CHECK(slurp(path("stdout.txt")).find("best K=3") != std::string::npos);
    REQUIRE(run("select-k --data " + bars + " --k-range 1 --out " + path("one.csv")) == 0);
    const auto t = slurp(path("one.csv"));
    CHECK(t.rfind("K,loglik,AIC,BIC,iterations,converged\n1,", 0) == 0);
    CHECK(slurp(path("stdout.txt")).find("best K=1") != std::string::npos);
    REQUIRE(run("fit-spline --data " + bars + " --predictor seasonal --out " + path("s.json")) == 0);
    const auto s = json::parse(slurp(path("s.json")));
    CHECK(s.at("kind") == "seasonal");
    CHECK(s.at("knots").size() == 10);
}
