#pragma once

// JSON persistence for learned models.

#include <cmath>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "hmmtrend/error.hpp"
#include "hmmtrend/hmm.hpp"
#include "hmmtrend/iohmm.hpp"

namespace hmmtrend {

using json = nlohmann::json;

namespace detail {

inline std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline Eigen::VectorXd from_vec(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

inline json hmm_to_json(const HmmParams& p) {
    json A = json::array();
    for (Eigen::Index i = 0; i < p.A().rows(); ++i) A.push_back(detail::to_vec(p.A().row(i).transpose()));
    return {{"type", "hmm"},
            {"K", p.K()},
            {"A", A},
            {"pi", detail::to_vec(p.pi())},
            {"mu", detail::to_vec(p.mu())},
            {"sigma2", detail::to_vec(p.sigma2())},
            {"tick", p.grid().tick()},
            {"omega", p.grid().omega()}};
}

inline HmmParams hmm_from_json(const json& j) {
    try {
        const auto rows = j.at("A").get<std::vector<std::vector<double>>>();
        const auto K = static_cast<Eigen::Index>(rows.size());
        Eigen::MatrixXd A(K, K);
        for (Eigen::Index i = 0; i < K; ++i) {
            if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != K)
                throw InvalidInput("transition matrix is not square");
            for (Eigen::Index k = 0; k < K; ++k) A(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        }
        return HmmParams(A, detail::from_vec(j.at("pi").get<std::vector<double>>()),
                         detail::from_vec(j.at("mu").get<std::vector<double>>()),
                         detail::from_vec(j.at("sigma2").get<std::vector<double>>()),
                         TrendGrid(j.at("tick").get<double>(), j.at("omega").get<double>()));
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed model JSON: ") + e.what());
    }
}

inline json iohmm_to_json(const IohmmParams& p) {
    json theta = json::array();
    for (const auto& t : p.theta) theta.push_back(hmm_to_json(t));
    return {{"type", "iohmm"},
            {"partition",
             {{"domain", {p.partition.lo, p.partition.hi}}, {"roots", p.partition.roots}, {"sign", p.partition.sign}}},
            {"theta", theta}};
}

inline IohmmParams iohmm_from_json(const json& j) {
    try {
        IohmmParams p;
        const auto& part = j.at("partition");
        const auto dom = part.at("domain").get<std::vector<double>>();
        if (dom.size() != 2) throw InvalidInput("partition domain needs two values");
        p.partition.lo = dom[0];
        p.partition.hi = dom[1];
        p.partition.roots = part.at("roots").get<std::vector<double>>();
        p.partition.sign = part.value("sign", std::vector<int>(p.partition.roots.size() + 1, 0));
        for (const auto& t : j.at("theta")) p.theta.push_back(hmm_from_json(t));
        p.validate();
        return p;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed IOHMM JSON: ") + e.what());
    }
}

using Model = std::variant<HmmParams, IohmmParams>;

inline json model_to_json(const Model& m) {
    return std::visit(
        [](const auto& v) -> json {
            if constexpr (std::is_same_v<std::decay_t<decltype(v)>, HmmParams>) return hmm_to_json(v);
            else return iohmm_to_json(v);
        },
        m);
}

inline Model model_from_json(const json& j) {
    const std::string type = j.value("type", "hmm");
    if (type == "hmm") return hmm_from_json(j);
    if (type == "iohmm") return iohmm_from_json(j);
    throw InvalidInput("unknown model type '" + type + "'");
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InvalidInput(path + ": " + e.what());
    }
}

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path);
    out << j.dump(2) << '\n';
}

}  // namespace hmmtrend
