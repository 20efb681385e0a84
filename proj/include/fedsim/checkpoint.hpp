#pragma once

// Policy checkpoints: actor parameters in the binary model format plus a
// JSON sidecar with the action decoding table, observation normalizer, and
// architecture description.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "fedsim/rl.hpp"

namespace fedsim {

inline void save_policy(const Policy& p, const std::string& dir,
                        const std::string& name) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_params(p.params, (fs::path(dir) / (name + ".fgnn")).string());

    nlohmann::json j;
    j["role"] = p.role == TrainTarget::local_search ? "local_search"
                : p.role == TrainTarget::model_craft ? "model_craft"
                                                     : "joint";
    j["obs_dim"] = p.obs_dim();
    j["act_dim"] = p.act_dim();
    j["hidden"] = p.arch.layers.empty() ? 0 : p.arch.layers.front().out;
    j["bounds"] = {{"b_lo", p.bounds.b_lo},   {"b_hi", p.bounds.b_hi},
                   {"e_lo", p.bounds.e_lo},   {"e_hi", p.bounds.e_hi},
                   {"eta_lo", p.bounds.eta_lo}, {"eta_hi", p.bounds.eta_hi}};
    j["normalizer"] = {
        {"count", p.norm.count},
        {"head_dim", p.norm.head_dim},
        {"mean", std::vector<double>(p.norm.mean.data(),
                                     p.norm.mean.data() + p.norm.mean.size())},
        {"m2", std::vector<double>(p.norm.m2.data(),
                                   p.norm.m2.data() + p.norm.m2.size())}};
    std::ofstream os(fs::path(dir) / (name + ".json"));
    if (!os) throw ConfigError("cannot write policy sidecar in " + dir);
    os << j.dump(2) << "\n";
}

inline Policy load_policy(const std::string& dir, const std::string& name) {
    namespace fs = std::filesystem;
    const auto side = fs::path(dir) / (name + ".json");
    std::ifstream is(side);
    if (!is) throw ConfigError("missing policy sidecar: " + side.string());
    nlohmann::json j;
    is >> j;

    Policy p;
    const std::string role = j.at("role");
    p.role = role == "local_search" ? TrainTarget::local_search
             : role == "model_craft" ? TrainTarget::model_craft
                                     : TrainTarget::joint;
    const int obs = j.at("obs_dim");
    const int act = j.at("act_dim");
    const int hidden = j.at("hidden");
    p.arch = make_mlp(obs, {hidden, hidden}, act, Activation::relu,
                      Activation::tanh);
    p.params = load_params((fs::path(dir) / (name + ".fgnn")).string());
    if (p.params.size() != p.arch.param_count())
        throw ConfigError("policy checkpoint does not match sidecar arch");

    const auto& b = j.at("bounds");
    p.bounds = ActionBounds{b.at("b_lo"),   b.at("b_hi"),  b.at("e_lo"),
                            b.at("e_hi"),   b.at("eta_lo"), b.at("eta_hi")};
    const auto& n = j.at("normalizer");
    p.norm.count = n.at("count");
    p.norm.head_dim = n.at("head_dim");
    const std::vector<double> mean = n.at("mean");
    const std::vector<double> m2 = n.at("m2");
    p.norm.mean = Eigen::Map<const Vec>(mean.data(),
                                        static_cast<Eigen::Index>(mean.size()));
    p.norm.m2 =
        Eigen::Map<const Vec>(m2.data(), static_cast<Eigen::Index>(m2.size()));
    return p;
}

}  // namespace fedsim
