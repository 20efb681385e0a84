#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "fedsim/env.hpp"

using namespace fedsim;

namespace {

EnvConfig small_env_cfg() {
    EnvConfig e;
    e.fl.K = 10;
    e.fl.M = 2;
    e.fl.kappa = 0.3;
    e.fl.T = 50;
    e.fl.E = 1;
    e.fl.B = 16;
    e.fl.eta = 0.05;
    e.fl.seed = 5;
    e.episode_rounds = 6;
    return e;
}

struct Fixture {
    EnvConfig cfg = small_env_cfg();
    Architecture arch = make_mlp(64, {16, 8}, 10);
    TriggerPattern trig = default_trigger(8, kGlobalTrigger, 7);
    LabeledDataset pool = make_blobs(300, 64, 10, 0.1, 31);
};

}  // namespace

TEST_CASE("layer_view_span covers the trailing hidden layers") {
    Architecture a = make_mlp(64, {16, 8}, 10);
    // fc1: 16*64+16 = 1040, fc2: 8*16+8 = 136, out: 10*8+10 = 90
    LayerViewSpan both = layer_view_span(a, 2);
    CHECK(both.offset == 0);
    CHECK(both.length == 1040 + 136);
    LayerViewSpan last = layer_view_span(a, 1);
    CHECK(last.offset == 1040);
    CHECK(last.length == 136);
    CHECK_THROWS_AS(layer_view_span(a, 3), ConfigError);
    CHECK_THROWS_AS(layer_view_span(a, 0), ConfigError);
}

TEST_CASE("return_of is the discounted geometric sum") {
    std::vector<double> ones(4, 1.0);
    const double g = 0.5;
    CHECK(return_of(ones, g) ==
          doctest::Approx(1 + 0.5 + 0.25 + 0.125).epsilon(1e-15));
    CHECK(return_of({}, g) == 0.0);
    CHECK(return_of({-2.0}, 0.99) == -2.0);
}

TEST_CASE("attacker reward is the negative weighted loss") {
    Architecture a = make_mlp(8, {4}, 3);
    ModelParams w = zeros_like(a);
    LabeledDataset clean = make_blobs(20, 8, 3, 0.1, 1);
    LabeledDataset trigd = clean;
    RewardFn r = make_attacker_reward(a, clean, trigd, 0.3);
    // Zero weights -> uniform logits -> both losses are ln(3).
    CHECK(r(w) == doctest::Approx(-std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("env reset is deterministic and reports zero attackers") {
    Fixture f;
    FLEnv env(f.cfg, f.arch, f.trig, f.pool);
    env.configure_phase(TrainTarget::joint, nullptr);
    Vec o1 = env.reset(123);
    Vec o2 = env.reset(123);
    CHECK(o1 == o2);
    CHECK(o1.size() == env.obs_dim());
    CHECK(o1[o1.size() - 1] == 0.0);  // attacker count at reset
    Vec o3 = env.reset(124);
    CHECK(o1 != o3);
    // The view head equals the freshly initialized weights.
    auto rng = make_rng(123, "init");
    env.reset(123);
    ModelParams w = init_params(f.arch, rng);
    LayerViewSpan v = layer_view_span(f.arch, f.cfg.hidden_view_layers);
    CHECK(env.model().values == w.values);
    CHECK(Vec(env.reset(123).head(v.length)) ==
          Vec(w.values.segment(v.offset, v.length)));
}

TEST_CASE("episode runs to the configured horizon with non-positive rewards") {
    Fixture f;
    FLEnv env(f.cfg, f.arch, f.trig, f.pool);
    env.configure_phase(TrainTarget::joint, nullptr);
    env.reset(9);
    Vec a = Vec::Zero(6);
    int steps = 0;
    bool done = false;
    while (!done) {
        StepResult sr = env.step(a);
        CHECK(sr.reward <= 0.0);
        done = sr.done;
        ++steps;
        REQUIRE(steps <= f.cfg.episode_rounds);
        if (!done) {
            // Observation advertises next round's attacker count.
            const RoundSample rs = [&] {
                FLConfig ec = f.cfg.fl;
                ec.seed = 9;
                return subsample(ec, steps);
            }();
            const double expect =
                static_cast<double>(rs.attackers_selected.size()) /
                std::llround(f.cfg.fl.kappa * f.cfg.fl.K);
            CHECK(sr.obs[sr.obs.size() - 1] == doctest::Approx(expect));
        } else {
            CHECK(sr.obs[sr.obs.size() - 1] == 0.0);
        }
    }
    CHECK(steps == f.cfg.episode_rounds);
}

TEST_CASE("reward is exactly zero on rounds with no sampled attacker") {
    Fixture f;
    FLEnv env(f.cfg, f.arch, f.trig, f.pool);
    env.configure_phase(TrainTarget::joint, nullptr);
    const std::uint64_t seed = 40;
    env.reset(seed);
    FLConfig ec = f.cfg.fl;
    ec.seed = seed;
    Vec a = Vec::Zero(6);
    bool saw_empty = false, saw_active = false;
    for (int t = 0; t < f.cfg.episode_rounds; ++t) {
        const bool none = subsample(ec, t).attackers_selected.empty();
        StepResult sr = env.step(a);
        if (none) {
            CHECK(sr.reward == 0.0);
            saw_empty = true;
        } else {
            CHECK(sr.reward < 0.0);
            saw_active = true;
        }
        if (sr.done) break;
    }
    // The seed above exercises both branches; if the subsampling pattern
    // changes this assert flags it for a new seed choice.
    CHECK(saw_empty);
    CHECK(saw_active);
}

TEST_CASE("identical action sequences give identical trajectories") {
    Fixture f;
    auto run = [&] {
        FLEnv env(f.cfg, f.arch, f.trig, f.pool);
        env.configure_phase(TrainTarget::joint, nullptr);
        env.reset(77);
        std::vector<double> rewards;
        Vec a(6);
        a << 0.2, -0.1, 0.4, 0.0, 0.5, -0.3;
        for (int t = 0; t < f.cfg.episode_rounds; ++t)
            rewards.push_back(env.step(a).reward);
        return rewards;
    };
    CHECK(run() == run());
}

TEST_CASE("alternating phase uses the frozen policy for the other half") {
    Fixture f;
    FLEnv env(f.cfg, f.arch, f.trig, f.pool);
    auto rng = make_rng(1, "pol");
    // A frozen crafting policy with zero weights outputs tanh(0)=0 raw,
    // decoding to alpha=beta=0.5.
    Policy frozen = make_policy(env.obs_dim(), 2, 8, env.obs_dim() - 1,
                                TrainTarget::model_craft, rng);
    frozen.params = zeros_like(frozen.arch);

    env.configure_phase(TrainTarget::local_search, &frozen);
    CHECK(env.act_dim() == 4);
    env.reset(50);
    Vec a4 = Vec::Zero(4);
    StepResult s1 = env.step(a4);

    // Joint phase with the matching explicit action must agree exactly.
    FLEnv env2(f.cfg, f.arch, f.trig, f.pool);
    env2.configure_phase(TrainTarget::joint, nullptr);
    CHECK(env2.act_dim() == 6);
    env2.reset(50);
    Vec a6 = Vec::Zero(6);
    StepResult s2 = env2.step(a6);
    CHECK(s1.reward == s2.reward);
    CHECK(s1.obs == s2.obs);

    env.configure_phase(TrainTarget::model_craft, &frozen);
    CHECK(env.act_dim() == 2);
    CHECK_THROWS_AS(env.configure_phase(TrainTarget::local_search, nullptr),
                    ConfigError);
}

TEST_CASE("step before reset throws and wrong action size throws") {
    Fixture f;
    FLEnv env(f.cfg, f.arch, f.trig, f.pool);
    env.configure_phase(TrainTarget::joint, nullptr);
    CHECK_THROWS_AS(env.step(Vec::Zero(6)), ConfigError);
    env.reset(1);
    CHECK_THROWS_AS(env.step(Vec::Zero(3)), ConfigError);
}

TEST_CASE("trace stream emits one JSON line per step") {
    Fixture f;
    FLEnv env(f.cfg, f.arch, f.trig, f.pool);
    env.configure_phase(TrainTarget::joint, nullptr);
    std::ostringstream os;
    env.set_trace(&os);
    env.reset(3);
    env.step(Vec::Zero(6));
    env.step(Vec::Zero(6));
    std::istringstream is(os.str());
    std::string line;
    int lines = 0;
    while (std::getline(is, line)) {
        CHECK(line.find("\"round\":") != std::string::npos);
        CHECK(line.find("\"reward\":") != std::string::npos);
        CHECK(line.front() == '{');
        CHECK(line.back() == '}');
        ++lines;
    }
    CHECK(lines == 2);
}

TEST_CASE("constructor validates inputs") {
    Fixture f;
    LabeledDataset tiny = make_blobs(5, 64, 10, 0.1, 2);
    CHECK_THROWS_AS(FLEnv(f.cfg, f.arch, f.trig, tiny), ConfigError);
    EnvConfig bad = f.cfg;
    bad.gamma = 1.5;
    CHECK_THROWS_AS(FLEnv(bad, f.arch, f.trig, f.pool), ConfigError);
    // Real benign clients must match K when simulation is off.
    EnvConfig real = f.cfg;
    real.simulate_benign_from_attacker_data = false;
    CHECK_THROWS_AS(FLEnv(real, f.arch, f.trig, f.pool, {}), ConfigError);
}

TEST_CASE("blowup penalty is bounded by the class count") {
    Fixture f;
    FLEnv env(f.cfg, f.arch, f.trig, f.pool);
    CHECK(env.blowup_penalty() ==
          doctest::Approx(-10.0 * std::log(10.0)).epsilon(1e-12));
}
