#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "fedsim/checkpoint.hpp"
#include "fedsim/rl.hpp"

using namespace fedsim;

TEST_CASE("replay buffer is a ring with uniform sampling") {
    ReplayBuffer buf(4, 2, 1);
    CHECK(buf.size() == 0);
    for (int i = 0; i < 6; ++i) {
        Vec o = Vec::Constant(2, static_cast<double>(i));
        Vec a = Vec::Constant(1, 0.0);
        buf.push(o, a, static_cast<double>(i), o, false);
    }
    CHECK(buf.size() == 4);
    // Oldest two entries were overwritten: rewards present are {2,3,4,5}.
    std::set<double> seen;
    for (Eigen::Index i = 0; i < 4; ++i) seen.insert(buf.rewards()[i]);
    CHECK(seen == std::set<double>{2.0, 3.0, 4.0, 5.0});

    auto rng = make_rng(1, "buf");
    auto idx = buf.sample_indices(100, rng);
    CHECK(idx.size() == 100);
    for (auto i : idx) CHECK(i < 4);
    // Every slot gets sampled eventually.
    std::set<std::size_t> hit(idx.begin(), idx.end());
    CHECK(hit.size() == 4);
}

TEST_CASE("soft update converges geometrically at rate 1-tau") {
    Architecture a = make_mlp(2, {3}, 1);
    ModelParams target = zeros_like(a);
    ModelParams online = zeros_like(a);
    online.values.setOnes();
    const double tau = 0.1;
    soft_update(target, online, tau);
    CHECK(target.values[0] == doctest::Approx(0.1));
    for (int i = 0; i < 99; ++i) soft_update(target, online, tau);
    CHECK(target.values[0] ==
          doctest::Approx(1.0 - std::pow(0.9, 100)).epsilon(1e-12));
}

TEST_CASE("normalizer standardizes head entries and passes the tail through") {
    Normalizer n = Normalizer::make(3, 2);
    auto rng = make_rng(3, "norm");
    std::normal_distribution<double> g(5.0, 2.0);
    for (int i = 0; i < 2000; ++i) {
        Vec o(3);
        o << g(rng), g(rng) * 3.0, 0.7;
        n.update(o);
    }
    Vec probe(3);
    probe << 5.0, 15.0, 0.7;
    Vec z = n.normalize(probe);
    CHECK(std::abs(z[0]) < 0.2);  // near the mean -> near zero
    CHECK(std::abs(z[1]) < 0.2);
    CHECK(z[2] == 0.7);  // tail untouched

    // Before two samples the transform is the identity.
    Normalizer fresh = Normalizer::make(3, 2);
    CHECK(fresh.normalize(probe) == probe);
}

TEST_CASE("a zero-weight actor emits the midpoint action") {
    auto rng = make_rng(4, "pol");
    Policy p = make_policy(3, 4, 8, 2, TrainTarget::local_search, rng);
    p.params = zeros_like(p.arch);
    Vec obs = Vec::Constant(3, 0.4);
    Vec raw = policy_raw_action(p, obs);
    CHECK(raw == Vec::Zero(4));
    // tanh output stays in [-1,1] for any weights.
    Policy q = make_policy(3, 4, 8, 2, TrainTarget::local_search, rng);
    q.params.values *= 50.0;
    Vec r = policy_raw_action(q, obs);
    for (Eigen::Index i = 0; i < 4; ++i) {
        CHECK(r[i] <= 1.0);
        CHECK(r[i] >= -1.0);
    }
    // Deterministic act equals raw; exploration stays clipped.
    auto arng = make_rng(5, "act");
    CHECK(act(p, obs, true, arng) == raw);
    for (int i = 0; i < 50; ++i) {
        Vec e = act(p, obs, false, arng, 0.5);
        for (Eigen::Index d = 0; d < 4; ++d) {
            CHECK(e[d] <= 1.0);
            CHECK(e[d] >= -1.0);
        }
    }
}

TEST_CASE("fresh agent starts with targets equal to online networks") {
    auto rng = make_rng(6, "agent");
    TD3Hyper h;
    h.hidden = 16;
    h.buffer_capacity = 100;
    TD3Agent ag = make_agent(5, 2, 4, TrainTarget::model_craft, h, rng);
    CHECK(ag.actor_target.values == ag.actor.params.values);
    CHECK(ag.critic1_target.values == ag.critic1.values);
    CHECK(ag.critic2_target.values == ag.critic2.values);
    CHECK(ag.critic1.values != ag.critic2.values);
    CHECK(ag.obs_dim() == 5);
    CHECK(ag.act_dim() == 2);
    CHECK(ag.critic_arch.input_dim == 7);
    CHECK(ag.critic_arch.output_dim() == 1);
}

TEST_CASE("clipped double-Q target is bounded by each critic's own target") {
    auto rng = make_rng(7, "agent");
    TD3Hyper h;
    h.hidden = 16;
    h.buffer_capacity = 100;
    TD3Agent ag = make_agent(3, 2, 2, TrainTarget::joint, h, rng);
    // Make the two critic targets differ.
    ag.critic2_target.values *= -0.5;

    const int B = 32;
    Mat nobs(B, 3);
    nobs.setRandom();
    Vec rew(B), done(B);
    rew.setRandom();
    done.setZero();
    done[3] = 1.0;

    auto trng = make_rng(8, "targets");
    TargetBatch tb = td3_targets(ag, h, nobs, rew, done, trng);
    for (int i = 0; i < B; ++i) {
        const double mn = std::min(tb.q1[i], tb.q2[i]);
        CHECK(tb.y[i] ==
              doctest::Approx(rew[i] + h.gamma * (1.0 - done[i]) * mn)
                  .epsilon(1e-12));
        CHECK(tb.y[i] <= rew[i] + h.gamma * (1.0 - done[i]) * tb.q1[i] + 1e-12);
        CHECK(tb.y[i] <= rew[i] + h.gamma * (1.0 - done[i]) * tb.q2[i] + 1e-12);
    }
    // Terminal transition bootstraps nothing.
    CHECK(tb.y[3] == doctest::Approx(rew[3]).epsilon(1e-12));
}

TEST_CASE("td3_update reduces critic loss on a fixed batch distribution") {
    auto rng = make_rng(9, "agent");
    TD3Hyper h;
    h.hidden = 16;
    h.batch = 32;
    h.buffer_capacity = 512;
    h.warmup_steps = 0;
    TD3Agent ag = make_agent(2, 1, 2, TrainTarget::joint, h, rng);

    // Deterministic synthetic task: r = -(o0 - a)^2, done always.
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 512; ++i) {
        Vec o(2);
        o << u(rng), u(rng);
        Vec a(1);
        a << u(rng);
        const double r = -(o[0] - a[0]) * (o[0] - a[0]);
        ag.buffer.push(o, a, r, o, true);
    }
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 400; ++i) {
        const double loss = td3_update(ag, h, rng);
        if (i == 0) first = loss;
        last = loss;
    }
    CHECK(last < first);
    CHECK(last < 0.05);
}

TEST_CASE("td3_update throws TrainingError on divergence") {
    auto rng = make_rng(10, "agent");
    TD3Hyper h;
    h.hidden = 8;
    h.batch = 8;
    h.buffer_capacity = 64;
    TD3Agent ag = make_agent(2, 1, 2, TrainTarget::joint, h, rng);
    for (int i = 0; i < 64; ++i) {
        Vec o = Vec::Constant(2, 1.0);
        Vec a = Vec::Constant(1, 0.5);
        ag.buffer.push(o, a, -1e9, o, true);  // absurd rewards force a blowup
    }
    CHECK_THROWS_AS(
        [&] {
            for (int i = 0; i < 50; ++i) td3_update(ag, h, rng);
        }(),
        TrainingError);
}

TEST_CASE("toy environment contract") {
    ToyEnv env(5);
    Vec o = env.reset(3);
    CHECK(o.size() == 1);
    CHECK(env.obs_dim() == 1);
    CHECK(env.act_dim() == 1);
    Vec perfect = o;
    StepResult sr = env.step(perfect);
    CHECK(sr.reward == 0.0);
    Vec off(1);
    off << sr.obs[0] + 0.5;
    sr = env.step(off);
    CHECK(sr.reward == doctest::Approx(-0.25));
    int steps = 2;
    while (!sr.done) {
        sr = env.step(Vec::Zero(1));
        ++steps;
    }
    CHECK(steps == 5);
    CHECK(env.reset(3)[0] == o[0]);
}

TEST_CASE("short toy training improves the average episode return") {
    ToyEnv env(50);
    auto rng = make_rng(11, "train");
    TD3Hyper h;
    h.hidden = 32;
    h.batch = 64;
    h.buffer_capacity = 5000;
    h.warmup_steps = 200;
    TD3Agent ag = make_agent(1, 1, 1, TrainTarget::joint, h, rng);
    auto stats = td3_train(env, ag, 3000, h, rng);
    REQUIRE(stats.size() >= 10);
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 5; ++i) early += stats[static_cast<std::size_t>(i)].total_reward;
    for (std::size_t i = stats.size() - 5; i < stats.size(); ++i)
        late += stats[i].total_reward;
    CHECK(late > early);
    CHECK(late / 5.0 > -5.0);  // roughly fitted; the toy optimum is 0
    CHECK(ag.env_steps == 3000);
}

TEST_CASE("policy checkpoints round-trip through disk") {
    auto rng = make_rng(12, "pol");
    Policy p = make_policy(4, 2, 8, 3, TrainTarget::model_craft, rng);
    p.bounds.b_hi = 99;
    for (int i = 0; i < 10; ++i) {
        Vec o(4);
        o.setRandom();
        p.norm.update(o);
    }
    const std::string dir =
        (std::filesystem::temp_directory_path() / "ckpt_test").string();
    save_policy(p, dir, "pi2");
    Policy q = load_policy(dir, "pi2");
    CHECK(q.params.values == p.params.values);
    CHECK(q.role == TrainTarget::model_craft);
    CHECK(q.bounds.b_hi == 99);
    CHECK(q.norm.count == p.norm.count);
    CHECK(q.norm.mean == p.norm.mean);
    CHECK(q.norm.m2 == p.norm.m2);
    CHECK(q.norm.head_dim == 3);
    Vec o(4);
    o << 0.1, -0.2, 0.3, 0.4;
    CHECK(policy_raw_action(q, o) == policy_raw_action(p, o));
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_policy(dir, "pi2"), ConfigError);
}
