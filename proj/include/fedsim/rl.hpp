#pragma once

// TD3 built on the dense-network engine: twin critics with clipped double-Q
// targets, target-policy smoothing, delayed actor updates, soft target
// updates, a uniform replay buffer, and the alternating two-policy training
// schedule.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fedsim/attacks.hpp"
#include "fedsim/envbase.hpp"
#include "fedsim/nncore.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TD3Hyper {
    double actor_lr = 1e-3;
    double critic_lr = 1e-3;
    int batch = 256;
    double gamma = 0.99;
    double tau = 0.005;
    int policy_delay = 2;
    double explore_noise = 0.1;
    double target_noise = 0.2;
    double noise_clip = 0.5;
    std::size_t buffer_capacity = 100000;
    long warmup_steps = 1000;
    int hidden = 256;  // width of the two hidden layers, actor and critics
    int updates_per_step = 1;  // gradient updates per environment step

    void validate() const {
        if (tau <= 0.0 || tau > 1.0) throw ConfigError("TD3Hyper: bad tau");
        if (policy_delay < 1) throw ConfigError("TD3Hyper: bad policy_delay");
        if (updates_per_step < 1)
            throw ConfigError("TD3Hyper: bad updates_per_step");
        if (batch < 1 || hidden < 1 || buffer_capacity < 1)
            throw ConfigError("TD3Hyper: bad size field");
    }
};

// ---------------------------------------------------------------------------
// Online standardization of the layer-view part of the observation.
// The tail entries (the scaled attacker count) pass through untouched.

struct Normalizer {
    Vec mean;
    Vec m2;
    double count = 0.0;
    int head_dim = 0;

    static Normalizer make(int obs_dim, int head) {
        Normalizer n;
        n.head_dim = head;
        n.mean = Vec::Zero(obs_dim);
        n.m2 = Vec::Zero(obs_dim);
        return n;
    }

    void update(const Vec& obs) {
        count += 1.0;
        for (int i = 0; i < head_dim; ++i) {
            const double d = obs[i] - mean[i];
            mean[i] += d / count;
            m2[i] += d * (obs[i] - mean[i]);
        }
    }

    Vec normalize(const Vec& obs) const {
        Vec out = obs;
        if (count < 2.0) return out;
        for (int i = 0; i < head_dim; ++i) {
            const double var = m2[i] / (count - 1.0);
            out[i] = (obs[i] - mean[i]) / std::sqrt(var + 1e-8);
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Policy: a tanh-squashed actor plus its observation normalizer and action
// decoding table.

struct Policy {
    Architecture arch;
    ModelParams params;
    Normalizer norm;
    TrainTarget role = TrainTarget::joint;
    ActionBounds bounds;

    int act_dim() const { return arch.output_dim(); }
    int obs_dim() const { return arch.input_dim; }
};

inline Policy make_policy(int obs_dim, int act_dim, int hidden, int head_dim,
                          TrainTarget role, std::mt19937_64& rng) {
    Policy p;
    p.arch = make_mlp(obs_dim, {hidden, hidden}, act_dim, Activation::relu,
                      Activation::tanh);
    p.params = init_params(p.arch, rng);
    p.norm = Normalizer::make(obs_dim, head_dim);
    p.role = role;
    return p;
}

inline Vec policy_raw_action(const Policy& p, const Vec& obs) {
    Mat out = forward(Network{p.arch, p.params},
                      p.norm.normalize(obs).transpose());
    return out.row(0).transpose();
}

// Deployment action (deterministic) or exploration action (clipped Gaussian
// noise added before the environment decodes it).
inline Vec act(const Policy& p, const Vec& obs, bool deterministic,
               std::mt19937_64& rng, double explore_noise = 0.1) {
    Vec a = policy_raw_action(p, obs);
    if (!deterministic) {
        std::normal_distribution<double> noise(0.0, explore_noise);
        for (Eigen::Index i = 0; i < a.size(); ++i)
            a[i] = std::clamp(a[i] + noise(rng), -1.0, 1.0);
    }
    return a;
}

// ---------------------------------------------------------------------------
// Replay buffer: fixed-capacity ring with uniform sampling.

class ReplayBuffer {
  public:
    ReplayBuffer(std::size_t capacity, int obs_dim, int act_dim)
        : capacity_(capacity),
          obs_(static_cast<Eigen::Index>(capacity), obs_dim),
          act_(static_cast<Eigen::Index>(capacity), act_dim),
          next_(static_cast<Eigen::Index>(capacity), obs_dim),
          rew_(static_cast<Eigen::Index>(capacity)),
          done_(static_cast<Eigen::Index>(capacity)) {}

    void push(const Vec& obs, const Vec& action, double reward, const Vec& next,
              bool done) {
        const auto i = static_cast<Eigen::Index>(head_);
        obs_.row(i) = obs.transpose();
        act_.row(i) = action.transpose();
        next_.row(i) = next.transpose();
        rew_[i] = reward;
        done_[i] = done ? 1.0 : 0.0;
        head_ = (head_ + 1) % capacity_;
        size_ = std::min(size_ + 1, capacity_);
    }

    std::size_t size() const { return size_; }
    std::size_t capacity() const { return capacity_; }

    std::vector<std::size_t> sample_indices(int batch,
                                            std::mt19937_64& rng) const {
        std::uniform_int_distribution<std::size_t> u(0, size_ - 1);
        std::vector<std::size_t> idx(static_cast<std::size_t>(batch));
        for (auto& i : idx) i = u(rng);
        return idx;
    }

    const Mat& obs() const { return obs_; }
    const Mat& actions() const { return act_; }
    const Mat& next_obs() const { return next_; }
    const Vec& rewards() const { return rew_; }
    const Vec& dones() const { return done_; }

  private:
    std::size_t capacity_;
    std::size_t head_ = 0;
    std::size_t size_ = 0;
    Mat obs_, act_, next_;
    Vec rew_, done_;
};

// ---------------------------------------------------------------------------
// Adam over flat parameter vectors.

struct AdamState {
    Vec m, v;
    long t = 0;

    static AdamState make(Eigen::Index n) {
        return {Vec::Zero(n), Vec::Zero(n), 0};
    }

    void step(Vec& params, const Vec& grad, double lr, double beta1 = 0.9,
              double beta2 = 0.999, double eps = 1e-8) {
        ++t;
        m = beta1 * m + (1.0 - beta1) * grad;
        v = beta2 * v.array().matrix() +
            (1.0 - beta2) * grad.array().square().matrix();
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        params -= (lr * (m.array() / bc1) /
                   ((v.array() / bc2).sqrt() + eps))
                      .matrix();
    }
};

inline void soft_update(ModelParams& target, const ModelParams& online,
                        double tau) {
    target.values = (1.0 - tau) * target.values + tau * online.values;
}

// ---------------------------------------------------------------------------
// TD3 agent state: actor + twin critics, their targets, optimizers, buffer.

struct TD3Agent {
    Policy actor;
    ModelParams actor_target;
    Architecture critic_arch;
    ModelParams critic1, critic2, critic1_target, critic2_target;
    AdamState adam_actor, adam_c1, adam_c2;
    ReplayBuffer buffer;
    long env_steps = 0;
    long updates = 0;

    int obs_dim() const { return actor.obs_dim(); }
    int act_dim() const { return actor.act_dim(); }
};

inline TD3Agent make_agent(int obs_dim, int act_dim, int head_dim,
                           TrainTarget role, const TD3Hyper& h,
                           std::mt19937_64& rng) {
    h.validate();
    Policy actor = make_policy(obs_dim, act_dim, h.hidden, head_dim, role, rng);
    // Crafting dims start near raw -1 (decoded alpha, beta ~ 0): the initial
    // crafting policy is a no-op, so the first local-search phase trains
    // against the unmodified poisoned update instead of a random half-craft
    // that distorts which search hyperparameters look good.
    if (role == TrainTarget::model_craft)
        actor.params.values.tail(act_dim).setConstant(-2.0);
    else if (role == TrainTarget::joint && act_dim == 6)
        actor.params.values.tail(2).setConstant(-2.0);
    Architecture critic_arch = make_mlp(obs_dim + act_dim, {h.hidden, h.hidden},
                                        1, Activation::relu,
                                        Activation::identity);
    ModelParams c1 = init_params(critic_arch, rng);
    ModelParams c2 = init_params(critic_arch, rng);
    const Eigen::Index na = static_cast<Eigen::Index>(actor.arch.param_count());
    const Eigen::Index nc = static_cast<Eigen::Index>(critic_arch.param_count());
    ModelParams actor_target = actor.params;
    return TD3Agent{std::move(actor),
                    std::move(actor_target),
                    critic_arch,
                    c1,
                    c2,
                    c1,
                    c2,
                    AdamState::make(na),
                    AdamState::make(nc),
                    AdamState::make(nc),
                    ReplayBuffer(h.buffer_capacity, obs_dim, act_dim),
                    0,
                    0};
}

namespace detail {

inline Mat critic_input(const Mat& norm_obs, const Mat& actions) {
    Mat in(norm_obs.rows(), norm_obs.cols() + actions.cols());
    in.leftCols(norm_obs.cols()) = norm_obs;
    in.rightCols(actions.cols()) = actions;
    return in;
}

}  // namespace detail

// Clipped double-Q targets for a batch: y = r + gamma*(1-done)*min(Q1', Q2')
// with target-policy smoothing noise. Exposed for the invariant tests.
struct TargetBatch {
    Vec y, q1, q2;
};

inline TargetBatch td3_targets(const TD3Agent& agent, const TD3Hyper& h,
                               const Mat& next_norm_obs, const Vec& rewards,
                               const Vec& dones, std::mt19937_64& rng) {
    Mat a_next = forward(Network{agent.actor.arch, agent.actor_target},
                         next_norm_obs);
    std::normal_distribution<double> noise(0.0, h.target_noise);
    for (Eigen::Index r = 0; r < a_next.rows(); ++r)
        for (Eigen::Index c = 0; c < a_next.cols(); ++c) {
            const double eps =
                std::clamp(noise(rng), -h.noise_clip, h.noise_clip);
            a_next(r, c) = std::clamp(a_next(r, c) + eps, -1.0, 1.0);
        }
    const Mat in = detail::critic_input(next_norm_obs, a_next);
    TargetBatch tb;
    tb.q1 = forward(Network{agent.critic_arch, agent.critic1_target}, in).col(0);
    tb.q2 = forward(Network{agent.critic_arch, agent.critic2_target}, in).col(0);
    tb.y = rewards.array() +
           h.gamma * (1.0 - dones.array()) * tb.q1.cwiseMin(tb.q2).array();
    return tb;
}

// One gradient update from a sampled minibatch. Returns the critic loss.
inline double td3_update(TD3Agent& agent, const TD3Hyper& h,
                         std::mt19937_64& rng) {
    const auto idx =
        agent.buffer.sample_indices(h.batch, rng);
    const int B = h.batch;
    Mat obs(B, agent.obs_dim()), nobs(B, agent.obs_dim()),
        acts(B, agent.act_dim());
    Vec rew(B), done(B);
    for (int r = 0; r < B; ++r) {
        const auto i = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(r)]);
        obs.row(r) = agent.actor.norm
                         .normalize(agent.buffer.obs().row(i).transpose())
                         .transpose();
        nobs.row(r) = agent.actor.norm
                          .normalize(agent.buffer.next_obs().row(i).transpose())
                          .transpose();
        acts.row(r) = agent.buffer.actions().row(i);
        rew[r] = agent.buffer.rewards()[i];
        done[r] = agent.buffer.dones()[i];
    }

    const TargetBatch tb = td3_targets(agent, h, nobs, rew, done, rng);
    const Mat in = detail::critic_input(obs, acts);

    double loss = 0.0;
    for (int which = 0; which < 2; ++which) {
        ModelParams& cp = which == 0 ? agent.critic1 : agent.critic2;
        AdamState& adam = which == 0 ? agent.adam_c1 : agent.adam_c2;
        ForwardCache cache;
        Mat q = forward(Network{agent.critic_arch, cp}, in, &cache);
        Mat dq = 2.0 * (q.col(0) - tb.y) / static_cast<double>(B);
        loss += (q.col(0) - tb.y).squaredNorm() / static_cast<double>(B);
        Update grad = backward(Network{agent.critic_arch, cp}, cache, dq);
        adam.step(cp.values, grad.delta, h.critic_lr);
    }
    loss *= 0.5;
    if (!std::isfinite(loss) || loss > 1e6)
        throw TrainingError("critic loss diverged: " + std::to_string(loss) +
                            " after " + std::to_string(agent.updates) +
                            " updates");

    ++agent.updates;
    if (agent.updates % h.policy_delay == 0) {
        // Deterministic policy gradient through critic 1.
        ForwardCache acache;
        Mat a = forward(Network{agent.actor.arch, agent.actor.params}, obs,
                        &acache);
        ForwardCache ccache;
        const Mat cin = detail::critic_input(obs, a);
        forward(Network{agent.critic_arch, agent.critic1}, cin, &ccache);
        Mat dq = Mat::Constant(B, 1, -1.0 / static_cast<double>(B));
        Mat d_cin;
        backward(Network{agent.critic_arch, agent.critic1}, ccache, dq, &d_cin);
        Mat da = d_cin.rightCols(agent.act_dim());
        Update agrad = backward(Network{agent.actor.arch, agent.actor.params},
                                acache, da);
        agent.adam_actor.step(agent.actor.params.values, agrad.delta,
                              h.actor_lr);

        soft_update(agent.actor_target, agent.actor.params, h.tau);
        soft_update(agent.critic1_target, agent.critic1, h.tau);
        soft_update(agent.critic2_target, agent.critic2, h.tau);
    }
    return loss;
}

struct EpisodeStat {
    long end_step = 0;
    double total_reward = 0.0;
    int length = 0;
};

// Standard TD3 training loop; continues the agent's step counter, so warmup
// happens once per agent even across alternating phases.
inline std::vector<EpisodeStat> td3_train(EnvBase& env, TD3Agent& agent,
                                          long steps, const TD3Hyper& h,
                                          std::mt19937_64& rng) {
    h.validate();
    std::vector<EpisodeStat> stats;
    std::uniform_real_distribution<double> uact(-1.0, 1.0);
    Vec obs = env.reset(rng());
    EpisodeStat ep;
    for (long s = 0; s < steps; ++s) {
        agent.actor.norm.update(obs);
        Vec a(env.act_dim());
        if (agent.env_steps < h.warmup_steps) {
            for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = uact(rng);
        } else {
            a = act(agent.actor, obs, false, rng, h.explore_noise);
        }
        StepResult sr = env.step(a);
        agent.buffer.push(obs, a, sr.reward, sr.obs, sr.done);
        ++agent.env_steps;
        ep.total_reward += sr.reward;
        ++ep.length;
        if (sr.done) {
            ep.end_step = agent.env_steps;
            stats.push_back(ep);
            ep = EpisodeStat{};
            obs = env.reset(rng());
        } else {
            obs = sr.obs;
        }
        if (agent.env_steps >= h.warmup_steps &&
            agent.buffer.size() >= static_cast<std::size_t>(h.batch))
            for (int u = 0; u < h.updates_per_step; ++u)
                td3_update(agent, h, rng);
    }
    if (ep.length > 0) {
        ep.end_step = agent.env_steps;
        stats.push_back(ep);
    }
    return stats;
}

// Phase callback: (iteration, phase-name, episode stats).
using PhaseHook = std::function<void(int, const std::string&,
                                     const std::vector<EpisodeStat>&,
                                     const TD3Agent&)>;

// Alternating schedule: each iteration trains the local-search policy with
// the crafting policy frozen, then the crafting policy with the local-search
// policy frozen.
inline void alternating_train(TwoPolicyEnv& env, TD3Agent& search_agent,
                              TD3Agent& craft_agent, int iterations,
                              long steps_per_phase, const TD3Hyper& h,
                              std::mt19937_64& rng,
                              const PhaseHook& hook = nullptr) {
    if (iterations < 1) throw ConfigError("alternating_train: iterations < 1");
    for (int it = 0; it < iterations; ++it) {
        env.configure_phase(TrainTarget::local_search, &craft_agent.actor);
        auto s1 = td3_train(env, search_agent, steps_per_phase, h, rng);
        if (hook) hook(it, "local_search", s1, search_agent);
        env.configure_phase(TrainTarget::model_craft, &search_agent.actor);
        auto s2 = td3_train(env, craft_agent, steps_per_phase, h, rng);
        if (hook) hook(it, "model_craft", s2, craft_agent);
    }
}

// Single TD3 run over the concatenated 6-d action.
inline void simultaneous_train(TwoPolicyEnv& env, TD3Agent& joint_agent,
                               long steps, const TD3Hyper& h,
                               std::mt19937_64& rng,
                               const PhaseHook& hook = nullptr) {
    env.configure_phase(TrainTarget::joint, nullptr);
    auto s = td3_train(env, joint_agent, steps, h, rng);
    if (hook) hook(0, "joint", s, joint_agent);
}

// ---------------------------------------------------------------------------
// 1-D diagnostics environment: observe x, act a, reward -(x-a)^2, next x
// uniform. The optimal policy a = x earns reward 0 per step.

class ToyEnv final : public EnvBase {
  public:
    explicit ToyEnv(int horizon = 200) : horizon_(horizon) {}

    Vec reset(std::uint64_t seed) override {
        rng_ = make_rng(seed, "toy");
        t_ = 0;
        x_ = draw();
        Vec obs(1);
        obs[0] = x_;
        return obs;
    }

    StepResult step(const Vec& action) override {
        StepResult sr;
        const double d = x_ - action[0];
        sr.reward = -d * d;
        x_ = draw();
        sr.obs = Vec(1);
        sr.obs[0] = x_;
        sr.done = ++t_ >= horizon_;
        return sr;
    }

    int obs_dim() const override { return 1; }
    int act_dim() const override { return 1; }

  private:
    double draw() {
        return std::uniform_real_distribution<double>(-1.0, 1.0)(rng_);
    }
    int horizon_;
    int t_ = 0;
    double x_ = 0.0;
    std::mt19937_64 rng_;
};

}  // namespace fedsim
