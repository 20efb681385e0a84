#pragma once

// The attacker's world model: a reset/step MDP wrapping the federated round
// engine. Benign clients are simulated by sharding the attackers' own clean
// data; the reward is the negative lambda-weighted clean/backdoor loss of
// the (post-defense) global model, estimated on an attacker-held-out split.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <ostream>
#include <vector>

#include "fedsim/attacks.hpp"
#include "fedsim/data.hpp"
#include "fedsim/defenses.hpp"
#include "fedsim/envbase.hpp"
#include "fedsim/flcore.hpp"
#include "fedsim/rl.hpp"

namespace fedsim {

struct EnvConfig {
    FLConfig fl;                 // the attacker's (white-box) system knowledge
    int episode_rounds = 150;
    double gamma = 0.99;
    double lambda = 0.5;
    double attacker_eval_split = 0.2;
    bool simulate_benign_from_attacker_data = true;
    // When set, every episode replays this seed's FL streams (init, client
    // selection, batching) instead of drawing fresh ones: the white-box
    // attacker rehearses against the known deployment trajectory.
    std::optional<std::uint64_t> pinned_episode_seed;
    double noise_sigma = 0.0;
    int hidden_view_layers = 2;  // how many trailing hidden layers enter the state
    ActionBounds bounds;

    void validate() const {
        fl.validate();
        if (gamma <= 0.0 || gamma >= 1.0)
            throw ConfigError("EnvConfig: gamma outside (0,1)");
        if (episode_rounds < 1)
            throw ConfigError("EnvConfig: episode_rounds < 1");
        if (attacker_eval_split <= 0.0 || attacker_eval_split >= 1.0)
            throw ConfigError("EnvConfig: eval split outside (0,1)");
    }
};

// Contiguous span of the flat parameter vector covering the trailing
// n_hidden hidden layers (weights and biases; the output layer is excluded).
struct LayerViewSpan {
    Eigen::Index offset = 0;
    Eigen::Index length = 0;
};

inline LayerViewSpan layer_view_span(const Architecture& arch, int n_hidden) {
    const int hidden_count = static_cast<int>(arch.layers.size()) - 1;
    if (n_hidden < 1 || n_hidden > hidden_count)
        throw ConfigError("layer_view_span: need 1.." +
                          std::to_string(hidden_count) + " hidden layers");
    LayerViewSpan span;
    Eigen::Index off = 0;
    const int first = hidden_count - n_hidden;
    for (int i = 0; i < hidden_count; ++i) {
        const auto& d = arch.layers[static_cast<std::size_t>(i)];
        const Eigen::Index n = static_cast<Eigen::Index>(d.out) * d.in + d.out;
        if (i < first)
            off += n;
        else
            span.length += n;
    }
    span.offset = off;
    return span;
}

// Discounted return of a per-round reward trajectory.
inline double return_of(const std::vector<double>& rewards, double gamma) {
    double g = 1.0;
    double total = 0.0;
    for (double r : rewards) {
        total += g * r;
        g *= gamma;
    }
    return total;
}

// Attacker-side reward estimator: -(lambda*clean + (1-lambda)*backdoor) loss
// on the given evaluation sets. Usable both in the simulator and when
// logging rewards during a real run.
inline RewardFn make_attacker_reward(const Architecture& arch,
                                     LabeledDataset eval_clean,
                                     LabeledDataset eval_triggered,
                                     double lambda) {
    return [arch, eval_clean = std::move(eval_clean),
            eval_triggered = std::move(eval_triggered),
            lambda](const ModelParams& wd) {
        const double clean =
            mean_loss(Network{arch, wd}, eval_clean.samples, eval_clean.labels);
        const double backdoor = mean_loss(Network{arch, wd},
                                          eval_triggered.samples,
                                          eval_triggered.labels);
        return -(lambda * clean + (1.0 - lambda) * backdoor);
    };
}

class FLEnv final : public TwoPolicyEnv {
  public:
    FLEnv(EnvConfig cfg, Architecture arch, TriggerPattern trig,
          const LabeledDataset& attacker_pool,
          std::vector<LabeledDataset> real_benign_clients = {})
        : cfg_(std::move(cfg)), arch_(std::move(arch)), trig_(std::move(trig)) {
        cfg_.validate();
        trig_.validate(attacker_pool.dim());
        view_ = layer_view_span(arch_, cfg_.hidden_view_layers);

        // Held-out split for reward estimation, fixed at construction.
        const std::size_t n = attacker_pool.size();
        const auto n_eval = static_cast<std::size_t>(
            std::llround(cfg_.attacker_eval_split * static_cast<double>(n)));
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        auto split_rng = make_rng(cfg_.fl.seed, "env.split");
        std::shuffle(idx.begin(), idx.end(), split_rng);
        std::vector<std::size_t> eval_idx(idx.begin(),
                                          idx.begin() + static_cast<long>(n_eval));
        std::vector<std::size_t> train_idx(idx.begin() + static_cast<long>(n_eval),
                                           idx.end());
        eval_clean_ = attacker_pool.subset(eval_idx);
        attacker_train_ = attacker_pool.subset(train_idx);

        eval_triggered_ = eval_clean_;
        for (Eigen::Index r = 0; r < eval_triggered_.samples.rows(); ++r) {
            auto [xv, y] =
                embed_trigger(eval_triggered_.samples.row(r).transpose(), trig_);
            eval_triggered_.samples.row(r) = xv.transpose();
            eval_triggered_.labels[static_cast<std::size_t>(r)] = y;
        }

        // Simulated client population: attacker slots first (unused while the
        // attack is active but required for indexing), then benign shards.
        const int benign = cfg_.fl.K - cfg_.fl.M;
        if (cfg_.simulate_benign_from_attacker_data) {
            if (attacker_train_.size() <
                static_cast<std::size_t>(benign + cfg_.fl.M))
                throw ConfigError(
                    "FLEnv: not enough attacker data to shard into " +
                    std::to_string(benign) + " simulated clients");
            clients_ = iid_split(attacker_train_, cfg_.fl.M,
                                 derive_seed(cfg_.fl.seed, "env.attacker_shard"));
            auto shards = iid_split(attacker_train_, benign,
                                    derive_seed(cfg_.fl.seed, "env.shard"));
            clients_.insert(clients_.end(), shards.begin(), shards.end());
        } else {
            if (static_cast<int>(real_benign_clients.size()) != cfg_.fl.K)
                throw ConfigError("FLEnv: expected K client datasets");
            clients_ = std::move(real_benign_clients);
        }

        reward_fn_ = make_attacker_reward(arch_, eval_clean_, eval_triggered_,
                                          cfg_.lambda);
        max_selected_ =
            static_cast<int>(std::llround(cfg_.fl.kappa * cfg_.fl.K));
    }

    void configure_phase(TrainTarget target, const Policy* frozen) override {
        target_ = target;
        frozen_ = frozen;
        if (target != TrainTarget::joint && !frozen)
            throw ConfigError("FLEnv: alternating phase needs a frozen policy");
    }

    // Re-seeds the episode's FL streams and re-initializes the global model.
    Vec reset(std::uint64_t seed) override {
        if (cfg_.pinned_episode_seed) seed = *cfg_.pinned_episode_seed;
        episode_cfg_ = cfg_.fl;
        episode_cfg_.seed = seed;
        auto init_rng = make_rng(seed, "init");
        w_ = init_params(arch_, init_rng);
        round_ = 0;
        was_reset_ = true;
        obs_ = observe(0);
        return obs_;
    }

    StepResult step(const Vec& action) override {
        if (!was_reset_) throw ConfigError("FLEnv: step before reset");
        auto [a1, a2] = decode_joint(action);

        StepResult sr;
        const RoundSample rs = subsample(episode_cfg_, round_);
        AttackFn fn = [&](const ModelParams& w, int round, int, int) {
            return dwba_update(arch_, w, attacker_train_, trig_, a1, a2,
                               episode_cfg_,
                               derive_seed(episode_cfg_.seed, "attack",
                                           static_cast<std::uint64_t>(round)),
                               cfg_.noise_sigma);
        };
        try {
            RoundResult rr = run_round(arch_, w_, clients_, episode_cfg_,
                                       round_, &fn, nullptr);
            w_ = rr.w_next;
            if (rs.attackers_selected.empty()) {
                sr.reward = 0.0;
            } else {
                const ModelParams wd = apply_post_defense(
                    episode_cfg_.post_defense, arch_, w_, eval_clean_);
                sr.reward = reward_fn_(wd);
            }
        } catch (const NumericError&) {
            // Attacker destabilized the simulation: bounded penalty, episode
            // over.
            sr.reward = blowup_penalty();
            sr.done = true;
            ++round_;
            sr.obs = obs_;
            trace(rs, action, sr.reward);
            return sr;
        }

        ++round_;
        sr.done = round_ >= cfg_.episode_rounds;
        obs_ = observe(sr.done ? 0 : n_attackers_next());
        sr.obs = obs_;
        trace(rs, action, sr.reward);
        return sr;
    }

    int obs_dim() const override { return static_cast<int>(view_.length) + 1; }

    int act_dim() const override {
        switch (target_) {
            case TrainTarget::local_search: return 4;
            case TrainTarget::model_craft: return 2;
            case TrainTarget::joint: return 6;
        }
        return 6;
    }

    double blowup_penalty() const {
        return -10.0 * std::log(static_cast<double>(eval_clean_.num_classes));
    }

    const std::vector<LabeledDataset>& clients() const { return clients_; }
    const LabeledDataset& attacker_train() const { return attacker_train_; }
    const LabeledDataset& eval_clean() const { return eval_clean_; }
    const ModelParams& model() const { return w_; }
    const EnvConfig& config() const { return cfg_; }

    // Optional JSONL episode trace: one {round, state_hash, action, reward}
    // object per step.
    void set_trace(std::ostream* os) { trace_ = os; }

  private:
    int n_attackers_next() const {
        return static_cast<int>(
            subsample(episode_cfg_, round_).attackers_selected.size());
    }

    Vec observe(int n_attackers) const {
        Vec obs(view_.length + 1);
        obs.head(view_.length) = w_.values.segment(view_.offset, view_.length);
        obs[view_.length] = static_cast<double>(n_attackers) /
                            static_cast<double>(max_selected_);
        return obs;
    }

    std::pair<LocalSearchAction, ModelCraftAction> decode_joint(
        const Vec& action) const {
        switch (target_) {
            case TrainTarget::joint:
                if (action.size() != 6)
                    throw ConfigError("FLEnv: expected 6-d joint action");
                return {decode_a1(action.head(4), cfg_.bounds),
                        decode_a2(action.tail(2))};
            case TrainTarget::local_search: {
                const Vec other = policy_raw_action(*frozen_, obs_);
                return {decode_a1(action, cfg_.bounds), decode_a2(other)};
            }
            case TrainTarget::model_craft: {
                const Vec other = policy_raw_action(*frozen_, obs_);
                return {decode_a1(other, cfg_.bounds), decode_a2(action)};
            }
        }
        throw ConfigError("FLEnv: bad phase");
    }

    void trace(const RoundSample& rs, const Vec& action, double reward) {
        if (!trace_) return;
        std::uint64_t h = 1469598103934665603ULL;
        for (Eigen::Index i = 0; i < obs_.size(); ++i) {
            std::uint64_t bits;
            const double v = obs_[i];
            std::memcpy(&bits, &v, sizeof(bits));
            h = (h ^ bits) * 1099511628211ULL;
        }
        (*trace_) << "{\"round\":" << round_ - 1 << ",\"state_hash\":" << h
                  << ",\"attackers\":" << rs.attackers_selected.size()
                  << ",\"action\":[";
        for (Eigen::Index i = 0; i < action.size(); ++i)
            (*trace_) << (i ? "," : "") << action[i];
        (*trace_) << "],\"reward\":" << reward << "}\n";
    }

    EnvConfig cfg_;
    FLConfig episode_cfg_;
    Architecture arch_;
    TriggerPattern trig_;
    LayerViewSpan view_;
    LabeledDataset attacker_train_, eval_clean_, eval_triggered_;
    std::vector<LabeledDataset> clients_;
    RewardFn reward_fn_;
    ModelParams w_;
    Vec obs_;
    int round_ = 0;
    int max_selected_ = 1;
    bool was_reset_ = false;
    TrainTarget target_ = TrainTarget::joint;
    const Policy* frozen_ = nullptr;
    std::ostream* trace_ = nullptr;
};

}  // namespace fedsim
