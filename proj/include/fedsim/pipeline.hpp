#pragma once

// Experiment pipelines behind the CLI subcommands: policy training in the
// simulated environment, real FL runs with a configured attack, and metric
// CSV emission. Kept out of the CLI so tests can drive whole experiments
// in-process.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedsim/attacks.hpp"
#include "fedsim/checkpoint.hpp"
#include "fedsim/config.hpp"
#include "fedsim/env.hpp"
#include "fedsim/flcore.hpp"
#include "fedsim/rl.hpp"

namespace fedsim {

// Common experiment materials derived from a config.
struct ExperimentSetup {
    LabeledDataset train, test;
    std::vector<LabeledDataset> clients;
    LabeledDataset attacker_pool;  // clients 0..M-1 concatenated
    Architecture arch;
    TriggerPattern trig;
};

inline ExperimentSetup make_setup(const ExperimentConfig& cfg) {
    ExperimentSetup s;
    s.train = cfg.make_train();
    s.test = cfg.make_test();
    s.arch = cfg.make_arch(s.train.dim());
    s.trig = cfg.make_trigger(s.train.dim());
    s.clients = iid_split(s.train, cfg.fl.K, derive_seed(cfg.seed, "clients"));
    s.attacker_pool = s.clients[0];
    for (int k = 1; k < cfg.fl.M; ++k)
        s.attacker_pool = concat(s.attacker_pool,
                                 s.clients[static_cast<std::size_t>(k)]);
    return s;
}

// ---------------------------------------------------------------------------
// Attack wiring for real runs

struct LoadedPolicies {
    std::optional<Policy> pi1, pi2, joint;
};

inline LoadedPolicies load_policies(const std::string& dir) {
    namespace fs = std::filesystem;
    LoadedPolicies p;
    if (fs::exists(fs::path(dir) / "joint.json")) {
        p.joint = load_policy(dir, "joint");
    } else {
        if (!fs::exists(fs::path(dir) / "pi1.json") ||
            !fs::exists(fs::path(dir) / "pi2.json"))
            throw ConfigError("no policy checkpoints (pi1/pi2 or joint) in " +
                              dir);
        p.pi1 = load_policy(dir, "pi1");
        p.pi2 = load_policy(dir, "pi2");
    }
    return p;
}

// Builds the per-round crafted-update closure for the configured attack.
// The returned function is valid as long as setup and policies outlive it.
inline AttackFn make_attack_fn(const ExperimentConfig& cfg,
                               const ExperimentSetup& setup,
                               const LoadedPolicies* policies) {
    const Architecture& arch = setup.arch;
    const TriggerPattern& trig = setup.trig;
    const FLConfig fl = cfg.fl;

    switch (cfg.attack_kind) {
        case AttackKind::none:
            throw ConfigError("make_attack_fn: attack.kind is none");
        case AttackKind::bfl:
            return [&setup, trig, fl, rho = cfg.attack_rho, arch](
                       const ModelParams& w, int round, int, int) {
                return bfl_update(arch, w, setup.attacker_pool, trig, rho, fl,
                                  derive_seed(fl.seed, "attack",
                                              static_cast<std::uint64_t>(round)));
            };
        case AttackKind::pgd:
            return [&setup, trig, fl, rho = cfg.attack_rho,
                    radius = cfg.attack_pgd_radius, arch](
                       const ModelParams& w, int round, int, int) {
                return pgd_update(arch, w, setup.attacker_pool, trig, rho,
                                  radius, fl,
                                  derive_seed(fl.seed, "attack",
                                              static_cast<std::uint64_t>(round)));
            };
        case AttackKind::neurotoxin:
            return [&setup, trig, fl, rho = cfg.attack_rho,
                    topk = cfg.attack_neurotoxin_topk, arch](
                       const ModelParams& w, int round, int, int) {
                return neurotoxin_update(
                    arch, w, setup.attacker_pool, trig, rho, topk, fl,
                    derive_seed(fl.seed, "attack",
                                static_cast<std::uint64_t>(round)));
            };
        case AttackKind::dba:
            return [&setup, trig, fl, rho = cfg.attack_rho, arch](
                       const ModelParams& w, int round, int attacker, int) {
                const std::uint64_t seed =
                    derive_seed(fl.seed, "attack",
                                (static_cast<std::uint64_t>(round) << 16) |
                                    static_cast<std::uint64_t>(attacker));
                auto pick_rng = make_rng(seed, "dba.subtrigger");
                std::uniform_int_distribution<int> pick(
                    0, static_cast<int>(trig.sub_triggers.size()) - 1);
                return dba_update(
                    arch, w,
                    setup.clients[static_cast<std::size_t>(attacker)], trig,
                    pick(pick_rng), rho, fl, seed);
            };
        case AttackKind::dwba_fixed:
            return [&setup, trig, fl, a1 = cfg.attack_fixed_a1,
                    a2 = cfg.attack_fixed_a2, sigma = cfg.attack_noise_sigma,
                    arch](const ModelParams& w, int round, int, int) {
                return dwba_update(arch, w, setup.attacker_pool, trig, a1, a2,
                                   fl,
                                   derive_seed(fl.seed, "attack",
                                               static_cast<std::uint64_t>(round)),
                                   sigma);
            };
        case AttackKind::dwba_rl: {
            if (!policies)
                throw ConfigError("dwba_rl attack needs loaded policies");
            const LayerViewSpan view =
                layer_view_span(arch, cfg.model_view_layers);
            const int n_sel =
                static_cast<int>(std::llround(fl.kappa * fl.K));
            const ActionBounds bounds = cfg.bounds;
            const double sigma = cfg.attack_noise_sigma;
            return [&setup, policies, view, n_sel, bounds, trig, fl, sigma,
                    arch](const ModelParams& w, int round, int,
                          int n_attackers) {
                Vec obs(view.length + 1);
                obs.head(view.length) =
                    w.values.segment(view.offset, view.length);
                obs[view.length] = static_cast<double>(n_attackers) /
                                   static_cast<double>(n_sel);
                LocalSearchAction a1;
                ModelCraftAction a2;
                if (policies->joint) {
                    const Vec a = policy_raw_action(*policies->joint, obs);
                    a1 = decode_a1(a.head(4), bounds);
                    a2 = decode_a2(a.tail(2));
                } else {
                    a1 = decode_a1(policy_raw_action(*policies->pi1, obs),
                                   bounds);
                    a2 = decode_a2(policy_raw_action(*policies->pi2, obs));
                }
                return dwba_update(arch, w, setup.attacker_pool, trig, a1, a2,
                                   fl,
                                   derive_seed(fl.seed, "attack",
                                               static_cast<std::uint64_t>(round)),
                                   sigma);
            };
        }
    }
    throw ConfigError("unknown attack kind");
}

// ---------------------------------------------------------------------------
// Real FL run

inline void write_metric_row(std::ostream& os, const MetricRecord& m) {
    os << m.round << ',' << std::setprecision(17) << m.main_acc << ','
       << m.backdoor_acc << ',' << m.reward << ',' << m.global_norm << '\n';
}

// Executes fl.T rounds with the configured attack active inside the attack
// window and streams one CSV row per round. Returns the full metric history
// and the final global model.
struct RunOutput {
    std::vector<MetricRecord> metrics;
    ModelParams final_model;
};

inline RunOutput run_experiment(const ExperimentConfig& cfg,
                                const ExperimentSetup& setup,
                                std::ostream& csv,
                                const LoadedPolicies* policies = nullptr) {
    EvalContext ctx = make_eval_context(setup.test, setup.trig, setup.test);

    // Reward logging uses the attacker's own estimator so simulated and real
    // rewards are on the same scale.
    if (cfg.attack_kind != AttackKind::none) {
        LabeledDataset eval_clean, eval_trig;
        {
            EnvConfig ec = cfg.make_env_config();
            // Only the attacker eval split is needed here; skip benign-client
            // wiring so the flag's setting cannot break reward logging.
            ec.simulate_benign_from_attacker_data = true;
            FLEnv tmp(ec, setup.arch, setup.trig, setup.attacker_pool);
            eval_clean = tmp.eval_clean();
            eval_trig = eval_clean;
            for (Eigen::Index r = 0; r < eval_trig.samples.rows(); ++r) {
                auto [xv, y] = embed_trigger(
                    eval_trig.samples.row(r).transpose(), setup.trig);
                eval_trig.samples.row(r) = xv.transpose();
                eval_trig.labels[static_cast<std::size_t>(r)] = y;
            }
        }
        ctx.reward = make_attacker_reward(setup.arch, eval_clean, eval_trig,
                                          cfg.fl.lambda);
    }

    AttackFn attack;
    if (cfg.attack_kind != AttackKind::none)
        attack = make_attack_fn(cfg, setup, policies);

    auto init_rng = make_rng(cfg.seed, "init");
    ModelParams w = init_params(setup.arch, init_rng);

    csv << "round,main_acc,backdoor_acc,reward,global_norm\n";
    RunOutput out;
    out.metrics.reserve(static_cast<std::size_t>(cfg.fl.T));
    for (int t = 0; t < cfg.fl.T; ++t) {
        const bool active = cfg.attack_kind != AttackKind::none &&
                            t >= cfg.attack_window_start && t < cfg.window_end();
        RoundResult res = run_round(setup.arch, w, setup.clients, cfg.fl, t,
                                    active ? &attack : nullptr, &ctx);
        w = res.w_next;
        write_metric_row(csv, res.metrics);
        out.metrics.push_back(res.metrics);
    }
    out.final_model = w;
    return out;
}

// ---------------------------------------------------------------------------
// Policy training

struct TrainOutput {
    std::optional<Policy> pi1, pi2, joint;
};

// Trains the attack policies in the simulated environment, checkpointing
// after every phase and appending a training-curve CSV (one row per
// episode).
inline TrainOutput train_policies(const ExperimentConfig& cfg,
                                  const ExperimentSetup& setup,
                                  const std::string& checkpoint_dir,
                                  std::ostream* curve_csv = nullptr) {
    EnvConfig ec = cfg.make_env_config();
    FLEnv env(ec, setup.arch, setup.trig, setup.attacker_pool,
              cfg.env_simulate_benign ? std::vector<LabeledDataset>{}
                                      : setup.clients);
    auto rng = make_rng(cfg.seed, "rl");

    if (curve_csv)
        (*curve_csv) << "phase,iteration,end_step,episode_return,episode_len\n";

    const auto hook = [&](int it, const std::string& phase,
                          const std::vector<EpisodeStat>& stats,
                          const TD3Agent& agent) {
        if (curve_csv)
            for (const auto& ep : stats)
                (*curve_csv) << phase << ',' << it << ',' << ep.end_step << ','
                             << std::setprecision(17) << ep.total_reward << ','
                             << ep.length << '\n';
        const std::string name = phase == "local_search" ? "pi1"
                                 : phase == "model_craft" ? "pi2"
                                                          : "joint";
        if (!checkpoint_dir.empty())
            save_policy(agent.actor, checkpoint_dir, name);
    };

    TrainOutput out;
    if (cfg.rl_schedule == Schedule::alternating) {
        // act_dim depends on phase; build agents against the phase dims.
        TD3Agent a1 = make_agent(env.obs_dim(), 4, env.obs_dim() - 1,
                                 TrainTarget::local_search, cfg.rl, rng);
        TD3Agent a2 = make_agent(env.obs_dim(), 2, env.obs_dim() - 1,
                                 TrainTarget::model_craft, cfg.rl, rng);
        a1.actor.bounds = cfg.bounds;
        a2.actor.bounds = cfg.bounds;
        alternating_train(env, a1, a2, cfg.rl_iterations,
                          cfg.rl_steps_per_phase, cfg.rl, rng, hook);
        out.pi1 = a1.actor;
        out.pi2 = a2.actor;
    } else {
        TD3Agent joint = make_agent(env.obs_dim(), 6, env.obs_dim() - 1,
                                    TrainTarget::joint, cfg.rl, rng);
        joint.actor.bounds = cfg.bounds;
        simultaneous_train(env, joint, cfg.total_rl_steps(), cfg.rl, rng,
                           hook);
        out.joint = joint.actor;
    }
    return out;
}

}  // namespace fedsim
