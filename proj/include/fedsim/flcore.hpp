#pragma once

// The federated training round: client subsampling, benign local SGD,
// pluggable aggregation, post-training defense applied for evaluation only,
// and per-round metrics. run_round is functional: it returns the next global
// model instead of mutating its input.

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/defenses.hpp"
#include "fedsim/nncore.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

struct FLConfig {
    int K = 100;             // client count
    int M = 5;               // attacker count (clients 0..M-1)
    double kappa = 0.1;      // subsampling rate
    int T = 500;             // total rounds
    int E = 1;               // benign local iterations
    int B = 128;             // benign minibatch size
    double eta = 0.05;       // benign learning rate
    AggregatorSpec aggregator;
    PostDefenseSpec post_defense;
    double lambda = 0.5;     // main/backdoor reward tradeoff
    std::uint64_t seed = 0;

    void validate() const {
        if (M > K) throw ConfigError("FLConfig: M > K");
        if (kappa <= 0.0 || kappa > 1.0)
            throw ConfigError("FLConfig: kappa outside (0,1]");
        if (std::llround(kappa * K) < 1)
            throw ConfigError("FLConfig: round(kappa*K) < 1");
        if (lambda < 0.0 || lambda > 1.0)
            throw ConfigError("FLConfig: lambda outside [0,1]");
        if (E < 0 || B < 1 || eta < 0.0 || T < 1 || K < 1 || M < 0)
            throw ConfigError("FLConfig: invalid field");
    }
};

struct RoundSample {
    std::vector<int> selected;            // ascending client indices
    std::vector<int> attackers_selected;  // selected ∩ [0, M)
};

struct MetricRecord {
    int round = 0;
    double main_acc = 0.0;
    double backdoor_acc = 0.0;
    double reward = 0.0;
    double global_norm = 0.0;
};

// Uniform sample without replacement of round(kappa*K) clients. Deterministic
// in (cfg.seed, round) and independent of every other random stream.
inline RoundSample subsample(const FLConfig& cfg, int round) {
    const int n_sel = static_cast<int>(std::llround(cfg.kappa * cfg.K));
    auto rng = make_rng(cfg.seed, "subsample", static_cast<std::uint64_t>(round));
    std::vector<int> pool(static_cast<std::size_t>(cfg.K));
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < n_sel; ++i) {
        std::uniform_int_distribution<int> u(i, cfg.K - 1);
        std::swap(pool[static_cast<std::size_t>(i)],
                  pool[static_cast<std::size_t>(u(rng))]);
    }
    RoundSample rs;
    rs.selected.assign(pool.begin(), pool.begin() + n_sel);
    std::sort(rs.selected.begin(), rs.selected.end());
    for (int k : rs.selected)
        if (k < cfg.M) rs.attackers_selected.push_back(k);
    return rs;
}

// E iterations of minibatch SGD (minibatches drawn with replacement);
// returns g = w0 - w_E.
inline Update local_sgd(const Architecture& arch, const ModelParams& w0,
                        const LabeledDataset& ds, int E, int B, double eta,
                        std::mt19937_64& rng) {
    if (ds.size() == 0) throw ConfigError("local_sgd: empty dataset");
    ModelParams w = w0;
    std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
    for (int e = 0; e < E; ++e) {
        std::vector<std::size_t> idx(static_cast<std::size_t>(B));
        for (auto& i : idx) i = pick(rng);
        LabeledDataset batch = ds.subset(idx);
        auto [loss, grad] = loss_and_grad(Network{arch, w}, batch.samples,
                                          batch.labels);
        (void)loss;
        w = sgd_step(w, grad, eta);
    }
    Update g;
    g.delta = w0.values - w.values;
    return g;
}

inline Update benign_update(const LabeledDataset& client,
                            const Architecture& arch, const ModelParams& w,
                            const FLConfig& cfg, std::mt19937_64& rng) {
    return local_sgd(arch, w, client, cfg.E, cfg.B, cfg.eta, rng);
}

// Per-(round, client) benign rng stream, shared by the real run and the
// attacker's simulator so trajectories can be compared bit for bit.
inline std::mt19937_64 client_rng(const FLConfig& cfg, int round, int client) {
    return make_rng(cfg.seed, "client",
                    (static_cast<std::uint64_t>(round) << 32) |
                        static_cast<std::uint64_t>(client));
}

// Crafted update for one sampled attacker. Two-step attackers return the
// same shared update for every attacker index; per-attacker baselines (DBA)
// differentiate on it.
using AttackFn = std::function<Update(const ModelParams& w, int round,
                                      int attacker_index,
                                      int n_attackers_sampled)>;

// Reward estimate for a (defended) model; the environment substitutes its
// attacker-side estimator here.
using RewardFn = std::function<double(const ModelParams& w_defended)>;

struct EvalContext {
    const LabeledDataset* test = nullptr;
    const LabeledDataset* probe = nullptr;  // clean probe for pruning
    TriggerPattern trig;
    LabeledDataset triggered_test;          // source-class samples, triggered
    RewardFn reward;                        // may be empty
};

inline EvalContext make_eval_context(const LabeledDataset& test,
                                     const TriggerPattern& trig,
                                     const LabeledDataset& probe) {
    EvalContext ctx;
    ctx.test = &test;
    ctx.probe = &probe;
    ctx.trig = trig;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < test.size(); ++i) {
        if (test.labels[i] == trig.target_class) continue;
        if (trig.source_class != kGlobalTrigger &&
            test.labels[i] != trig.source_class)
            continue;
        idx.push_back(i);
    }
    ctx.triggered_test = test.subset(idx);
    for (Eigen::Index r = 0; r < ctx.triggered_test.samples.rows(); ++r) {
        auto [xv, y] = embed_trigger(
            ctx.triggered_test.samples.row(r).transpose(), trig);
        ctx.triggered_test.samples.row(r) = xv.transpose();
        (void)y;
    }
    return ctx;
}

inline double accuracy(const Architecture& arch, const ModelParams& w,
                       const LabeledDataset& ds) {
    const auto pred = predict(Network{arch, w}, ds.samples);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (pred[i] == ds.labels[i]) ++hits;
    return ds.size() ? static_cast<double>(hits) / static_cast<double>(ds.size())
                     : 0.0;
}

// Applies h(.) to a copy of w first; main accuracy on clean test data,
// backdoor accuracy as the fraction of triggered source-class samples
// classified as the target.
inline std::pair<double, double> evaluate(const Architecture& arch,
                                          const ModelParams& w,
                                          const EvalContext& ctx,
                                          const PostDefenseSpec& post) {
    const ModelParams wd = apply_post_defense(post, arch, w, *ctx.probe);
    const double main_acc = accuracy(arch, wd, *ctx.test);
    const auto pred = predict(Network{arch, wd}, ctx.triggered_test.samples);
    std::size_t hits = 0;
    for (int p : pred)
        if (p == ctx.trig.target_class) ++hits;
    const double backdoor_acc =
        ctx.triggered_test.size()
            ? static_cast<double>(hits) /
                  static_cast<double>(ctx.triggered_test.size())
            : 0.0;
    return {main_acc, backdoor_acc};
}

struct RoundResult {
    ModelParams w_next;
    MetricRecord metrics;
    RoundSample sample;
};

// One federated round: subsample, collect benign updates from sampled benign
// clients and one shared crafted update from sampled attackers, aggregate,
// apply w - Aggr, evaluate through the post-training defense. When attack is
// null, sampled attackers train benignly on their own (clean) data. A null
// EvalContext skips evaluation (the simulator evaluates on the attacker's
// own split instead).
inline RoundResult run_round(const Architecture& arch, const ModelParams& w,
                             const std::vector<LabeledDataset>& clients,
                             const FLConfig& cfg, int round,
                             const AttackFn* attack, const EvalContext* ctx) {
    RoundResult res;
    res.sample = subsample(cfg, round);
    const bool attacking = attack && !res.sample.attackers_selected.empty();
    const int n_attackers =
        static_cast<int>(res.sample.attackers_selected.size());

    std::vector<Update> updates;
    updates.reserve(res.sample.selected.size());
    for (int k : res.sample.selected) {
        if (attacking && k < cfg.M) {
            updates.push_back((*attack)(w, round, k, n_attackers));
        } else {
            auto rng = client_rng(cfg, round, k);
            updates.push_back(benign_update(clients[static_cast<std::size_t>(k)],
                                            arch, w, cfg, rng));
        }
    }

    const Update agg = aggregate(cfg.aggregator, updates);
    res.w_next = w;
    res.w_next.values = w.values - agg.delta;

    res.metrics.round = round;
    res.metrics.global_norm = res.w_next.values.norm();
    if (ctx) {
        const ModelParams wd =
            apply_post_defense(cfg.post_defense, arch, res.w_next, *ctx->probe);
        res.metrics.main_acc = accuracy(arch, wd, *ctx->test);
        const auto pred =
            predict(Network{arch, wd}, ctx->triggered_test.samples);
        std::size_t hits = 0;
        for (int p : pred)
            if (p == ctx->trig.target_class) ++hits;
        res.metrics.backdoor_acc =
            ctx->triggered_test.size()
                ? static_cast<double>(hits) /
                      static_cast<double>(ctx->triggered_test.size())
                : 0.0;
        res.metrics.reward =
            (res.sample.attackers_selected.empty() || !ctx->reward)
                ? 0.0
                : ctx->reward(wd);
    }
    return res;
}

}  // namespace fedsim
