#pragma once

// Attack update crafting: the two-step crafted update (poisoned local search
// followed by model crafting toward the clean reference update) plus the
// baseline attacks (BFL, DBA, PGD, Neurotoxin). All functions are pure and
// leave the global model untouched.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/flcore.hpp"
#include "fedsim/nncore.hpp"

namespace fedsim {

// First-step action: poisoned local-search hyperparameters.
struct LocalSearchAction {
    double rho = 0.5;
    int B_prime = 128;
    int E_prime = 1;
    double eta_prime = 0.05;
};

// Second-step action: crafting fraction and interpolation factor.
struct ModelCraftAction {
    double alpha = 0.0;
    double beta = 0.0;
};

// Decoding table from raw policy outputs in [-1,1] to semantic ranges.
struct ActionBounds {
    int b_lo = 16, b_hi = 256;
    int e_lo = 1, e_hi = 5;
    double eta_lo = 1e-3, eta_hi = 0.2;
};

namespace detail {

inline double unit(double raw) {  // [-1,1] -> [0,1], clipped
    return std::clamp(0.5 * (raw + 1.0), 0.0, 1.0);
}

}  // namespace detail

inline LocalSearchAction decode_a1(const Vec& raw, const ActionBounds& b) {
    if (raw.size() != 4) throw ConfigError("decode_a1: expected 4 dims");
    LocalSearchAction a;
    a.rho = detail::unit(raw[0]);
    a.B_prime = static_cast<int>(
        std::lround(b.b_lo + detail::unit(raw[1]) * (b.b_hi - b.b_lo)));
    a.E_prime = static_cast<int>(
        std::lround(b.e_lo + detail::unit(raw[2]) * (b.e_hi - b.e_lo)));
    a.eta_prime = b.eta_lo * std::pow(b.eta_hi / b.eta_lo, detail::unit(raw[3]));
    return a;
}

inline ModelCraftAction decode_a2(const Vec& raw) {
    if (raw.size() != 2) throw ConfigError("decode_a2: expected 2 dims");
    return {detail::unit(raw[0]), detail::unit(raw[1])};
}

// ---------------------------------------------------------------------------
// Double Whammy steps

// E' steps of SGD on the rho-mixed poisoned dataset; g~ = w - w'.
inline Update local_search(const Architecture& arch, const ModelParams& w,
                           const PoisonedDataset& pooled,
                           const LocalSearchAction& a1, std::mt19937_64& rng) {
    return local_sgd(arch, w, pooled.data, a1.E_prime, a1.B_prime, a1.eta_prime,
                     rng);
}

// Benign-style update from the attackers' pooled clean data.
inline Update clean_reference(const Architecture& arch, const ModelParams& w,
                              const LabeledDataset& pooled_clean,
                              const FLConfig& cfg, std::mt19937_64& rng) {
    return benign_update(pooled_clean, arch, w, cfg, rng);
}

// Per layer, interpolate the ceil(alpha*size) coordinates of largest
// |g~ - g| toward g by factor beta. Ties break toward the lowest index.
inline Update model_craft(const Update& g_tilde, const Update& g,
                          const Layout& layout, const ModelCraftAction& a2) {
    if (g_tilde.delta.size() != g.delta.size())
        throw ConfigError("model_craft: layout mismatch");
    Update out = g_tilde;
    if (a2.alpha <= 0.0 || a2.beta == 0.0) return out;
    Eigen::Index off = 0;
    std::vector<Eigen::Index> order;
    for (const auto& entry : layout) {
        const Eigen::Index n = static_cast<Eigen::Index>(entry.size());
        const Eigen::Index take = static_cast<Eigen::Index>(
            std::ceil(a2.alpha * static_cast<double>(n)));
        if (take > 0) {
            order.resize(static_cast<std::size_t>(n));
            std::iota(order.begin(), order.end(), off);
            std::stable_sort(order.begin(), order.end(),
                             [&](Eigen::Index a, Eigen::Index b) {
                                 return std::abs(g_tilde.delta[a] -
                                                 g.delta[a]) >
                                        std::abs(g_tilde.delta[b] -
                                                 g.delta[b]);
                             });
            for (Eigen::Index k = 0; k < take; ++k) {
                const Eigen::Index i = order[static_cast<std::size_t>(k)];
                out.delta[i] -= a2.beta * (g_tilde.delta[i] - g.delta[i]);
            }
        }
        off += n;
    }
    return out;
}

// Named per-call streams: the same stream feeds the same role in every
// attack variant, so compositional identities between variants hold exactly.
inline std::mt19937_64 attack_stream(std::uint64_t seed, std::string_view role) {
    return make_rng(seed, role);
}

// Full two-step crafted update: re-poison the pooled attacker data at rho,
// run the poisoned local search, compute the clean reference, craft, and
// optionally add Gaussian noise. Every sampled attacker submits this same
// update.
inline Update dwba_update(const Architecture& arch, const ModelParams& w,
                          const LabeledDataset& pooled_clean,
                          const TriggerPattern& trig,
                          const LocalSearchAction& a1,
                          const ModelCraftAction& a2, const FLConfig& cfg,
                          std::uint64_t seed, double noise_sigma = 0.0) {
    auto poison_rng = attack_stream(seed, "attack.poison");
    PoisonedDataset pd = poison_dataset(pooled_clean, a1.rho, trig,
                                        kGlobalTrigger, poison_rng);
    auto search_rng = attack_stream(seed, "attack.search");
    Update g_tilde = local_search(arch, w, pd, a1, search_rng);
    auto clean_rng = attack_stream(seed, "attack.clean");
    Update g = clean_reference(arch, w, pooled_clean, cfg, clean_rng);
    Update crafted = model_craft(g_tilde, g, *w.layout, a2);
    if (noise_sigma > 0.0) {
        auto noise_rng = attack_stream(seed, "attack.noise");
        std::normal_distribution<double> noise(0.0, noise_sigma);
        for (Eigen::Index i = 0; i < crafted.delta.size(); ++i)
            crafted.delta[i] += noise(noise_rng);
    }
    return crafted;
}

// ---------------------------------------------------------------------------
// Baseline attacks

// Two-task local training on the rho-mixed poisoned dataset with benign
// hyperparameters; no scaling, no crafting.
inline Update bfl_update(const Architecture& arch, const ModelParams& w,
                         const LabeledDataset& attacker_data,
                         const TriggerPattern& trig, double rho,
                         const FLConfig& cfg, std::uint64_t seed) {
    auto poison_rng = attack_stream(seed, "attack.poison");
    PoisonedDataset pd =
        poison_dataset(attacker_data, rho, trig, kGlobalTrigger, poison_rng);
    auto search_rng = attack_stream(seed, "attack.search");
    return local_sgd(arch, w, pd.data, cfg.E, cfg.B, cfg.eta, search_rng);
}

// BFL followed by projection onto the L2 ball of the given radius.
inline Update pgd_update(const Architecture& arch, const ModelParams& w,
                         const LabeledDataset& attacker_data,
                         const TriggerPattern& trig, double rho, double radius,
                         const FLConfig& cfg, std::uint64_t seed) {
    if (radius <= 0.0) throw ConfigError("pgd_update: radius must be > 0");
    Update g = bfl_update(arch, w, attacker_data, trig, rho, cfg, seed);
    const double nrm = g.norm();
    if (nrm > radius) g.delta *= radius / nrm;
    return g;
}

// Poisoned update zeroed on the k largest-|clean-gradient| coordinates per
// layer, so the attack only touches coordinates the benign task leaves slack.
inline Update neurotoxin_update(const Architecture& arch, const ModelParams& w,
                                const LabeledDataset& attacker_data,
                                const TriggerPattern& trig, double rho,
                                int k_mask, const FLConfig& cfg,
                                std::uint64_t seed) {
    auto clean_rng = attack_stream(seed, "attack.clean");
    Update g_clean = clean_reference(arch, w, attacker_data, cfg, clean_rng);
    Update g = bfl_update(arch, w, attacker_data, trig, rho, cfg, seed);
    if (k_mask == 0) return g;

    Eigen::Index off = 0;
    std::vector<Eigen::Index> order;
    for (const auto& entry : *w.layout) {
        const Eigen::Index n = static_cast<Eigen::Index>(entry.size());
        if (k_mask >= n)
            throw ConfigError("neurotoxin_update: k_mask >= layer size for " +
                              entry.name);
        order.resize(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), off);
        std::stable_sort(order.begin(), order.end(),
                         [&](Eigen::Index a, Eigen::Index b) {
                             return std::abs(g_clean.delta[a]) >
                                    std::abs(g_clean.delta[b]);
                         });
        for (int k = 0; k < k_mask; ++k)
            g.delta[order[static_cast<std::size_t>(k)]] = 0.0;
        off += n;
    }
    return g;
}

// BFL-style update poisoned with one sub-trigger only; unlike the two-step
// attack, each attacker acts on its own local data.
inline Update dba_update(const Architecture& arch, const ModelParams& w,
                         const LabeledDataset& attacker_k_data,
                         const TriggerPattern& trig, int sub_index, double rho,
                         const FLConfig& cfg, std::uint64_t seed) {
    if (sub_index < 0 ||
        sub_index >= static_cast<int>(trig.sub_triggers.size()))
        throw ConfigError("dba_update: sub-trigger index out of range");
    auto poison_rng = attack_stream(seed, "attack.poison");
    PoisonedDataset pd =
        poison_dataset(attacker_k_data, rho, trig, sub_index, poison_rng);
    auto search_rng = attack_stream(seed, "attack.search");
    return local_sgd(arch, w, pd.data, cfg.E, cfg.B, cfg.eta, search_rng);
}

}  // namespace fedsim
