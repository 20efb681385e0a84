#pragma once

// Experiment configuration: a flat `key = value` text format with a
// versioned schema. Unknown keys are hard errors so a typo in a defense name
// can never silently run the wrong experiment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedsim/attacks.hpp"
#include "fedsim/data.hpp"
#include "fedsim/defenses.hpp"
#include "fedsim/env.hpp"
#include "fedsim/flcore.hpp"
#include "fedsim/rl.hpp"

namespace fedsim {

enum class AttackKind {
    none,
    bfl,
    dba,
    pgd,
    neurotoxin,
    dwba_fixed,
    dwba_rl
};

enum class Schedule { alternating, simultaneous };

struct ExperimentConfig {
    std::string run_id;
    std::string output_dir = "runs";
    std::uint64_t seed = 1;
    std::string profile = "desk";

    // dataset
    std::string dataset_kind = "blobs";
    std::string dataset_path, dataset_test_path;
    int dataset_n = 4000, dataset_test_n = 1000;
    int dataset_dim = 64, dataset_classes = 10;
    double dataset_noise = 0.1;

    // trigger
    int trigger_source = 1, trigger_target = 7;
    double trigger_value = 1.0;
    std::vector<int> trigger_pixels;  // empty -> corner block default
    int trigger_subs = 4;

    // model
    std::vector<int> model_hidden = {64, 32};
    int model_view_layers = 2;

    FLConfig fl;

    // attack
    AttackKind attack_kind = AttackKind::none;
    double attack_rho = 0.5;
    double attack_pgd_radius = 0.05;
    int attack_neurotoxin_topk = 10;
    double attack_noise_sigma = 0.0;
    int attack_window_start = 0;
    int attack_window_end = -1;  // -1 -> fl.T
    LocalSearchAction attack_fixed_a1;
    ModelCraftAction attack_fixed_a2;
    std::string attack_policy_dir;

    // simulator (white-box copies; overridable for the black-box ablation)
    int env_episode_rounds = -1;  // -1 -> fl.T
    double env_gamma = 0.99;
    double env_eval_split = 0.2;
    bool env_simulate_benign = true;
    std::optional<std::uint64_t> env_episode_seed;  // pin episode FL streams
    std::optional<AggregatorSpec> env_aggregator;
    std::optional<PostDefenseSpec> env_post;

    // rl
    Schedule rl_schedule = Schedule::alternating;
    int rl_iterations = 2;
    long rl_steps_per_phase = 1000;
    long rl_total_steps = -1;  // simultaneous; -1 -> 2*iterations*steps_per_phase
    TD3Hyper rl;

    ActionBounds bounds;

    // ---- derived builders -------------------------------------------------

    int fl_T() const { return fl.T; }

    int window_end() const {
        return attack_window_end < 0 ? fl.T : attack_window_end;
    }

    LabeledDataset make_train() const {
        if (dataset_kind == "blobs")
            return make_blobs(static_cast<std::size_t>(dataset_n), dataset_dim,
                              dataset_classes, dataset_noise,
                              derive_seed(seed, "data.train"),
                              derive_seed(seed, "data.means"));
        if (dataset_kind == "digits")
            return make_digits(static_cast<std::size_t>(dataset_n), dataset_dim,
                               dataset_classes, dataset_noise,
                               derive_seed(seed, "data.train"),
                               derive_seed(seed, "data.means"));
        if (dataset_kind == "fgds") return load_dataset(dataset_path);
        throw ConfigError("dataset.kind must be blobs, digits, or fgds");
    }

    LabeledDataset make_test() const {
        if (dataset_kind == "blobs")
            return make_blobs(static_cast<std::size_t>(dataset_test_n),
                              dataset_dim, dataset_classes, dataset_noise,
                              derive_seed(seed, "data.test"),
                              derive_seed(seed, "data.means"));
        if (dataset_kind == "digits")
            return make_digits(static_cast<std::size_t>(dataset_test_n),
                               dataset_dim, dataset_classes, dataset_noise,
                               derive_seed(seed, "data.test"),
                               derive_seed(seed, "data.means"));
        if (dataset_kind == "fgds") return load_dataset(dataset_test_path);
        throw ConfigError("dataset.kind must be blobs, digits, or fgds");
    }

    TriggerPattern make_trigger(int feature_dim) const {
        TriggerPattern t;
        if (trigger_pixels.empty()) {
            const int side = static_cast<int>(
                std::lround(std::sqrt(static_cast<double>(feature_dim))));
            t = default_trigger(side > 1 ? side : 2, trigger_source,
                                trigger_target);
            for (auto& o : t.mask) o.value = trigger_value;
            for (auto& sub : t.sub_triggers)
                for (auto& o : sub) o.value = trigger_value;
        } else {
            t.source_class = trigger_source;
            t.target_class = trigger_target;
            for (int p : trigger_pixels) t.mask.push_back({p, trigger_value});
            const int subs = std::max(1, trigger_subs);
            t.sub_triggers.resize(static_cast<std::size_t>(
                std::min<std::size_t>(static_cast<std::size_t>(subs),
                                      t.mask.size())));
            for (std::size_t i = 0; i < t.mask.size(); ++i)
                t.sub_triggers[i % t.sub_triggers.size()].push_back(t.mask[i]);
        }
        t.validate(feature_dim);
        return t;
    }

    Architecture make_arch(int input_dim) const {
        return make_mlp(input_dim, model_hidden, dataset_classes);
    }

    EnvConfig make_env_config() const {
        EnvConfig e;
        e.fl = fl;
        if (env_aggregator) e.fl.aggregator = *env_aggregator;
        if (env_post) e.fl.post_defense = *env_post;
        e.episode_rounds = env_episode_rounds < 0 ? fl.T : env_episode_rounds;
        e.gamma = env_gamma;
        e.lambda = fl.lambda;
        e.attacker_eval_split = env_eval_split;
        e.simulate_benign_from_attacker_data = env_simulate_benign;
        e.pinned_episode_seed = env_episode_seed;
        e.noise_sigma = attack_noise_sigma;
        e.hidden_view_layers = model_view_layers;
        e.bounds = bounds;
        return e;
    }

    long total_rl_steps() const {
        return rl_total_steps < 0 ? 2L * rl_iterations * rl_steps_per_phase
                                  : rl_total_steps;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

struct KvFile {
    std::map<std::string, std::string> kv;
    std::string path;

    bool has(const std::string& k) const { return kv.count(k) > 0; }

    template <typename T>
    void get(const std::string& k, T& out) const {
        auto it = kv.find(k);
        if (it == kv.end()) return;
        std::istringstream iss(it->second);
        T v{};
        if constexpr (std::is_same_v<T, bool>) {
            std::string s = it->second;
            std::transform(s.begin(), s.end(), s.begin(), ::tolower);
            if (s == "true" || s == "1") v = true;
            else if (s == "false" || s == "0") v = false;
            else throw ConfigError(k + ": expected a boolean");
        } else {
            if (!(iss >> v) || !(iss >> std::ws).eof())
                throw ConfigError(k + ": cannot parse '" + it->second + "'");
        }
        out = v;
    }

    void get(const std::string& k, std::string& out) const {
        auto it = kv.find(k);
        if (it != kv.end()) out = it->second;
    }

    void get(const std::string& k, std::vector<int>& out) const {
        auto it = kv.find(k);
        if (it == kv.end()) return;
        out.clear();
        std::stringstream ss(it->second);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            tok = trim(tok);
            if (tok.empty()) continue;
            out.push_back(std::stoi(tok));
        }
    }
};

inline KvFile read_kv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config: " + path);
    KvFile f;
    f.path = path;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (f.kv.count(key))
            throw ConfigError(path + ": duplicate key " + key);
        f.kv[key] = val;
    }
    return f;
}

inline const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "config_version", "run_id", "output_dir", "seed", "profile",
        "dataset.kind", "dataset.path", "dataset.test_path", "dataset.n",
        "dataset.test_n", "dataset.dim", "dataset.classes", "dataset.noise",
        "trigger.source", "trigger.target", "trigger.value", "trigger.pixels",
        "trigger.subs",
        "model.hidden", "model.view_layers",
        "fl.K", "fl.M", "fl.kappa", "fl.T", "fl.E", "fl.B", "fl.eta",
        "fl.lambda",
        "defense.aggregator", "defense.krum_f", "defense.norm_threshold",
        "defense.post", "defense.clip_threshold", "defense.prune_count",
        "attack.kind", "attack.rho", "attack.pgd_radius",
        "attack.neurotoxin_topk", "attack.noise_sigma", "attack.window_start",
        "attack.window_end", "attack.policy_dir",
        "attack.fixed.rho", "attack.fixed.B", "attack.fixed.E",
        "attack.fixed.eta", "attack.fixed.alpha", "attack.fixed.beta",
        "env.episode_rounds", "env.gamma", "env.eval_split",
        "env.simulate_benign", "env.episode_seed", "env.aggregator",
        "env.krum_f",
        "env.norm_threshold", "env.post", "env.clip_threshold",
        "env.prune_count",
        "rl.schedule", "rl.iterations", "rl.steps_per_phase", "rl.total_steps",
        "rl.actor_lr", "rl.critic_lr", "rl.batch", "rl.gamma", "rl.tau",
        "rl.policy_delay", "rl.explore_noise", "rl.target_noise",
        "rl.noise_clip", "rl.buffer", "rl.warmup", "rl.hidden",
        "rl.updates_per_step",
        "action.b_lo", "action.b_hi", "action.e_lo", "action.e_hi",
        "action.eta_lo", "action.eta_hi",
    };
    return keys;
}

inline AggregatorKind parse_aggregator(const std::string& s) {
    if (s == "fedavg") return AggregatorKind::fedavg;
    if (s == "krum") return AggregatorKind::krum;
    if (s == "median") return AggregatorKind::median;
    if (s == "norm_bound") return AggregatorKind::norm_bound;
    throw ConfigError("unknown aggregator: " + s);
}

inline PostDefenseKind parse_post(const std::string& s) {
    if (s == "identity") return PostDefenseKind::identity;
    if (s == "neuron_clip") return PostDefenseKind::neuron_clip;
    if (s == "prune") return PostDefenseKind::prune;
    throw ConfigError("unknown post-training defense: " + s);
}

inline AttackKind parse_attack(const std::string& s) {
    if (s == "none") return AttackKind::none;
    if (s == "bfl") return AttackKind::bfl;
    if (s == "dba") return AttackKind::dba;
    if (s == "pgd") return AttackKind::pgd;
    if (s == "neurotoxin") return AttackKind::neurotoxin;
    if (s == "dwba_fixed") return AttackKind::dwba_fixed;
    if (s == "dwba_rl") return AttackKind::dwba_rl;
    throw ConfigError("unknown attack kind: " + s);
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& path) {
    auto f = detail::read_kv(path);

    for (const auto& [k, v] : f.kv)
        if (!detail::known_keys().count(k))
            throw ConfigError(path + ": unknown key '" + k + "'");

    int version = 0;
    f.get("config_version", version);
    if (version != 1)
        throw ConfigError(path + ": config_version must be 1");

    ExperimentConfig c;
    f.get("profile", c.profile);
    if (c.profile == "desk") {
        c.fl.K = 20;
        c.fl.M = 2;
        c.fl.kappa = 0.25;
        c.fl.T = 150;
        c.rl_iterations = 2;
        c.rl_steps_per_phase = 1000;
        c.rl.hidden = 128;
        c.rl.batch = 64;
        c.rl.warmup_steps = 200;
        c.rl.buffer_capacity = 20000;
    } else if (c.profile == "paper") {
        c.fl.K = 100;
        c.fl.M = 5;
        c.fl.kappa = 0.1;
        c.fl.T = 500;
        c.rl_iterations = 4;
        c.rl_steps_per_phase = 10000;
    } else {
        throw ConfigError("profile must be desk or paper");
    }

    f.get("run_id", c.run_id);
    f.get("output_dir", c.output_dir);
    f.get("seed", c.seed);

    f.get("dataset.kind", c.dataset_kind);
    f.get("dataset.path", c.dataset_path);
    f.get("dataset.test_path", c.dataset_test_path);
    f.get("dataset.n", c.dataset_n);
    f.get("dataset.test_n", c.dataset_test_n);
    f.get("dataset.dim", c.dataset_dim);
    f.get("dataset.classes", c.dataset_classes);
    f.get("dataset.noise", c.dataset_noise);

    f.get("trigger.source", c.trigger_source);
    f.get("trigger.target", c.trigger_target);
    f.get("trigger.value", c.trigger_value);
    f.get("trigger.pixels", c.trigger_pixels);
    f.get("trigger.subs", c.trigger_subs);

    f.get("model.hidden", c.model_hidden);
    f.get("model.view_layers", c.model_view_layers);

    f.get("fl.K", c.fl.K);
    f.get("fl.M", c.fl.M);
    f.get("fl.kappa", c.fl.kappa);
    f.get("fl.T", c.fl.T);
    f.get("fl.E", c.fl.E);
    f.get("fl.B", c.fl.B);
    f.get("fl.eta", c.fl.eta);
    f.get("fl.lambda", c.fl.lambda);
    c.fl.seed = c.seed;

    {
        std::string agg = "fedavg";
        f.get("defense.aggregator", agg);
        c.fl.aggregator.kind = detail::parse_aggregator(agg);
        // Krum's f defaults to the expected per-round attacker count.
        c.fl.aggregator.krum_f = static_cast<int>(
            std::ceil(c.fl.kappa * static_cast<double>(c.fl.M)));
        f.get("defense.krum_f", c.fl.aggregator.krum_f);
        f.get("defense.norm_threshold", c.fl.aggregator.norm_threshold);

        std::string post = "identity";
        f.get("defense.post", post);
        c.fl.post_defense.kind = detail::parse_post(post);
        f.get("defense.clip_threshold", c.fl.post_defense.clip_threshold);
        f.get("defense.prune_count", c.fl.post_defense.prune_count);
    }

    {
        std::string kind = "none";
        f.get("attack.kind", kind);
        c.attack_kind = detail::parse_attack(kind);
        f.get("attack.rho", c.attack_rho);
        f.get("attack.pgd_radius", c.attack_pgd_radius);
        f.get("attack.neurotoxin_topk", c.attack_neurotoxin_topk);
        f.get("attack.noise_sigma", c.attack_noise_sigma);
        f.get("attack.window_start", c.attack_window_start);
        f.get("attack.window_end", c.attack_window_end);
        f.get("attack.policy_dir", c.attack_policy_dir);
        c.attack_fixed_a1 = {c.attack_rho, c.fl.B, c.fl.E, c.fl.eta};
        f.get("attack.fixed.rho", c.attack_fixed_a1.rho);
        f.get("attack.fixed.B", c.attack_fixed_a1.B_prime);
        f.get("attack.fixed.E", c.attack_fixed_a1.E_prime);
        f.get("attack.fixed.eta", c.attack_fixed_a1.eta_prime);
        f.get("attack.fixed.alpha", c.attack_fixed_a2.alpha);
        f.get("attack.fixed.beta", c.attack_fixed_a2.beta);
    }

    f.get("env.episode_rounds", c.env_episode_rounds);
    f.get("env.gamma", c.env_gamma);
    f.get("env.eval_split", c.env_eval_split);
    f.get("env.simulate_benign", c.env_simulate_benign);
    {
        long pin = -1;
        f.get("env.episode_seed", pin);
        if (pin >= 0) c.env_episode_seed = static_cast<std::uint64_t>(pin);
    }
    if (f.has("env.aggregator") || f.has("env.krum_f") ||
        f.has("env.norm_threshold")) {
        AggregatorSpec spec = c.fl.aggregator;
        std::string agg;
        f.get("env.aggregator", agg);
        if (!agg.empty()) spec.kind = detail::parse_aggregator(agg);
        f.get("env.krum_f", spec.krum_f);
        f.get("env.norm_threshold", spec.norm_threshold);
        c.env_aggregator = spec;
    }
    if (f.has("env.post") || f.has("env.clip_threshold") ||
        f.has("env.prune_count")) {
        PostDefenseSpec spec = c.fl.post_defense;
        std::string post;
        f.get("env.post", post);
        if (!post.empty()) spec.kind = detail::parse_post(post);
        f.get("env.clip_threshold", spec.clip_threshold);
        f.get("env.prune_count", spec.prune_count);
        c.env_post = spec;
    }

    {
        std::string sched = "alternating";
        f.get("rl.schedule", sched);
        if (sched == "alternating") c.rl_schedule = Schedule::alternating;
        else if (sched == "simultaneous")
            c.rl_schedule = Schedule::simultaneous;
        else throw ConfigError("rl.schedule must be alternating or simultaneous");
    }
    f.get("rl.iterations", c.rl_iterations);
    f.get("rl.steps_per_phase", c.rl_steps_per_phase);
    f.get("rl.total_steps", c.rl_total_steps);
    f.get("rl.actor_lr", c.rl.actor_lr);
    f.get("rl.critic_lr", c.rl.critic_lr);
    f.get("rl.batch", c.rl.batch);
    f.get("rl.gamma", c.rl.gamma);
    f.get("rl.tau", c.rl.tau);
    f.get("rl.policy_delay", c.rl.policy_delay);
    f.get("rl.explore_noise", c.rl.explore_noise);
    f.get("rl.target_noise", c.rl.target_noise);
    f.get("rl.noise_clip", c.rl.noise_clip);
    f.get("rl.buffer", c.rl.buffer_capacity);
    f.get("rl.warmup", c.rl.warmup_steps);
    f.get("rl.hidden", c.rl.hidden);
    f.get("rl.updates_per_step", c.rl.updates_per_step);
    c.rl.gamma = c.env_gamma;
    f.get("rl.gamma", c.rl.gamma);

    f.get("action.b_lo", c.bounds.b_lo);
    f.get("action.b_hi", c.bounds.b_hi);
    f.get("action.e_lo", c.bounds.e_lo);
    f.get("action.e_hi", c.bounds.e_hi);
    f.get("action.eta_lo", c.bounds.eta_lo);
    f.get("action.eta_hi", c.bounds.eta_hi);

    c.fl.validate();
    c.rl.validate();
    if (c.attack_window_start < 0 || c.window_end() > c.fl.T ||
        c.attack_window_start >= c.window_end())
        throw ConfigError("attack.window must satisfy 0 <= start < end <= fl.T");
    if (c.attack_kind == AttackKind::dwba_rl && c.attack_policy_dir.empty())
        throw ConfigError("attack.policy_dir is required for attack.kind = dwba_rl");
    return c;
}

}  // namespace fedsim
