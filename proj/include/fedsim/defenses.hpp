#pragma once

// Training-stage aggregation rules (FedAvg, coordinate-wise Median, Krum,
// norm-bounding) and post-training defenses (neuron clipping, pruning).
// All operations are pure functions over immutable inputs.

#include <Eigen/Dense>
#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/nncore.hpp"

namespace fedsim {

enum class AggregatorKind { fedavg, krum, median, norm_bound };

struct AggregatorSpec {
    AggregatorKind kind = AggregatorKind::fedavg;
    int krum_f = 0;
    double norm_threshold = 0.05;
};

enum class PostDefenseKind { identity, neuron_clip, prune };

struct PostDefenseSpec {
    PostDefenseKind kind = PostDefenseKind::identity;
    double clip_threshold = 1.0;
    int prune_count = 0;
};

// ---------------------------------------------------------------------------
// Aggregation rules

inline Update fedavg(const std::vector<Update>& updates) {
    if (updates.empty()) throw ConfigError("fedavg: empty update list");
    Update out;
    out.delta = Vec::Zero(updates[0].delta.size());
    for (const auto& u : updates) {
        if (u.delta.size() != out.delta.size())
            throw ConfigError("fedavg: layout mismatch");
        out.delta += u.delta;
    }
    out.delta /= static_cast<double>(updates.size());
    return out;
}

// Coordinate-wise median; even counts average the two middle values.
inline Update median(const std::vector<Update>& updates) {
    if (updates.empty()) throw ConfigError("median: empty update list");
    const Eigen::Index d = updates[0].delta.size();
    const std::size_t n = updates.size();
    Update out;
    out.delta = Vec(d);
    std::vector<double> col(n);
    for (Eigen::Index i = 0; i < d; ++i) {
        for (std::size_t k = 0; k < n; ++k) col[k] = updates[k].delta[i];
        std::sort(col.begin(), col.end());
        out.delta[i] = (n % 2 == 1) ? col[n / 2]
                                    : 0.5 * (col[n / 2 - 1] + col[n / 2]);
    }
    return out;
}

// Krum selection: the update with minimal summed squared distance to its
// n - f - 2 nearest neighbours. Ties break toward the lowest index.
inline Update krum(const std::vector<Update>& updates, int f) {
    const int n = static_cast<int>(updates.size());
    if (n < 2 * f + 3)
        throw ConfigError("krum: need n >= 2f+3, got n=" + std::to_string(n) +
                          " f=" + std::to_string(f));
    Mat dist2 = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double d2 = (updates[static_cast<std::size_t>(i)].delta -
                               updates[static_cast<std::size_t>(j)].delta)
                                  .squaredNorm();
            dist2(i, j) = dist2(j, i) = d2;
        }
    const int m = n - f - 2;
    int best = 0;
    double best_score = std::numeric_limits<double>::infinity();
    std::vector<double> others;
    for (int i = 0; i < n; ++i) {
        others.clear();
        for (int j = 0; j < n; ++j)
            if (j != i) others.push_back(dist2(i, j));
        std::sort(others.begin(), others.end());
        const double score =
            std::accumulate(others.begin(), others.begin() + m, 0.0);
        if (score < best_score) {
            best_score = score;
            best = i;
        }
    }
    return updates[static_cast<std::size_t>(best)];
}

// Clip-then-average: each update scaled by min(1, C/||g||), then the mean.
inline Update norm_bound(const std::vector<Update>& updates, double C) {
    if (C <= 0.0) throw ConfigError("norm_bound: threshold must be > 0");
    if (updates.empty()) throw ConfigError("norm_bound: empty update list");
    Update out;
    out.delta = Vec::Zero(updates[0].delta.size());
    for (const auto& u : updates) {
        const double nrm = u.delta.norm();
        const double scale = nrm > C ? C / nrm : 1.0;
        out.delta += scale * u.delta;
    }
    out.delta /= static_cast<double>(updates.size());
    return out;
}

inline Update aggregate(const AggregatorSpec& spec,
                        const std::vector<Update>& updates) {
    switch (spec.kind) {
        case AggregatorKind::fedavg: return fedavg(updates);
        case AggregatorKind::krum: return krum(updates, spec.krum_f);
        case AggregatorKind::median: return median(updates);
        case AggregatorKind::norm_bound:
            return norm_bound(updates, spec.norm_threshold);
    }
    throw ConfigError("unknown aggregator");
}

// ---------------------------------------------------------------------------
// Post-training defenses h(.)

namespace detail {

inline Eigen::Index layer_param_offset(const Architecture& arch,
                                       std::size_t layer_idx) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < layer_idx; ++i)
        off += static_cast<Eigen::Index>(arch.layers[i].out) *
                   arch.layers[i].in +
               arch.layers[i].out;
    return off;
}

}  // namespace detail

// Scales each output-layer neuron's incoming weight row (bias included in the
// norm) down to the threshold. Idempotent.
inline ModelParams neuron_clip(const Architecture& arch, const ModelParams& w,
                               double threshold) {
    if (threshold <= 0.0) throw ConfigError("neuron_clip: threshold must be > 0");
    ModelParams out = w;
    const std::size_t li = arch.layers.size() - 1;
    const auto& d = arch.layers[li];
    const Eigen::Index off = detail::layer_param_offset(arch, li);
    detail::WMapMut W(out.values.data() + off, d.out, d.in);
    Eigen::Map<Vec> b(out.values.data() + off +
                          static_cast<Eigen::Index>(d.out) * d.in,
                      d.out);
    for (int r = 0; r < d.out; ++r) {
        const double nrm =
            std::sqrt(W.row(r).squaredNorm() + b[r] * b[r]);
        if (nrm > threshold) {
            const double s = threshold / nrm;
            W.row(r) *= s;
            b[r] *= s;
        }
    }
    return out;
}

// Mean post-activation per last-hidden-layer neuron over the probe set.
inline Vec mean_activations(const Architecture& arch, const ModelParams& w,
                            const LabeledDataset& probe) {
    if (probe.size() == 0) throw ConfigError("prune: empty probe dataset");
    ForwardCache cache;
    forward(Network{arch, w}, probe.samples, &cache);
    // acts[i+1] is the output of layer i; last hidden layer = layers.size()-2.
    const Mat& acts = cache.acts[arch.layers.size() - 1];
    return acts.colwise().mean().transpose();
}

// Zeroes the incoming and outgoing weights of the n lowest mean-activation
// neurons of the last hidden layer, measured on clean probe data. Ties break
// toward the lowest neuron index.
inline ModelParams prune(const Architecture& arch, const ModelParams& w, int n,
                         const LabeledDataset& probe) {
    if (arch.layers.size() < 2) throw ConfigError("prune: no hidden layer");
    const std::size_t hidden_idx = arch.layers.size() - 2;
    const int width = arch.layers[hidden_idx].out;
    if (n >= width)
        throw ConfigError("prune: count " + std::to_string(n) +
                          " >= layer width " + std::to_string(width));
    if (n <= 0) return w;

    const Vec act = mean_activations(arch, w, probe);
    std::vector<int> order(static_cast<std::size_t>(width));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return act[a] < act[b]; });

    ModelParams out = w;
    const auto& dh = arch.layers[hidden_idx];
    const auto& dn = arch.layers[hidden_idx + 1];
    const Eigen::Index off_h = detail::layer_param_offset(arch, hidden_idx);
    const Eigen::Index off_n = detail::layer_param_offset(arch, hidden_idx + 1);
    detail::WMapMut Wh(out.values.data() + off_h, dh.out, dh.in);
    Eigen::Map<Vec> bh(out.values.data() + off_h +
                           static_cast<Eigen::Index>(dh.out) * dh.in,
                       dh.out);
    detail::WMapMut Wn(out.values.data() + off_n, dn.out, dn.in);
    for (int k = 0; k < n; ++k) {
        const int neuron = order[static_cast<std::size_t>(k)];
        Wh.row(neuron).setZero();
        bh[neuron] = 0.0;
        Wn.col(neuron).setZero();
    }
    return out;
}

inline ModelParams apply_post_defense(const PostDefenseSpec& spec,
                                      const Architecture& arch,
                                      const ModelParams& w,
                                      const LabeledDataset& probe) {
    switch (spec.kind) {
        case PostDefenseKind::identity: return w;
        case PostDefenseKind::neuron_clip:
            return neuron_clip(arch, w, spec.clip_threshold);
        case PostDefenseKind::prune:
            return prune(arch, w, spec.prune_count, probe);
    }
    throw ConfigError("unknown post-training defense");
}

}  // namespace fedsim
