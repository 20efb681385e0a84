#pragma once

// Dataset containers, i.i.d. client partitioning, trigger embedding, and
// dataset poisoning. Datasets are immutable after construction.

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/nncore.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

struct LabeledDataset {
    Mat samples;             // one sample per row, features in [0,1]
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    int dim() const { return static_cast<int>(samples.cols()); }

    LabeledDataset subset(const std::vector<std::size_t>& idx) const {
        LabeledDataset out;
        out.num_classes = num_classes;
        out.samples = Mat(static_cast<Eigen::Index>(idx.size()), samples.cols());
        out.labels.reserve(idx.size());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            out.samples.row(static_cast<Eigen::Index>(r)) =
                samples.row(static_cast<Eigen::Index>(idx[r]));
            out.labels.push_back(labels[idx[r]]);
        }
        return out;
    }
};

inline LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b) {
    LabeledDataset out;
    out.num_classes = std::max(a.num_classes, b.num_classes);
    out.samples = Mat(a.samples.rows() + b.samples.rows(),
                      std::max(a.samples.cols(), b.samples.cols()));
    out.samples.topRows(a.samples.rows()) = a.samples;
    out.samples.bottomRows(b.samples.rows()) = b.samples;
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    return out;
}

// ---------------------------------------------------------------------------
// Triggers

struct PixelOverride {
    int index = 0;
    double value = 1.0;
};

constexpr int kGlobalTrigger = -1;

struct TriggerPattern {
    std::vector<PixelOverride> mask;
    int source_class = 1;   // kGlobalTrigger means "all classes"
    int target_class = 7;
    std::vector<std::vector<PixelOverride>> sub_triggers;

    void validate(int feature_dim) const {
        std::vector<char> seen(static_cast<std::size_t>(feature_dim), 0);
        for (const auto& o : mask) {
            if (o.index < 0 || o.index >= feature_dim)
                throw ConfigError("trigger coordinate out of feature bounds");
            if (o.value < 0.0 || o.value > 1.0)
                throw ConfigError("trigger value outside [0,1]");
        }
        // Sub-triggers must be pairwise disjoint and union to the mask.
        std::size_t total = 0;
        for (const auto& sub : sub_triggers) {
            for (const auto& o : sub) {
                if (o.index < 0 || o.index >= feature_dim)
                    throw ConfigError("sub-trigger coordinate out of bounds");
                if (seen[static_cast<std::size_t>(o.index)]++)
                    throw ConfigError("sub-triggers overlap");
                ++total;
            }
        }
        if (!sub_triggers.empty()) {
            if (total != mask.size())
                throw ConfigError("sub-triggers do not cover the global mask");
            for (const auto& o : mask)
                if (!seen[static_cast<std::size_t>(o.index)])
                    throw ConfigError("global mask coordinate missing from sub-triggers");
        }
    }
};

// Default desk-scale trigger: a 4-pixel block in the top-left corner of a
// side x side image, value 1.0, split into 4 singleton sub-triggers.
inline TriggerPattern default_trigger(int side, int source_class = 1,
                                      int target_class = 7) {
    TriggerPattern t;
    t.source_class = source_class;
    t.target_class = target_class;
    const int coords[4] = {0, 1, side, side + 1};
    for (int c : coords) {
        t.mask.push_back({c, 1.0});
        t.sub_triggers.push_back({{c, 1.0}});
    }
    return t;
}

// Applies the (sub-)trigger mask to x and returns the triggered sample with
// the target label. which = kGlobalTrigger for the full mask, else a
// sub-trigger index.
inline std::pair<Vec, int> embed_trigger(const Vec& x, const TriggerPattern& trig,
                                         int which = kGlobalTrigger) {
    const std::vector<PixelOverride>* mask = &trig.mask;
    if (which != kGlobalTrigger) {
        if (which < 0 || which >= static_cast<int>(trig.sub_triggers.size()))
            throw ConfigError("sub-trigger index out of range");
        mask = &trig.sub_triggers[static_cast<std::size_t>(which)];
    }
    Vec out = x;
    for (const auto& o : *mask) {
        if (o.index >= out.size())
            throw ConfigError("trigger coordinate out of feature bounds");
        out[o.index] = o.value;
    }
    return {out, trig.target_class};
}

// ---------------------------------------------------------------------------
// Poisoning

struct PoisonedDataset {
    LabeledDataset base;               // clean originals
    LabeledDataset data;               // base with triggers applied
    std::vector<std::size_t> poisoned_indices;
    double rho = 0.0;
};

// Triggers and relabels exactly round(rho * |ds|) uniformly chosen samples.
inline PoisonedDataset poison_dataset(const LabeledDataset& ds, double rho,
                                      const TriggerPattern& trig, int which,
                                      std::mt19937_64& rng) {
    if (rho < 0.0 || rho > 1.0) throw ConfigError("poison ratio outside [0,1]");
    PoisonedDataset out;
    out.base = ds;
    out.data = ds;
    out.rho = rho;
    const std::size_t n = ds.size();
    const std::size_t npoison =
        static_cast<std::size_t>(std::llround(rho * static_cast<double>(n)));

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(npoison);
    std::sort(idx.begin(), idx.end());
    out.poisoned_indices = idx;

    for (std::size_t i : idx) {
        auto [xv, label] = embed_trigger(
            ds.samples.row(static_cast<Eigen::Index>(i)).transpose(), trig, which);
        out.data.samples.row(static_cast<Eigen::Index>(i)) = xv.transpose();
        out.data.labels[i] = label;
    }
    return out;
}

// ---------------------------------------------------------------------------
// i.i.d. partitioning

// Shuffles ds and splits it into k near-equal disjoint parts.
inline std::vector<LabeledDataset> iid_split(const LabeledDataset& ds, int k,
                                             std::uint64_t seed) {
    if (k < 1) throw ConfigError("iid_split: k must be >= 1");
    if (static_cast<std::size_t>(k) > ds.size())
        throw ConfigError("iid_split: more clients than samples");
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = make_rng(seed, "iid_split");
    std::shuffle(idx.begin(), idx.end(), rng);

    std::vector<LabeledDataset> parts;
    parts.reserve(static_cast<std::size_t>(k));
    const std::size_t n = ds.size();
    const std::size_t base = n / static_cast<std::size_t>(k);
    const std::size_t rem = n % static_cast<std::size_t>(k);
    std::size_t pos = 0;
    for (int i = 0; i < k; ++i) {
        const std::size_t len = base + (static_cast<std::size_t>(i) < rem ? 1 : 0);
        std::vector<std::size_t> part(idx.begin() + static_cast<long>(pos),
                                      idx.begin() + static_cast<long>(pos + len));
        pos += len;
        parts.push_back(ds.subset(part));
    }
    return parts;
}

// ---------------------------------------------------------------------------
// Desk-scale synthetic task: Gaussian blobs on a side x side grid, one blob
// mean per class, features clamped to [0,1].

// means_seed controls the class means separately, so train and test splits
// can share the distribution while drawing independent samples.
inline LabeledDataset make_blobs(std::size_t n, int dim, int classes,
                                 double noise, std::uint64_t seed,
                                 std::uint64_t means_seed = 0) {
    if (means_seed == 0) means_seed = seed;
    auto mean_rng = make_rng(means_seed, "blobs.means");
    auto rng = make_rng(seed, "blobs");
    std::uniform_real_distribution<double> umean(0.15, 0.85);
    Mat means(classes, dim);
    for (int c = 0; c < classes; ++c)
        for (int d = 0; d < dim; ++d) means(c, d) = umean(mean_rng);

    LabeledDataset ds;
    ds.num_classes = classes;
    ds.samples = Mat(static_cast<Eigen::Index>(n), dim);
    ds.labels.resize(n);
    std::normal_distribution<double> gnoise(0.0, noise);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
        ds.labels[i] = c;
        for (int d = 0; d < dim; ++d)
            ds.samples(static_cast<Eigen::Index>(i), d) =
                std::clamp(means(c, d) + gnoise(rng), 0.0, 1.0);
    }
    // Shuffle so class labels are not periodic in index.
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    return ds.subset(idx);
}

// Desk-scale synthetic "digits": sparse ink glyphs on a side x side canvas.
// Each class has a fixed glyph occupying the interior; the one-pixel border
// carries only faint clamped noise, so corner triggers write into inputs
// that are almost always dark on clean data (as on real digit images).
inline LabeledDataset make_digits(std::size_t n, int dim, int classes,
                                  double noise, std::uint64_t seed,
                                  std::uint64_t means_seed = 0) {
    const int side =
        static_cast<int>(std::lround(std::sqrt(static_cast<double>(dim))));
    if (side < 3 || side * side != dim)
        throw ConfigError("digits: dim must be a perfect square >= 9");
    if (means_seed == 0) means_seed = seed;
    auto glyph_rng = make_rng(means_seed, "digits.glyphs");
    auto rng = make_rng(seed, "digits");
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Mat glyphs = Mat::Zero(classes, dim);
    for (int c = 0; c < classes; ++c)
        for (int r = 1; r + 1 < side; ++r)
            for (int col = 1; col + 1 < side; ++col) {
                const bool ink = u01(glyph_rng) < 0.45;
                const double v = 0.55 + 0.45 * u01(glyph_rng);
                if (ink) glyphs(c, r * side + col) = v;
            }

    LabeledDataset ds;
    ds.num_classes = classes;
    ds.samples = Mat(static_cast<Eigen::Index>(n), dim);
    ds.labels.resize(n);
    std::normal_distribution<double> gnoise(0.0, noise);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
        ds.labels[i] = c;
        for (int d = 0; d < dim; ++d)
            ds.samples(static_cast<Eigen::Index>(i), d) =
                std::clamp(glyphs(c, d) + gnoise(rng), 0.0, 1.0);
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    return ds.subset(idx);
}

// ---------------------------------------------------------------------------
// FGDS container: magic, counts, f64 features, u16 labels.

inline void save_dataset(const LabeledDataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open for write: " + path);
    os.write("FGDS", 4);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.dim()));
    detail::write_pod<std::uint32_t>(os,
                                     static_cast<std::uint32_t>(ds.num_classes));
    for (Eigen::Index r = 0; r < ds.samples.rows(); ++r)
        for (Eigen::Index c = 0; c < ds.samples.cols(); ++c)
            detail::write_pod<double>(os, ds.samples(r, c));
    for (int y : ds.labels)
        detail::write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(y));
    if (!os) throw ConfigError("write failed: " + path);
}

inline LabeledDataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "FGDS")
        throw ConfigError("bad magic in " + path);
    const auto n = detail::read_pod<std::uint32_t>(is);
    const auto dim = detail::read_pod<std::uint32_t>(is);
    const auto classes = detail::read_pod<std::uint32_t>(is);
    LabeledDataset ds;
    ds.num_classes = static_cast<int>(classes);
    ds.samples = Mat(n, dim);
    for (std::uint32_t r = 0; r < n; ++r)
        for (std::uint32_t c = 0; c < dim; ++c)
            ds.samples(r, c) = detail::read_pod<double>(is);
    ds.labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i)
        ds.labels[i] = detail::read_pod<std::uint16_t>(is);
    return ds;
}

// Converter from the IDX image/label files used by the public digit datasets.
inline LabeledDataset load_idx(const std::string& images_path,
                               const std::string& labels_path) {
    auto read_be32 = [](std::istream& is) {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        return (static_cast<std::uint32_t>(b[0]) << 24) |
               (static_cast<std::uint32_t>(b[1]) << 16) |
               (static_cast<std::uint32_t>(b[2]) << 8) |
               static_cast<std::uint32_t>(b[3]);
    };
    std::ifstream imgs(images_path, std::ios::binary);
    std::ifstream labs(labels_path, std::ios::binary);
    if (!imgs || !labs) throw ConfigError("cannot open IDX files");
    if (read_be32(imgs) != 0x00000803) throw ConfigError("bad IDX image magic");
    if (read_be32(labs) != 0x00000801) throw ConfigError("bad IDX label magic");
    const std::uint32_t n = read_be32(imgs);
    const std::uint32_t rows = read_be32(imgs);
    const std::uint32_t cols = read_be32(imgs);
    if (read_be32(labs) != n) throw ConfigError("IDX image/label count mismatch");

    LabeledDataset ds;
    ds.num_classes = 10;
    ds.samples = Mat(n, rows * cols);
    ds.labels.resize(n);
    std::vector<unsigned char> row(rows * cols);
    for (std::uint32_t i = 0; i < n; ++i) {
        imgs.read(reinterpret_cast<char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
        for (std::uint32_t p = 0; p < rows * cols; ++p)
            ds.samples(i, p) = static_cast<double>(row[p]) / 255.0;
        char y;
        labs.read(&y, 1);
        ds.labels[i] = static_cast<int>(static_cast<unsigned char>(y));
    }
    if (!imgs || !labs) throw ConfigError("IDX file truncated");
    return ds;
}

}  // namespace fedsim
