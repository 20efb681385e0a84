#pragma once

// Minimal dense neural-network engine: flat parameter vectors with a named
// layout, forward/backward for MLPs, cross-entropy and squared-error losses,
// plain SGD, and a self-describing binary parameter format.
//
// Everything operates on immutable inputs and returns new values; 64-bit
// floats throughout.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/rng.hpp"

namespace fedsim {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    std::string layer;
    NumericError(const std::string& msg, std::string layer_name)
        : std::runtime_error(msg + " (layer: " + layer_name + ")"),
          layer(std::move(layer_name)) {}
};

// ---------------------------------------------------------------------------
// Parameter layout and flat parameter vectors

struct LayoutEntry {
    std::string name;
    std::vector<std::size_t> dims;

    std::size_t size() const {
        return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                               std::multiplies<>());
    }
};

using Layout = std::vector<LayoutEntry>;

inline std::size_t layout_size(const Layout& layout) {
    std::size_t n = 0;
    for (const auto& e : layout) n += e.size();
    return n;
}

struct ModelParams {
    Vec values;
    std::shared_ptr<const Layout> layout;

    std::size_t size() const { return static_cast<std::size_t>(values.size()); }

    bool same_layout(const ModelParams& other) const {
        if (layout == other.layout) return true;
        if (!layout || !other.layout) return false;
        if (layout->size() != other.layout->size()) return false;
        for (std::size_t i = 0; i < layout->size(); ++i)
            if ((*layout)[i].name != (*other.layout)[i].name ||
                (*layout)[i].dims != (*other.layout)[i].dims)
                return false;
        return true;
    }
};

// A client/attacker model update g = w_before - w_after, same layout as w.
struct Update {
    Vec delta;

    std::size_t size() const { return static_cast<std::size_t>(delta.size()); }
    double norm() const { return delta.norm(); }
};

// ---------------------------------------------------------------------------
// Architecture: a feed-forward stack of dense layers

enum class Activation { identity, relu, tanh };

struct DenseLayer {
    std::string name;
    int in = 0;
    int out = 0;
    Activation act = Activation::identity;
};

struct Architecture {
    int input_dim = 0;
    std::vector<DenseLayer> layers;

    int output_dim() const {
        return layers.empty() ? input_dim : layers.back().out;
    }

    std::shared_ptr<const Layout> layout() const {
        auto l = std::make_shared<Layout>();
        for (const auto& d : layers) {
            l->push_back({d.name + ".W",
                          {static_cast<std::size_t>(d.out),
                           static_cast<std::size_t>(d.in)}});
            l->push_back({d.name + ".b", {static_cast<std::size_t>(d.out)}});
        }
        return l;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& d : layers)
            n += static_cast<std::size_t>(d.out) * d.in + d.out;
        return n;
    }
};

// MLP builder: input -> hidden... (relu) -> classes (identity logits).
inline Architecture make_mlp(int input_dim, const std::vector<int>& hidden,
                             int output_dim,
                             Activation hidden_act = Activation::relu,
                             Activation output_act = Activation::identity) {
    Architecture a;
    a.input_dim = input_dim;
    int prev = input_dim;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        a.layers.push_back({"fc" + std::to_string(i + 1), prev, hidden[i],
                            hidden_act});
        prev = hidden[i];
    }
    a.layers.push_back({"out", prev, output_dim, output_act});
    return a;
}

// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) per layer, weights and biases.
inline ModelParams init_params(const Architecture& arch, std::mt19937_64& rng) {
    ModelParams p;
    p.layout = arch.layout();
    p.values = Vec(static_cast<Eigen::Index>(arch.param_count()));
    Eigen::Index off = 0;
    for (const auto& d : arch.layers) {
        const double bound = std::sqrt(1.0 / d.in);
        std::uniform_real_distribution<double> u(-bound, bound);
        const Eigen::Index n = static_cast<Eigen::Index>(d.out) * d.in + d.out;
        for (Eigen::Index i = 0; i < n; ++i) p.values[off + i] = u(rng);
        off += n;
    }
    return p;
}

inline ModelParams zeros_like(const Architecture& arch) {
    ModelParams p;
    p.layout = arch.layout();
    p.values = Vec::Zero(static_cast<Eigen::Index>(arch.param_count()));
    return p;
}

struct Network {
    Architecture arch;
    ModelParams params;
};

namespace detail {

// Row-major map over a W segment so the flat order is (out x in) rows.
using WMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                            Eigen::Dynamic, Eigen::RowMajor>>;
using WMapMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic,
                                         Eigen::Dynamic, Eigen::RowMajor>>;

inline void apply_activation(Mat& z, Activation act) {
    switch (act) {
        case Activation::identity: break;
        case Activation::relu: z = z.cwiseMax(0.0); break;
        case Activation::tanh: z = z.array().tanh().matrix(); break;
    }
}

// dL/dz given dL/da and the post-activation values a.
inline void activation_backward(Mat& da, const Mat& a, Activation act) {
    switch (act) {
        case Activation::identity: break;
        case Activation::relu:
            da = (a.array() > 0.0).cast<double>() * da.array();
            break;
        case Activation::tanh:
            da = (1.0 - a.array().square()) * da.array();
            break;
    }
}

}  // namespace detail

// Per-layer post-activation values; [0] is the input batch.
struct ForwardCache {
    std::vector<Mat> acts;
};

// Forward pass over a batch (one sample per row). Throws NumericError if a
// layer produces a non-finite value, ConfigError on dimension mismatch.
inline Mat forward(const Network& net, const Mat& batch,
                   ForwardCache* cache = nullptr) {
    if (batch.cols() != net.arch.input_dim)
        throw ConfigError("forward: batch feature dim " +
                          std::to_string(batch.cols()) + " != input dim " +
                          std::to_string(net.arch.input_dim));
    if (cache) {
        cache->acts.clear();
        cache->acts.push_back(batch);
    }
    Mat x = batch;
    Eigen::Index off = 0;
    for (const auto& d : net.arch.layers) {
        detail::WMap W(net.params.values.data() + off, d.out, d.in);
        off += static_cast<Eigen::Index>(d.out) * d.in;
        Eigen::Map<const Vec> b(net.params.values.data() + off, d.out);
        off += d.out;

        Mat z = x * W.transpose();
        z.rowwise() += b.transpose();
        detail::apply_activation(z, d.act);
        if (!z.allFinite())
            throw NumericError("non-finite activation", d.name);
        x = std::move(z);
        if (cache) cache->acts.push_back(x);
    }
    return x;
}

// Row-wise softmax; each output row sums to 1.
inline Mat softmax(const Mat& logits) {
    Mat p = logits;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double m = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

// Backprop from dL/d(output) to a parameter gradient; optionally also
// produces dL/d(input) for chaining through another network.
inline Update backward(const Network& net, const ForwardCache& cache,
                       const Mat& d_out, Mat* d_input = nullptr) {
    Update grad;
    grad.delta = Vec::Zero(net.params.values.size());
    Mat da = d_out;

    // Parameter offsets of each layer.
    std::vector<Eigen::Index> offs(net.arch.layers.size());
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < net.arch.layers.size(); ++i) {
        offs[i] = off;
        const auto& d = net.arch.layers[i];
        off += static_cast<Eigen::Index>(d.out) * d.in + d.out;
    }

    for (int i = static_cast<int>(net.arch.layers.size()) - 1; i >= 0; --i) {
        const auto& d = net.arch.layers[i];
        const Mat& a = cache.acts[static_cast<std::size_t>(i) + 1];
        const Mat& x = cache.acts[static_cast<std::size_t>(i)];
        detail::activation_backward(da, a, d.act);

        detail::WMapMut dW(grad.delta.data() + offs[i], d.out, d.in);
        dW = da.transpose() * x;
        Eigen::Map<Vec> db(grad.delta.data() + offs[i] +
                               static_cast<Eigen::Index>(d.out) * d.in,
                           d.out);
        db = da.colwise().sum().transpose();

        if (i > 0 || d_input) {
            detail::WMap W(net.params.values.data() + offs[i], d.out, d.in);
            da = da * W;
        }
    }
    if (d_input) *d_input = da;
    return grad;
}

// Mean cross-entropy over the batch plus its gradient in the network layout.
inline std::pair<double, Update> loss_and_grad(const Network& net,
                                               const Mat& batch,
                                               const std::vector<int>& labels) {
    const int C = net.arch.output_dim();
    if (static_cast<Eigen::Index>(labels.size()) != batch.rows())
        throw ConfigError("loss_and_grad: label count != batch rows");
    for (int y : labels)
        if (y < 0 || y >= C)
            throw ConfigError("loss_and_grad: label out of class range");

    ForwardCache cache;
    Mat logits = forward(net, batch, &cache);
    Mat p = softmax(logits);

    const double n = static_cast<double>(batch.rows());
    double loss = 0.0;
    for (Eigen::Index r = 0; r < p.rows(); ++r)
        loss -= std::log(std::max(p(r, labels[static_cast<std::size_t>(r)]),
                                  1e-300));
    loss /= n;

    Mat d_logits = p;
    for (Eigen::Index r = 0; r < p.rows(); ++r)
        d_logits(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
    d_logits /= n;

    return {loss, backward(net, cache, d_logits)};
}

// Mean cross-entropy only (no gradient).
inline double mean_loss(const Network& net, const Mat& batch,
                        const std::vector<int>& labels) {
    Mat p = softmax(forward(net, batch));
    double loss = 0.0;
    for (Eigen::Index r = 0; r < p.rows(); ++r)
        loss -= std::log(std::max(p(r, labels[static_cast<std::size_t>(r)]),
                                  1e-300));
    return loss / static_cast<double>(batch.rows());
}

inline std::vector<int> predict(const Network& net, const Mat& batch) {
    Mat logits = forward(net, batch);
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index arg = 0;
        logits.row(r).maxCoeff(&arg);
        out[static_cast<std::size_t>(r)] = static_cast<int>(arg);
    }
    return out;
}

// params - eta * grad, as a new value.
inline ModelParams sgd_step(const ModelParams& params, const Update& grad,
                            double eta) {
    if (params.values.size() != grad.delta.size())
        throw ConfigError("sgd_step: layout mismatch");
    ModelParams next = params;
    next.values -= eta * grad.delta;
    return next;
}

// ---------------------------------------------------------------------------
// Serialization: magic "FGNN", version, layout records, little-endian f64s.

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ConfigError("model file truncated");
    return v;
}

}  // namespace detail

inline void save_params(const ModelParams& p, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open for write: " + path);
    os.write("FGNN", 4);
    detail::write_pod<std::uint32_t>(os, 1);  // version
    detail::write_pod<std::uint32_t>(os,
                                     static_cast<std::uint32_t>(p.layout->size()));
    for (const auto& e : *p.layout) {
        detail::write_pod<std::uint32_t>(os,
                                         static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::write_pod<std::uint32_t>(os,
                                         static_cast<std::uint32_t>(e.dims.size()));
        for (std::size_t d : e.dims)
            detail::write_pod<std::uint64_t>(os, d);
    }
    os.write(reinterpret_cast<const char*>(p.values.data()),
             static_cast<std::streamsize>(sizeof(double) * p.size()));
    if (!os) throw ConfigError("write failed: " + path);
}

inline ModelParams load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "FGNN")
        throw ConfigError("bad magic in " + path);
    const auto version = detail::read_pod<std::uint32_t>(is);
    if (version != 1) throw ConfigError("unsupported model version");
    const auto nrec = detail::read_pod<std::uint32_t>(is);
    auto layout = std::make_shared<Layout>();
    for (std::uint32_t i = 0; i < nrec; ++i) {
        LayoutEntry e;
        const auto len = detail::read_pod<std::uint32_t>(is);
        e.name.resize(len);
        is.read(e.name.data(), len);
        const auto rank = detail::read_pod<std::uint32_t>(is);
        for (std::uint32_t d = 0; d < rank; ++d)
            e.dims.push_back(static_cast<std::size_t>(
                detail::read_pod<std::uint64_t>(is)));
        layout->push_back(std::move(e));
    }
    ModelParams p;
    p.layout = layout;
    p.values = Vec(static_cast<Eigen::Index>(layout_size(*layout)));
    is.read(reinterpret_cast<char*>(p.values.data()),
            static_cast<std::streamsize>(sizeof(double) * p.size()));
    if (!is) throw ConfigError("model file truncated: " + path);
    return p;
}

}  // namespace fedsim
