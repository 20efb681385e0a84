#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "fedsim/defenses.hpp"
#include "fedsim/rng.hpp"

using namespace fedsim;

namespace {

std::vector<Update> random_updates(int n, int d, std::uint64_t seed) {
    auto rng = make_rng(seed, "updates");
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<Update> out(static_cast<std::size_t>(n));
    for (auto& u : out) {
        u.delta = Vec(d);
        for (int i = 0; i < d; ++i) u.delta[i] = g(rng);
    }
    return out;
}

// Reference Krum: brute force over all subsets is not needed; recompute the
// score definition independently with a different algorithm (partial sort).
int krum_oracle(const std::vector<Update>& us, int f) {
    const int n = static_cast<int>(us.size());
    const int m = n - f - 2;
    int best = -1;
    double best_score = 1e300;
    for (int i = 0; i < n; ++i) {
        std::vector<double> d2;
        for (int j = 0; j < n; ++j)
            if (j != i)
                d2.push_back((us[static_cast<std::size_t>(i)].delta -
                              us[static_cast<std::size_t>(j)].delta)
                                 .squaredNorm());
        std::nth_element(d2.begin(), d2.begin() + m, d2.end());
        double s = 0;
        for (int k = 0; k < m; ++k) s += d2[static_cast<std::size_t>(k)];
        // nth_element leaves the m smallest in front but unsorted; sum them
        // via a full sort for exactness.
        std::sort(d2.begin(), d2.end());
        s = 0;
        for (int k = 0; k < m; ++k) s += d2[static_cast<std::size_t>(k)];
        if (s < best_score) {
            best_score = s;
            best = i;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("fedavg is the coordinate mean") {
    auto us = random_updates(5, 7, 1);
    Update avg = fedavg(us);
    Vec ref = Vec::Zero(7);
    for (const auto& u : us) ref += u.delta;
    ref /= 5.0;
    CHECK((avg.delta - ref).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS_AS(fedavg({}), ConfigError);
}

TEST_CASE("median matches a sort oracle, odd and even counts") {
    for (int n : {5, 6}) {
        auto us = random_updates(n, 11, static_cast<std::uint64_t>(n));
        Update med = median(us);
        for (int i = 0; i < 11; ++i) {
            std::vector<double> col;
            for (const auto& u : us) col.push_back(u.delta[i]);
            std::sort(col.begin(), col.end());
            const double ref =
                n % 2 ? col[static_cast<std::size_t>(n / 2)]
                      : 0.5 * (col[static_cast<std::size_t>(n / 2 - 1)] +
                               col[static_cast<std::size_t>(n / 2)]);
            CHECK(med.delta[i] == doctest::Approx(ref).epsilon(1e-15));
        }
    }
}

TEST_CASE("median of an odd count returns an existing coordinate value") {
    auto us = random_updates(7, 4, 9);
    Update med = median(us);
    for (int i = 0; i < 4; ++i) {
        bool found = false;
        for (const auto& u : us)
            if (u.delta[i] == med.delta[i]) found = true;
        CHECK(found);
    }
}

TEST_CASE("krum selects the oracle index and returns it verbatim") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto us = random_updates(9, 6, seed);
        const int f = 2;  // 9 >= 2*2+3
        Update sel = krum(us, f);
        const int ref = krum_oracle(us, f);
        CHECK(sel.delta == us[static_cast<std::size_t>(ref)].delta);
    }
    CHECK_THROWS_AS(krum(random_updates(6, 3, 0), 2), ConfigError);
}

TEST_CASE("krum with a tight cluster picks inside the cluster") {
    auto us = random_updates(8, 5, 3);
    for (std::size_t i = 0; i < 6; ++i)
        us[i].delta = Vec::Constant(5, 0.1) +
                      0.001 * us[i].delta;  // cluster near 0.1
    us[6].delta = Vec::Constant(5, 50.0);
    us[7].delta = Vec::Constant(5, -40.0);
    Update sel = krum(us, 2);
    CHECK((sel.delta - Vec::Constant(5, 0.1)).norm() < 0.1);
}

TEST_CASE("norm_bound clips before averaging") {
    std::vector<Update> us(3);
    us[0].delta = Vec::Zero(4);
    us[0].delta[0] = 10.0;  // norm 10 -> clipped to 2
    us[1].delta = Vec::Zero(4);
    us[1].delta[1] = 1.0;  // norm 1 -> untouched
    us[2].delta = Vec::Zero(4);
    us[2].delta[2] = 2.0;  // norm 2 == C -> untouched
    Update out = norm_bound(us, 2.0);
    CHECK(out.delta[0] == doctest::Approx(2.0 / 3.0));
    CHECK(out.delta[1] == doctest::Approx(1.0 / 3.0));
    CHECK(out.delta[2] == doctest::Approx(2.0 / 3.0));
    // The aggregate can never exceed the bound.
    CHECK(out.norm() <= 2.0 + 1e-12);
    CHECK_THROWS_AS(norm_bound(us, 0.0), ConfigError);
}

TEST_CASE("one huge outlier moves fedavg but not the robust rules") {
    auto us = random_updates(9, 20, 4);
    for (auto& u : us) u.delta *= 0.01;
    Update honest_mean = fedavg(us);
    us.push_back(Update{Vec::Constant(20, 1000.0)});

    Update avg = fedavg(us);
    Update med = median(us);
    Update kr = krum(us, 1);
    Update nb = norm_bound(us, 0.05);

    CHECK(avg.norm() > 100.0);
    CHECK(med.norm() < 1.0);
    CHECK(kr.norm() < 1.0);
    CHECK(nb.norm() < 1.0);
    CHECK((med.delta - honest_mean.delta).norm() <
          (avg.delta - honest_mean.delta).norm());
}

TEST_CASE("aggregate dispatches on the spec") {
    auto us = random_updates(9, 5, 6);
    CHECK(aggregate({AggregatorKind::fedavg}, us).delta == fedavg(us).delta);
    CHECK(aggregate({AggregatorKind::median}, us).delta == median(us).delta);
    CHECK(aggregate({AggregatorKind::krum, 2}, us).delta ==
          krum(us, 2).delta);
    AggregatorSpec nb{AggregatorKind::norm_bound, 0, 0.5};
    CHECK(aggregate(nb, us).delta == norm_bound(us, 0.5).delta);
}

TEST_CASE("neuron_clip bounds output rows and is idempotent") {
    auto rng = make_rng(2, "clip");
    Architecture a = make_mlp(6, {5}, 4);
    ModelParams w = init_params(a, rng);
    w.values *= 10.0;  // guarantee some rows exceed the bound
    const double C = 0.5;
    ModelParams c1 = neuron_clip(a, w, C);

    const Eigen::Index off = 5 * 6 + 5;  // after fc1
    detail::WMap W(c1.values.data() + off, 4, 5);
    Eigen::Map<const Vec> b(c1.values.data() + off + 4 * 5, 4);
    for (int r = 0; r < 4; ++r)
        CHECK(std::sqrt(W.row(r).squaredNorm() + b[r] * b[r]) <= C + 1e-12);
    // Hidden layer untouched.
    CHECK(c1.values.head(off) == w.values.head(off));

    ModelParams c2 = neuron_clip(a, c1, C);
    CHECK(c1.values == c2.values);
    CHECK_THROWS_AS(neuron_clip(a, w, 0.0), ConfigError);
}

TEST_CASE("neuron_clip leaves already-small rows alone") {
    auto rng = make_rng(2, "clip2");
    Architecture a = make_mlp(6, {5}, 4);
    ModelParams w = init_params(a, rng);
    ModelParams c = neuron_clip(a, w, 1e6);
    CHECK(c.values == w.values);
}

TEST_CASE("prune zeroes the lowest-activation neurons") {
    auto rng = make_rng(8, "prune");
    Architecture a = make_mlp(4, {6}, 3);
    ModelParams w = init_params(a, rng);
    LabeledDataset probe = make_blobs(50, 4, 3, 0.1, 8);

    const Vec act = mean_activations(a, w, probe);
    REQUIRE(act.size() == 6);
    std::vector<int> order(6);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return act[x] < act[y]; });

    ModelParams p = prune(a, w, 2, probe);
    detail::WMap Wh(p.values.data(), 6, 4);
    Eigen::Map<const Vec> bh(p.values.data() + 6 * 4, 6);
    detail::WMap Wo(p.values.data() + 6 * 4 + 6, 3, 6);
    for (int k = 0; k < 2; ++k) {
        const int neuron = order[static_cast<std::size_t>(k)];
        CHECK(Wh.row(neuron).cwiseAbs().maxCoeff() == 0.0);
        CHECK(bh[neuron] == 0.0);
        CHECK(Wo.col(neuron).cwiseAbs().maxCoeff() == 0.0);
    }
    // Surviving neurons untouched.
    const int keep = order[5];
    detail::WMap Wh0(w.values.data(), 6, 4);
    CHECK(Wh.row(keep) == Wh0.row(keep));

    // Masked-forward oracle: pruning equals zeroing those activations.
    Mat full = forward(Network{a, w}, probe.samples);
    (void)full;
    ForwardCache cache;
    forward(Network{a, w}, probe.samples, &cache);
    Mat h = cache.acts[1];
    for (int k = 0; k < 2; ++k) h.col(order[static_cast<std::size_t>(k)]).setZero();
    detail::WMap Wo0(w.values.data() + 6 * 4 + 6, 3, 6);
    Eigen::Map<const Vec> bo0(w.values.data() + 6 * 4 + 6 + 3 * 6, 3);
    Mat oracle = h * Wo0.transpose();
    oracle.rowwise() += bo0.transpose();
    Mat pruned_out = forward(Network{a, p}, probe.samples);
    CHECK((pruned_out - oracle).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("prune edge cases") {
    auto rng = make_rng(8, "prune");
    Architecture a = make_mlp(4, {6}, 3);
    ModelParams w = init_params(a, rng);
    LabeledDataset probe = make_blobs(10, 4, 3, 0.1, 8);
    CHECK(prune(a, w, 0, probe).values == w.values);
    CHECK_THROWS_AS(prune(a, w, 6, probe), ConfigError);
    LabeledDataset empty;
    empty.samples = Mat(0, 4);
    CHECK_THROWS_AS(prune(a, w, 1, empty), ConfigError);
}

TEST_CASE("apply_post_defense dispatch") {
    auto rng = make_rng(8, "pd");
    Architecture a = make_mlp(4, {6}, 3);
    ModelParams w = init_params(a, rng);
    LabeledDataset probe = make_blobs(10, 4, 3, 0.1, 8);
    CHECK(apply_post_defense({PostDefenseKind::identity}, a, w, probe).values ==
          w.values);
    PostDefenseSpec clip{PostDefenseKind::neuron_clip, 0.1, 0};
    CHECK(apply_post_defense(clip, a, w, probe).values ==
          neuron_clip(a, w, 0.1).values);
    PostDefenseSpec pr{PostDefenseKind::prune, 1.0, 2};
    CHECK(apply_post_defense(pr, a, w, probe).values ==
          prune(a, w, 2, probe).values);
}
