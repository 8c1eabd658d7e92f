#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "fscil/gradient_suite.hpp"
#include "fscil/model.hpp"
#include "test_util.hpp"

using namespace fscil;

namespace {

std::vector<long double> forward_oracle(const Backbone& b, const Vector& x) {
    std::vector<long double> a(x.begin(), x.end());
    for (const auto& layer : b.layers()) {
        std::vector<long double> z(layer.weight.rows());
        for (std::size_t o = 0; o < z.size(); ++o) {
            long double s = layer.bias(0, o);
            for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(layer.weight(o, i)) * a[i];
            z[o] = s > 0 ? s : 0;
        }
        a = z;
    }
    return a;
}

long double cos_ld(const std::vector<long double>& a, const std::vector<long double>& b) {
    long double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

// Literal double sum over batch samples and graph rows pointing at y.
long double lgrl_oracle(const Model& m, std::span<const Example> batch, const ClassMeans& running,
                        const EmbeddingTable& emb, const KnnGraph& g, double momentum) {
    std::map<ClassId, std::vector<long double>> sums;
    std::map<ClassId, int> counts;
    for (const auto& ex : batch) {
        const auto f = forward_oracle(m.backbone, ex.x);
        auto& s = sums[ex.y];
        if (s.empty()) s.assign(f.size(), 0);
        for (std::size_t i = 0; i < f.size(); ++i) s[i] += f[i];
        ++counts[ex.y];
    }
    auto mean = [&](const ClassId& id) {
        std::vector<long double> v;
        const Vector& r = running.mean(id);
        if (!sums.count(id)) return std::vector<long double>(r.begin(), r.end());
        for (std::size_t i = 0; i < r.dim(); ++i)
            v.push_back(momentum * r[i] + (1 - momentum) * sums[id][i] / counts[id]);
        return v;
    };
    long double total = 0;
    for (const auto& ex : batch) {
        const std::size_t y = *g.index_of(ex.y);
        for (std::size_t k = 0; k < g.size(); ++k) {
            if (g.R(k, y) != 1.0) continue;
            const auto& ek = emb.at(g.ids[k]);
            const auto& ey = emb.at(ex.y);
            const long double lambda =
                cos_ld({ek.begin(), ek.end()}, {ey.begin(), ey.end()});
            const long double mu = cos_ld(mean(g.ids[k]), mean(ex.y));
            total += std::abs(lambda - mu);
        }
    }
    return total;
}

Model small_model(std::uint64_t seed, std::size_t in = 4, std::size_t classes = 4) {
    SeededRng rng(seed);
    return gradient_suite::random_model(in, classes, rng);
}

}  // namespace

TEST(Forward, IdentityBackbone) {
    Model m{Backbone(2), Classifier({"a", "b"}, Matrix::identity(2))};
    EXPECT_EQ(forward_logits(m.backbone, m.classifier, Vector{1, 0}), (Vector{1, 0}));
}

TEST(Forward, ScalingEtaScalesLogits) {
    Model m = small_model(1);
    const Vector x{0.3, -1.0, 2.0, 0.5};
    const Vector l = forward_logits(m.backbone, m.classifier, x);
    Matrix w = m.classifier.weights();
    for (auto& v : w.flat()) v *= 3.0;
    const Vector l3 = forward_logits(m.backbone, Classifier(m.classifier.ids(), w), x);
    for (std::size_t i = 0; i < l.dim(); ++i) EXPECT_NEAR(l3[i], 3.0 * l[i], 1e-12);
    EXPECT_EQ(std::max_element(l.begin(), l.end()) - l.begin(), std::max_element(l3.begin(), l3.end()) - l3.begin());
}

TEST(Forward, MatchesLayerOracle) {
    SeededRng rng(2);
    const std::size_t widths[] = {7};
    for (int trial = 0; trial < 20; ++trial) {
        const Backbone b = Backbone::mlp(5, widths, rng);
        const Vector x = testutil::gaussian(5, rng);
        const Vector f = b.features(x);
        const auto o = forward_oracle(b, x);
        for (std::size_t i = 0; i < f.dim(); ++i) EXPECT_NEAR(f[i], static_cast<double>(o[i]), 1e-12);
    }
}

TEST(Forward, Errors) {
    Model m = small_model(3);
    EXPECT_THROW(m.backbone.features(Vector{1, 2}), ShapeError);
    EXPECT_THROW(logits_from_features(m.classifier, Vector{1}), ShapeError);
    EXPECT_THROW(m.classifier.row_of("nope"), LabelError);
    EXPECT_THROW(Classifier({"a", "a"}, Matrix(2, 2)), LabelError);
    EXPECT_THROW(Classifier({"a"}, Matrix(2, 2)), ShapeError);
    Backbone b(3);
    EXPECT_THROW(b.add_layer(DenseLayer{Matrix(2, 4), Matrix(1, 2)}), ShapeError);
}

TEST(Forward, AppendingWeakerClassesKeepsArgmax) {
    SeededRng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        Model m = small_model(100 + trial);
        const Vector x = testutil::gaussian(4, rng);
        const Vector f = m.backbone.features(x);
        const Vector l = logits_from_features(m.classifier, f);
        const std::size_t am = std::max_element(l.begin(), l.end()) - l.begin();
        Vector row = m.classifier.weights().row_vector(am);
        const double scale = l[am] > 0 ? 0.5 : 2.0;
        for (auto& v : row) v *= scale;
        if (!(dot(row.span(), f.span()) < l[am])) continue;
        const std::vector<ClassId> extra = {"extra"};
        const std::vector<Vector> init = {row};
        const Classifier grown = extend_classifier(m.classifier, extra, init);
        const Vector l2 = logits_from_features(grown, f);
        EXPECT_EQ(static_cast<std::size_t>(std::max_element(l2.begin(), l2.end()) - l2.begin()), am);
    }
}

TEST(LossMain, UniformPredictionIsLn2) {
    Model m{Backbone(2), Classifier({"a", "b"}, Matrix(2, 2, 1.0))};
    const std::vector<Example> batch = {{Vector{1, 2}, "a"}};
    EXPECT_NEAR(loss_main(m, batch, 0.0).value, std::log(2.0), 1e-15);
}

TEST(LossMain, LargeMarginApproachesZero) {
    Matrix w(2, 2);
    w(0, 0) = 1000;
    Model m{Backbone(2), Classifier({"a", "b"}, w)};
    const std::vector<Example> batch = {{Vector{1, 0}, "a"}};
    EXPECT_LT(loss_main(m, batch, 0.0).value, 1e-300);
}

TEST(LossMain, GradcheckOnRandomBatches) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed)
        EXPECT_LT(gradient_suite::check_loss_main(seed), 1e-5) << seed;
}

TEST(LossMain, NonNegativeAndPenaltyAdds) {
    SeededRng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        Model m = small_model(200 + trial);
        std::vector<Example> batch;
        for (int i = 0; i < 5; ++i) batch.push_back({testutil::gaussian(4, rng), m.classifier.ids()[i % 4]});
        const double plain = loss_main(m, batch, 0.0).value;
        EXPECT_GE(plain, 0.0);
        const double pen = loss_main(m, batch, 0.01).value;
        double sq = 0;
        const ParamSet params = m.params();
        for (std::size_t e = 0; e < params.size(); ++e) sq += squared_norm(params.entry(e).second.flat());
        EXPECT_NEAR(pen - plain, 0.01 * sq, 1e-10);
    }
}

TEST(LossMain, Errors) {
    Model m = small_model(6);
    EXPECT_THROW(loss_main(m, {}, 0.0), ParameterError);
    const std::vector<Example> bad = {{Vector{1, 2, 3, 4}, "zzz"}};
    EXPECT_THROW(loss_main(m, bad, 0.0), LabelError);
}

TEST(LanguageReg, SingleEdgeArithmetic) {
    // two classes, K=1; lambda = cos(e0, e1) = 1, mu = cos(v0, v1) = 0.2
    const EmbeddingTable emb({"a", "b"}, {Vector{1, 0}, Vector{2, 0}});
    const KnnGraph g = build_knn_graph(emb, 1);
    Model m{Backbone(2), Classifier({"a", "b"}, Matrix(2, 2))};
    ClassMeans running;
    running.set("a", Vector{1, 0}, 5);
    const std::vector<Example> batch = {{Vector{0.2, std::sqrt(0.96)}, "b"}};
    const LanguageRegSetup setup{&emb, &g, SimilarityMode::topk_cosine, 0.0};
    EXPECT_NEAR(loss_language_reg(m, batch, running, setup).value, 0.8, 1e-15);
}

TEST(LanguageReg, AlignedStructuresGiveZero) {
    Model m = small_model(7);
    SeededRng rng(8);
    std::vector<Example> batch;
    std::vector<Vector> feats;
    for (const auto& id : m.classifier.ids()) {
        Vector x = testutil::gaussian(4, rng);
        batch.push_back({x, id});
        feats.push_back(m.backbone.features(x));
    }
    const EmbeddingTable emb(m.classifier.ids(), feats);
    const KnnGraph g = build_knn_graph(emb, 2);
    ClassMeans running;
    for (std::size_t i = 0; i < feats.size(); ++i) running.set(m.classifier.ids()[i], feats[i], 1);
    for (auto mode : {SimilarityMode::topk_cosine, SimilarityMode::cosine, SimilarityMode::euclidean}) {
        const LanguageRegSetup setup{&emb, &g, mode, 0.9};
        const LossAndGrad lg = loss_language_reg(m, batch, running, setup);
        EXPECT_EQ(lg.value, 0.0);
        for (std::size_t e = 0; e < lg.grads.size(); ++e)
            for (double v : lg.grads.entry(e).second.flat()) EXPECT_EQ(v, 0.0);
    }
}

TEST(LanguageReg, MatchesBruteForceDoubleSum) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        SeededRng rng(seed);
        const Model m = gradient_suite::random_model(4, 4, rng);
        const auto emb = EmbeddingTable(m.classifier.ids(), {testutil::gaussian(5, rng), testutil::gaussian(5, rng),
                                                             testutil::gaussian(5, rng), testutil::gaussian(5, rng)});
        const KnnGraph g = build_knn_graph(emb, 2);
        ClassMeans running;
        for (const auto& id : m.classifier.ids()) {
            Vector v = testutil::gaussian(m.backbone.feature_dim(), rng);
            for (auto& x : v) x = std::abs(x) + 0.1;
            running.set(id, v, 3);
        }
        std::vector<Example> batch;
        for (int i = 0; i < 3; ++i)
            batch.push_back({testutil::gaussian(4, rng), m.classifier.ids()[rng.below(4)]});
        const LanguageRegSetup setup{&emb, &g, SimilarityMode::topk_cosine, 0.9};
        const double got = loss_language_reg(m, batch, running, setup).value;
        EXPECT_NEAR(got, static_cast<double>(lgrl_oracle(m, batch, running, emb, g, 0.9)), 1e-10) << seed;
    }
}

TEST(LanguageReg, GradcheckAllModes) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed)
        for (auto mode : {SimilarityMode::topk_cosine, SimilarityMode::cosine, SimilarityMode::euclidean})
            EXPECT_LT(gradient_suite::check_language_reg(seed, mode), 1e-5) << seed;
}

TEST(LanguageReg, EtaGetsNoGradient) {
    SeededRng rng(9);
    const Model m = gradient_suite::random_model(4, 4, rng);
    const auto emb = testutil::random_table(4, 3, rng);
    const EmbeddingTable named(m.classifier.ids(), {emb.vector(0), emb.vector(1), emb.vector(2), emb.vector(3)});
    const KnnGraph g = build_knn_graph(named, 1);
    ClassMeans running;
    for (const auto& id : m.classifier.ids()) running.set(id, Vector(m.backbone.feature_dim(), 1.0), 1);
    const std::vector<Example> batch = {{testutil::gaussian(4, rng), m.classifier.ids()[0]}};
    const LossAndGrad lg = loss_language_reg(m, batch, running, {&named, &g, SimilarityMode::topk_cosine, 0.9});
    for (double v : lg.grads.at("eta").flat()) EXPECT_EQ(v, 0.0);
}

TEST(LanguageReg, Errors) {
    Model m = small_model(10);
    ClassMeans running;
    const std::vector<Example> batch = {{Vector{1, 2, 3, 4}, m.classifier.ids()[0]}};
    EXPECT_THROW(loss_language_reg(m, batch, running, {}), ParameterError);
    const EmbeddingTable emb({"x", "y"}, {Vector{1, 0}, Vector{0, 1}});
    const KnnGraph g = build_knn_graph(emb, 1);
    EXPECT_THROW(loss_language_reg(m, batch, running, {&emb, &g, SimilarityMode::cosine, 0.9}), MissingClassError);
}

TEST(Schedule, Indicators) {
    const HyperBase h;
    ParamSet p;
    p.add("w", Matrix(1, 1, 1.0));
    const LossAndGrad main{2.0, p};
    const LossAndGrad lang{5.0, p};
    EXPECT_EQ(base_phase(50, h), BasePhase::classification);
    EXPECT_EQ(base_phase(100, h), BasePhase::classification);
    EXPECT_EQ(base_phase(101, h), BasePhase::language);
    EXPECT_EQ(base_phase(200, h), BasePhase::language);

    const LossAndGrad e50 = loss_base(50, main, lang, h);
    EXPECT_EQ(e50.value, 2.0);
    EXPECT_EQ(e50.grads.at("w")(0, 0), 1.0);
    const LossAndGrad e150 = loss_base(150, main, lang, h);
    EXPECT_EQ(e150.value, 5.0);
    EXPECT_EQ(e150.grads.at("w")(0, 0), 1.0);

    HyperBase keep = h;
    keep.phase2_keep_ce = true;
    const LossAndGrad both = loss_base(150, main, lang, keep);
    EXPECT_EQ(both.value, 7.0);
    EXPECT_EQ(both.grads.at("w")(0, 0), 2.0);

    EXPECT_THROW(base_phase(0, h), ScheduleError);
    EXPECT_THROW(base_phase(201, h), ScheduleError);
    EXPECT_THROW(loss_base(150, main, std::nullopt, h), ScheduleError);
}

TEST(Schedule, HyperValidation) {
    HyperBase h;
    h.lr = 0;
    EXPECT_THROW(h.validate(), ParameterError);
    h = {};
    h.mean_momentum = 1.0;
    EXPECT_THROW(h.validate(), ParameterError);
    h = {};
    h.k = 0;
    EXPECT_THROW(h.validate(), ParameterError);
}

TEST(Extend, SixtyPlusFive) {
    SeededRng rng(11);
    const Classifier c = Classifier::random(testutil::ids(60, "b"), 8, rng);
    std::vector<Vector> init;
    for (int i = 0; i < 5; ++i) init.push_back(testutil::gaussian(8, rng));
    const Classifier g = extend_classifier(c, testutil::ids(5, "n"), init);
    EXPECT_EQ(g.size(), 65u);
    for (std::size_t r = 0; r < 60; ++r)
        for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(g.weights()(r, i), c.weights()(r, i));
    for (std::size_t r = 0; r < 5; ++r) EXPECT_EQ(g.weights().row_vector(60 + r), init[r]);
}

TEST(Extend, ZeroNewClassesIsIdentity) {
    SeededRng rng(12);
    const Classifier c = Classifier::random(testutil::ids(4), 3, rng);
    EXPECT_EQ(extend_classifier(c, {}, {}), c);
}

TEST(Extend, AnchorInitialisation) {
    SeededRng rng(13);
    const Classifier c = Classifier::random(testutil::ids(3, "b"), 4, rng, 1.0);
    const EmbeddingTable emb({"b0", "b1", "b2", "n0"}, {testutil::gaussian(3, rng), testutil::gaussian(3, rng),
                                                        testutil::gaussian(3, rng), testutil::gaussian(3, rng)});
    const std::vector<ClassId> base = {"b0", "b1", "b2"};
    const Vector anchor = subspace_anchor(c.weights(), base, emb, "n0", 1.0);
    const std::vector<ClassId> novel = {"n0"};
    const std::vector<Vector> init = {anchor};
    const Classifier g = extend_classifier(c, novel, init);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g.weights()(3, i), anchor[i], 1e-12);
}

TEST(Extend, Errors) {
    SeededRng rng(14);
    const Classifier c = Classifier::random({"a"}, 2, rng);
    const std::vector<ClassId> dup = {"a"};
    const std::vector<ClassId> twice = {"b", "b"};
    const std::vector<Vector> one = {Vector{1, 2}};
    const std::vector<Vector> two = {Vector{1, 2}, Vector{3, 4}};
    const std::vector<Vector> wide = {Vector{1, 2, 3}};
    EXPECT_THROW(extend_classifier(c, dup, one), LabelError);
    EXPECT_THROW(extend_classifier(c, twice, two), LabelError);
    EXPECT_THROW(extend_classifier(c, twice, one), ShapeError);
    const std::vector<ClassId> b = {"b"};
    EXPECT_THROW(extend_classifier(c, b, wide), ShapeError);
}

TEST(ModelParams, RoundTripAndOrder) {
    Model m = small_model(15);
    const ParamSet p = m.params();
    EXPECT_EQ(p.entry(0).first, "theta.0.weight");
    EXPECT_EQ(p.entry(p.size() - 1).first, "eta");
    EXPECT_EQ(m.with_params(p), m);
    ParamSet bad;
    bad.add("eta", Matrix(1, 1));
    EXPECT_THROW(m.set_params(bad), ShapeError);
}
