#pragma once

// Finite-difference validation of every hand-derived gradient in the library,
// on small randomly drawn fixtures (one per seed).

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "fscil/model.hpp"
#include "fscil/numkit.hpp"
#include "fscil/semantic_space.hpp"
#include "fscil/trainer.hpp"

namespace fscil::gradient_suite {

inline constexpr double kEpsilon = 1e-6;
inline constexpr double kTolerance = 1e-5;

struct Check {
    std::string loss;
    std::uint64_t seed = 0;
    double max_relative_error = 0.0;
    bool passed = false;
};

struct Report {
    std::vector<Check> checks;
    double seconds = 0.0;

    bool passed() const {
        for (const auto& c : checks)
            if (!c.passed) return false;
        return !checks.empty();
    }
    double worst(const std::string& loss) const {
        double w = 0.0;
        for (const auto& c : checks)
            if (c.loss == loss) w = std::max(w, c.max_relative_error);
        return w;
    }
};

inline std::vector<ClassId> fixture_ids(std::size_t n, const std::string& prefix = "c") {
    std::vector<ClassId> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(prefix + std::to_string(i));
    return ids;
}

inline Vector random_vector(std::size_t dim, SeededRng& rng, double scale = 1.0) {
    Vector v(dim);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

// Small two-layer model with biases pushed positive so few units sit at the kink.
inline Model random_model(std::size_t input_dim, std::size_t classes, SeededRng& rng) {
    const std::size_t widths[] = {6, 5};
    Model m;
    m.backbone = Backbone::mlp(input_dim, widths, rng);
    for (auto& layer : m.backbone.layers())
        for (auto& b : layer.bias.flat()) b = 0.5 + 0.1 * rng.normal();
    m.classifier = Classifier::random(fixture_ids(classes), m.backbone.feature_dim(), rng, 0.5);
    return m;
}

inline LossFn model_loss(const Model& shape, std::function<LossAndGrad(const Model&)> f) {
    return [shape, f](const ParamSet& p) { return f(shape.with_params(p)); };
}

inline double check_loss_main(std::uint64_t seed) {
    SeededRng rng = SeededRng(seed).fork(11);
    const Model m = random_model(4, 3, rng);
    std::vector<Example> batch;
    for (std::size_t i = 0; i < 6; ++i)
        batch.push_back({random_vector(4, rng), m.classifier.ids()[i % 3]});
    return gradcheck(model_loss(m, [batch](const Model& mm) { return loss_main(mm, batch, 1e-3); }),
                     m.params(), kEpsilon);
}

// 4 classes, 3-sample batch, running means frozen for the evaluation.
inline double check_language_reg(std::uint64_t seed, SimilarityMode mode) {
    SeededRng rng = SeededRng(seed).fork(13 + static_cast<std::uint64_t>(mode));
    const Model m = random_model(4, 4, rng);
    const auto ids = m.classifier.ids();
    std::vector<Vector> emb_vecs;
    for (std::size_t i = 0; i < 4; ++i) emb_vecs.push_back(random_vector(5, rng));
    const EmbeddingTable emb(ids, emb_vecs);
    const KnnGraph graph = build_knn_graph(emb, 2);
    ClassMeans running;
    for (const auto& id : ids) {
        Vector v = random_vector(m.backbone.feature_dim(), rng);
        for (auto& x : v) x = std::abs(x) + 0.1;  // ReLU features are non-negative
        running.set(id, std::move(v), 10);
    }
    std::vector<Example> batch;
    for (std::size_t i = 0; i < 3; ++i) batch.push_back({random_vector(4, rng), ids[(i * 3) % 4]});
    const LanguageRegSetup setup{&emb, &graph, mode, 0.9};
    return gradcheck(model_loss(m, [=](const Model& mm) {
                         return loss_language_reg(mm, batch, running, setup);
                     }),
                     m.params(), kEpsilon);
}

struct IncrementalFixture {
    Classifier classifier;
    std::vector<WeightSnapshot> snapshots;
    std::vector<ClassId> novel;
    std::map<ClassId, Vector> anchors;
    std::vector<Vector> features;
    std::vector<std::size_t> targets;
};

// Session 2 of a 3-base / 2-way stream with drifted rows.
inline IncrementalFixture incremental_fixture(std::uint64_t seed) {
    SeededRng rng = SeededRng(seed).fork(17);
    const std::size_t dim = 4;
    IncrementalFixture f;
    const auto ids = fixture_ids(7);
    Matrix eta(ids.size(), dim);
    for (auto& v : eta.flat()) v = rng.normal();
    f.classifier = Classifier(ids, eta);
    const std::vector<std::vector<ClassId>> sessions = {{ids[0], ids[1], ids[2]}, {ids[3], ids[4]}, {ids[5], ids[6]}};
    for (std::size_t s = 0; s < 2; ++s) {
        WeightSnapshot snap;
        snap.session = s;
        snap.introduced = sessions[s];
        for (std::size_t r = 0; r < 5; ++r) snap.rows.emplace(ids[r], random_vector(dim, rng));
        f.snapshots.push_back(std::move(snap));
    }
    f.novel = sessions[2];
    for (const auto& c : f.novel) f.anchors.emplace(c, random_vector(dim, rng));
    for (std::size_t i = 0; i < 6; ++i) {
        f.features.push_back(random_vector(dim, rng));
        f.targets.push_back(i % ids.size());
    }
    return f;
}

inline double check_r_old(std::uint64_t seed) {
    const auto f = incremental_fixture(seed);
    return gradcheck(
        [&](const ParamSet& p) { return r_old(Classifier(f.classifier.ids(), p.at("eta")), f.snapshots, 2); },
        eta_only(f.classifier.weights()), kEpsilon);
}

inline double check_r_new(std::uint64_t seed) {
    const auto f = incremental_fixture(seed);
    return gradcheck(
        [&](const ParamSet& p) { return r_new(Classifier(f.classifier.ids(), p.at("eta")), f.novel, f.anchors); },
        eta_only(f.classifier.weights()), kEpsilon);
}

inline double check_incremental_objective(std::uint64_t seed) {
    const auto f = incremental_fixture(seed);
    SessionObjective obj;
    obj.features = f.features;
    obj.targets = f.targets;
    obj.snapshots = f.snapshots;
    obj.session = 2;
    obj.novel = f.novel;
    obj.anchors = f.anchors;
    obj.hyper.alpha = 0.05;
    obj.hyper.beta = 0.7;
    obj.hyper.gamma = 1.3;
    return gradcheck([&](const ParamSet& p) { return obj(f.classifier, p.at("eta")); },
                     eta_only(f.classifier.weights()), kEpsilon);
}

inline Report run(std::size_t seeds = 10) {
    const auto start = std::chrono::steady_clock::now();
    Report rep;
    auto record = [&](const std::string& name, std::uint64_t seed, double err) {
        rep.checks.push_back(Check{name, seed, err, err < kTolerance});
    };
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
        record("loss_main", seed, check_loss_main(seed));
        record("loss_language_reg", seed, check_language_reg(seed, SimilarityMode::topk_cosine));
        record("loss_language_reg[cosine]", seed, check_language_reg(seed, SimilarityMode::cosine));
        record("loss_language_reg[euclidean]", seed, check_language_reg(seed, SimilarityMode::euclidean));
        record("r_old", seed, check_r_old(seed));
        record("r_new", seed, check_r_new(seed));
        record("incremental_objective", seed, check_incremental_objective(seed));
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

}  // namespace fscil::gradient_suite
