#pragma once

// ---------------------------------------------------------------------------
// Training orchestration.
//
// Base session: joint SGD over (theta, eta). Epochs 1..epochs_phase1 minimise
// the classification loss; the following epochs_phase2 epochs minimise the
// language regularizer (optionally plus the classification loss).
//
// Incremental session t: the backbone is frozen. Novel rows are appended at
// their semantic subspace anchors and only eta is optimised on
//
//   [CE over S^(t) (+ memory)] + alpha ||eta||^2 + beta R_old + gamma R_new
//
//   R_old = sum_{t' < t} sum_{c in C^(t')} ||eta_c^{t'} - eta_c||^2
//   R_new = sum_{c in C^(t)} ||eta_c - l_c||^2
// ---------------------------------------------------------------------------

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fscil/errors.hpp"
#include "fscil/eval_report.hpp"
#include "fscil/model.hpp"
#include "fscil/numkit.hpp"
#include "fscil/protocol.hpp"
#include "fscil/semantic_space.hpp"

namespace fscil {

// ---- base training ---------------------------------------------------------------

struct EpochLog {
    std::size_t epoch = 0;
    int phase = 1;
    std::optional<double> loss_main;      // unset when not evaluated
    std::optional<double> loss_language;  // unset when not evaluated
    double loss_total = 0.0;
    std::uint64_t seed = 0;
};

inline nlohmann::json to_json_record(const EpochLog& e) {
    nlohmann::json j;
    j["epoch"] = e.epoch;
    j["phase"] = e.phase;
    j["loss_main"] = e.loss_main ? nlohmann::json(*e.loss_main) : nlohmann::json(nullptr);
    j["loss_language"] = e.loss_language ? nlohmann::json(*e.loss_language) : nlohmann::json(nullptr);
    j["loss_total"] = e.loss_total;
    j["seed"] = e.seed;
    return j;
}

struct BaseTrainingResult {
    Model model;
    KnnGraph graph;
    ClassMeans running_means;  // as of the end of training; empty if phase 2 never ran
    std::vector<EpochLog> log;
};

// Called after every epoch with the current model.
using EpochObserver = std::function<void(std::size_t epoch, const Model&)>;

inline BaseTrainingResult train_base(std::span<const Example> support,
                                     std::span<const ClassId> base_classes,
                                     const EmbeddingTable& embeddings, const HyperBase& hyper,
                                     std::uint64_t seed, const EpochObserver& observer = {}) {
    hyper.validate();
    if (support.empty()) throw ParameterError("train_base: empty base support");
    for (const auto& c : base_classes)
        if (!embeddings.contains(c))
            throw MissingClassError("train_base: no embedding for base class '" + c + "'");

    const SeededRng root(seed);
    SeededRng init_rng = root.fork(1);
    SeededRng shuffle_rng = root.fork(3);

    BaseTrainingResult res;
    const std::vector<ClassId> base_ids(base_classes.begin(), base_classes.end());
    res.model.backbone = Backbone::mlp(support.front().x.dim(), hyper.hidden, init_rng);
    res.model.classifier = Classifier::random(base_ids, res.model.backbone.feature_dim(), init_rng);

    const EmbeddingTable base_table = embeddings.subset(base_ids);
    const std::size_t K = hyper.k.value_or(k_for_class_volume(base_ids.size()));
    res.graph = build_knn_graph(base_table, K);
    const LanguageRegSetup setup{&base_table, &res.graph, hyper.mode, hyper.mean_momentum};

    std::vector<std::size_t> order(support.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<Example> batch;

    const std::size_t epochs = hyper.epochs_phase1 + hyper.epochs_phase2;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        const BasePhase phase = base_phase(epoch, hyper);
        if (phase == BasePhase::language && epoch == hyper.epochs_phase1 + 1) {
            std::vector<Vector> feats;
            std::vector<ClassId> labels;
            for (const auto& ex : support) {
                feats.push_back(res.model.backbone.features(ex.x));
                labels.push_back(ex.y);
            }
            res.running_means = class_visual_means(feats, labels);
        }

        shuffle_rng.shuffle(order);
        EpochLog log{epoch, static_cast<int>(phase), std::nullopt, std::nullopt, 0.0, seed};
        double sum_main = 0.0, sum_lang = 0.0;
        for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
            batch.clear();
            for (std::size_t i = start; i < std::min(order.size(), start + hyper.batch_size); ++i)
                batch.push_back(support[order[i]]);

            LossAndGrad total;
            if (phase == BasePhase::classification) {
                const LossAndGrad lm = loss_main(res.model, batch, hyper.alpha);
                sum_main += lm.value;
                total = loss_base(epoch, lm, std::nullopt, hyper);
            } else {
                const LossAndGrad lg = loss_language_reg(res.model, batch, res.running_means, setup);
                sum_lang += lg.value;
                LossAndGrad lm{0.0, lg.grads.zeros_like()};
                if (hyper.phase2_keep_ce) {
                    lm = loss_main(res.model, batch, hyper.alpha);
                    sum_main += lm.value;
                }
                total = loss_base(epoch, lm, lg, hyper);
                res.running_means = advance_running_means(res.model.backbone, batch,
                                                          res.running_means, hyper.mean_momentum);
            }
            log.loss_total += total.value;
            const double lr = phase == BasePhase::language ? hyper.lr_phase2.value_or(hyper.lr) : hyper.lr;
            res.model.set_params(sgd_step(res.model.params(), total.grads, lr));
        }
        const double batches =
            static_cast<double>((order.size() + hyper.batch_size - 1) / hyper.batch_size);
        log.loss_total /= batches;
        if (phase == BasePhase::classification || hyper.phase2_keep_ce) log.loss_main = sum_main / batches;
        if (phase == BasePhase::language) log.loss_language = sum_lang / batches;
        res.log.push_back(log);
        if (observer) observer(epoch, res.model);
    }
    return res;
}

// ---- incremental regularizers -------------------------------------------------------

// Frozen copy of every classifier row known at the end of a session.
struct WeightSnapshot {
    std::size_t session = 0;
    std::vector<ClassId> introduced;  // C^(session)
    std::map<ClassId, Vector> rows;

    friend bool operator==(const WeightSnapshot&, const WeightSnapshot&) = default;
};

inline WeightSnapshot make_snapshot(const Classifier& classifier, std::size_t session,
                                    std::span<const ClassId> introduced) {
    WeightSnapshot s;
    s.session = session;
    s.introduced.assign(introduced.begin(), introduced.end());
    for (std::size_t r = 0; r < classifier.size(); ++r)
        s.rows.emplace(classifier.ids()[r], classifier.weights().row_vector(r));
    return s;
}

inline ParamSet eta_only(const Matrix& eta) {
    ParamSet p;
    p.add("eta", eta);
    return p;
}

inline LossAndGrad r_old(const Classifier& classifier, std::span<const WeightSnapshot> snapshots,
                         std::size_t t) {
    LossAndGrad out{0.0, eta_only(Matrix(classifier.size(), classifier.feature_dim()))};
    Matrix& g = out.grads.at("eta");
    for (std::size_t tp = 0; tp < t; ++tp) {
        const WeightSnapshot* snap = nullptr;
        for (const auto& s : snapshots)
            if (s.session == tp) snap = &s;
        if (!snap) throw MissingClassError("r_old: no snapshot for session " + std::to_string(tp));
        for (const auto& c : snap->introduced) {
            auto it = snap->rows.find(c);
            if (it == snap->rows.end())
                throw MissingClassError("r_old: snapshot lacks class '" + c + "'");
            const std::size_t r = classifier.row_of(c);
            const auto cur = classifier.weights().row(r);
            for (std::size_t i = 0; i < cur.size(); ++i) {
                const double d = it->second[i] - cur[i];
                out.value += d * d;
                g(r, i) += -2.0 * d;
            }
        }
    }
    return out;
}

inline LossAndGrad r_new(const Classifier& classifier, std::span<const ClassId> novel,
                         const std::map<ClassId, Vector>& anchors) {
    LossAndGrad out{0.0, eta_only(Matrix(classifier.size(), classifier.feature_dim()))};
    Matrix& g = out.grads.at("eta");
    for (const auto& c : novel) {
        auto it = anchors.find(c);
        if (it == anchors.end()) throw MissingClassError("r_new: no anchor for class '" + c + "'");
        const std::size_t r = classifier.row_of(c);
        const auto cur = classifier.weights().row(r);
        if (it->second.dim() != cur.size()) throw ShapeError("r_new: anchor width mismatch");
        for (std::size_t i = 0; i < cur.size(); ++i) {
            const double d = cur[i] - it->second[i];
            out.value += d * d;
            g(r, i) += 2.0 * d;
        }
    }
    return out;
}

// ---- incremental session -------------------------------------------------------------

enum class NovelInit { anchor, imprint };

struct IncrementalHyper {
    double alpha = 1e-4;
    double beta = 1.0;
    double gamma = 1.0;
    double tau = 1.0;
    double lr = 0.01;
    std::size_t steps = 200;
    bool include_ce = true;
    bool use_memory = false;
    NovelInit init = NovelInit::anchor;
    bool normalize_embeddings = false;  // L2-normalise e_j before the anchor dot products

    void validate() const {
        if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma >= 0.0))
            throw ParameterError("IncrementalHyper: alpha, beta, gamma must be >= 0");
        if (!(tau > 0.0) || !(lr > 0.0))
            throw ParameterError("IncrementalHyper: tau and lr must be positive");
    }
};

// Everything the session objective needs with the backbone frozen.
struct SessionObjective {
    std::vector<Vector> features;          // f(x) of the training samples
    std::vector<std::size_t> targets;      // classifier rows
    std::span<const WeightSnapshot> snapshots;
    std::size_t session = 0;
    std::vector<ClassId> novel;
    std::map<ClassId, Vector> anchors;
    IncrementalHyper hyper;

    // Loss over {"eta"} for a classifier whose rows are `eta`.
    LossAndGrad operator()(const Classifier& shape, const Matrix& eta) const {
        Classifier cls(shape.ids(), eta);
        LossAndGrad out{0.0, eta_only(Matrix(eta.rows(), eta.cols()))};
        Matrix& g = out.grads.at("eta");
        if (hyper.include_ce && !features.empty()) {
            const double inv_n = 1.0 / static_cast<double>(features.size());
            Vector dlogits;
            for (std::size_t i = 0; i < features.size(); ++i) {
                const Vector logits = logits_from_features(cls, features[i]);
                out.value += inv_n * cross_entropy(logits, targets[i], dlogits);
                for (std::size_t c = 0; c < dlogits.dim(); ++c)
                    axpy(inv_n * dlogits[c], features[i].span(), g.row(c));
            }
        }
        if (hyper.alpha != 0.0) {
            out.value += hyper.alpha * squared_norm(eta.flat());
            axpy(2.0 * hyper.alpha, eta.flat(), g.flat());
        }
        if (hyper.beta != 0.0) {
            const LossAndGrad ro = r_old(cls, snapshots, session);
            out.value += hyper.beta * ro.value;
            axpy(hyper.beta, ro.grads.at("eta").flat(), g.flat());
        }
        if (hyper.gamma != 0.0) {
            const LossAndGrad rn = r_new(cls, novel, anchors);
            out.value += hyper.gamma * rn.value;
            axpy(hyper.gamma, rn.grads.at("eta").flat(), g.flat());
        }
        return out;
    }
};

struct StepLog {
    std::size_t session = 0;
    std::size_t step = 0;
    double objective = 0.0;
    std::uint64_t seed = 0;
};

struct IncrementalResult {
    Model model;
    WeightSnapshot snapshot;
    SessionMetrics metrics;
    std::map<ClassId, Vector> anchors;
    std::size_t training_samples = 0;
    std::vector<StepLog> log;
};

inline std::map<ClassId, Vector> compute_anchors(const Classifier& classifier,
                                                 std::span<const ClassId> base_classes,
                                                 std::span<const ClassId> novel,
                                                 const EmbeddingTable& embeddings, double tau) {
    Matrix base_rows(0, classifier.feature_dim());
    for (const auto& b : base_classes) base_rows.append_row(classifier.weights().row(classifier.row_of(b)));
    std::map<ClassId, Vector> anchors;
    for (const auto& c : novel)
        anchors.emplace(c, subspace_anchor(base_rows, base_classes, embeddings, c, tau));
    return anchors;
}

inline IncrementalResult run_incremental_session(const Model& model, const SessionStream& stream,
                                                 std::size_t t, const EmbeddingTable& embeddings,
                                                 std::span<const WeightSnapshot> snapshots,
                                                 const MemoryBuffer* memory,
                                                 const IncrementalHyper& hyper, std::uint64_t seed) {
    hyper.validate();
    if (t < 1 || t >= stream.sessions.size())
        throw ParameterError("run_incremental_session: session index out of range");
    if (hyper.use_memory && memory == nullptr)
        throw ParameterError("run_incremental_session: memory requested but not supplied");
    const Session& session = stream.sessions[t];
    const auto& base = stream.base_classes();

    IncrementalResult res;
    res.model = model;
    const EmbeddingTable emb = hyper.normalize_embeddings ? embeddings.l2_normalized() : embeddings;
    res.anchors = compute_anchors(model.classifier, base, session.classes, emb, hyper.tau);

    std::vector<Vector> init;
    for (const auto& c : session.classes) {
        if (hyper.init == NovelInit::anchor) {
            init.push_back(res.anchors.at(c));
            continue;
        }
        Vector mean(model.backbone.feature_dim());
        std::size_t n = 0;
        for (const auto& ex : session.support)
            if (ex.y == c) {
                axpy(1.0, model.backbone.features(ex.x).span(), mean.span());
                ++n;
            }
        if (n == 0) throw CapacityError("imprint: class '" + c + "' has no support samples");
        for (auto& v : mean) v /= static_cast<double>(n);
        init.push_back(std::move(mean));
    }
    res.model.classifier = extend_classifier(model.classifier, session.classes, init);

    SessionObjective objective;
    objective.snapshots = snapshots;
    objective.session = t;
    objective.novel = session.classes;
    objective.anchors = res.anchors;
    objective.hyper = hyper;
    auto add_sample = [&](const Example& ex) {
        objective.features.push_back(res.model.backbone.features(ex.x));
        objective.targets.push_back(res.model.classifier.row_of(ex.y));
    };
    for (const auto& ex : session.support) add_sample(ex);
    if (hyper.use_memory)
        for (const auto& ex : memory->exemplars) add_sample(ex);
    res.training_samples = objective.features.size();

    Matrix eta = res.model.classifier.weights();
    for (std::size_t step = 0; step < hyper.steps; ++step) {
        const LossAndGrad lg = objective(res.model.classifier, eta);
        res.log.push_back(StepLog{t, step, lg.value, seed});
        const ParamSet next = sgd_step(eta_only(eta), lg.grads, hyper.lr);
        eta = next.at("eta");
    }
    res.model.classifier.weights() = eta;

    res.snapshot = make_snapshot(res.model.classifier, t, session.classes);
    const auto allowed = stream.classes_up_to(t);
    res.metrics = evaluate_session(res.model, session.query, allowed, base, t);
    return res;
}

// ---- full run ------------------------------------------------------------------------

struct PipelineResult {
    BaseTrainingResult base;
    std::vector<SessionMetrics> sessions;  // 0..T
    std::vector<WeightSnapshot> snapshots;
    Model final_model;
    std::vector<StepLog> step_log;
};

// Incremental sessions 1..T on top of an already trained base model.
inline void run_sessions(const Model& base_model, const SessionStream& stream,
                         const EmbeddingTable& embeddings, const IncrementalHyper& hyper,
                         std::uint64_t seed, PipelineResult& out) {
    const auto& base = stream.base_classes();
    out.sessions.clear();
    out.snapshots.clear();
    out.step_log.clear();
    out.sessions.push_back(evaluate_session(base_model, stream.sessions[0].query, base, base, 0));
    out.snapshots.push_back(make_snapshot(base_model.classifier, 0, base));
    Model model = base_model;
    MemoryBuffer memory;
    for (std::size_t t = 1; t < stream.sessions.size(); ++t) {
        if (hyper.use_memory) memory = sample_memory(stream, t, memory, seed);
        IncrementalResult r = run_incremental_session(model, stream, t, embeddings, out.snapshots,
                                                      hyper.use_memory ? &memory : nullptr, hyper, seed);
        model = std::move(r.model);
        out.sessions.push_back(std::move(r.metrics));
        out.snapshots.push_back(std::move(r.snapshot));
        out.step_log.insert(out.step_log.end(), r.log.begin(), r.log.end());
    }
    out.final_model = std::move(model);
}

inline PipelineResult run_pipeline(const SessionStream& stream, const EmbeddingTable& embeddings,
                                   const HyperBase& base_hyper, const IncrementalHyper& inc_hyper,
                                   std::uint64_t seed) {
    PipelineResult out;
    out.base = train_base(stream.sessions.at(0).support, stream.base_classes(), embeddings,
                          base_hyper, seed);
    run_sessions(out.base.model, stream, embeddings, inc_hyper, seed, out);
    return out;
}

}  // namespace fscil
