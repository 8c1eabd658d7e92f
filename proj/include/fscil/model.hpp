#pragma once

// ---------------------------------------------------------------------------
// The learner: an MLP feature extractor (theta) followed by a linear
// classifier (eta, one row per class), plus the base-session losses.
//
//   loss_main          mean cross-entropy + alpha (||eta||^2 + ||theta||^2)
//   loss_language_reg  graph Laplacian alignment of visual and semantic
//                      class-similarity structure, sum over the batch of
//                      sum_{k : R(k, y) = 1} |lambda_ky - mu_ky|
//   loss_base          two-phase indicator schedule over the two losses
//
// All gradients are hand-derived; tests/model_test.cpp runs gradcheck on each.
// Parameter names: "theta.<l>.weight", "theta.<l>.bias", "eta".
// ---------------------------------------------------------------------------

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fscil/errors.hpp"
#include "fscil/numkit.hpp"
#include "fscil/semantic_space.hpp"

namespace fscil {

struct Example {
    Vector x;
    ClassId y;

    friend bool operator==(const Example&, const Example&) = default;
};

struct DenseLayer {
    Matrix weight;  // out x in
    Matrix bias;    // 1 x out

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// Stack of Linear+ReLU layers. With no layers it is the identity map.
class Backbone {
public:
    Backbone() = default;
    explicit Backbone(std::size_t input_dim) : input_dim_(input_dim) {}

    static Backbone mlp(std::size_t input_dim, std::span<const std::size_t> widths,
                        SeededRng& rng) {
        Backbone b(input_dim);
        std::size_t in = input_dim;
        for (std::size_t w : widths) {
            if (w == 0) throw ParameterError("Backbone: zero-width layer");
            DenseLayer layer{Matrix(w, in), Matrix(1, w)};
            const double scale = std::sqrt(2.0 / static_cast<double>(in));
            for (auto& v : layer.weight.flat()) v = scale * rng.normal();
            b.layers_.push_back(std::move(layer));
            in = w;
        }
        return b;
    }

    std::size_t input_dim() const noexcept { return input_dim_; }
    std::size_t feature_dim() const noexcept {
        return layers_.empty() ? input_dim_ : layers_.back().weight.rows();
    }
    const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
    std::vector<DenseLayer>& layers() noexcept { return layers_; }

    void add_layer(DenseLayer layer) {
        const std::size_t in = feature_dim();
        if (layer.weight.cols() != in || layer.bias.rows() != 1 ||
            layer.bias.cols() != layer.weight.rows())
            throw ShapeError("Backbone::add_layer: layer does not compose");
        layers_.push_back(std::move(layer));
    }

    // Post-activation outputs of every layer; acts[0] is the input.
    struct Trace {
        std::vector<Vector> acts;
    };

    Trace trace(const Vector& x) const {
        if (x.dim() != input_dim_) throw ShapeError("Backbone: input dimension mismatch");
        Trace t;
        t.acts.reserve(layers_.size() + 1);
        t.acts.push_back(x);
        for (const auto& layer : layers_) {
            const Vector& in = t.acts.back();
            Vector out(layer.weight.rows());
            for (std::size_t o = 0; o < out.dim(); ++o) {
                const double z = dot(layer.weight.row(o), in.span()) + layer.bias(0, o);
                out[o] = z > 0.0 ? z : 0.0;
            }
            t.acts.push_back(std::move(out));
        }
        return t;
    }

    Vector features(const Vector& x) const { return std::move(trace(x).acts.back()); }

    // Accumulates dL/dtheta given dL/dfeatures into `grads` (entries theta.*).
    void backward(const Trace& t, Vector dout, ParamSet& grads) const {
        for (std::size_t l = layers_.size(); l-- > 0;) {
            const auto& layer = layers_[l];
            const Vector& out = t.acts[l + 1];
            const Vector& in = t.acts[l];
            // ReLU gate: derivative 0 where the unit is inactive.
            for (std::size_t o = 0; o < dout.dim(); ++o)
                if (!(out[o] > 0.0)) dout[o] = 0.0;
            Matrix& gw = grads.at(weight_name(l));
            Matrix& gb = grads.at(bias_name(l));
            Vector din(in.dim());
            for (std::size_t o = 0; o < dout.dim(); ++o) {
                const double d = dout[o];
                if (d == 0.0) continue;
                gb(0, o) += d;
                axpy(d, in.span(), gw.row(o));
                axpy(d, layer.weight.row(o), din.span());
            }
            dout = std::move(din);
        }
    }

    static std::string weight_name(std::size_t l) { return "theta." + std::to_string(l) + ".weight"; }
    static std::string bias_name(std::size_t l) { return "theta." + std::to_string(l) + ".bias"; }

    friend bool operator==(const Backbone&, const Backbone&) = default;

private:
    std::size_t input_dim_ = 0;
    std::vector<DenseLayer> layers_;
};

class Classifier {
public:
    Classifier() = default;
    Classifier(std::vector<ClassId> ids, Matrix weights)
        : ids_(std::move(ids)), weights_(std::move(weights)) {
        if (ids_.size() != weights_.rows())
            throw ShapeError("Classifier: row count differs from class count");
        rebuild_index();
    }

    static Classifier random(std::vector<ClassId> ids, std::size_t feature_dim, SeededRng& rng,
                             double scale = 0.01) {
        Matrix w(ids.size(), feature_dim);
        for (auto& v : w.flat()) v = scale * rng.normal();
        return Classifier(std::move(ids), std::move(w));
    }

    std::size_t size() const noexcept { return ids_.size(); }
    std::size_t feature_dim() const noexcept { return weights_.cols(); }
    const std::vector<ClassId>& ids() const noexcept { return ids_; }
    const Matrix& weights() const noexcept { return weights_; }
    Matrix& weights() noexcept { return weights_; }

    std::optional<std::size_t> index_of(const ClassId& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }
    std::size_t row_of(const ClassId& id) const {
        auto idx = index_of(id);
        if (!idx) throw LabelError("classifier has no class '" + id + "'");
        return *idx;
    }

    friend bool operator==(const Classifier& a, const Classifier& b) {
        return a.ids_ == b.ids_ && a.weights_ == b.weights_;
    }

private:
    void rebuild_index() {
        index_.clear();
        for (std::size_t i = 0; i < ids_.size(); ++i)
            if (!index_.emplace(ids_[i], i).second)
                throw LabelError("Classifier: duplicate class '" + ids_[i] + "'");
    }

    std::vector<ClassId> ids_;
    Matrix weights_;
    std::unordered_map<ClassId, std::size_t> index_;
};

struct Model {
    Backbone backbone;
    Classifier classifier;

    ParamSet params() const {
        ParamSet p;
        for (std::size_t l = 0; l < backbone.layers().size(); ++l) {
            p.add(Backbone::weight_name(l), backbone.layers()[l].weight);
            p.add(Backbone::bias_name(l), backbone.layers()[l].bias);
        }
        p.add("eta", classifier.weights());
        return p;
    }

    void set_params(const ParamSet& p) {
        if (!params().congruent(p)) throw ShapeError("Model::set_params: incongruent ParamSet");
        for (std::size_t l = 0; l < backbone.layers().size(); ++l) {
            backbone.layers()[l].weight = p.at(Backbone::weight_name(l));
            backbone.layers()[l].bias = p.at(Backbone::bias_name(l));
        }
        classifier.weights() = p.at("eta");
    }

    Model with_params(const ParamSet& p) const {
        Model m = *this;
        m.set_params(p);
        return m;
    }

    friend bool operator==(const Model&, const Model&) = default;
};

inline Vector logits_from_features(const Classifier& classifier, const Vector& f) {
    if (f.dim() != classifier.feature_dim())
        throw ShapeError("forward_logits: feature dimension mismatch");
    Vector out(classifier.size());
    for (std::size_t c = 0; c < classifier.size(); ++c)
        out[c] = dot(classifier.weights().row(c), f.span());
    return out;
}

inline Vector forward_logits(const Backbone& backbone, const Classifier& classifier,
                             const Vector& x) {
    return logits_from_features(classifier, backbone.features(x));
}

// Cross-entropy of softmax(logits) against row `target`; writes p - onehot.
inline double cross_entropy(const Vector& logits, std::size_t target, Vector& dlogits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    dlogits = Vector(logits.dim());
    for (std::size_t c = 0; c < logits.dim(); ++c) {
        dlogits[c] = std::exp(logits[c] - mx);
        sum += dlogits[c];
    }
    for (auto& v : dlogits) v /= sum;
    const double loss = std::log(sum) + mx - logits[target];
    dlogits[target] -= 1.0;
    return loss;
}

inline void add_l2_penalty(const ParamSet& params, double alpha, LossAndGrad& out,
                           bool backbone_too = true) {
    if (alpha == 0.0) return;
    for (std::size_t e = 0; e < params.size(); ++e) {
        const auto& [name, m] = params.entry(e);
        if (!backbone_too && name != "eta") continue;
        out.value += alpha * squared_norm(m.flat());
        axpy(2.0 * alpha, m.flat(), out.grads.entry(e).second.flat());
    }
}

inline LossAndGrad loss_main(const Model& model, std::span<const Example> batch, double alpha) {
    if (batch.empty()) throw ParameterError("loss_main: empty batch");
    const ParamSet params = model.params();
    LossAndGrad out{0.0, params.zeros_like()};
    Matrix& geta = out.grads.at("eta");
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    const Matrix& eta = model.classifier.weights();
    Vector dlogits;
    for (const auto& ex : batch) {
        const std::size_t target = model.classifier.row_of(ex.y);
        const auto tr = model.backbone.trace(ex.x);
        const Vector& f = tr.acts.back();
        const Vector logits = logits_from_features(model.classifier, f);
        out.value += inv_n * cross_entropy(logits, target, dlogits);
        Vector df(f.dim());
        for (std::size_t c = 0; c < dlogits.dim(); ++c) {
            const double d = inv_n * dlogits[c];
            axpy(d, f.span(), geta.row(c));
            axpy(d, eta.row(c), df.span());
        }
        model.backbone.backward(tr, std::move(df), out.grads);
    }
    add_l2_penalty(params, alpha, out);
    return out;
}

// ---- language regularizer ----------------------------------------------------

struct LanguageRegSetup {
    const EmbeddingTable* embeddings = nullptr;  // lambda source, no gradient
    const KnnGraph* graph = nullptr;             // class universe + top-K edges
    SimilarityMode mode = SimilarityMode::topk_cosine;
    double momentum = 0.9;                       // running-mean blend
};

namespace detail {

// d sim(a, b) / da for the chosen mode; zero at degenerate points.
inline void similarity_grad_a(const Vector& a, const Vector& b, SimilarityMode mode, double sim,
                              double scale, std::span<double> ga) {
    if (mode == SimilarityMode::euclidean) {
        const double d = -sim;
        if (!(d > 0.0)) return;
        for (std::size_t i = 0; i < a.dim(); ++i) ga[i] -= scale * (a[i] - b[i]) / d;
        return;
    }
    const double na = norm(a.span());
    const double nb = norm(b.span());
    for (std::size_t i = 0; i < a.dim(); ++i)
        ga[i] += scale * (b[i] / (na * nb) - sim * a[i] / (na * na));
}

}  // namespace detail

// Per-class visual means as seen by the regularizer for this batch: classes in
// the batch blend the running mean (weight `momentum`) with the batch mean;
// other classes use the running mean. Classes with no running mean use the
// batch mean alone.
struct BatchMeans {
    std::map<ClassId, Vector> means;
    std::map<ClassId, std::size_t> batch_counts;
};

inline BatchMeans blend_batch_means(const Backbone& backbone, std::span<const Example> batch,
                                    const ClassMeans& running, double momentum,
                                    std::vector<Backbone::Trace>* traces = nullptr) {
    BatchMeans bm;
    std::map<ClassId, Vector> sums;
    if (traces) traces->clear();
    for (const auto& ex : batch) {
        auto tr = backbone.trace(ex.x);
        const Vector& f = tr.acts.back();
        auto [it, _] = sums.try_emplace(ex.y, Vector(f.dim()));
        axpy(1.0, f.span(), it->second.span());
        ++bm.batch_counts[ex.y];
        if (traces) traces->push_back(std::move(tr));
    }
    for (auto& [id, sum] : sums) {
        const double n = static_cast<double>(bm.batch_counts[id]);
        Vector v(sum.dim());
        if (running.contains(id) && running.count(id) > 0) {
            const Vector& r = running.mean(id);
            if (r.dim() != v.dim()) throw ShapeError("running mean dimension mismatch");
            for (std::size_t i = 0; i < v.dim(); ++i)
                v[i] = momentum * r[i] + (1.0 - momentum) * sum[i] / n;
        } else {
            for (std::size_t i = 0; i < v.dim(); ++i) v[i] = sum[i] / n;
        }
        bm.means.emplace(id, std::move(v));
    }
    return bm;
}

// Running means after absorbing `batch` (no gradient; used between SGD steps).
inline ClassMeans advance_running_means(const Backbone& backbone, std::span<const Example> batch,
                                        const ClassMeans& running, double momentum) {
    const BatchMeans bm = blend_batch_means(backbone, batch, running, momentum);
    ClassMeans next = running;
    for (const auto& [id, v] : bm.means)
        next.set(id, v, running.count(id) + bm.batch_counts.at(id));
    return next;
}

inline LossAndGrad loss_language_reg(const Model& model, std::span<const Example> batch,
                                     const ClassMeans& running, const LanguageRegSetup& setup) {
    if (!setup.embeddings || !setup.graph)
        throw ParameterError("loss_language_reg: embeddings and graph are required");
    const EmbeddingTable& emb = *setup.embeddings;
    const KnnGraph& graph = *setup.graph;
    const ParamSet params = model.params();
    LossAndGrad out{0.0, params.zeros_like()};
    if (batch.empty()) return out;

    std::vector<Backbone::Trace> traces;
    const BatchMeans bm = blend_batch_means(model.backbone, batch, running, setup.momentum, &traces);

    auto mean_of = [&](const ClassId& id) -> const Vector& {
        auto it = bm.means.find(id);
        if (it != bm.means.end()) return it->second;
        return running.mean(id);
    };

    // Gradient w.r.t. the effective means of classes present in the batch.
    std::map<ClassId, Vector> gmean;
    const std::size_t fdim = model.backbone.feature_dim();

    for (const auto& [y, n_y] : bm.batch_counts) {
        const auto col = graph.index_of(y);
        if (!col) throw MissingClassError("loss_language_reg: class '" + y + "' not in graph");
        std::vector<std::size_t> neighbours;
        if (setup.mode == SimilarityMode::topk_cosine) {
            neighbours = graph.rows_pointing_to(*col);
        } else {
            for (std::size_t k = 0; k < graph.size(); ++k)
                if (k != *col) neighbours.push_back(k);
        }
        const Vector& v_y = mean_of(y);
        const Vector& l_y = emb.at(y);
        const double weight = static_cast<double>(n_y);
        for (std::size_t k : neighbours) {
            const ClassId& kid = graph.ids[k];
            const Vector& v_k = mean_of(kid);
            const double lambda = pairwise_similarity(emb.at(kid), l_y, setup.mode);
            const double mu = pairwise_similarity(v_k, v_y, setup.mode);
            const double diff = lambda - mu;
            out.value += weight * std::abs(diff);
            if (diff == 0.0) continue;  // subgradient 0 at the kink
            // d|lambda - mu| / dmu = -sign(lambda - mu)
            const double s = weight * (diff > 0.0 ? -1.0 : 1.0);
            auto grad_for = [&](const ClassId& id) -> std::span<double> {
                auto [it, _] = gmean.try_emplace(id, Vector(fdim));
                return it->second.span();
            };
            if (bm.means.count(kid)) detail::similarity_grad_a(v_k, v_y, setup.mode, mu, s, grad_for(kid));
            detail::similarity_grad_a(v_y, v_k, setup.mode, mu, s, grad_for(y));
        }
    }

    // Push mean gradients back to per-sample features: dv_c/df_i = (1 - m)/n_c
    // when the class had a running mean, 1/n_c otherwise.
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto it = gmean.find(batch[i].y);
        if (it == gmean.end()) continue;
        const double n = static_cast<double>(bm.batch_counts.at(batch[i].y));
        const bool blended = running.contains(batch[i].y) && running.count(batch[i].y) > 0;
        const double share = (blended ? (1.0 - setup.momentum) : 1.0) / n;
        Vector df(fdim);
        axpy(share, it->second.span(), df.span());
        model.backbone.backward(traces[i], std::move(df), out.grads);
    }
    return out;
}

// ---- base schedule -----------------------------------------------------------

struct HyperBase {
    double alpha = 1e-4;
    std::size_t epochs_phase1 = 100;
    std::size_t epochs_phase2 = 100;
    double lr = 0.05;
    std::optional<double> lr_phase2;  // unset: same as lr
    std::size_t batch_size = 32;
    std::optional<std::size_t> k;  // unset: 5% of the base class count
    bool phase2_keep_ce = false;
    SimilarityMode mode = SimilarityMode::topk_cosine;
    double mean_momentum = 0.9;
    std::vector<std::size_t> hidden = {64, 64};

    void validate() const {
        if (!(alpha >= 0.0) || !(lr > 0.0) || batch_size == 0 || epochs_phase1 == 0)
            throw ParameterError("HyperBase: alpha >= 0, lr > 0, batch_size > 0, epochs_phase1 > 0 required");
        if (lr_phase2 && !(*lr_phase2 > 0.0)) throw ParameterError("HyperBase: lr_phase2 must be positive");
        if (k && *k == 0) throw ParameterError("HyperBase: K must be positive");
        if (!(mean_momentum >= 0.0 && mean_momentum < 1.0))
            throw ParameterError("HyperBase: mean_momentum must lie in [0, 1)");
    }
};

enum class BasePhase { classification = 1, language = 2 };

inline BasePhase base_phase(std::size_t epoch, const HyperBase& hyper) {
    if (epoch < 1 || epoch > hyper.epochs_phase1 + hyper.epochs_phase2)
        throw ScheduleError("epoch " + std::to_string(epoch) + " outside the base schedule");
    return epoch <= hyper.epochs_phase1 ? BasePhase::classification : BasePhase::language;
}

// Phase 1 returns L_m; phase 2 returns L_GRL (plus L_m when phase2_keep_ce).
inline LossAndGrad loss_base(std::size_t epoch, const LossAndGrad& main_part,
                             const std::optional<LossAndGrad>& language_part,
                             const HyperBase& hyper) {
    if (base_phase(epoch, hyper) == BasePhase::classification) return main_part;
    if (!language_part) throw ScheduleError("loss_base: phase 2 needs the language term");
    if (!hyper.phase2_keep_ce) return *language_part;
    LossAndGrad out = *language_part;
    out.value += main_part.value;
    out.grads.accumulate(main_part.grads);
    return out;
}

// ---- classifier growth -------------------------------------------------------

inline Classifier extend_classifier(const Classifier& classifier,
                                    std::span<const ClassId> new_ids,
                                    std::span<const Vector> init) {
    if (new_ids.size() != init.size())
        throw ShapeError("extend_classifier: one initial row per new class required");
    std::vector<ClassId> ids = classifier.ids();
    Matrix w = classifier.weights();
    for (std::size_t i = 0; i < new_ids.size(); ++i) {
        if (classifier.index_of(new_ids[i]) ||
            std::find(new_ids.begin(), new_ids.begin() + static_cast<std::ptrdiff_t>(i), new_ids[i]) !=
                new_ids.begin() + static_cast<std::ptrdiff_t>(i))
            throw LabelError("extend_classifier: duplicate class '" + new_ids[i] + "'");
        if (init[i].dim() != classifier.feature_dim())
            throw ShapeError("extend_classifier: initial row has wrong width");
        ids.push_back(new_ids[i]);
        w.append_row(init[i].span());
    }
    return Classifier(std::move(ids), std::move(w));
}

}  // namespace fscil
