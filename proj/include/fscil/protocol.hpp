#pragma once

// ---------------------------------------------------------------------------
// Session machinery for few-shot class-incremental runs.
//
// A SessionStream holds sessions 0..T. Session 0 is the base split; every
// later session t introduces n_way classes disjoint from all earlier ones,
// with a k_shot support set per class. The query set of session t covers
// every class seen so far (base queries plus novel queries of sessions <= t).
// Support and query samples of a class never overlap.
// ---------------------------------------------------------------------------

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "fscil/errors.hpp"
#include "fscil/model.hpp"
#include "fscil/numkit.hpp"
#include "fscil/semantic_space.hpp"
#include "fscil/text_format.hpp"

namespace fscil {

class LabeledDataset {
public:
    LabeledDataset() = default;
    LabeledDataset(std::vector<Vector> features, std::vector<ClassId> labels)
        : features_(std::move(features)), labels_(std::move(labels)) {
        if (features_.size() != labels_.size())
            throw ShapeError("LabeledDataset: features and labels not aligned");
        for (std::size_t i = 0; i < features_.size(); ++i) {
            if (features_[i].dim() != features_.front().dim())
                throw ShapeError("LabeledDataset: inconsistent feature dims");
            auto [it, inserted] = by_class_.try_emplace(labels_[i]);
            if (inserted) classes_.push_back(labels_[i]);
            it->second.push_back(i);
        }
    }

    std::size_t size() const noexcept { return features_.size(); }
    std::size_t dim() const noexcept { return features_.empty() ? 0 : features_.front().dim(); }
    const std::vector<Vector>& features() const noexcept { return features_; }
    const std::vector<ClassId>& labels() const noexcept { return labels_; }
    // Classes in order of first appearance.
    const std::vector<ClassId>& classes() const noexcept { return classes_; }

    const std::vector<std::size_t>& samples_of(const ClassId& id) const {
        auto it = by_class_.find(id);
        if (it == by_class_.end()) throw MissingClassError("dataset has no class '" + id + "'");
        return it->second;
    }

    Example example(std::size_t i) const { return Example{features_.at(i), labels_.at(i)}; }

private:
    std::vector<Vector> features_;
    std::vector<ClassId> labels_;
    std::vector<ClassId> classes_;
    std::unordered_map<ClassId, std::vector<std::size_t>> by_class_;
};

inline constexpr std::string_view kDatasetMagic = "fscil-feat";

inline std::string format_dataset(const LabeledDataset& data) {
    text_format::Document doc;
    doc.dim = data.dim();
    for (std::size_t i = 0; i < data.size(); ++i)
        doc.rows.push_back({data.labels()[i], data.features()[i]});
    return text_format::write(kDatasetMagic, doc);
}

inline LabeledDataset parse_dataset(const std::string& text) {
    auto doc = text_format::parse(kDatasetMagic, text);
    std::vector<Vector> feats;
    std::vector<ClassId> labels;
    for (auto& r : doc.rows) {
        labels.push_back(std::move(r.label));
        feats.push_back(std::move(r.values));
    }
    return LabeledDataset(std::move(feats), std::move(labels));
}

inline void save_dataset(const LabeledDataset& data, const std::string& path) {
    text_format::write_file(path, format_dataset(data));
}

inline LabeledDataset load_dataset(const std::string& path) {
    return parse_dataset(text_format::read_file(path));
}

// ---- stream configuration ----------------------------------------------------

struct StreamConfig {
    std::size_t base_classes = 60;
    std::size_t sessions = 8;
    std::size_t n_way = 5;
    std::size_t k_shot = 5;
    std::size_t query_per_class = 15;
    std::uint64_t seed = 0;

    void validate(std::size_t total_classes) const {
        if (base_classes == 0 || k_shot == 0 || query_per_class == 0 ||
            (sessions > 0 && n_way == 0))
            throw ParameterError("StreamConfig: counts must be positive");
        if (base_classes + sessions * n_way > total_classes)
            throw ParameterError("StreamConfig: base + sessions * n_way exceeds " +
                                 std::to_string(total_classes) + " classes");
    }

    friend bool operator==(const StreamConfig&, const StreamConfig&) = default;
};

inline void to_json(nlohmann::json& j, const StreamConfig& c) {
    j = {{"base_classes", c.base_classes}, {"sessions", c.sessions},
         {"n_way", c.n_way},               {"k_shot", c.k_shot},
         {"query_per_class", c.query_per_class}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, StreamConfig& c) {
    StreamConfig d;
    c.base_classes = j.value("base_classes", d.base_classes);
    c.sessions = j.value("sessions", d.sessions);
    c.n_way = j.value("n_way", d.n_way);
    c.k_shot = j.value("k_shot", d.k_shot);
    c.query_per_class = j.value("query_per_class", d.query_per_class);
    c.seed = j.value("seed", d.seed);
}

// ---- session stream ----------------------------------------------------------

struct Session {
    std::vector<ClassId> classes;  // C^(t)
    std::vector<Example> support;  // S^(t)
    std::vector<Example> query;    // Q^(t), cumulative over C^(<=t)
};

struct SessionStream {
    std::vector<Session> sessions;
    StreamConfig config;

    std::size_t last_session() const noexcept { return sessions.empty() ? 0 : sessions.size() - 1; }
    const std::vector<ClassId>& base_classes() const { return sessions.at(0).classes; }

    // C^(<=t) in introduction order.
    std::vector<ClassId> classes_up_to(std::size_t t) const {
        std::vector<ClassId> out;
        for (std::size_t s = 0; s <= t && s < sessions.size(); ++s)
            out.insert(out.end(), sessions[s].classes.begin(), sessions[s].classes.end());
        return out;
    }
    std::vector<ClassId> classes_before(std::size_t t) const {
        return t == 0 ? std::vector<ClassId>{} : classes_up_to(t - 1);
    }
};

// FNV-1a over the label bytes; portable unlike std::hash.
inline std::uint64_t label_hash(const ClassId& id) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : id) h = (h ^ ch) * 1099511628211ULL;
    return h;
}

// Fraction of each base class held out for Q^(0).
inline constexpr double kBaseQueryFraction = 0.2;

inline SessionStream build_session_stream(const LabeledDataset& data, const StreamConfig& cfg) {
    cfg.validate(data.classes().size());
    SeededRng rng(cfg.seed);
    SessionStream stream;
    stream.config = cfg;
    stream.sessions.resize(cfg.sessions + 1);

    auto shuffled_samples = [&](const ClassId& id) {
        std::vector<std::size_t> idx = data.samples_of(id);
        SeededRng local = rng.fork(label_hash(id));
        local.shuffle(idx);
        return idx;
    };

    const auto& classes = data.classes();
    std::vector<Example> base_query;
    Session& base = stream.sessions[0];
    for (std::size_t c = 0; c < cfg.base_classes; ++c) {
        const ClassId& id = classes[c];
        const auto idx = shuffled_samples(id);
        if (idx.size() < 2)
            throw CapacityError("base class '" + id + "' needs at least 2 samples");
        std::size_t n_query = static_cast<std::size_t>(
            std::llround(kBaseQueryFraction * static_cast<double>(idx.size())));
        n_query = std::clamp<std::size_t>(n_query, 1, idx.size() - 1);
        base.classes.push_back(id);
        for (std::size_t i = 0; i < idx.size(); ++i)
            (i < n_query ? base_query : base.support).push_back(data.example(idx[i]));
    }
    base.query = base_query;

    std::vector<Example> cumulative_query = std::move(base_query);
    std::size_t next = cfg.base_classes;
    for (std::size_t t = 1; t <= cfg.sessions; ++t) {
        Session& s = stream.sessions[t];
        for (std::size_t w = 0; w < cfg.n_way; ++w, ++next) {
            const ClassId& id = classes[next];
            const auto idx = shuffled_samples(id);
            if (idx.size() < cfg.k_shot + cfg.query_per_class)
                throw CapacityError("class '" + id + "' has " + std::to_string(idx.size()) +
                                    " samples; k_shot + query_per_class needed");
            s.classes.push_back(id);
            for (std::size_t i = 0; i < cfg.k_shot; ++i) s.support.push_back(data.example(idx[i]));
            for (std::size_t i = 0; i < cfg.query_per_class; ++i)
                cumulative_query.push_back(data.example(idx[cfg.k_shot + i]));
        }
        s.query = cumulative_query;
    }
    return stream;
}

// Empty result means no violation.
inline std::vector<std::string> check_stream_invariants(const SessionStream& stream) {
    std::vector<std::string> problems;
    std::set<ClassId> seen;
    const auto& cfg = stream.config;
    for (std::size_t t = 0; t < stream.sessions.size(); ++t) {
        const Session& s = stream.sessions[t];
        for (const auto& c : s.classes)
            if (!seen.insert(c).second)
                problems.push_back("session " + std::to_string(t) + ": class '" + c + "' repeats");
        const std::set<ClassId> current(s.classes.begin(), s.classes.end());
        for (const auto& ex : s.support)
            if (!current.count(ex.y))
                problems.push_back("session " + std::to_string(t) + ": support holds non-session class");
        if (t >= 1 && s.support.size() != cfg.n_way * cfg.k_shot)
            problems.push_back("session " + std::to_string(t) + ": |S| != N*K");
        std::set<ClassId> queried;
        for (const auto& ex : s.query) queried.insert(ex.y);
        if (queried != seen)
            problems.push_back("session " + std::to_string(t) + ": query classes != C(<=t)");
    }
    return problems;
}

// ---- memory variant ----------------------------------------------------------

// One exemplar per covered class; an exemplar is never replaced once chosen.
struct MemoryBuffer {
    std::vector<Example> exemplars;  // in coverage order

    std::size_t size() const noexcept { return exemplars.size(); }
    const Example* find(const ClassId& id) const {
        for (const auto& e : exemplars)
            if (e.y == id) return &e;
        return nullptr;
    }

    friend bool operator==(const MemoryBuffer&, const MemoryBuffer&) = default;
};


// Buffer used while training session t: covers C^(<t).
inline MemoryBuffer sample_memory(const SessionStream& stream, std::size_t t,
                                  const MemoryBuffer& prior, std::uint64_t seed) {
    if (t < 1 || t >= stream.sessions.size())
        throw ParameterError("sample_memory: session index out of range");
    MemoryBuffer out;
    const SeededRng root(seed);
    for (std::size_t s = 0; s < t; ++s) {
        const Session& sess = stream.sessions[s];
        for (const auto& c : sess.classes) {
            if (const Example* kept = prior.find(c)) {
                out.exemplars.push_back(*kept);
                continue;
            }
            std::vector<const Example*> pool;
            for (const auto& ex : sess.support)
                if (ex.y == c) pool.push_back(&ex);
            if (pool.empty()) throw CapacityError("sample_memory: class '" + c + "' has no support");
            SeededRng pick = root.fork(label_hash(c));
            out.exemplars.push_back(*pool[static_cast<std::size_t>(pick.below(pool.size()))]);
        }
    }
    return out;
}

// ---- synthetic data ----------------------------------------------------------

struct SyntheticSpec {
    std::size_t num_classes = 40;
    std::size_t feature_dim = 32;
    std::size_t samples_per_class = 40;
    double class_spread = 8.0;
    double semantic_noise = 0.1;
    std::uint64_t seed = 0;
    std::optional<std::size_t> semantic_dim;  // unset: same as feature_dim

    void validate() const {
        if (num_classes == 0 || samples_per_class == 0)
            throw ParameterError("synthetic: counts must be positive");
        if (feature_dim < 2) throw ParameterError("synthetic: feature_dim must be >= 2");
        if (!(class_spread > 0.0)) throw ParameterError("synthetic: class_spread must be positive");
        if (!(semantic_noise >= 0.0)) throw ParameterError("synthetic: semantic_noise must be >= 0");
        if (semantic_dim && *semantic_dim == 0) throw ParameterError("synthetic: semantic_dim must be positive");
    }
};

struct SyntheticData {
    LabeledDataset dataset;
    EmbeddingTable embeddings;
    EmbeddingTable prototypes;
};

inline ClassId synthetic_class_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "class_%03zu", i);
    return buf;
}

// rows x cols matrix with orthonormal rows (rows <= cols) or columns (rows > cols),
// by Gram-Schmidt over Gaussian draws.
inline Matrix random_orthogonal(std::size_t rows, std::size_t cols, SeededRng& rng) {
    const bool by_rows = rows <= cols;
    const std::size_t n = by_rows ? rows : cols;   // vectors to orthonormalise
    const std::size_t len = by_rows ? cols : rows; // their length
    std::vector<Vector> basis;
    while (basis.size() < n) {
        Vector v(len);
        for (auto& x : v) x = rng.normal();
        for (const auto& b : basis) axpy(-dot(v.span(), b.span()), b.span(), v.span());
        const double nv = norm(v.span());
        if (nv < 1e-8) continue;
        for (auto& x : v) x /= nv;
        basis.push_back(std::move(v));
    }
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < len; ++k) {
            if (by_rows) m(i, k) = basis[i][k];
            else m(k, i) = basis[i][k];
        }
    return m;
}

inline SyntheticData generate_synthetic_dataset(const SyntheticSpec& spec) {
    spec.validate();
    const SeededRng root(spec.seed);
    SeededRng proto_rng = root.fork(1);
    SeededRng sample_rng = root.fork(2);
    SeededRng semantic_rng = root.fork(3);
    SeededRng projection_rng = root.fork(4);

    std::vector<ClassId> ids;
    std::vector<Vector> protos;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        Vector p(spec.feature_dim);
        double n = 0.0;
        while (!(n > 1e-12)) {
            for (auto& x : p) x = proto_rng.normal();
            n = norm(p.span());
        }
        for (auto& x : p) x *= spec.class_spread / n;
        ids.push_back(synthetic_class_name(c));
        protos.push_back(std::move(p));
    }

    std::vector<Vector> feats;
    std::vector<ClassId> labels;
    feats.reserve(spec.num_classes * spec.samples_per_class);
    for (std::size_t c = 0; c < spec.num_classes; ++c)
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            Vector x = protos[c];
            for (auto& v : x) v += sample_rng.normal();
            feats.push_back(std::move(x));
            labels.push_back(ids[c]);
        }

    const std::size_t sdim = spec.semantic_dim.value_or(spec.feature_dim);
    std::optional<Matrix> projection;
    if (sdim != spec.feature_dim) projection = random_orthogonal(sdim, spec.feature_dim, projection_rng);

    std::vector<Vector> sem;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        Vector e = protos[c];
        for (auto& v : e) v += spec.semantic_noise * semantic_rng.normal();
        if (projection) {
            Vector pe(sdim);
            for (std::size_t r = 0; r < sdim; ++r) pe[r] = dot(projection->row(r), e.span());
            e = std::move(pe);
        }
        sem.push_back(std::move(e));
    }

    return SyntheticData{LabeledDataset(std::move(feats), std::move(labels)),
                         EmbeddingTable(ids, std::move(sem)),
                         EmbeddingTable(ids, std::move(protos))};
}

}  // namespace fscil
