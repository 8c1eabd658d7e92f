#pragma once

// Class-label semantic space: embedding tables, the top-K semantic neighbour
// graph, similarity modes used by the language regularizer, per-class visual
// means, and the semantic subspace anchors for novel classes.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fscil/errors.hpp"
#include "fscil/numkit.hpp"
#include "fscil/text_format.hpp"

namespace fscil {

using ClassId = std::string;

class EmbeddingTable {
public:
    EmbeddingTable() = default;

    EmbeddingTable(std::vector<ClassId> ids, std::vector<Vector> vectors)
        : ids_(std::move(ids)), vectors_(std::move(vectors)) {
        if (ids_.size() != vectors_.size())
            throw FormatError("EmbeddingTable: id/vector count mismatch");
        if (ids_.empty()) throw FormatError("EmbeddingTable: no classes");
        dim_ = vectors_.front().dim();
        if (dim_ == 0) throw FormatError("EmbeddingTable: zero dimension");
        for (std::size_t i = 0; i < ids_.size(); ++i) {
            if (vectors_[i].dim() != dim_)
                throw FormatError("EmbeddingTable: dim mismatch for '" + ids_[i] + "'");
            if (!vectors_[i].all_finite())
                throw FormatError("EmbeddingTable: non-finite value for '" + ids_[i] + "'");
            if (!(norm(vectors_[i].span()) > 0.0))
                throw FormatError("EmbeddingTable: zero-norm vector for '" + ids_[i] + "'");
            if (!index_.emplace(ids_[i], i).second)
                throw FormatError("EmbeddingTable: duplicate label '" + ids_[i] + "'");
        }
    }

    std::size_t size() const noexcept { return ids_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    const std::vector<ClassId>& ids() const noexcept { return ids_; }
    const Vector& vector(std::size_t i) const { return vectors_.at(i); }

    std::optional<std::size_t> index_of(const ClassId& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }
    bool contains(const ClassId& id) const { return index_.count(id) != 0; }

    const Vector& at(const ClassId& id) const {
        auto idx = index_of(id);
        if (!idx) throw MissingClassError("no embedding for class '" + id + "'");
        return vectors_[*idx];
    }

    // Table restricted to `ids`, in that order.
    EmbeddingTable subset(std::span<const ClassId> ids) const {
        std::vector<ClassId> out_ids(ids.begin(), ids.end());
        std::vector<Vector> out;
        out.reserve(ids.size());
        for (const auto& id : ids) out.push_back(at(id));
        return EmbeddingTable(std::move(out_ids), std::move(out));
    }

    EmbeddingTable l2_normalized() const {
        std::vector<Vector> out = vectors_;
        for (auto& v : out) {
            const double n = norm(v.span());
            for (auto& x : v) x /= n;
        }
        return EmbeddingTable(ids_, std::move(out));
    }

private:
    std::vector<ClassId> ids_;
    std::vector<Vector> vectors_;
    std::unordered_map<ClassId, std::size_t> index_;
    std::size_t dim_ = 0;
};

inline constexpr std::string_view kEmbeddingMagic = "fscil-emb";

inline EmbeddingTable parse_embedding_table(const std::string& text) {
    auto doc = text_format::parse(kEmbeddingMagic, text);
    std::vector<ClassId> ids;
    std::vector<Vector> vecs;
    for (auto& r : doc.rows) {
        ids.push_back(std::move(r.label));
        vecs.push_back(std::move(r.values));
    }
    return EmbeddingTable(std::move(ids), std::move(vecs));
}

inline EmbeddingTable load_embedding_table(const std::string& path) {
    return parse_embedding_table(text_format::read_file(path));
}

inline std::string format_embedding_table(const EmbeddingTable& table) {
    text_format::Document doc;
    doc.dim = table.dim();
    for (std::size_t i = 0; i < table.size(); ++i)
        doc.rows.push_back({table.ids()[i], table.vector(i)});
    return text_format::write(kEmbeddingMagic, doc);
}

inline void save_embedding_table(const EmbeddingTable& table, const std::string& path) {
    text_format::write_file(path, format_embedding_table(table));
}

// ---- KNN graph -------------------------------------------------------------

// Directed binary top-K adjacency: R(i, j) = 1 iff j is one of the K nearest
// classes to i (Euclidean, self excluded). Row and column order follow `ids`.
struct KnnGraph {
    Matrix R;
    std::size_t K = 0;
    std::vector<ClassId> ids;

    std::size_t size() const noexcept { return ids.size(); }

    std::optional<std::size_t> index_of(const ClassId& id) const {
        auto it = std::find(ids.begin(), ids.end(), id);
        if (it == ids.end()) return std::nullopt;
        return static_cast<std::size_t>(it - ids.begin());
    }

    // Rows k with R(k, col) = 1.
    std::vector<std::size_t> rows_pointing_to(std::size_t col) const {
        std::vector<std::size_t> out;
        for (std::size_t k = 0; k < R.rows(); ++k)
            if (R(k, col) == 1.0) out.push_back(k);
        return out;
    }

    friend bool operator==(const KnnGraph&, const KnnGraph&) = default;
};

// K as a fraction of the class count, at least 1.
inline std::size_t k_for_class_volume(std::size_t num_classes, double fraction = 0.05) {
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(num_classes)));
    return std::max<std::size_t>(1, k);
}

inline KnnGraph build_knn_graph(const EmbeddingTable& table, std::size_t K) {
    const std::size_t n = table.size();
    if (K == 0 || K >= n)
        throw ParameterError("build_knn_graph: K must satisfy 0 < K < class count");
    KnnGraph g;
    g.K = K;
    g.ids = table.ids();
    g.R = Matrix(n, n);
    std::vector<std::pair<double, std::size_t>> cand;
    cand.reserve(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        cand.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            cand.emplace_back(squared_distance(table.vector(i).span(), table.vector(j).span()), j);
        }
        // pair ordering breaks distance ties by lowest index
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(K), cand.end());
        for (std::size_t r = 0; r < K; ++r) g.R(i, cand[r].second) = 1.0;
    }
    return g;
}

// ---- similarity ------------------------------------------------------------

enum class SimilarityMode { euclidean, cosine, topk_cosine };

inline std::string_view to_string(SimilarityMode m) {
    switch (m) {
        case SimilarityMode::euclidean: return "euclidean";
        case SimilarityMode::cosine: return "cosine";
        case SimilarityMode::topk_cosine: return "topk_cosine";
    }
    return "?";
}

inline SimilarityMode parse_similarity_mode(std::string_view s) {
    if (s == "euclidean") return SimilarityMode::euclidean;
    if (s == "cosine") return SimilarityMode::cosine;
    if (s == "topk_cosine" || s == "topk") return SimilarityMode::topk_cosine;
    throw ParameterError("unknown similarity mode '" + std::string(s) + "'");
}

// Larger is always more similar: the Euclidean mode returns -||a - b||.
inline double pairwise_similarity(std::span<const double> a, std::span<const double> b,
                                  SimilarityMode mode) {
    if (a.size() != b.size()) throw ShapeError("pairwise_similarity: dimension mismatch");
    if (mode == SimilarityMode::euclidean) return -std::sqrt(squared_distance(a, b));
    return cosine_similarity(a, b);
}

inline double pairwise_similarity(const Vector& a, const Vector& b, SimilarityMode mode) {
    return pairwise_similarity(a.span(), b.span(), mode);
}

// ---- class means -----------------------------------------------------------

class ClassMeans {
public:
    struct Entry {
        Vector mean;
        std::size_t count = 0;
    };

    void set(const ClassId& id, Vector mean, std::size_t count) {
        entries_[id] = Entry{std::move(mean), count};
    }
    bool contains(const ClassId& id) const { return entries_.count(id) != 0; }
    const Vector& mean(const ClassId& id) const {
        auto it = entries_.find(id);
        if (it == entries_.end() || it->second.count == 0)
            throw MissingClassError("no visual mean for class '" + id + "'");
        return it->second.mean;
    }
    std::size_t count(const ClassId& id) const {
        auto it = entries_.find(id);
        return it == entries_.end() ? 0 : it->second.count;
    }
    std::size_t size() const noexcept { return entries_.size(); }
    const std::map<ClassId, Entry>& entries() const noexcept { return entries_; }

private:
    std::map<ClassId, Entry> entries_;
};

inline ClassMeans class_visual_means(std::span<const Vector> features,
                                     std::span<const ClassId> labels) {
    if (features.size() != labels.size())
        throw ShapeError("class_visual_means: features and labels not aligned");
    std::map<ClassId, std::pair<Vector, std::size_t>> acc;
    for (std::size_t i = 0; i < features.size(); ++i) {
        auto [it, inserted] = acc.try_emplace(labels[i], Vector(features[i].dim()), 0);
        if (it->second.first.dim() != features[i].dim())
            throw ShapeError("class_visual_means: inconsistent feature dims");
        axpy(1.0, features[i].span(), it->second.first.span());
        ++it->second.second;
    }
    ClassMeans means;
    for (auto& [id, sum_count] : acc) {
        auto& [sum, n] = sum_count;
        for (auto& v : sum) v /= static_cast<double>(n);
        means.set(id, std::move(sum), n);
    }
    return means;
}

// ---- semantic subspace anchor ----------------------------------------------

// Softmax over base classes of (e_j . e_c) / tau.
inline Vector anchor_weights(std::span<const ClassId> base_ids, const EmbeddingTable& embeddings,
                             const ClassId& novel, double tau) {
    if (!(tau > 0.0)) throw ParameterError("subspace_anchor: tau must be positive");
    if (std::find(base_ids.begin(), base_ids.end(), novel) != base_ids.end())
        throw ParameterError("subspace_anchor: class '" + novel + "' is a base class");
    if (base_ids.empty()) throw ParameterError("subspace_anchor: no base classes");
    const Vector& e_c = embeddings.at(novel);
    std::vector<double> scores;
    scores.reserve(base_ids.size());
    for (const auto& j : base_ids) scores.push_back(dot(embeddings.at(j).span(), e_c.span()));
    return softmax_with_temperature(std::span<const double>(scores), tau);
}

// l_c = sum_j w_j eta_j with w from anchor_weights; rows of base_weights follow base_ids.
inline Vector subspace_anchor(const Matrix& base_weights, std::span<const ClassId> base_ids,
                              const EmbeddingTable& embeddings, const ClassId& novel,
                              double tau) {
    if (base_weights.rows() != base_ids.size())
        throw ShapeError("subspace_anchor: base weight rows do not match base ids");
    const Vector w = anchor_weights(base_ids, embeddings, novel, tau);
    Vector anchor(base_weights.cols());
    for (std::size_t j = 0; j < base_ids.size(); ++j)
        axpy(w[j], base_weights.row(j), anchor.span());
    return anchor;
}

}  // namespace fscil
