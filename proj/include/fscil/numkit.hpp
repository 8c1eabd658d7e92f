#pragma once

// ---------------------------------------------------------------------------
// numkit: the small deterministic numeric core everything else is built on.
//
//   Vector / Matrix   dense f64 storage, row-major matrices
//   ParamSet          named parameter tensors with insertion-ordered iteration
//   SeededRng         counter-based splitmix64 stream, platform independent
//   softmax_with_temperature, cosine_similarity, sgd_step, gradcheck
//
// Gradients in this project are derived by hand per loss; gradcheck is the
// central-difference harness that validates each of them.
// ---------------------------------------------------------------------------

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fscil/errors.hpp"

namespace fscil {

class Vector {
public:
    Vector() = default;
    explicit Vector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
    Vector(std::initializer_list<double> init) : values_(init) {}
    explicit Vector(std::vector<double> values) : values_(std::move(values)) {}

    std::size_t dim() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    std::span<double> span() noexcept { return values_; }
    std::span<const double> span() const noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    auto begin() noexcept { return values_.begin(); }
    auto end() noexcept { return values_.end(); }
    auto begin() const noexcept { return values_.begin(); }
    auto end() const noexcept { return values_.end(); }

    bool all_finite() const {
        return std::all_of(values_.begin(), values_.end(),
                           [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Vector&, const Vector&) = default;

private:
    std::vector<double> values_;
};

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
        : rows_(rows), cols_(cols), values_(std::move(values)) {
        if (values_.size() != rows_ * cols_)
            throw ShapeError("Matrix: value count does not match rows*cols");
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return values_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const {
        return {values_.data() + r * cols_, cols_};
    }
    Vector row_vector(std::size_t r) const {
        auto s = row(r);
        return Vector(std::vector<double>(s.begin(), s.end()));
    }

    std::span<double> flat() noexcept { return values_; }
    std::span<const double> flat() const noexcept { return values_; }

    void append_row(std::span<const double> r) {
        if (rows_ != 0 && r.size() != cols_)
            throw ShapeError("Matrix::append_row: width mismatch");
        if (rows_ == 0) cols_ = r.size();
        values_.insert(values_.end(), r.begin(), r.end());
        ++rows_;
    }

    bool same_shape(const Matrix& o) const noexcept {
        return rows_ == o.rows_ && cols_ == o.cols_;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

// ---- small dense helpers -------------------------------------------------

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }
inline double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("distance: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// y += a * x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size()) throw ShapeError("axpy: dimension mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

// ---- ParamSet ------------------------------------------------------------

// Biases are stored as 1xN matrices so a ParamSet is homogeneous.
class ParamSet {
public:
    using Entry = std::pair<std::string, Matrix>;

    void add(std::string name, Matrix value) {
        if (find(name) != nullptr) throw ParameterError("ParamSet: duplicate name " + name);
        entries_.emplace_back(std::move(name), std::move(value));
    }

    Matrix* find(const std::string& name) {
        for (auto& e : entries_)
            if (e.first == name) return &e.second;
        return nullptr;
    }
    const Matrix* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.first == name) return &e.second;
        return nullptr;
    }
    Matrix& at(const std::string& name) {
        if (auto* m = find(name)) return *m;
        throw ParameterError("ParamSet: no parameter named " + name);
    }
    const Matrix& at(const std::string& name) const {
        if (const auto* m = find(name)) return *m;
        throw ParameterError("ParamSet: no parameter named " + name);
    }

    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t scalar_count() const noexcept {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.second.size();
        return n;
    }

    auto begin() noexcept { return entries_.begin(); }
    auto end() noexcept { return entries_.end(); }
    auto begin() const noexcept { return entries_.begin(); }
    auto end() const noexcept { return entries_.end(); }
    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }

    // Same names in the same order with the same shapes.
    bool congruent(const ParamSet& o) const {
        if (entries_.size() != o.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].first != o.entries_[i].first) return false;
            if (!entries_[i].second.same_shape(o.entries_[i].second)) return false;
        }
        return true;
    }

    // Zero-filled set with this set's names and shapes.
    ParamSet zeros_like() const {
        ParamSet z;
        for (const auto& [name, m] : entries_) z.add(name, Matrix(m.rows(), m.cols()));
        return z;
    }

    // this += scale * other (congruent sets only).
    void accumulate(const ParamSet& other, double scale = 1.0) {
        if (!congruent(other)) throw ShapeError("ParamSet::accumulate: incongruent sets");
        for (std::size_t i = 0; i < entries_.size(); ++i)
            axpy(scale, other.entries_[i].second.flat(), entries_[i].second.flat());
    }

    friend bool operator==(const ParamSet&, const ParamSet&) = default;

private:
    std::vector<Entry> entries_;
};

// ---- SeededRng -----------------------------------------------------------

// Counter-based generator: draw n is splitmix64(seed, n). Integer and uniform
// draws are bit-identical everywhere; normal draws go through libm log/cos.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() {
        return mix(seed_ ^ mix(counter_++ * 0xD1B54A32D192ED03ULL + 0x632BE59BD9B4E019ULL));
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ParameterError("SeededRng::below: empty range");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r < limit) return r % n;
        }
    }

    // Box-Muller; consumes two uniform draws per call.
    double normal() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream keyed by a label.
    SeededRng fork(std::uint64_t stream) const { return SeededRng(mix(seed_ ^ mix(stream))); }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

// ---- primitives ------------------------------------------------------------

inline Vector softmax_with_temperature(std::span<const double> scores, double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau))
        throw ParameterError("softmax_with_temperature: tau must be positive");
    if (scores.empty()) throw ParameterError("softmax_with_temperature: empty scores");
    double mx = -std::numeric_limits<double>::infinity();
    for (double s : scores) {
        if (!std::isfinite(s)) throw NumericError("softmax_with_temperature: non-finite score");
        mx = std::max(mx, s);
    }
    Vector out(scores.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp((scores[i] - mx) / tau);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

inline Vector softmax_with_temperature(const Vector& scores, double tau) {
    return softmax_with_temperature(scores.span(), tau);
}

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw ShapeError("cosine_similarity: dimension mismatch");
    const double nu = norm(u);
    const double nv = norm(v);
    if (!(nu > 0.0) || !(nv > 0.0))
        throw DegenerateVectorError("cosine_similarity: zero-norm input");
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

inline double cosine_similarity(const Vector& u, const Vector& v) {
    return cosine_similarity(u.span(), v.span());
}

// p <- p - lr * (g + weight_decay * p)
inline ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double lr,
                         double weight_decay = 0.0) {
    if (!params.congruent(grads)) throw ShapeError("sgd_step: params/grads mismatch");
    if (!(lr >= 0.0) || !(weight_decay >= 0.0))
        throw ParameterError("sgd_step: lr and weight_decay must be non-negative");
    ParamSet out = params;
    for (std::size_t e = 0; e < out.size(); ++e) {
        auto p = out.entry(e).second.flat();
        auto g = grads.entry(e).second.flat();
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!std::isfinite(g[i])) throw NumericError("sgd_step: non-finite gradient");
            p[i] -= lr * (g[i] + weight_decay * p[i]);
        }
    }
    return out;
}

struct LossAndGrad {
    double value = 0.0;
    ParamSet grads;
};

using LossFn = std::function<LossAndGrad(const ParamSet&)>;

struct GradCheckResult {
    double max_relative_error = 0.0;  // worst tensor, norm-wise
    std::string worst_param;
    double max_abs_error = 0.0;             // worst single coordinate
    double max_coordinate_relative_error = 0.0;  // diagnostic only, see below
};

// Central differences on every coordinate. The headline metric is computed
// per parameter tensor as ||analytic - numeric|| / (||analytic|| + ||numeric||)
// and maximised over tensors (zero when both norms vanish).
//
// A coordinate-wise ratio is also reported, but it is not a reliable gate: a
// one-ulp change in a loss of size L moves the difference quotient by about
// ulp(L) / (2 eps), so coordinates with |g| below ~1e-5 * L look wrong at
// eps = 1e-6 even when exact.
inline GradCheckResult gradcheck_detailed(const LossFn& loss, const ParamSet& params,
                                          double epsilon) {
    if (!(epsilon > 0.0)) throw ParameterError("gradcheck: epsilon must be positive");
    const LossAndGrad base = loss(params);
    if (!std::isfinite(base.value)) throw NumericError("gradcheck: non-finite loss");
    if (!params.congruent(base.grads)) throw ShapeError("gradcheck: gradient shape mismatch");

    GradCheckResult result;
    ParamSet probe = params;
    for (std::size_t e = 0; e < probe.size(); ++e) {
        auto coords = probe.entry(e).second.flat();
        auto analytic = base.grads.entry(e).second.flat();
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < coords.size(); ++i) {
            const double orig = coords[i];
            coords[i] = orig + epsilon;
            const double up = loss(probe).value;
            coords[i] = orig - epsilon;
            const double down = loss(probe).value;
            coords[i] = orig;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("gradcheck: non-finite loss under perturbation");
            const double numeric = (up - down) / (2.0 * epsilon);
            const double d = analytic[i] - numeric;
            diff2 += d * d;
            a2 += analytic[i] * analytic[i];
            n2 += numeric * numeric;
            result.max_abs_error = std::max(result.max_abs_error, std::abs(d));
            result.max_coordinate_relative_error =
                std::max(result.max_coordinate_relative_error,
                         std::abs(d) / std::max(1e-12, std::abs(analytic[i]) + std::abs(numeric)));
        }
        const double denom = std::sqrt(a2) + std::sqrt(n2);
        const double err = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
        if (err > result.max_relative_error || result.worst_param.empty()) {
            result.max_relative_error = std::max(result.max_relative_error, err);
            result.worst_param = probe.entry(e).first;
        }
    }
    return result;
}

inline double gradcheck(const LossFn& loss, const ParamSet& params, double epsilon) {
    return gradcheck_detailed(loss, params, epsilon).max_relative_error;
}

}  // namespace fscil
