#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fscil/numkit.hpp"
#include "test_util.hpp"

using namespace fscil;

namespace {

// exp at extended precision, normalised.
std::vector<long double> softmax_oracle(const std::vector<long double>& s, long double tau) {
    std::vector<long double> e;
    long double sum = 0;
    for (auto v : s) {
        e.push_back(std::exp(v / tau));
        sum += e.back();
    }
    for (auto& v : e) v /= sum;
    return e;
}

ParamSet single(double v) {
    ParamSet p;
    Matrix m(1, 1);
    m(0, 0) = v;
    p.add("p", m);
    return p;
}

}  // namespace

TEST(Softmax, UniformScores) {
    const Vector w = softmax_with_temperature(Vector{1, 1, 1}, 1.0);
    for (double v : w) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, TinyTemperatureKeepsArgmax) {
    const Vector w = softmax_with_temperature(Vector{5, 0}, 1e-6);
    EXPECT_NEAR(w[0], 1.0, 1e-15);
    EXPECT_NEAR(w[1], 0.0, 1e-15);
}

TEST(Softmax, MatchesExtendedPrecisionOracle) {
    const Vector w = softmax_with_temperature(Vector{0.3, -0.2, 1.1}, 0.5);
    const auto o = softmax_oracle({0.3L, -0.2L, 1.1L}, 0.5L);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(w[i], static_cast<double>(o[i]), 1e-15);
}

TEST(Softmax, RejectsBadInput) {
    EXPECT_THROW(softmax_with_temperature(Vector{1, 2}, 0.0), ParameterError);
    EXPECT_THROW(softmax_with_temperature(Vector{1, 2}, -1.0), ParameterError);
    EXPECT_THROW(softmax_with_temperature(Vector{}, 1.0), ParameterError);
}

TEST(Softmax, PropertySumShiftArgmax) {
    SeededRng rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.below(12);
        const Vector s = testutil::gaussian(n, rng, 3.0);
        const double tau = std::exp(rng.uniform(-4.0, 3.0));
        const Vector w = softmax_with_temperature(s, tau);
        EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);

        Vector shifted = s;
        const double c = rng.uniform(-50.0, 50.0);
        for (auto& v : shifted) v += c;
        const Vector w2 = softmax_with_temperature(shifted, tau);
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(w[i], w2[i], 1e-12);

        const auto am_s = std::max_element(s.begin(), s.end()) - s.begin();
        const auto am_w = std::max_element(w.begin(), w.end()) - w.begin();
        EXPECT_EQ(am_s, am_w);
    }
}

TEST(Cosine, Examples) {
    EXPECT_DOUBLE_EQ(cosine_similarity(Vector{3, 4}, Vector{3, 4}), 1.0);
    EXPECT_DOUBLE_EQ(cosine_similarity(Vector{1, 0}, Vector{0, 1}), 0.0);
    const long double num = 1.0L * -1 + 2.0L * 0 + 3.0L * 2;
    const long double oracle = num / (std::sqrt(14.0L) * std::sqrt(5.0L));
    EXPECT_NEAR(cosine_similarity(Vector{1, 2, 3}, Vector{-1, 0, 2}), static_cast<double>(oracle), 1e-15);
}

TEST(Cosine, Errors) {
    EXPECT_THROW(cosine_similarity(Vector{0, 0}, Vector{1, 0}), DegenerateVectorError);
    EXPECT_THROW(cosine_similarity(Vector{1, 0}, Vector{1, 0, 0}), ShapeError);
}

TEST(Cosine, PropertySymmetricAndScaleInvariant) {
    SeededRng rng(11);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.below(10);
        const Vector u = testutil::gaussian(n, rng), v = testutil::gaussian(n, rng);
        const double c = cosine_similarity(u, v);
        EXPECT_NEAR(c, cosine_similarity(v, u), 1e-15);
        Vector au = u, bv = v;
        const double a = std::exp(rng.uniform(-5, 5)), b = std::exp(rng.uniform(-5, 5));
        for (auto& x : au) x *= a;
        for (auto& x : bv) x *= b;
        EXPECT_NEAR(cosine_similarity(au, bv), c, 1e-12);
        EXPECT_LE(std::abs(c), 1.0);
    }
}

TEST(Sgd, Examples) {
    EXPECT_DOUBLE_EQ(sgd_step(single(1.0), single(0.0), 0.1).at("p")(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(sgd_step(single(1.0), single(0.5), 0.1).at("p")(0, 0), 0.95);
    EXPECT_DOUBLE_EQ(sgd_step(single(1.0), single(0.0), 0.1, 0.1).at("p")(0, 0), 0.99);
}

TEST(Sgd, Errors) {
    ParamSet other;
    other.add("q", Matrix(1, 1));
    EXPECT_THROW(sgd_step(single(1.0), other, 0.1), ShapeError);
    EXPECT_THROW(sgd_step(single(1.0), single(0.0), -0.1), ParameterError);
    EXPECT_THROW(sgd_step(single(1.0), single(std::nan("")), 0.1), NumericError);
}

TEST(Sgd, ZeroLearningRateIsIdentity) {
    SeededRng rng(3);
    ParamSet p;
    Matrix a(3, 4), b(1, 4);
    for (auto& v : a.flat()) v = rng.normal();
    for (auto& v : b.flat()) v = rng.normal();
    p.add("a", a);
    p.add("b", b);
    ParamSet g = p;
    for (std::size_t e = 0; e < g.size(); ++e)
        for (auto& v : g.entry(e).second.flat()) v = rng.normal();
    EXPECT_EQ(sgd_step(p, g, 0.0), p);
}

TEST(Rng, SameSeedSameStream) {
    SeededRng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 1000; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        differs = differs || x != c.next_u64();
    }
    EXPECT_TRUE(differs);
    SeededRng n1(5), n2(5);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(n1.normal(), n2.normal());
}

TEST(Rng, ForksAreIndependentOfParentPosition) {
    SeededRng a(9), b(9);
    for (int i = 0; i < 17; ++i) b.next_u64();
    SeededRng fa = a.fork(3), fb = b.fork(3);
    EXPECT_EQ(fa.next_u64(), fb.next_u64());
    EXPECT_NE(a.fork(3).next_u64(), a.fork(4).next_u64());
}

TEST(Rng, BelowAndShuffle) {
    SeededRng rng(1);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) ++hits[rng.below(7)];
    for (int h : hits) EXPECT_GT(h, 800);
    EXPECT_THROW(rng.below(0), ParameterError);

    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    rng.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Rng, NormalMoments) {
    SeededRng rng(2);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.03);
    EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(GradCheck, QuadraticIsExact) {
    SeededRng rng(4);
    ParamSet p;
    Matrix m(2, 3);
    for (auto& v : m.flat()) v = rng.normal();
    p.add("w", m);
    auto loss = [](const ParamSet& q) {
        LossAndGrad out{squared_norm(q.at("w").flat()), q};
        for (auto& v : out.grads.at("w").flat()) v *= 2.0;
        return out;
    };
    EXPECT_LT(gradcheck(loss, p, 1e-6), 1e-8);
}

TEST(GradCheck, DoubledGradientGivesOneThird) {
    SeededRng rng(5);
    ParamSet p;
    Matrix m(2, 3);
    for (auto& v : m.flat()) v = rng.normal();
    p.add("w", m);
    auto loss = [](const ParamSet& q) {
        LossAndGrad out{squared_norm(q.at("w").flat()), q};
        for (auto& v : out.grads.at("w").flat()) v *= 4.0;
        return out;
    };
    const auto r = gradcheck_detailed(loss, p, 1e-6);
    EXPECT_NEAR(r.max_relative_error, 1.0 / 3.0, 1e-6);
    EXPECT_EQ(r.worst_param, "w");
}

TEST(GradCheck, FlagsSingleWrongCoordinate) {
    ParamSet p;
    Matrix m(1, 4);
    m.flat()[0] = 0.5;
    m.flat()[1] = -1.0;
    m.flat()[2] = 2.0;
    m.flat()[3] = 1.5;
    p.add("w", m);
    auto loss = [](const ParamSet& q) {
        LossAndGrad out{squared_norm(q.at("w").flat()), q};
        for (auto& v : out.grads.at("w").flat()) v *= 2.0;
        out.grads.at("w").flat()[1] *= -1.0;
        return out;
    };
    EXPECT_GT(gradcheck(loss, p, 1e-6), 0.1);
}

TEST(GradCheck, Errors) {
    auto loss = [](const ParamSet& q) { return LossAndGrad{0.0, q}; };
    EXPECT_THROW(gradcheck(loss, single(1.0), 0.0), ParameterError);
    auto bad = [](const ParamSet&) { return LossAndGrad{0.0, single(0.0)}; };
    ParamSet two;
    two.add("a", Matrix(1, 2));
    EXPECT_THROW(gradcheck(bad, two, 1e-6), ShapeError);
}

TEST(ParamSetOps, AccumulateAndCount) {
    ParamSet a;
    a.add("x", Matrix(2, 2, 1.0));
    a.add("y", Matrix(1, 3, 2.0));
    EXPECT_EQ(a.scalar_count(), 7u);
    ParamSet b = a;
    b.accumulate(a, 0.5);
    EXPECT_DOUBLE_EQ(b.at("x")(1, 1), 1.5);
    EXPECT_DOUBLE_EQ(b.at("y")(0, 2), 3.0);
    EXPECT_TRUE(a.congruent(b));
    EXPECT_EQ(a.zeros_like().at("x")(0, 0), 0.0);
    EXPECT_THROW(a.add("x", Matrix(1, 1)), ParameterError);
}
