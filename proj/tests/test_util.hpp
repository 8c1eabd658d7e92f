#pragma once

// Small hand-rolled generators shared by the unit tests.

#include <cstdint>
#include <string>
#include <vector>

#include "fscil/numkit.hpp"
#include "fscil/semantic_space.hpp"

namespace testutil {

inline fscil::Vector gaussian(std::size_t dim, fscil::SeededRng& rng, double scale = 1.0) {
    fscil::Vector v(dim);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

inline std::vector<fscil::ClassId> ids(std::size_t n, const std::string& prefix = "k") {
    std::vector<fscil::ClassId> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
    return out;
}

inline fscil::EmbeddingTable random_table(std::size_t n, std::size_t dim, fscil::SeededRng& rng) {
    std::vector<fscil::Vector> vs;
    for (std::size_t i = 0; i < n; ++i) vs.push_back(gaussian(dim, rng));
    return fscil::EmbeddingTable(ids(n), vs);
}

inline std::vector<double> as_std(const fscil::Vector& v) { return {v.begin(), v.end()}; }

}  // namespace testutil
