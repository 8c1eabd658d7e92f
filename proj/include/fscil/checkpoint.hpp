#pragma once

// Checkpoint layout:
//   line 1    JSON header (single line) terminated by '\n'
//   payload   every ParamSet scalar as a little-endian IEEE-754 double, in
//             ParamSet iteration order
//
// The header carries shapes, class ids, the input dim, hyperparameters and seed.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>

#include "json.hpp"

#include "fscil/errors.hpp"
#include "fscil/model.hpp"
#include "fscil/text_format.hpp"

namespace fscil {

struct Checkpoint {
    Model model;
    nlohmann::json hyper = nlohmann::json::object();
    std::uint64_t seed = 0;
};

inline constexpr const char* kCheckpointFormat = "fscil-ckpt v1";

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    const ParamSet params = ckpt.model.params();
    nlohmann::json header;
    header["format"] = kCheckpointFormat;
    header["input_dim"] = ckpt.model.backbone.input_dim();
    header["class_ids"] = ckpt.model.classifier.ids();
    header["feature_dim"] = ckpt.model.classifier.feature_dim();
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& [name, m] : params)
        shapes.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    header["params"] = shapes;
    header["hyper"] = ckpt.hyper;
    header["seed"] = ckpt.seed;

    std::string out = header.dump();
    out += '\n';
    out.reserve(out.size() + params.scalar_count() * 8);
    for (const auto& [name, m] : params) {
        for (double v : m.flat()) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) out += static_cast<char>((bits >> (8 * b)) & 0xFFu);
        }
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
    const std::size_t nl = bytes.find('\n');
    if (nl == std::string::npos) throw FormatError("checkpoint: missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad header: ") + e.what());
    }
    if (header.value("format", "") != kCheckpointFormat)
        throw FormatError("checkpoint: unknown format");

    std::size_t pos = nl + 1;
    auto read_matrix = [&](std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        for (auto& v : m.flat()) {
            if (pos + 8 > bytes.size()) throw FormatError("checkpoint: truncated payload");
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + b])) << (8 * b);
            pos += 8;
            v = std::bit_cast<double>(bits);
        }
        return m;
    };

    Checkpoint ckpt;
    try {
        Backbone backbone(header.at("input_dim").get<std::size_t>());
        const auto& shapes = header.at("params");
        std::size_t l = 0;
        Matrix eta;
        bool have_eta = false;
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            const auto name = shapes[i].at("name").get<std::string>();
            const auto rows = shapes[i].at("rows").get<std::size_t>();
            const auto cols = shapes[i].at("cols").get<std::size_t>();
            if (name == "eta") {
                eta = read_matrix(rows, cols);
                have_eta = true;
            } else if (name == Backbone::weight_name(l)) {
                Matrix w = read_matrix(rows, cols);
                if (i + 1 >= shapes.size() || shapes[i + 1].at("name") != Backbone::bias_name(l))
                    throw FormatError("checkpoint: layer without bias");
                ++i;
                Matrix b = read_matrix(shapes[i].at("rows").get<std::size_t>(),
                                       shapes[i].at("cols").get<std::size_t>());
                backbone.add_layer(DenseLayer{std::move(w), std::move(b)});
                ++l;
            } else {
                throw FormatError("checkpoint: unexpected parameter " + name);
            }
        }
        if (!have_eta) throw FormatError("checkpoint: missing classifier weights");
        ckpt.model.backbone = std::move(backbone);
        ckpt.model.classifier =
            Classifier(header.at("class_ids").get<std::vector<ClassId>>(), std::move(eta));
        ckpt.hyper = header.value("hyper", nlohmann::json::object());
        ckpt.seed = header.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad header: ") + e.what());
    } catch (const ShapeError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    if (pos != bytes.size()) throw FormatError("checkpoint: trailing bytes after payload");
    return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    text_format::write_file(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return deserialize_checkpoint(text_format::read_file(path));
}

}  // namespace fscil
