#pragma once

// Shared reader/writer for the line-oriented "fscil-* v1" text files:
//
//   <magic> v1 <num_rows> <dim>\n
//   <label>\t<f_1> <f_2> ... <f_dim>\n      (one per row)
//
// Floats are written as %.16e (17 significant digits) so values round-trip.

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fscil/errors.hpp"
#include "fscil/numkit.hpp"

namespace fscil::text_format {

struct Row {
    std::string label;
    Vector values;
};

struct Document {
    std::size_t dim = 0;
    std::vector<Row> rows;
};

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.16e", v);
    return buf;
}

inline std::string write(std::string_view magic, const Document& doc) {
    std::string out;
    out += std::string(magic) + " v1 " + std::to_string(doc.rows.size()) + " " +
           std::to_string(doc.dim) + "\n";
    for (const auto& r : doc.rows) {
        if (r.label.find('\t') != std::string::npos || r.label.find('\n') != std::string::npos)
            throw FormatError("label contains a tab or newline: " + r.label);
        if (r.values.dim() != doc.dim) throw FormatError("row dim differs from header dim");
        out += r.label;
        out += '\t';
        for (std::size_t i = 0; i < r.values.dim(); ++i) {
            if (i) out += ' ';
            out += format_real(r.values[i]);
        }
        out += '\n';
    }
    return out;
}

inline Document parse(std::string_view magic, const std::string& text) {
    Document doc;
    std::size_t pos = 0;
    auto next_line = [&](std::string& line) {
        if (pos >= text.size()) return false;
        const std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) {
            line = text.substr(pos);
            pos = text.size();
        } else {
            line = text.substr(pos, nl - pos);
            pos = nl + 1;
        }
        return true;
    };

    std::string line;
    if (!next_line(line)) throw FormatError("empty file");
    std::istringstream header(line);
    std::string got_magic, version;
    long long count = -1, dim = -1;
    header >> got_magic >> version >> count >> dim;
    std::string trailing;
    if (!header || got_magic != magic || version != "v1" || count < 0 || dim <= 0 ||
        (header >> trailing))
        throw FormatError("bad header, expected '" + std::string(magic) +
                          " v1 <count> <dim>': " + line);
    doc.dim = static_cast<std::size_t>(dim);

    std::size_t lineno = 1;
    while (next_line(line)) {
        ++lineno;
        if (line.empty() && pos >= text.size()) break;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw FormatError("line " + std::to_string(lineno) + ": missing tab separator");
        Row row;
        row.label = line.substr(0, tab);
        std::vector<double> vals;
        const char* p = line.c_str() + tab + 1;
        const char* end = line.c_str() + line.size();
        while (p < end) {
            while (p < end && *p == ' ') ++p;
            if (p >= end) break;
            char* stop = nullptr;
            errno = 0;
            const double v = std::strtod(p, &stop);
            if (stop == p || (stop < end && *stop != ' '))
                throw FormatError("line " + std::to_string(lineno) + ": unparsable number");
            if (!std::isfinite(v))
                throw FormatError("line " + std::to_string(lineno) + ": non-finite value");
            vals.push_back(v);
            p = stop;
        }
        if (vals.size() != doc.dim)
            throw FormatError("line " + std::to_string(lineno) + ": expected " +
                              std::to_string(doc.dim) + " values, found " +
                              std::to_string(vals.size()));
        row.values = Vector(std::move(vals));
        doc.rows.push_back(std::move(row));
    }
    if (doc.rows.size() != static_cast<std::size_t>(count))
        throw FormatError("header declares " + std::to_string(count) + " rows, file has " +
                          std::to_string(doc.rows.size()));
    return doc;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out << contents;
    if (!out) throw FormatError("write failed for " + path);
}

}  // namespace fscil::text_format
