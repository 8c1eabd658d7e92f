#pragma once

// Session evaluation (joint and restricted-argmax accuracies), the Delta
// interference metric, and CSV / markdown emission of session tables.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fscil/errors.hpp"
#include "fscil/model.hpp"
#include "fscil/semantic_space.hpp"

namespace fscil {

struct ClassCounts {
    std::size_t correct = 0;
    std::size_t total = 0;
    friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

struct SessionMetrics {
    std::size_t session = 0;
    double joint_accuracy = 0.0;
    double base_accuracy = 0.0;   // base queries, argmax over all allowed classes
    double novel_accuracy = 0.0;  // novel queries, argmax over all allowed classes
    double base_individual_accuracy = 0.0;   // base queries, argmax over base rows only
    double novel_individual_accuracy = 0.0;  // novel queries, argmax over novel rows only
    std::size_t correct = 0;
    std::size_t total = 0;
    std::size_t base_correct = 0, base_total = 0;
    std::size_t novel_correct = 0, novel_total = 0;
    std::size_t base_individual_correct = 0, novel_individual_correct = 0;
    std::map<ClassId, ClassCounts> per_class;

    friend bool operator==(const SessionMetrics&, const SessionMetrics&) = default;
};

namespace detail {

inline double ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

// Index into `rows` of the highest score; ties go to the lowest classifier row.
inline std::size_t restricted_argmax(const Vector& logits, std::span<const std::size_t> rows) {
    std::size_t best = rows.front();
    for (std::size_t r : rows)
        if (logits[r] > logits[best] || (logits[r] == logits[best] && r < best)) best = r;
    return best;
}

}  // namespace detail

inline SessionMetrics evaluate_session(const Model& model, std::span<const Example> query,
                                       std::span<const ClassId> allowed,
                                       std::span<const ClassId> base_classes,
                                       std::size_t session = 0, unsigned threads = 1) {
    const std::set<ClassId> allowed_set(allowed.begin(), allowed.end());
    const std::set<ClassId> base_set(base_classes.begin(), base_classes.end());
    std::vector<std::size_t> all_rows, base_rows, novel_rows;
    for (const auto& id : allowed) {
        const std::size_t r = model.classifier.row_of(id);
        all_rows.push_back(r);
        (base_set.count(id) ? base_rows : novel_rows).push_back(r);
    }
    if (all_rows.empty()) throw ParameterError("evaluate_session: no allowed classes");
    for (const auto& ex : query)
        if (!allowed_set.count(ex.y))
            throw ProtocolError("evaluate_session: query label '" + ex.y +
                                "' outside the allowed class set");

    SessionMetrics m;
    m.session = session;

    // Shards reduce by summing integer counts, so the result is independent
    // of the thread count.
    auto run_shard = [&](std::size_t begin, std::size_t end, SessionMetrics& out) {
        for (std::size_t i = begin; i < end; ++i) {
            const Example& ex = query[i];
            const Vector logits = forward_logits(model.backbone, model.classifier, ex.x);
            const std::size_t truth = model.classifier.row_of(ex.y);
            const bool hit = detail::restricted_argmax(logits, all_rows) == truth;
            auto& pc = out.per_class[ex.y];
            ++pc.total;
            ++out.total;
            if (hit) { ++pc.correct; ++out.correct; }
            if (base_set.count(ex.y)) {
                ++out.base_total;
                if (hit) ++out.base_correct;
                if (detail::restricted_argmax(logits, base_rows) == truth) ++out.base_individual_correct;
            } else {
                ++out.novel_total;
                if (hit) ++out.novel_correct;
                if (detail::restricted_argmax(logits, novel_rows) == truth) ++out.novel_individual_correct;
            }
        }
    };

    const std::size_t n = query.size();
    const unsigned shards = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n / 64 + 1)));
    if (shards == 1) {
        run_shard(0, n, m);
    } else {
        std::vector<SessionMetrics> parts(shards);
        std::vector<std::thread> pool;
        for (unsigned s = 0; s < shards; ++s)
            pool.emplace_back(run_shard, n * s / shards, n * (s + 1) / shards, std::ref(parts[s]));
        for (auto& th : pool) th.join();
        for (const auto& p : parts) {
            m.total += p.total;
            m.correct += p.correct;
            m.base_total += p.base_total;
            m.base_correct += p.base_correct;
            m.novel_total += p.novel_total;
            m.novel_correct += p.novel_correct;
            m.base_individual_correct += p.base_individual_correct;
            m.novel_individual_correct += p.novel_individual_correct;
            for (const auto& [id, c] : p.per_class) {
                m.per_class[id].correct += c.correct;
                m.per_class[id].total += c.total;
            }
        }
    }

    m.joint_accuracy = detail::ratio(m.correct, m.total);
    m.base_accuracy = detail::ratio(m.base_correct, m.base_total);
    m.novel_accuracy = detail::ratio(m.novel_correct, m.novel_total);
    m.base_individual_accuracy = detail::ratio(m.base_individual_correct, m.base_total);
    m.novel_individual_accuracy = detail::ratio(m.novel_individual_correct, m.novel_total);
    return m;
}

// ---- Delta -------------------------------------------------------------------

struct DeltaInputs {
    double base_individual = 0.0;
    double base_joint = 0.0;
    double novel_individual = 0.0;
    double novel_joint = 0.0;
};

// Percentage points; negative when joint evaluation loses accuracy.
inline double delta_metric(const DeltaInputs& d) {
    for (double v : {d.base_individual, d.base_joint, d.novel_individual, d.novel_joint})
        if (!(v >= 0.0 && v <= 1.0)) throw ParameterError("delta_metric: inputs must lie in [0, 1]");
    return 100.0 * ((d.base_joint - d.base_individual) + (d.novel_joint - d.novel_individual)) / 2.0;
}

inline DeltaInputs delta_inputs(const SessionMetrics& m) {
    return DeltaInputs{m.base_individual_accuracy, m.base_accuracy, m.novel_individual_accuracy,
                       m.novel_accuracy};
}

// ---- formatting ----------------------------------------------------------------

inline std::string format_fixed(double v, int decimals = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s = buf;
    if (s == "-0.00") s = "0.00";
    return s;
}

inline std::string format_signed(double v) {
    std::string s = format_fixed(v);
    return (v >= 0.0 && s[0] != '-') ? "+" + s : s;
}

// "74.00 ± 0.17"
inline std::string format_accuracy_with_spread(double mean_percent, double std_percent) {
    return format_fixed(mean_percent) + " ± " + format_fixed(std_percent);
}

// "-6.92%"
inline std::string format_delta(double delta_percent) { return format_fixed(delta_percent) + "%"; }

// ---- report --------------------------------------------------------------------

// One table row: a method (or ablation setting) evaluated under one or more
// seeds. Each run is the ordered list of its session metrics.
struct ReportRow {
    std::string method;
    std::vector<std::vector<SessionMetrics>> runs;
};

enum class ReportFormat { csv, markdown };

inline ReportFormat parse_report_format(const std::string& s) {
    if (s == "csv") return ReportFormat::csv;
    if (s == "markdown" || s == "md") return ReportFormat::markdown;
    throw ParameterError("unknown report format '" + s + "'");
}

struct ReportOptions {
    std::string key_header = "Method/Session No.";
    bool improvement = true;
    std::string reference_method;  // empty: the last row
    nlohmann::json metadata = nlohmann::json::object();
};

struct RowSummary {
    std::string method;
    std::vector<double> mean_percent;  // per session
    std::vector<double> std_percent;   // sample std across runs, 0 for one run
    double final_delta_percent = 0.0;  // mean over runs
};

inline RowSummary summarize_row(const ReportRow& row) {
    if (row.runs.empty()) throw ParameterError("report: row '" + row.method + "' has no runs");
    const std::size_t sessions = row.runs.front().size();
    if (sessions == 0) throw ParameterError("report: row '" + row.method + "' has no sessions");
    for (const auto& r : row.runs)
        if (r.size() != sessions) throw ParameterError("report: runs disagree on session count");
    RowSummary s;
    s.method = row.method;
    const double n = static_cast<double>(row.runs.size());
    for (std::size_t t = 0; t < sessions; ++t) {
        double sum = 0.0;
        for (const auto& r : row.runs) sum += 100.0 * r[t].joint_accuracy;
        const double mean = sum / n;
        double ss = 0.0;
        for (const auto& r : row.runs) ss += std::pow(100.0 * r[t].joint_accuracy - mean, 2);
        s.mean_percent.push_back(mean);
        s.std_percent.push_back(row.runs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0);
    }
    double dsum = 0.0;
    for (const auto& r : row.runs) dsum += delta_metric(delta_inputs(r.back()));
    s.final_delta_percent = dsum / n;
    return s;
}

inline std::string emit_report(std::span<const ReportRow> rows, ReportFormat format,
                               const ReportOptions& opts = {}) {
    if (rows.empty()) throw ParameterError("emit_report: no metrics");
    std::vector<RowSummary> sums;
    for (const auto& r : rows) sums.push_back(summarize_row(r));
    const std::size_t sessions = sums.front().mean_percent.size();
    for (const auto& s : sums)
        if (s.mean_percent.size() != sessions)
            throw ParameterError("emit_report: rows disagree on session count");

    // A base session plus exactly one incremental session uses the
    // Accuracy / Delta layout.
    const bool single_session = sessions == 2;

    std::size_t ref = sums.size() - 1;
    if (!opts.reference_method.empty()) {
        auto it = std::find_if(sums.begin(), sums.end(),
                               [&](const RowSummary& s) { return s.method == opts.reference_method; });
        if (it == sums.end()) throw ParameterError("emit_report: unknown reference method");
        ref = static_cast<std::size_t>(it - sums.begin());
    }
    auto improvement_cell = [&](std::size_t i) -> std::string {
        if (i == ref) return "---";
        return format_signed(sums[ref].mean_percent.back() - sums[i].mean_percent.back());
    };

    std::ostringstream out;
    if (format == ReportFormat::csv) {
        if (single_session) {
            out << "method,accuracy,delta\n";
            for (const auto& s : sums)
                out << s.method << ',' << format_accuracy_with_spread(s.mean_percent.back(), s.std_percent.back())
                    << ',' << format_delta(s.final_delta_percent) << '\n';
        } else {
            out << "method";
            for (std::size_t t = 0; t < sessions; ++t) out << ",session_" << t;
            if (opts.improvement) out << ",improvement";
            out << '\n';
            for (std::size_t i = 0; i < sums.size(); ++i) {
                out << sums[i].method;
                for (double v : sums[i].mean_percent) out << ',' << format_fixed(v);
                if (opts.improvement) out << ',' << improvement_cell(i);
                out << '\n';
            }
        }
        nlohmann::json meta = opts.metadata;
        nlohmann::json full = nlohmann::json::object();
        for (const auto& s : sums) full[s.method] = s.mean_percent;
        meta["full_precision_percent"] = full;
        out << "# " << meta.dump() << '\n';
        return out.str();
    }

    out << "---\n" << opts.metadata.dump(2) << "\n---\n\n";
    if (single_session) {
        out << "| Method | Accuracy | Δ |\n|---|---|---|\n";
        for (const auto& s : sums)
            out << "| " << s.method << " | "
                << format_accuracy_with_spread(s.mean_percent.back(), s.std_percent.back()) << " | "
                << format_delta(s.final_delta_percent) << " |\n";
        return out.str();
    }
    out << "| " << opts.key_header;
    for (std::size_t t = 0; t < sessions; ++t) out << " | " << t;
    if (opts.improvement) out << " | Improvement";
    out << " |\n|---";
    for (std::size_t t = 0; t < sessions + (opts.improvement ? 1 : 0); ++t) out << "|---";
    out << "|\n";
    for (std::size_t i = 0; i < sums.size(); ++i) {
        out << "| " << sums[i].method;
        for (double v : sums[i].mean_percent) out << " | " << format_fixed(v);
        if (opts.improvement) out << " | " << improvement_cell(i);
        out << " |\n";
    }
    return out.str();
}

inline std::string emit_report(const ReportRow& row, ReportFormat format, const ReportOptions& opts = {}) {
    return emit_report(std::span<const ReportRow>(&row, 1), format, opts);
}

// ---- CSV reading -----------------------------------------------------------------

struct ParsedCsvReport {
    std::vector<std::string> header;
    struct Row {
        std::string method;
        std::vector<std::string> cells;
    };
    std::vector<Row> rows;
    nlohmann::json metadata = nlohmann::json::object();

    // Leading number of a cell ("74.00 ± 0.17" -> 74.0, "+1.2" -> 1.2); empty for "---".
    static std::optional<double> number(const std::string& cell) {
        const char* p = cell.c_str();
        char* end = nullptr;
        const double v = std::strtod(p, &end);
        if (end == p) return std::nullopt;
        return v;
    }
};

inline ParsedCsvReport parse_csv_report(const std::string& text) {
    ParsedCsvReport r;
    std::istringstream in(text);
    std::string line;
    auto split = [](const std::string& s) {
        std::vector<std::string> parts;
        std::string cur;
        for (char ch : s) {
            if (ch == ',') { parts.push_back(cur); cur.clear(); }
            else cur += ch;
        }
        parts.push_back(cur);
        return parts;
    };
    bool have_header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.rfind("# ", 0) == 0) {
            try {
                r.metadata = nlohmann::json::parse(line.substr(2));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(std::string("report metadata: ") + e.what());
            }
            continue;
        }
        auto parts = split(line);
        if (!have_header) {
            r.header = std::move(parts);
            have_header = true;
            continue;
        }
        if (parts.size() != r.header.size()) throw FormatError("report row width differs from header");
        ParsedCsvReport::Row row;
        row.method = parts.front();
        row.cells.assign(parts.begin() + 1, parts.end());
        r.rows.push_back(std::move(row));
    }
    if (!have_header) throw FormatError("report: missing header");
    return r;
}

}  // namespace fscil
