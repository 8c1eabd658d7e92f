#pragma once

// Command dispatch for the `fscil` tool. Lives in the library so the test
// suite can drive commands in-process.
//
// Config is a JSON document:
//   {
//     "paths":       {"dataset": ..., "embeddings": ..., "checkpoint": ..., "output_dir": ...},
//     "synthetic":   {num_classes, feature_dim, samples_per_class, class_spread, semantic_noise, semantic_dim},
//     "stream":      {base_classes, sessions, n_way, k_shot, query_per_class, seed},
//     "base":        {alpha, epochs_phase1, epochs_phase2, lr, lr_phase2, batch_size, k,
//                     phase2_keep_ce, mode, mean_momentum, hidden},
//     "incremental": {alpha, beta, gamma, tau, lr, steps, include_ce, use_memory, init,
//                     normalize_embeddings},
//     "ablation":    {"axis": ..., "values": [...], "embedding_sources": {tag: path}},
//     "method":      row label for single-run reports,
//     "seeds":       [1, 2, ...]
//   }
// Every key is optional. Flags override the file.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fscil/checkpoint.hpp"
#include "fscil/errors.hpp"
#include "fscil/eval_report.hpp"
#include "fscil/gradient_suite.hpp"
#include "fscil/model.hpp"
#include "fscil/protocol.hpp"
#include "fscil/semantic_space.hpp"
#include "fscil/trainer.hpp"

namespace fscil::cli {

using nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

// ---- config ------------------------------------------------------------------

struct Paths {
    std::string dataset;     // default <out>/dataset.feat
    std::string embeddings;  // default <out>/embeddings.emb
    std::string checkpoint;  // default <out>/base.ckpt
    std::string output_dir = "fscil_out";
};

struct Ablation {
    std::string axis;
    std::vector<std::string> values;
    std::map<std::string, std::string> embedding_sources;  // tag -> embedding file
};

struct RunConfig {
    Paths paths;
    SyntheticSpec synthetic;
    std::optional<std::uint64_t> synthetic_seed;  // unset: first entry of the seed list
    StreamConfig stream;
    HyperBase base;
    IncrementalHyper incremental;
    Ablation ablation;
    std::string method = "Ours";
    std::vector<std::uint64_t> seeds = {1};
    std::string format = "csv";

    std::string dataset_path() const {
        return paths.dataset.empty() ? (fs::path(paths.output_dir) / "dataset.feat").string() : paths.dataset;
    }
    std::string embeddings_path() const {
        return paths.embeddings.empty() ? (fs::path(paths.output_dir) / "embeddings.emb").string()
                                        : paths.embeddings;
    }
    std::string checkpoint_path() const {
        return paths.checkpoint.empty() ? (fs::path(paths.output_dir) / "base.ckpt").string()
                                        : paths.checkpoint;
    }
};

inline json hyper_to_json(const HyperBase& h) {
    json j = {{"alpha", h.alpha},
              {"epochs_phase1", h.epochs_phase1},
              {"epochs_phase2", h.epochs_phase2},
              {"lr", h.lr},
              {"batch_size", h.batch_size},
              {"phase2_keep_ce", h.phase2_keep_ce},
              {"mode", std::string(to_string(h.mode))},
              {"mean_momentum", h.mean_momentum},
              {"hidden", h.hidden}};
    j["lr_phase2"] = h.lr_phase2 ? json(*h.lr_phase2) : json(nullptr);
    j["k"] = h.k ? json(*h.k) : json(nullptr);
    return j;
}

inline json hyper_to_json(const IncrementalHyper& h) {
    return {{"alpha", h.alpha},
            {"beta", h.beta},
            {"gamma", h.gamma},
            {"tau", h.tau},
            {"lr", h.lr},
            {"steps", h.steps},
            {"include_ce", h.include_ce},
            {"use_memory", h.use_memory},
            {"init", h.init == NovelInit::anchor ? "anchor" : "imprint"},
            {"normalize_embeddings", h.normalize_embeddings}};
}

inline json synthetic_to_json(const SyntheticSpec& s) {
    json j = {{"num_classes", s.num_classes},
              {"feature_dim", s.feature_dim},
              {"samples_per_class", s.samples_per_class},
              {"class_spread", s.class_spread},
              {"semantic_noise", s.semantic_noise}};
    j["semantic_dim"] = s.semantic_dim ? json(*s.semantic_dim) : json(nullptr);
    return j;
}

// Fully resolved config.
inline json to_json(const RunConfig& c) {
    json j;
    j["paths"] = {{"dataset", c.dataset_path()},
                  {"embeddings", c.embeddings_path()},
                  {"checkpoint", c.checkpoint_path()},
                  {"output_dir", c.paths.output_dir}};
    j["synthetic"] = synthetic_to_json(c.synthetic);
    j["synthetic"]["seed"] = c.synthetic_seed.value_or(c.seeds.empty() ? 0 : c.seeds.front());
    j["stream"] = c.stream;
    j["base"] = hyper_to_json(c.base);
    j["incremental"] = hyper_to_json(c.incremental);
    j["ablation"] = {{"axis", c.ablation.axis},
                     {"values", c.ablation.values},
                     {"embedding_sources", c.ablation.embedding_sources}};
    j["method"] = c.method;
    j["seeds"] = c.seeds;
    return j;
}

// FNV-1a over the canonical (key-sorted) dump. File locations are left out so
// the same experiment hashes the same wherever it is written.
inline std::string config_hash(const RunConfig& c) {
    json j = to_json(c);
    j.erase("paths");
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace detail {

template <class T>
void read_opt(const json& j, const char* key, T& out) {
    if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

template <class T>
void read_opt(const json& j, const char* key, std::optional<T>& out) {
    if (j.contains(key)) out = j.at(key).is_null() ? std::nullopt : std::optional<T>(j.at(key).get<T>());
}

inline void check_keys(const json& j, const char* section, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError(std::string("config: '") + section + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* n : known) ok = ok || k == n;
        if (!ok) throw ConfigError(std::string("config: unknown key '") + k + "' in '" + section + "'");
    }
}

}  // namespace detail

inline RunConfig parse_config(const json& j) {
    using detail::check_keys;
    using detail::read_opt;
    RunConfig c;
    try {
        check_keys(j, "<root>", {"paths", "synthetic", "stream", "base", "incremental", "ablation", "method", "seeds"});
        if (j.contains("paths")) {
            const auto& p = j["paths"];
            check_keys(p, "paths", {"dataset", "embeddings", "checkpoint", "output_dir"});
            read_opt(p, "dataset", c.paths.dataset);
            read_opt(p, "embeddings", c.paths.embeddings);
            read_opt(p, "checkpoint", c.paths.checkpoint);
            read_opt(p, "output_dir", c.paths.output_dir);
        }
        if (j.contains("synthetic")) {
            const auto& s = j["synthetic"];
            check_keys(s, "synthetic",
                       {"num_classes", "feature_dim", "samples_per_class", "class_spread", "semantic_noise",
                        "semantic_dim", "seed"});
            read_opt(s, "num_classes", c.synthetic.num_classes);
            read_opt(s, "feature_dim", c.synthetic.feature_dim);
            read_opt(s, "samples_per_class", c.synthetic.samples_per_class);
            read_opt(s, "class_spread", c.synthetic.class_spread);
            read_opt(s, "semantic_noise", c.synthetic.semantic_noise);
            read_opt(s, "semantic_dim", c.synthetic.semantic_dim);
            read_opt(s, "seed", c.synthetic_seed);
        }
        if (j.contains("stream")) {
            check_keys(j["stream"], "stream",
                       {"base_classes", "sessions", "n_way", "k_shot", "query_per_class", "seed"});
            c.stream = j["stream"].get<StreamConfig>();
        }
        if (j.contains("base")) {
            const auto& b = j["base"];
            check_keys(b, "base",
                       {"alpha", "epochs_phase1", "epochs_phase2", "lr", "lr_phase2", "batch_size", "k",
                        "phase2_keep_ce", "mode", "mean_momentum", "hidden"});
            read_opt(b, "alpha", c.base.alpha);
            read_opt(b, "epochs_phase1", c.base.epochs_phase1);
            read_opt(b, "epochs_phase2", c.base.epochs_phase2);
            read_opt(b, "lr", c.base.lr);
            read_opt(b, "lr_phase2", c.base.lr_phase2);
            read_opt(b, "batch_size", c.base.batch_size);
            read_opt(b, "k", c.base.k);
            read_opt(b, "phase2_keep_ce", c.base.phase2_keep_ce);
            if (b.contains("mode")) c.base.mode = parse_similarity_mode(b["mode"].get<std::string>());
            read_opt(b, "mean_momentum", c.base.mean_momentum);
            read_opt(b, "hidden", c.base.hidden);
        }
        if (j.contains("incremental")) {
            const auto& i = j["incremental"];
            check_keys(i, "incremental",
                       {"alpha", "beta", "gamma", "tau", "lr", "steps", "include_ce", "use_memory", "init",
                        "normalize_embeddings"});
            read_opt(i, "alpha", c.incremental.alpha);
            read_opt(i, "beta", c.incremental.beta);
            read_opt(i, "gamma", c.incremental.gamma);
            read_opt(i, "tau", c.incremental.tau);
            read_opt(i, "lr", c.incremental.lr);
            read_opt(i, "steps", c.incremental.steps);
            read_opt(i, "include_ce", c.incremental.include_ce);
            read_opt(i, "use_memory", c.incremental.use_memory);
            read_opt(i, "normalize_embeddings", c.incremental.normalize_embeddings);
            if (i.contains("init")) {
                const auto s = i["init"].get<std::string>();
                if (s == "anchor") c.incremental.init = NovelInit::anchor;
                else if (s == "imprint") c.incremental.init = NovelInit::imprint;
                else throw ConfigError("config: incremental.init must be 'anchor' or 'imprint'");
            }
        }
        if (j.contains("ablation")) {
            const auto& a = j["ablation"];
            check_keys(a, "ablation", {"axis", "values", "embedding_sources"});
            read_opt(a, "axis", c.ablation.axis);
            if (a.contains("values"))
                for (const auto& v : a["values"]) c.ablation.values.push_back(v.is_string() ? v.get<std::string>() : v.dump());
            read_opt(a, "embedding_sources", c.ablation.embedding_sources);
        }
        read_opt(j, "method", c.method);
        read_opt(j, "seeds", c.seeds);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const ParameterError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

inline void validate(const RunConfig& c) {
    if (c.seeds.empty()) throw ConfigError("config: seed list is empty");
    try {
        c.base.validate();
        c.incremental.validate();
        c.synthetic.validate();
        parse_report_format(c.format);
    } catch (const ParameterError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline void require_file(const std::string& path, const char* what) {
    if (!fs::is_regular_file(path))
        throw ConfigError(std::string("config: ") + what + " '" + path + "' does not exist");
}

// ---- shared steps ------------------------------------------------------------

struct Inputs {
    LabeledDataset dataset;
    EmbeddingTable embeddings;
    SessionStream stream;
};

inline SessionStream make_stream(const LabeledDataset& data, const StreamConfig& cfg) {
    try {
        cfg.validate(data.classes().size());
    } catch (const ParameterError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    SessionStream s = build_session_stream(data, cfg);
    const auto problems = check_stream_invariants(s);
    if (!problems.empty()) throw ProtocolError("session stream: " + problems.front());
    return s;
}

inline Inputs load_inputs(const RunConfig& c, const std::string& embeddings_path) {
    require_file(c.dataset_path(), "dataset");
    require_file(embeddings_path, "embeddings");
    Inputs in{load_dataset(c.dataset_path()), load_embedding_table(embeddings_path), {}};
    in.stream = make_stream(in.dataset, c.stream);
    return in;
}

inline json metadata(const RunConfig& c, std::uint64_t seed_or_zero, const std::vector<std::uint64_t>& seeds) {
    json m;
    m["config_hash"] = config_hash(c);
    if (seeds.size() == 1) m["seed"] = seed_or_zero;
    m["seeds"] = seeds;
    m["stream"] = c.stream;
    m["base"] = hyper_to_json(c.base);
    m["incremental"] = hyper_to_json(c.incremental);
    return m;
}

inline json metrics_to_json(const SessionMetrics& m) {
    json per = json::object();
    for (const auto& [id, cc] : m.per_class) per[id] = {{"correct", cc.correct}, {"total", cc.total}};
    return {{"session", m.session},
            {"joint_accuracy", m.joint_accuracy},
            {"base_accuracy", m.base_accuracy},
            {"novel_accuracy", m.novel_accuracy},
            {"base_individual_accuracy", m.base_individual_accuracy},
            {"novel_individual_accuracy", m.novel_individual_accuracy},
            {"correct", m.correct},
            {"total", m.total},
            {"base_correct", m.base_correct},
            {"base_total", m.base_total},
            {"novel_correct", m.novel_correct},
            {"novel_total", m.novel_total},
            {"base_individual_correct", m.base_individual_correct},
            {"novel_individual_correct", m.novel_individual_correct},
            {"delta_percent", delta_metric(delta_inputs(m))},
            {"per_class", per}};
}

inline SessionMetrics metrics_from_json(const json& j) {
    SessionMetrics m;
    m.session = j.at("session");
    m.joint_accuracy = j.at("joint_accuracy");
    m.base_accuracy = j.at("base_accuracy");
    m.novel_accuracy = j.at("novel_accuracy");
    m.base_individual_accuracy = j.at("base_individual_accuracy");
    m.novel_individual_accuracy = j.at("novel_individual_accuracy");
    m.correct = j.at("correct");
    m.total = j.at("total");
    m.base_correct = j.at("base_correct");
    m.base_total = j.at("base_total");
    m.novel_correct = j.at("novel_correct");
    m.novel_total = j.at("novel_total");
    m.base_individual_correct = j.at("base_individual_correct");
    m.novel_individual_correct = j.at("novel_individual_correct");
    for (const auto& [id, cc] : j.at("per_class").items())
        m.per_class[id] = ClassCounts{cc.at("correct"), cc.at("total")};
    return m;
}

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << text;
}

inline const std::string& ensure_parent(const std::string& path) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    return path;
}

inline std::string ndjson(const std::vector<json>& records) {
    std::string s;
    for (const auto& r : records) s += r.dump() + "\n";
    return s;
}

inline unsigned worker_cap() {
    unsigned cap = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("FSCIL_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1) throw ConfigError("FSCIL_THREADS must be a positive integer");
        cap = static_cast<unsigned>(v);
    }
    return cap;
}

// Runs f(i) for i in [0, n) on up to `threads` workers; results land by index.
template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& f) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < std::min<std::size_t>(threads, n); ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < n;) {
                try {
                    f(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---- commands ----------------------------------------------------------------

struct Context {
    RunConfig config;
    std::ostream* out = &std::cout;
};

inline int cmd_gen_data(const Context& ctx) {
    const RunConfig& c = ctx.config;
    SyntheticSpec spec = c.synthetic;
    spec.seed = c.synthetic_seed.value_or(c.seeds.front());
    const SyntheticData data = generate_synthetic_dataset(spec);
    save_dataset(data.dataset, ensure_parent(c.dataset_path()));
    save_embedding_table(data.embeddings, ensure_parent(c.embeddings_path()));
    *ctx.out << "dataset    " << c.dataset_path() << " (" << data.dataset.size() << " samples, "
             << data.dataset.classes().size() << " classes)\n"
             << "embeddings " << c.embeddings_path() << "\n";
    return kOk;
}

inline int cmd_train_base(const Context& ctx) {
    const RunConfig& c = ctx.config;
    const Inputs in = load_inputs(c, c.embeddings_path());
    const std::uint64_t seed = c.seeds.front();
    const BaseTrainingResult res =
        train_base(in.stream.sessions[0].support, in.stream.base_classes(), in.embeddings, c.base, seed);

    Checkpoint ckpt{res.model, {}, seed};
    ckpt.hyper = {{"base", hyper_to_json(c.base)}, {"stream", c.stream}, {"config_hash", config_hash(c)}};
    save_checkpoint(ckpt, ensure_parent(c.checkpoint_path()));

    std::vector<json> log;
    for (const auto& e : res.log) {
        json r = to_json_record(e);
        r["config_hash"] = config_hash(c);
        log.push_back(std::move(r));
    }
    const fs::path dir(c.paths.output_dir);
    write_text(dir / "train_base.ndjson", ndjson(log));

    const SessionMetrics m = evaluate_session(res.model, in.stream.sessions[0].query, in.stream.base_classes(),
                                              in.stream.base_classes(), 0, worker_cap());
    *ctx.out << "checkpoint " << c.checkpoint_path() << "\nbase query accuracy "
             << format_fixed(100.0 * m.joint_accuracy) << "\n";
    return kOk;
}

inline std::vector<SessionMetrics> incremental_run(const RunConfig& c, const Model& base_model,
                                                   const Inputs& in, std::uint64_t seed,
                                                   std::vector<StepLog>* steps = nullptr) {
    PipelineResult pr;
    run_sessions(base_model, in.stream, in.embeddings, c.incremental, seed, pr);
    if (steps) *steps = pr.step_log;
    return pr.sessions;
}

inline int cmd_run_incremental(const Context& ctx) {
    const RunConfig& c = ctx.config;
    require_file(c.checkpoint_path(), "checkpoint");
    const Inputs in = load_inputs(c, c.embeddings_path());
    const Checkpoint ckpt = load_checkpoint(c.checkpoint_path());
    const std::uint64_t seed = c.seeds.front();
    for (const auto& b : in.stream.base_classes())
        if (!ckpt.model.classifier.index_of(b))
            throw ConfigError("checkpoint does not cover base class '" + b + "'");

    std::vector<StepLog> steps;
    const auto sessions = incremental_run(c, ckpt.model, in, seed, &steps);

    ReportOptions opts;
    opts.metadata = metadata(c, seed, {seed});
    const ReportRow row{c.method, {sessions}};
    const fs::path dir(c.paths.output_dir);
    write_text(dir / "metrics.csv", emit_report(row, ReportFormat::csv, opts));

    json mj;
    mj["config_hash"] = config_hash(c);
    mj["method"] = c.method;
    mj["seed"] = seed;
    mj["sessions"] = json::array();
    for (const auto& m : sessions) mj["sessions"].push_back(metrics_to_json(m));
    write_text(dir / "metrics.json", mj.dump(2) + "\n");

    std::vector<json> log;
    for (const auto& s : steps)
        log.push_back({{"session", s.session}, {"step", s.step}, {"objective", s.objective}, {"seed", s.seed},
                       {"config_hash", config_hash(c)}});
    write_text(dir / "run_incremental.ndjson", ndjson(log));

    *ctx.out << emit_report(row, parse_report_format(c.format), opts);
    return kOk;
}

// Evaluates a checkpoint on the latest session whose classes it fully covers.
inline int cmd_evaluate(const Context& ctx) {
    const RunConfig& c = ctx.config;
    require_file(c.checkpoint_path(), "checkpoint");
    const Inputs in = load_inputs(c, c.embeddings_path());
    const Checkpoint ckpt = load_checkpoint(c.checkpoint_path());
    std::optional<std::size_t> last;
    for (std::size_t t = 0; t < in.stream.sessions.size(); ++t) {
        bool covered = true;
        for (const auto& id : in.stream.sessions[t].classes) covered = covered && ckpt.model.classifier.index_of(id);
        if (!covered) break;
        last = t;
    }
    if (!last) throw ConfigError("checkpoint does not cover the base session");
    const SessionMetrics m = evaluate_session(ckpt.model, in.stream.sessions[*last].query,
                                              in.stream.classes_up_to(*last), in.stream.base_classes(), *last,
                                              worker_cap());
    json j = metrics_to_json(m);
    j["config_hash"] = config_hash(c);
    write_text(fs::path(c.paths.output_dir) / "evaluate.json", j.dump(2) + "\n");

    std::ostringstream csv;
    csv << "session,joint,base,novel,delta\n"
        << m.session << ',' << format_fixed(100.0 * m.joint_accuracy) << ','
        << format_fixed(100.0 * m.base_accuracy) << ',' << format_fixed(100.0 * m.novel_accuracy) << ','
        << format_fixed(delta_metric(delta_inputs(m))) << "\n# "
        << json{{"config_hash", config_hash(c)}, {"seed", ckpt.seed}}.dump() << "\n";
    write_text(fs::path(c.paths.output_dir) / "evaluate.csv", csv.str());
    *ctx.out << csv.str();
    return kOk;
}

// ---- ablation ----------------------------------------------------------------

struct AblationSetting {
    std::string label;
    RunConfig config;
    std::string embeddings_path;
};

inline std::vector<std::string> default_values(const std::string& axis) {
    if (axis == "language_reg") return {"off", "on"};
    if (axis == "similarity") return {"euclidean", "cosine", "topk_cosine"};
    if (axis == "k") return {"3", "5", "10"};
    if (axis == "memory") return {"off", "on"};
    return {};
}

inline std::string key_header(const std::string& axis) {
    if (axis == "language_reg") return "Config. / Session No.";
    if (axis == "similarity") return "Loss Fn. / Session No.";
    if (axis == "embedding") return "Embedding / Session No.";
    if (axis == "k") return "K / Session No.";
    if (axis == "memory") return "Memory / Session No.";
    throw ConfigError("unknown ablation axis '" + axis + "'");
}

inline bool parse_switch(const std::string& v, const std::string& axis) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError("ablation axis '" + axis + "' takes on/off, got '" + v + "'");
}

inline AblationSetting ablation_setting(const RunConfig& base, const std::string& axis, const std::string& v) {
    AblationSetting s{v, base, base.embeddings_path()};
    if (axis == "language_reg") {
        const bool on = parse_switch(v, axis);
        s.label = on ? "w/ Lang. Reg." : "w/o Lang. Reg.";
        if (!on) s.config.base.epochs_phase2 = 0;
    } else if (axis == "similarity") {
        try {
            s.config.base.mode = parse_similarity_mode(v);
        } catch (const ParameterError& e) {
            throw ConfigError(e.what());
        }
        switch (s.config.base.mode) {
            case SimilarityMode::euclidean: s.label = "Euclidean distance"; break;
            case SimilarityMode::cosine: s.label = "Cosine similarity"; break;
            case SimilarityMode::topk_cosine: s.label = "Top-K Cosine similarity"; break;
        }
    } else if (axis == "embedding") {
        auto it = base.ablation.embedding_sources.find(v);
        if (it == base.ablation.embedding_sources.end())
            throw ConfigError("ablation: no embedding_sources entry for '" + v + "'");
        s.embeddings_path = it->second;
    } else if (axis == "k") {
        char* end = nullptr;
        const long k = std::strtol(v.c_str(), &end, 10);
        if (end == v.c_str() || *end != '\0' || k < 1) throw ConfigError("ablation: bad K value '" + v + "'");
        s.config.base.k = static_cast<std::size_t>(k);
    } else if (axis == "memory") {
        const bool on = parse_switch(v, axis);
        s.label = on ? "w/ Memory" : "w/o Memory";
        s.config.incremental.use_memory = on;
    } else {
        throw ConfigError("unknown ablation axis '" + axis + "'");
    }
    return s;
}

inline int cmd_ablate(const Context& ctx) {
    const RunConfig& c = ctx.config;
    const std::string& axis = c.ablation.axis;
    if (axis.empty()) throw ConfigError("ablate: no axis given (--axis or ablation.axis)");
    const std::string header = key_header(axis);
    std::vector<std::string> values = c.ablation.values.empty() ? default_values(axis) : c.ablation.values;
    if (values.empty()) throw ConfigError("ablate: axis '" + axis + "' needs explicit values");

    std::vector<AblationSetting> settings;
    for (const auto& v : values) settings.push_back(ablation_setting(c, axis, v));

    const LabeledDataset dataset = (require_file(c.dataset_path(), "dataset"), load_dataset(c.dataset_path()));
    std::map<std::string, EmbeddingTable> tables;
    for (const auto& s : settings)
        if (!tables.count(s.embeddings_path)) {
            require_file(s.embeddings_path, "embeddings");
            tables.emplace(s.embeddings_path, load_embedding_table(s.embeddings_path));
        }
    const SessionStream stream = make_stream(dataset, c.stream);

    struct Job {
        std::size_t setting;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t si = 0; si < settings.size(); ++si)
        for (auto seed : c.seeds) jobs.push_back({si, seed});
    std::vector<std::vector<SessionMetrics>> results(jobs.size());
    parallel_for(jobs.size(), worker_cap(), [&](std::size_t i) {
        const AblationSetting& s = settings[jobs[i].setting];
        const PipelineResult pr = run_pipeline(stream, tables.at(s.embeddings_path), s.config.base,
                                               s.config.incremental, jobs[i].seed);
        results[i] = pr.sessions;
    });

    std::vector<ReportRow> rows;
    for (std::size_t si = 0; si < settings.size(); ++si) {
        ReportRow row{settings[si].label, {}};
        for (std::size_t i = 0; i < jobs.size(); ++i)
            if (jobs[i].setting == si) row.runs.push_back(results[i]);
        rows.push_back(std::move(row));
    }

    ReportOptions opts;
    opts.key_header = header;
    opts.improvement = false;
    opts.metadata = metadata(c, c.seeds.front(), c.seeds);
    opts.metadata["axis"] = axis;
    opts.metadata["values"] = values;
    const fs::path dir(c.paths.output_dir);
    const std::string csv = emit_report(rows, ReportFormat::csv, opts);
    write_text(dir / ("ablation_" + axis + ".csv"), csv);
    if (parse_report_format(c.format) == ReportFormat::markdown) {
        const std::string md = emit_report(rows, ReportFormat::markdown, opts);
        write_text(dir / ("ablation_" + axis + ".md"), md);
        *ctx.out << md;
    } else {
        *ctx.out << csv;
    }
    return kOk;
}

inline int cmd_gradcheck(const Context& ctx) {
    const gradient_suite::Report rep = gradient_suite::run();
    std::map<std::string, std::pair<double, bool>> by_loss;
    std::vector<std::string> order;
    for (const auto& chk : rep.checks) {
        auto [it, fresh] = by_loss.try_emplace(chk.loss, 0.0, true);
        if (fresh) order.push_back(chk.loss);
        it->second.first = std::max(it->second.first, chk.max_relative_error);
        it->second.second = it->second.second && chk.passed;
    }
    char buf[160];
    for (const auto& name : order) {
        const auto& [err, ok] = by_loss[name];
        std::snprintf(buf, sizeof buf, "%-30s max rel err %.3e  %s\n", name.c_str(), err, ok ? "ok" : "FAILED");
        *ctx.out << buf;
    }
    std::snprintf(buf, sizeof buf, "%zu checks in %.2f s (tolerance %.0e, eps %.0e)\n", rep.checks.size(),
                  rep.seconds, gradient_suite::kTolerance, gradient_suite::kEpsilon);
    *ctx.out << buf;
    return rep.passed() ? kOk : kFailure;
}

// Re-renders stored metrics. Rows come from <out>/metrics.json plus any extra
// metrics.json paths passed through --values; files sharing a method name
// become seeds of one row.
inline int cmd_report(const Context& ctx, const std::vector<std::string>& extra) {
    const RunConfig& c = ctx.config;
    std::vector<std::string> files;
    const fs::path own = fs::path(c.paths.output_dir) / "metrics.json";
    if (extra.empty() || fs::is_regular_file(own)) files.push_back(own.string());
    files.insert(files.end(), extra.begin(), extra.end());

    std::vector<ReportRow> rows;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> hashes;
    for (const auto& f : files) {
        require_file(f, "metrics");
        json j;
        try {
            std::ifstream in(f);
            j = json::parse(in);
            std::vector<SessionMetrics> run;
            for (const auto& s : j.at("sessions")) run.push_back(metrics_from_json(s));
            const std::string method = j.at("method");
            auto it = std::find_if(rows.begin(), rows.end(), [&](const ReportRow& r) { return r.method == method; });
            if (it == rows.end()) rows.push_back({method, {run}});
            else it->runs.push_back(run);
            seeds.push_back(j.at("seed"));
            hashes.push_back(j.at("config_hash"));
        } catch (const json::exception& e) {
            throw FormatError("metrics file '" + f + "': " + e.what());
        }
    }
    ReportOptions opts;
    opts.metadata = metadata(c, seeds.front(), seeds);
    opts.metadata["source_config_hashes"] = hashes;
    const ReportFormat fmt = parse_report_format(c.format);
    const std::string text = emit_report(rows, fmt, opts);
    write_text(fs::path(c.paths.output_dir) / (fmt == ReportFormat::csv ? "report.csv" : "report.md"), text);
    *ctx.out << text;
    return kOk;
}

// ---- entry point ---------------------------------------------------------------

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string axis;
    std::vector<std::string> values;
    std::string format;
};

inline RunConfig resolve(const Flags& f) {
    RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
    if (f.seed) c.seeds = {*f.seed};
    if (!f.out.empty()) c.paths.output_dir = f.out;
    if (!f.axis.empty()) c.ablation.axis = f.axis;
    if (!f.format.empty()) c.format = f.format;
    validate(c);
    return c;
}

// argv-style entry; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    CLI::App app{"Few-shot class-incremental learning lab"};
    app.require_subcommand(1);
    Flags flags;
    const std::vector<std::pair<const char*, const char*>> commands = {
        {"gen-data", "Write a synthetic dataset and its semantic embeddings"},
        {"train-base", "Train the base model and write a checkpoint"},
        {"run-incremental", "Run every incremental session on a base checkpoint"},
        {"evaluate", "Evaluate a checkpoint on its latest covered session"},
        {"ablate", "Sweep one configuration axis across the seed list"},
        {"gradcheck", "Finite-difference check of every analytic gradient"},
        {"report", "Render stored metrics as csv or markdown"},
    };
    for (const auto& [name, desc] : commands) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", flags.config, "JSON config file");
        sub->add_option("--seed", flags.seed, "Single seed (replaces the config seed list)");
        sub->add_option("--out", flags.out, "Output directory");
        sub->add_option("--axis", flags.axis, "Ablation axis: language_reg|similarity|embedding|k|memory");
        sub->add_option("--values", flags.values, "Comma-separated axis values (report: metrics files)")
            ->delimiter(',');
        sub->add_option("--format", flags.format, "csv|markdown")->check(CLI::IsMember({"csv", "markdown", "md"}));
    }

    std::vector<std::string> args;
    for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n" << app.help();
        return kUsage;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        Context ctx{resolve(flags), &out};
        if (command != "report" && !flags.values.empty()) ctx.config.ablation.values = flags.values;
        if (command == "gen-data") return cmd_gen_data(ctx);
        if (command == "train-base") return cmd_train_base(ctx);
        if (command == "run-incremental") return cmd_run_incremental(ctx);
        if (command == "evaluate") return cmd_evaluate(ctx);
        if (command == "ablate") return cmd_ablate(ctx);
        if (command == "gradcheck") return cmd_gradcheck(ctx);
        return cmd_report(ctx, flags.values);
    } catch (const Error& e) {
        err << command << ": " << e.what() << "\n";
        return kFailure;
    } catch (const std::exception& e) {
        err << command << ": " << e.what() << "\n";
        return kFailure;
    }
}

}  // namespace fscil::cli
