#pragma once

// Experiment configuration, driver, output comparison and report export.
//
// Config files are flat `key = value` lines; `#` starts a comment. Every key
// can also be overridden from the command line. See README for the key list.

#include "pipeinfer/engine.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace pipeinfer {

enum class ClockMode { virtual_clock, wall };

struct ExperimentConfig {
    EngineConfig engine;
    std::uint64_t prompt_seed = 1;
    std::size_t prompt_len = 128;
    ClockMode clock = ClockMode::virtual_clock;
    int repetitions = 1;

    void validate() const {
        if (repetitions < 1) {
            throw ConfigError("repetitions must be >= 1");
        }
        engine.validate(prompt_len);
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double d = 0.0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty() || !std::isfinite(d)) {
        throw ConfigError("bad number for " + key + ": '" + v + "'");
    }
    return d;
}

inline long long parse_int(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    long long i = 0;
    try {
        i = std::stoll(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) {
        throw ConfigError("bad integer for " + key + ": '" + v + "'");
    }
    return i;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    const long long i = parse_int(key, v);
    if (i < 0) {
        throw ConfigError(key + " must be >= 0");
    }
    return static_cast<std::uint64_t>(i);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "off" || v == "no") {
        return false;
    }
    throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

inline std::string fmt(double d) {
    std::ostringstream os;
    os << std::setprecision(17) << d;
    return os.str();
}

struct Field {
    std::string key;
    std::string help;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

// Single source of truth for config keys, in documented (and serialized) order.
inline const std::vector<Field>& fields() {
    using C = ExperimentConfig;
    using S = const std::string&;
    static const std::vector<Field> table = {
        {"mode", "iterative | pipeline-iterative | sync-speculative | pipeinfer",
         [](C& c, S v) { c.engine.mode = parse_mode(v); }, [](const C& c) { return std::string(to_string(c.engine.mode)); }},
        {"nodes", "number of nodes (pipeinfer uses one of them for the draft)",
         [](C& c, S v) { c.engine.n_nodes = static_cast<int>(parse_int("nodes", v)); },
         [](const C& c) { return std::to_string(c.engine.n_nodes); }},
        {"target_layers", "target model layers",
         [](C& c, S v) { c.engine.target.n_layers = static_cast<std::size_t>(parse_u64("target_layers", v)); },
         [](const C& c) { return std::to_string(c.engine.target.n_layers); }},
        {"target_dim", "target embedding width",
         [](C& c, S v) { c.engine.target.embed_dim = static_cast<std::size_t>(parse_u64("target_dim", v)); },
         [](const C& c) { return std::to_string(c.engine.target.embed_dim); }},
        {"target_heads", "target attention heads",
         [](C& c, S v) { c.engine.target.n_heads = static_cast<std::size_t>(parse_u64("target_heads", v)); },
         [](const C& c) { return std::to_string(c.engine.target.n_heads); }},
        {"target_seed", "target weight seed", [](C& c, S v) { c.engine.target.seed = parse_u64("target_seed", v); },
         [](const C& c) { return std::to_string(c.engine.target.seed); }},
        {"vocab", "vocabulary size (target and draft)",
         [](C& c, S v) {
             c.engine.target.vocab_size = static_cast<std::size_t>(parse_u64("vocab", v));
             c.engine.draft.vocab_size = c.engine.target.vocab_size;
         },
         [](const C& c) { return std::to_string(c.engine.target.vocab_size); }},
        {"max_context", "context window (target and draft)",
         [](C& c, S v) {
             c.engine.target.max_context = static_cast<std::size_t>(parse_u64("max_context", v));
             c.engine.draft.max_context = c.engine.target.max_context;
         },
         [](const C& c) { return std::to_string(c.engine.target.max_context); }},
        {"draft", "draft backend: toy | synthetic",
         [](C& c, S v) {
             if (v == "toy") {
                 c.engine.draft_kind = DraftKind::toy;
             } else if (v == "synthetic") {
                 c.engine.draft_kind = DraftKind::synthetic;
             } else {
                 throw ConfigError("draft must be toy or synthetic");
             }
         },
         [](const C& c) { return std::string(c.engine.draft_kind == DraftKind::toy ? "toy" : "synthetic"); }},
        {"draft_layers", "toy draft layers",
         [](C& c, S v) { c.engine.draft.n_layers = static_cast<std::size_t>(parse_u64("draft_layers", v)); },
         [](const C& c) { return std::to_string(c.engine.draft.n_layers); }},
        {"draft_dim", "toy draft embedding width",
         [](C& c, S v) { c.engine.draft.embed_dim = static_cast<std::size_t>(parse_u64("draft_dim", v)); },
         [](const C& c) { return std::to_string(c.engine.draft.embed_dim); }},
        {"draft_model_seed", "toy draft weight seed",
         [](C& c, S v) { c.engine.draft.seed = parse_u64("draft_model_seed", v); },
         [](const C& c) { return std::to_string(c.engine.draft.seed); }},
        {"alpha", "synthetic draft agreement probability",
         [](C& c, S v) { c.engine.alpha = parse_double("alpha", v); }, [](const C& c) { return fmt(c.engine.alpha); }},
        {"draft_seed", "synthetic draft seed", [](C& c, S v) { c.engine.draft_seed = parse_u64("draft_seed", v); },
         [](const C& c) { return std::to_string(c.engine.draft_seed); }},
        {"tau", "base confidence cutoff", [](C& c, S v) { c.engine.spec.tau = parse_double("tau", v); },
         [](const C& c) { return fmt(c.engine.spec.tau); }},
        {"rho", "cutoff recovery factor", [](C& c, S v) { c.engine.spec.rho = parse_double("rho", v); },
         [](const C& c) { return fmt(c.engine.spec.rho); }},
        {"delta", "cutoff decay factor", [](C& c, S v) { c.engine.spec.delta = parse_double("delta", v); },
         [](const C& c) { return fmt(c.engine.spec.delta); }},
        {"max_batch", "microbatch cap (1..4)",
         [](C& c, S v) { c.engine.spec.max_batch = static_cast<int>(parse_int("max_batch", v)); },
         [](const C& c) { return std::to_string(c.engine.spec.max_batch); }},
        {"partitions", "KV-cache sequence partitions",
         [](C& c, S v) { c.engine.partitions = static_cast<int>(parse_int("partitions", v)); },
         [](const C& c) { return std::to_string(c.engine.partitions); }},
        {"continuous", "continuous speculation on/off",
         [](C& c, S v) { c.engine.continuous = parse_bool("continuous", v); },
         [](const C& c) { return std::string(c.engine.continuous ? "true" : "false"); }},
        {"early_cancel", "early inference cancellation on/off",
         [](C& c, S v) { c.engine.early_cancel = parse_bool("early_cancel", v); },
         [](const C& c) { return std::string(c.engine.early_cancel ? "true" : "false"); }},
        {"link_latency", "seconds per message", [](C& c, S v) { c.engine.link.latency = parse_double("link_latency", v); },
         [](const C& c) { return fmt(c.engine.link.latency); }},
        {"link_per_byte", "seconds per payload byte",
         [](C& c, S v) { c.engine.link.per_byte = parse_double("link_per_byte", v); },
         [](const C& c) { return fmt(c.engine.link.per_byte); }},
        {"link_jitter", "max random extra delay per message (seconds)",
         [](C& c, S v) { c.engine.link.jitter = parse_double("link_jitter", v); },
         [](const C& c) { return fmt(c.engine.link.jitter); }},
        {"jitter_seed", "jitter seed", [](C& c, S v) { c.engine.link.jitter_seed = parse_u64("jitter_seed", v); },
         [](const C& c) { return std::to_string(c.engine.link.jitter_seed); }},
        {"layer_delay", "seconds per layer for one token",
         [](C& c, S v) { c.engine.timing.layer_delay = parse_double("layer_delay", v); },
         [](const C& c) { return fmt(c.engine.timing.layer_delay); }},
        {"batch_token_cost", "extra per-layer cost of each additional batch token (fraction)",
         [](C& c, S v) { c.engine.timing.batch_token_cost = parse_double("batch_token_cost", v); },
         [](const C& c) { return fmt(c.engine.timing.batch_token_cost); }},
        {"draft_delay", "seconds per draft token evaluated",
         [](C& c, S v) { c.engine.timing.draft_delay = parse_double("draft_delay", v); },
         [](const C& c) { return fmt(c.engine.timing.draft_delay); }},
        {"sync_points", "cancellation probes per layer",
         [](C& c, S v) { c.engine.timing.sync_points = static_cast<int>(parse_int("sync_points", v)); },
         [](const C& c) { return std::to_string(c.engine.timing.sync_points); }},
        {"node_speed", "comma-separated per-node speed factors (empty = uniform)",
         [](C& c, S v) {
             c.engine.timing.node_speed.clear();
             std::stringstream ss(v);
             std::string item;
             while (std::getline(ss, item, ',')) {
                 if (!trim(item).empty()) {
                     c.engine.timing.node_speed.push_back(parse_double("node_speed", trim(item)));
                 }
             }
         },
         [](const C& c) {
             std::string out;
             for (std::size_t i = 0; i < c.engine.timing.node_speed.size(); ++i) {
                 out += (i ? "," : "") + fmt(c.engine.timing.node_speed[i]);
             }
             return out;
         }},
        {"prompt_seed", "prompt seed", [](C& c, S v) { c.prompt_seed = parse_u64("prompt_seed", v); },
         [](const C& c) { return std::to_string(c.prompt_seed); }},
        {"prompt_len", "prompt tokens",
         [](C& c, S v) { c.prompt_len = static_cast<std::size_t>(parse_u64("prompt_len", v)); },
         [](const C& c) { return std::to_string(c.prompt_len); }},
        {"generate", "tokens to generate",
         [](C& c, S v) { c.engine.generate = static_cast<std::size_t>(parse_u64("generate", v)); },
         [](const C& c) { return std::to_string(c.engine.generate); }},
        {"eos", "end-of-sequence token id, -1 for none",
         [](C& c, S v) { c.engine.eos = static_cast<Token>(parse_int("eos", v)); },
         [](const C& c) { return std::to_string(c.engine.eos); }},
        {"clock", "virtual | wall",
         [](C& c, S v) {
             if (v == "virtual") {
                 c.clock = ClockMode::virtual_clock;
             } else if (v == "wall") {
                 c.clock = ClockMode::wall;
             } else {
                 throw ConfigError("clock must be virtual or wall");
             }
         },
         [](const C& c) { return std::string(c.clock == ClockMode::wall ? "wall" : "virtual"); }},
        {"repetitions", "runs to average (seeds advance by one per run)",
         [](C& c, S v) { c.repetitions = static_cast<int>(parse_int("repetitions", v)); },
         [](const C& c) { return std::to_string(c.repetitions); }},
    };
    return table;
}

} // namespace detail

// Defaults used by the benchmarks: 8 nodes, 1 ms per layer, 10 us per message.
inline ExperimentConfig default_experiment() {
    ExperimentConfig c;
    c.engine.link.latency = 10e-6;
    return c;
}

inline void set_option(ExperimentConfig& c, const std::string& key, const std::string& value) {
    for (const auto& f : detail::fields()) {
        if (f.key == key) {
            f.set(c, detail::trim(value));
            return;
        }
    }
    throw ConfigError("unknown config key: " + key);
}

inline std::string get_option(const ExperimentConfig& c, const std::string& key) {
    for (const auto& f : detail::fields()) {
        if (f.key == key) {
            return f.get(c);
        }
    }
    throw ConfigError("unknown config key: " + key);
}

inline std::vector<std::string> option_keys() {
    std::vector<std::string> out;
    for (const auto& f : detail::fields()) {
        out.push_back(f.key);
    }
    return out;
}

inline std::string option_help(const std::string& key) {
    for (const auto& f : detail::fields()) {
        if (f.key == key) {
            return f.help;
        }
    }
    throw ConfigError("unknown config key: " + key);
}

inline void apply_config_text(ExperimentConfig& c, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        line = detail::trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        }
        set_option(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    }
}

inline ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig c = default_experiment();
    apply_config_text(c, text);
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file: " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline std::string format_config(const ExperimentConfig& c) {
    std::string out;
    for (const auto& f : detail::fields()) {
        out += f.key + " = " + f.get(c) + "\n";
    }
    return out;
}

// ---- driver ------------------------------------------------------------------

struct RepetitionResult {
    std::uint64_t prompt_seed = 0;
    std::vector<Token> tokens;
    EngineMetrics metrics;
};

struct MetricsSummary {
    double generation_speed = 0.0;
    double ttft = 0.0;
    double itl = 0.0;
    double acceptance_rate = 0.0;
    double cancelled_runs = 0.0;
    double inflight_mean = 0.0;
    std::array<double, kTagCount> bytes{};
};

struct ExperimentReport {
    ExperimentConfig config;
    std::vector<RepetitionResult> reps;
    MetricsSummary mean;

    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& r : reps) {
            h = mix64(h ^ r.metrics.checksum);
        }
        return h;
    }
};

inline MetricsSummary summarize(const EngineMetrics& m) {
    MetricsSummary s;
    s.generation_speed = m.generation_speed;
    s.ttft = m.ttft;
    s.itl = m.itl;
    s.acceptance_rate = m.acceptance_rate;
    s.cancelled_runs = static_cast<double>(m.cancelled_runs);
    s.inflight_mean = m.inflight_mean;
    for (std::size_t t = 0; t < kTagCount; ++t) {
        s.bytes[t] = static_cast<double>(m.traffic.bytes[t]);
    }
    return s;
}

// Repetition i uses prompt, draft and jitter seeds advanced by i; with one
// repetition the configured seeds are used as-is.
inline ExperimentReport run_experiment(const ExperimentConfig& config, const LayeredModel* shared_target = nullptr) {
    config.validate();
    ExperimentReport report;
    report.config = config;
    std::unique_ptr<LayeredModel> owned;
    if (shared_target == nullptr) {
        owned = std::make_unique<LayeredModel>(config.engine.target);
        shared_target = owned.get();
    }
    for (int i = 0; i < config.repetitions; ++i) {
        EngineConfig ec = config.engine;
        ec.draft_seed += static_cast<std::uint64_t>(i);
        ec.link.jitter_seed += static_cast<std::uint64_t>(i);
        ec.wall_clock_metrics = config.clock == ClockMode::wall;
        const std::uint64_t pseed = config.prompt_seed + static_cast<std::uint64_t>(i);
        const auto prompt = make_prompt(pseed, config.prompt_len, ec.target.vocab_size);
        EngineResult r = run_engine(*shared_target, ec, prompt);
        report.reps.push_back({pseed, std::move(r.tokens), r.metrics});
    }
    const double n = static_cast<double>(report.reps.size());
    for (const auto& r : report.reps) {
        const MetricsSummary s = summarize(r.metrics);
        report.mean.generation_speed += s.generation_speed / n;
        report.mean.ttft += s.ttft / n;
        report.mean.itl += s.itl / n;
        report.mean.acceptance_rate += s.acceptance_rate / n;
        report.mean.cancelled_runs += s.cancelled_runs / n;
        report.mean.inflight_mean += s.inflight_mean / n;
        for (std::size_t t = 0; t < kTagCount; ++t) {
            report.mean.bytes[t] += s.bytes[t] / n;
        }
    }
    return report;
}

// ---- equivalence --------------------------------------------------------------

struct Equivalence {
    bool equal = true;
    std::size_t report = 0;     // first report that differs from report 0
    std::size_t repetition = 0; // repetition within it
    std::size_t index = 0;      // first differing token index
    std::string message;
};

inline Equivalence compare_token_lists(const std::vector<std::vector<Token>>& lists) {
    Equivalence v;
    if (lists.size() < 2) {
        throw ConfigError("need at least two token lists to compare");
    }
    const auto& ref = lists[0];
    for (std::size_t i = 1; i < lists.size(); ++i) {
        const auto& o = lists[i];
        const std::size_t n = std::min(ref.size(), o.size());
        std::size_t k = 0;
        while (k < n && ref[k] == o[k]) {
            ++k;
        }
        if (k < n || ref.size() != o.size()) {
            v.equal = false;
            v.report = i;
            v.index = k;
            v.message = "list " + std::to_string(i) + " differs at index " + std::to_string(k);
            return v;
        }
    }
    v.message = "identical";
    return v;
}

inline Equivalence compare_outputs(const std::vector<ExperimentReport>& reports) {
    if (reports.size() < 2) {
        throw ConfigError("need at least two reports to compare");
    }
    const auto& a = reports[0].config;
    for (const auto& r : reports) {
        const auto& b = r.config;
        if (b.prompt_seed != a.prompt_seed || b.prompt_len != a.prompt_len || b.repetitions != a.repetitions ||
            b.engine.target.seed != a.engine.target.seed || b.engine.target.vocab_size != a.engine.target.vocab_size ||
            b.engine.target.n_layers != a.engine.target.n_layers ||
            b.engine.target.embed_dim != a.engine.target.embed_dim || r.reps.size() != reports[0].reps.size()) {
            throw ConfigError("reports were produced from different model or prompt settings");
        }
    }
    for (std::size_t rep = 0; rep < reports[0].reps.size(); ++rep) {
        std::vector<std::vector<Token>> lists;
        for (const auto& r : reports) {
            lists.push_back(r.reps[rep].tokens);
        }
        Equivalence v = compare_token_lists(lists);
        if (!v.equal) {
            v.repetition = rep;
            v.message = "report " + std::to_string(v.report) + " (" + to_string(reports[v.report].config.engine.mode) +
                        "), repetition " + std::to_string(rep) + ": first difference at token " +
                        std::to_string(v.index);
            return v;
        }
    }
    Equivalence ok;
    ok.message = "identical";
    return ok;
}

// ---- export ---------------------------------------------------------------------

inline nlohmann::ordered_json metrics_json(const EngineMetrics& m) {
    nlohmann::ordered_json j;
    j["generation_speed"] = m.generation_speed;
    j["ttft"] = m.ttft;
    j["itl"] = m.itl;
    j["acceptance_rate"] = m.acceptance_rate;
    j["cancelled_runs"] = m.cancelled_runs;
    j["cancelled_invalidated"] = m.cancelled_invalid;
    j["cancelled_superfluous"] = m.cancelled_superfluous;
    j["runs_started"] = m.runs_started;
    j["speculative_runs"] = m.spec_runs;
    j["partition_stalls"] = m.partition_stalls;
    j["layers_skipped"] = m.layers_skipped;
    j["inflight_mean"] = m.inflight_mean;
    nlohmann::ordered_json bytes;
    for (Tag t : kAllTags) {
        bytes[to_string(t)] = m.traffic.bytes_of(t);
    }
    j["bytes_sent"] = bytes;
    std::ostringstream cs;
    cs << std::hex << std::setw(16) << std::setfill('0') << m.checksum;
    j["checksum"] = cs.str();
    return j;
}

inline nlohmann::ordered_json report_json(const ExperimentReport& r) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json cfg;
    for (const auto& key : option_keys()) {
        cfg[key] = get_option(r.config, key);
    }
    j["config"] = cfg;
    nlohmann::ordered_json reps = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < r.reps.size(); ++i) {
        nlohmann::ordered_json e;
        e["repetition"] = i;
        e["prompt_seed"] = r.reps[i].prompt_seed;
        e["metrics"] = metrics_json(r.reps[i].metrics);
        e["tokens"] = r.reps[i].tokens;
        reps.push_back(e);
    }
    j["repetitions"] = reps;
    nlohmann::ordered_json mean;
    mean["generation_speed"] = r.mean.generation_speed;
    mean["ttft"] = r.mean.ttft;
    mean["itl"] = r.mean.itl;
    mean["acceptance_rate"] = r.mean.acceptance_rate;
    mean["cancelled_runs"] = r.mean.cancelled_runs;
    mean["inflight_mean"] = r.mean.inflight_mean;
    nlohmann::ordered_json bytes;
    for (Tag t : kAllTags) {
        bytes[to_string(t)] = r.mean.bytes[static_cast<std::size_t>(t)];
    }
    mean["bytes_sent"] = bytes;
    j["mean"] = mean;
    return j;
}

inline std::vector<std::string> csv_header() {
    std::vector<std::string> h = {"repetition", "generation_speed", "ttft", "itl",
                                  "acceptance_rate", "cancelled_runs", "inflight_mean"};
    for (Tag t : kAllTags) {
        h.push_back(std::string("bytes_") + to_string(t));
    }
    h.push_back("checksum");
    return h;
}

inline std::string join_csv(const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        out += (i ? "," : "") + cells[i];
    }
    return out + "\n";
}

// One row per repetition, then a `mean` row.
inline std::string report_csv(const ExperimentReport& r) {
    using detail::fmt;
    std::string out = join_csv(csv_header());
    for (std::size_t i = 0; i < r.reps.size(); ++i) {
        const auto s = summarize(r.reps[i].metrics);
        std::vector<std::string> row = {std::to_string(i),         fmt(s.generation_speed), fmt(s.ttft),
                                        fmt(s.itl),                fmt(s.acceptance_rate),  fmt(s.cancelled_runs),
                                        fmt(s.inflight_mean)};
        for (double b : s.bytes) {
            row.push_back(fmt(b));
        }
        std::ostringstream cs;
        cs << std::hex << std::setw(16) << std::setfill('0') << r.reps[i].metrics.checksum;
        row.push_back(cs.str());
        out += join_csv(row);
    }
    std::vector<std::string> row = {"mean",
                                    fmt(r.mean.generation_speed),
                                    fmt(r.mean.ttft),
                                    fmt(r.mean.itl),
                                    fmt(r.mean.acceptance_rate),
                                    fmt(r.mean.cancelled_runs),
                                    fmt(r.mean.inflight_mean)};
    for (double b : r.mean.bytes) {
        row.push_back(fmt(b));
    }
    row.push_back("");
    out += join_csv(row);
    return out;
}

// Sweep table: one row per (parameter value, mode) with mean metrics.
struct SweepRow {
    std::string value;
    ExperimentReport report;
};

inline std::string sweep_csv(const std::string& param, const std::vector<SweepRow>& rows) {
    using detail::fmt;
    std::string out = join_csv({param, "mode", "repetitions", "generation_speed", "ttft", "itl", "acceptance_rate",
                                "cancelled_runs", "inflight_mean", "checksum"});
    for (const auto& r : rows) {
        std::ostringstream cs;
        cs << std::hex << std::setw(16) << std::setfill('0') << r.report.checksum();
        out += join_csv({r.value, to_string(r.report.config.engine.mode), std::to_string(r.report.reps.size()),
                         fmt(r.report.mean.generation_speed), fmt(r.report.mean.ttft), fmt(r.report.mean.itl),
                         fmt(r.report.mean.acceptance_rate), fmt(r.report.mean.cancelled_runs),
                         fmt(r.report.mean.inflight_mean), cs.str()});
    }
    return out;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path);
    }
    out << text;
    if (!out) {
        throw Error("write failed: " + path);
    }
}

enum class ExportFormat { json, csv };

inline void export_report(const ExperimentReport& r, ExportFormat format, const std::string& path) {
    write_text(path, format == ExportFormat::json ? report_json(r).dump(2) + "\n" : report_csv(r));
}

} // namespace pipeinfer
