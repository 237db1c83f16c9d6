// pipeinfer: run, sweep and compare inference modes on the simulated cluster.
//
//   pipeinfer run --mode pipeinfer --draft synthetic --alpha 0.8 --json out.json
//   pipeinfer sweep --param alpha --values 0.5,0.66,0.8 --modes sync-speculative,pipeinfer --csv sweep.csv
//   pipeinfer compare                      # all four modes, exit 1 on divergence
//   pipeinfer compare a.json b.json        # compare token lists of saved reports
//
// Exit codes: 0 ok, 1 outputs differ, 2 usage or configuration error.

#include "pipeinfer/bench.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace pipeinfer;

namespace {

struct CommonOptions {
    std::string config_file;
    std::vector<std::string> sets;            // key=value
    std::map<std::string, std::string> flags; // --key value
};

void add_common(CLI::App* app, CommonOptions& o) {
    app->add_option("-c,--config", o.config_file, "flat key=value config file");
    app->add_option("-s,--set", o.sets, "override as key=value (repeatable)");
    for (const auto& key : option_keys()) {
        app->add_option_function<std::string>(
            "--" + key, [&o, key](const std::string& v) { o.flags[key] = v; }, option_help(key));
    }
}

ExperimentConfig build_config(const CommonOptions& o) {
    ExperimentConfig c = o.config_file.empty() ? default_experiment() : load_config(o.config_file);
    for (const auto& [k, v] : o.flags) {
        set_option(c, k, v);
    }
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        set_option(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return c;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

void print_summary(const ExperimentReport& r) {
    std::printf("%-20s reps=%zu speed=%.3f tok/s ttft=%.6f s itl=%.6f s accept=%.3f cancelled=%.1f inflight=%.3f "
                "checksum=%016llx\n",
                to_string(r.config.engine.mode), r.reps.size(), r.mean.generation_speed, r.mean.ttft, r.mean.itl,
                r.mean.acceptance_rate, r.mean.cancelled_runs, r.mean.inflight_mean,
                static_cast<unsigned long long>(r.checksum()));
}

std::vector<std::vector<Token>> tokens_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read report " + path);
    }
    const auto j = nlohmann::json::parse(in);
    std::vector<std::vector<Token>> out;
    for (const auto& rep : j.at("repetitions")) {
        out.push_back(rep.at("tokens").get<std::vector<Token>>());
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pipelined speculative inference simulator"};
    app.require_subcommand(1);

    CommonOptions run_opts;
    std::string json_out;
    std::string csv_out;
    bool print_config = false;
    auto* run = app.add_subcommand("run", "run one experiment");
    add_common(run, run_opts);
    run->add_option("--json", json_out, "write JSON report");
    run->add_option("--csv", csv_out, "write CSV (one row per repetition plus mean)");
    run->add_flag("--print-config", print_config, "print the effective configuration");

    CommonOptions sweep_opts;
    std::string param;
    std::string values;
    std::string sweep_modes;
    std::string sweep_csv_out;
    auto* sweep = app.add_subcommand("sweep", "vary one parameter across values and modes");
    add_common(sweep, sweep_opts);
    sweep->add_option("--param", param, "config key to vary")->required();
    sweep->add_option("--values", values, "comma-separated values")->required();
    sweep->add_option("--modes", sweep_modes, "comma-separated modes (default: configured mode)");
    sweep->add_option("--out", sweep_csv_out, "write sweep CSV table");

    CommonOptions cmp_opts;
    std::string cmp_modes = "iterative,pipeline-iterative,sync-speculative,pipeinfer";
    std::vector<std::string> reports;
    auto* compare = app.add_subcommand("compare", "check that modes produce identical tokens");
    add_common(compare, cmp_opts);
    compare->add_option("--modes", cmp_modes, "comma-separated modes to run and compare");
    compare->add_option("reports", reports, "saved JSON reports to compare instead of running");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (run->parsed()) {
            const ExperimentConfig c = build_config(run_opts);
            if (print_config) {
                std::cout << format_config(c);
            }
            const ExperimentReport r = run_experiment(c);
            print_summary(r);
            if (!json_out.empty()) {
                export_report(r, ExportFormat::json, json_out);
            }
            if (!csv_out.empty()) {
                export_report(r, ExportFormat::csv, csv_out);
            }
            return 0;
        }
        if (sweep->parsed()) {
            const ExperimentConfig base = build_config(sweep_opts);
            const auto modes = sweep_modes.empty() ? std::vector<std::string>{to_string(base.engine.mode)}
                                                   : split_list(sweep_modes);
            std::vector<SweepRow> rows;
            for (const auto& v : split_list(values)) {
                for (const auto& m : modes) {
                    ExperimentConfig c = base;
                    set_option(c, param, v);
                    set_option(c, "mode", m);
                    rows.push_back({v, run_experiment(c)});
                    std::printf("%s=%-8s ", param.c_str(), v.c_str());
                    print_summary(rows.back().report);
                }
            }
            const std::string table = sweep_csv(param, rows);
            if (sweep_csv_out.empty()) {
                std::cout << table;
            } else {
                write_text(sweep_csv_out, table);
            }
            return 0;
        }
        if (compare->parsed()) {
            Equivalence v;
            if (!reports.empty()) {
                if (reports.size() < 2) {
                    throw ConfigError("compare needs at least two reports");
                }
                std::vector<std::vector<std::vector<Token>>> all;
                for (const auto& p : reports) {
                    all.push_back(tokens_from_file(p));
                }
                for (const auto& r : all) {
                    if (r.size() != all[0].size()) {
                        throw ConfigError("reports have different repetition counts");
                    }
                }
                for (std::size_t rep = 0; rep < all[0].size() && v.equal; ++rep) {
                    std::vector<std::vector<Token>> lists;
                    for (const auto& r : all) {
                        lists.push_back(r[rep]);
                    }
                    v = compare_token_lists(lists);
                    if (!v.equal) {
                        v.message = reports[v.report] + ", repetition " + std::to_string(rep) +
                                    ": first difference at token " + std::to_string(v.index);
                    }
                }
            } else {
                const ExperimentConfig base = build_config(cmp_opts);
                std::vector<ExperimentReport> runs;
                for (const auto& m : split_list(cmp_modes)) {
                    ExperimentConfig c = base;
                    set_option(c, "mode", m);
                    runs.push_back(run_experiment(c));
                    print_summary(runs.back());
                }
                v = compare_outputs(runs);
            }
            std::printf("%s: %s\n", v.equal ? "EQUIVALENT" : "DIVERGENT", v.message.c_str());
            return v.equal ? 0 : 1;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 2;
}
