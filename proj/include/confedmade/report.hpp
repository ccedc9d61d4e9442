#pragma once

// Turns a RunResult into files. report.json is the canonical record: it is
// byte-stable across reruns and worker counts, so it never contains wall
// clock or thread information; those go to timing.json. The CSVs exist for
// spreadsheet work and carry the same numbers at full precision.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "confedmade/config.hpp"
#include "confedmade/errors.hpp"
#include "confedmade/federation.hpp"
#include "confedmade/ledger.hpp"
#include "confedmade/metrics.hpp"

namespace confedmade {

struct TaskMetrics {
    std::size_t task = 0;
    double avg_task_nll = 0.0;
    double base_task_nll = 0.0;
    double new_task_nll = 0.0;
};

// One aggregated attention coefficient: the mean over attending clients of
// alpha for a (source client, source task, weight tensor) triple.
struct AlphaSummary {
    std::size_t source_client = 0;
    std::size_t source_task = 0;
    std::size_t layer = 0;
    std::string layer_name;
    double value = 0.0;
};

struct RunReport {
    std::string name;
    std::string method;
    std::string scenario;
    std::uint64_t seed = 0;
    std::size_t clients = 0;
    std::size_t tasks = 0;
    std::size_t rounds_per_task = 0;
    ScenarioConfig config;
    LossMatrix losses;
    std::vector<TaskMetrics> per_task;
    ForgettingResult forgetting;          // adopted definition
    ForgettingResult forgetting_literal;  // worst-minus-final variant
    CommLedger ledger;
    std::vector<AlphaSummary> alpha;
    std::vector<std::string> warnings;
    std::size_t workers = 1;
    double wall_seconds = 0.0;
};

inline RunReport build_report(const RunResult& res) {
    RunReport rep;
    rep.name = res.config.name;
    rep.method = method_name(res.config.method);
    rep.scenario = res.config.scenario;
    rep.seed = res.config.seed;
    rep.clients = res.clients;
    rep.tasks = res.tasks;
    rep.rounds_per_task = res.config.rounds_per_task;
    rep.config = res.config;
    rep.losses = res.losses;
    for (std::size_t t = 0; t < res.losses.tasks(); ++t) {
        TaskMetrics m;
        m.task = t;
        m.avg_task_nll = avg_task_nll(res.losses, t);
        m.base_task_nll = base_task_loss(res.losses, t);
        m.new_task_nll = new_task_loss(res.losses, t);
        rep.per_task.push_back(m);
    }
    rep.forgetting = avg_forgetting(res.losses);
    rep.forgetting_literal = avg_forgetting_literal(res.losses);
    rep.ledger = res.ledger;
    rep.warnings = res.warnings;
    rep.workers = res.workers;
    rep.wall_seconds = res.wall_seconds;

    // Mean attention per (source client, source task, tensor) over the
    // clients that hold the entry; deterministic order via the map key.
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::pair<double, std::size_t>>
        acc;
    for (const AlphaRecord& a : res.alpha) {
        auto& slot = acc[{a.source_client, a.source_task, a.layer}];
        slot.first += a.value;
        slot.second += 1;
    }
    for (const auto& [key, slot] : acc) {
        AlphaSummary s;
        s.source_client = std::get<0>(key);
        s.source_task = std::get<1>(key);
        s.layer = std::get<2>(key);
        s.layer_name = detail::weight_tensor_name(res.config.model, s.layer);
        s.value = slot.first / static_cast<double>(slot.second);
        rep.alpha.push_back(s);
    }
    return rep;
}

// --- json views -----------------------------------------------------------------

inline nlohmann::ordered_json forgetting_to_json(const ForgettingResult& f) {
    return nlohmann::ordered_json{{"value", f.value}, {"defined", f.defined}};
}

inline nlohmann::ordered_json report_to_json(const RunReport& rep) {
    nlohmann::ordered_json j;
    j["schema"] = "confedmade.report.v1";
    j["name"] = rep.name;
    j["method"] = rep.method;
    j["scenario"] = rep.scenario;
    j["seed"] = rep.seed;
    j["clients"] = rep.clients;
    j["tasks"] = rep.tasks;
    j["rounds_per_task"] = rep.rounds_per_task;
    j["config"] = config_to_json(rep.config);

    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < rep.losses.tasks(); ++t) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i <= t; ++i) row.push_back(rep.losses.at(t, i));
        rows.push_back(std::move(row));
    }
    j["loss_matrix"] = std::move(rows);

    nlohmann::ordered_json per_task = nlohmann::ordered_json::array();
    for (const TaskMetrics& m : rep.per_task) {
        per_task.push_back(nlohmann::ordered_json{{"task", m.task},
                                                  {"avg_task_nll", m.avg_task_nll},
                                                  {"base_task_nll", m.base_task_nll},
                                                  {"new_task_nll", m.new_task_nll}});
    }
    nlohmann::ordered_json metrics;
    metrics["per_task"] = std::move(per_task);
    metrics["avg_forgetting"] = forgetting_to_json(rep.forgetting);
    metrics["avg_forgetting_literal"] = forgetting_to_json(rep.forgetting_literal);
    if (!rep.per_task.empty()) {
        const TaskMetrics& last = rep.per_task.back();
        metrics["final"] = nlohmann::ordered_json{{"avg_task_nll", last.avg_task_nll},
                                                  {"base_task_nll", last.base_task_nll},
                                                  {"new_task_nll", last.new_task_nll}};
    }
    j["metrics"] = std::move(metrics);

    nlohmann::ordered_json comm;
    comm["total"] = rep.ledger.total();
    nlohmann::ordered_json by_kind;
    for (const auto& [what, n] : rep.ledger.totals_by_what()) by_kind[what] = n;
    comm["by_kind"] = std::move(by_kind);
    nlohmann::ordered_json by_task = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < rep.tasks; ++t) by_task.push_back(rep.ledger.total_for_task(t));
    comm["by_task"] = std::move(by_task);
    comm["by_direction"] =
        nlohmann::ordered_json{{"server_to_client", rep.ledger.total_for(Direction::ServerToClient)},
                               {"client_to_server", rep.ledger.total_for(Direction::ClientToServer)}};
    j["communication"] = std::move(comm);

    nlohmann::ordered_json alpha = nlohmann::ordered_json::array();
    for (const AlphaSummary& a : rep.alpha) {
        alpha.push_back(nlohmann::ordered_json{{"source_client", a.source_client},
                                               {"source_task", a.source_task},
                                               {"layer", a.layer_name},
                                               {"value", a.value}});
    }
    j["alpha"] = std::move(alpha);
    j["warnings"] = rep.warnings;
    return j;
}

inline nlohmann::ordered_json ledger_to_json(const CommLedger& ledger) {
    nlohmann::ordered_json j;
    j["total"] = ledger.total();
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const LedgerRow& r : ledger.rows()) {
        rows.push_back(nlohmann::ordered_json{{"task", r.task},
                                              {"round", r.round},
                                              {"client", r.client},
                                              {"direction", direction_name(r.direction)},
                                              {"kind", r.what},
                                              {"scalars", r.scalars}});
    }
    j["rows"] = std::move(rows);
    return j;
}

// --- file export -----------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

inline std::string metrics_csv(const RunReport& rep) {
    std::string out = "task,metric,value\n";
    for (const TaskMetrics& m : rep.per_task) {
        const std::string t = std::to_string(m.task);
        out += t + ",avg_task_nll," + detail::fmt_double(m.avg_task_nll) + "\n";
        out += t + ",base_task_nll," + detail::fmt_double(m.base_task_nll) + "\n";
        out += t + ",new_task_nll," + detail::fmt_double(m.new_task_nll) + "\n";
    }
    if (!rep.per_task.empty()) {
        const std::string t = std::to_string(rep.per_task.back().task);
        out += t + ",avg_forgetting," + detail::fmt_double(rep.forgetting.value) + "\n";
        out += t + ",avg_forgetting_defined," + (rep.forgetting.defined ? "1" : "0") + "\n";
        out += t + ",avg_forgetting_literal," + detail::fmt_double(rep.forgetting_literal.value) +
               "\n";
        out += t + ",avg_forgetting_literal_defined," +
               (rep.forgetting_literal.defined ? "1" : "0") + "\n";
    }
    return out;
}

inline std::string loss_matrix_csv(const LossMatrix& lm) {
    std::string out = "task,eval_task,nll\n";
    for (std::size_t t = 0; t < lm.tasks(); ++t) {
        for (std::size_t i = 0; i <= t; ++i) {
            out += std::to_string(t) + "," + std::to_string(i) + "," +
                   detail::fmt_double(lm.at(t, i)) + "\n";
        }
    }
    return out;
}

inline std::string alpha_csv(const RunReport& rep) {
    std::string out = "source_client,source_task,layer,value\n";
    for (const AlphaSummary& a : rep.alpha) {
        out += std::to_string(a.source_client) + "," + std::to_string(a.source_task) + "," +
               a.layer_name + "," + detail::fmt_double(a.value) + "\n";
    }
    return out;
}

// Writes report.json, ledger.json, metrics.csv, loss_matrix.csv, alpha.csv
// and timing.json under out_dir, creating it if needed.
inline void write_run_outputs(const RunReport& rep, const std::string& out_dir) {
    const std::filesystem::path dir(out_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());

    detail::write_file(dir / "report.json", report_to_json(rep).dump(2) + "\n");
    detail::write_file(dir / "ledger.json", ledger_to_json(rep.ledger).dump(2) + "\n");
    detail::write_file(dir / "metrics.csv", metrics_csv(rep));
    detail::write_file(dir / "loss_matrix.csv", loss_matrix_csv(rep.losses));
    detail::write_file(dir / "alpha.csv", alpha_csv(rep));
    nlohmann::ordered_json timing{{"wall_seconds", rep.wall_seconds}, {"workers", rep.workers}};
    detail::write_file(dir / "timing.json", timing.dump(2) + "\n");
}

inline void write_run_outputs(const RunResult& res, const std::string& out_dir) {
    write_run_outputs(build_report(res), out_dir);
}

// --- comparison ------------------------------------------------------------------

struct ReportSummary {
    std::string source;  // directory or file the report came from
    std::string name;
    std::string method;
    std::size_t tasks = 0;
    std::size_t clients = 0;
    double final_avg = 0.0;
    double final_base = 0.0;
    double final_new = 0.0;
    ForgettingResult forgetting;
    std::size_t comm_total = 0;
};

inline ReportSummary summarize_report(const nlohmann::json& j, const std::string& source) {
    try {
        if (j.at("schema").get<std::string>() != "confedmade.report.v1") {
            throw FormatError(source + ": unknown report schema");
        }
        ReportSummary s;
        s.source = source;
        s.name = j.at("name").get<std::string>();
        s.method = j.at("method").get<std::string>();
        s.tasks = j.at("tasks").get<std::size_t>();
        s.clients = j.at("clients").get<std::size_t>();
        const auto& metrics = j.at("metrics");
        if (metrics.contains("final")) {
            s.final_avg = metrics.at("final").at("avg_task_nll").get<double>();
            s.final_base = metrics.at("final").at("base_task_nll").get<double>();
            s.final_new = metrics.at("final").at("new_task_nll").get<double>();
        }
        s.forgetting.value = metrics.at("avg_forgetting").at("value").get<double>();
        s.forgetting.defined = metrics.at("avg_forgetting").at("defined").get<bool>();
        s.comm_total = j.at("communication").at("total").get<std::size_t>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(source + ": malformed report: " + e.what());
    }
}

inline ReportSummary load_report_summary(const std::string& dir_or_file) {
    std::filesystem::path p(dir_or_file);
    if (std::filesystem::is_directory(p)) p /= "report.json";
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(p.string() + ": invalid json: " + e.what());
    }
    return summarize_report(j, dir_or_file);
}

// Fixed-width text table, one row per report, ordered as given.
inline std::string compare_reports_text(const std::vector<ReportSummary>& reports) {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof line, "%-20s %-18s %5s %7s %12s %12s %12s %12s %12s\n", "name",
                  "method", "tasks", "clients", "avg_nll", "base_nll", "new_nll", "forgetting",
                  "comm");
    out += line;
    for (const ReportSummary& s : reports) {
        std::string fg = s.forgetting.defined ? detail::fmt_double(s.forgetting.value) : "n/a";
        if (fg.size() > 12) fg.resize(12);
        std::snprintf(line, sizeof line, "%-20s %-18s %5zu %7zu %12.6f %12.6f %12.6f %12s %12zu\n",
                      s.name.substr(0, 20).c_str(), s.method.substr(0, 18).c_str(), s.tasks,
                      s.clients, s.final_avg, s.final_base, s.final_new, fg.c_str(), s.comm_total);
        out += line;
    }
    return out;
}

}  // namespace confedmade
