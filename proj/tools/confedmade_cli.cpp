// Command line front end: run experiments, check gradients, ablate mask
// synchronization and compare finished runs. Errors print a one-line JSON
// record on stderr and exit nonzero so scripts can react to the type.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "confedmade/federation.hpp"
#include "confedmade/gradcheck.hpp"
#include "confedmade/report.hpp"

using namespace confedmade;

namespace {

struct TypedError {
    std::string type;
    std::string message;
};

TypedError classify(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return {"config", e.what()};
    if (dynamic_cast<const UsageError*>(&e)) return {"usage", e.what()};
    if (dynamic_cast<const DataError*>(&e)) return {"data", e.what()};
    if (dynamic_cast<const FormatError*>(&e)) return {"format", e.what()};
    if (dynamic_cast<const ProtocolError*>(&e)) return {"protocol", e.what()};
    if (dynamic_cast<const NumericError*>(&e)) return {"numeric", e.what()};
    if (dynamic_cast<const DimensionError*>(&e)) return {"dimension", e.what()};
    if (dynamic_cast<const ValidationError*>(&e)) return {"validation", e.what()};
    if (dynamic_cast<const IoError*>(&e)) return {"io", e.what()};
    return {"internal", e.what()};
}

int fail(const std::exception& e) {
    const TypedError te = classify(e);
    nlohmann::ordered_json j{{"error", {{"type", te.type}, {"message", te.message}}}};
    std::fprintf(stderr, "%s\n", j.dump().c_str());
    return 1;
}

void print_run_summary(const RunReport& rep) {
    std::printf("method=%s scenario=%s clients=%zu tasks=%zu rounds/task=%zu\n",
                rep.method.c_str(), rep.scenario.c_str(), rep.clients, rep.tasks,
                rep.rounds_per_task);
    for (const TaskMetrics& m : rep.per_task) {
        std::printf("  task %zu: avg=%.6f base=%.6f new=%.6f\n", m.task, m.avg_task_nll,
                    m.base_task_nll, m.new_task_nll);
    }
    if (rep.forgetting.defined) {
        std::printf("  forgetting=%.6f (literal %.6f)\n", rep.forgetting.value,
                    rep.forgetting_literal.value);
    }
    std::printf("  communicated scalars=%zu wall=%.2fs\n", rep.ledger.total(), rep.wall_seconds);
    for (const std::string& w : rep.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
}

// --- run ---------------------------------------------------------------------

struct RunArgs {
    std::string config_path;
    std::string method;
    std::string out_dir = "out";
    std::string data_dir;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::size_t rounds = 0;
    std::size_t clients = 0;
    std::size_t tasks = 0;
    std::size_t epochs = 0;
    std::size_t batch = 0;
};

int cmd_run(const RunArgs& a, const CLI::App& sub) {
    ScenarioConfig cfg = load_config(a.config_path);
    if (sub.count("--method")) cfg.method = method_from_name(a.method);
    if (sub.count("--seed")) cfg.seed = a.seed;
    if (sub.count("--rounds")) cfg.rounds_per_task = a.rounds;
    if (sub.count("--clients")) cfg.clients = a.clients;
    if (sub.count("--tasks")) cfg.tasks_per_client = a.tasks;
    if (sub.count("--epochs")) cfg.epochs_per_round = a.epochs;
    if (sub.count("--batch-size")) cfg.batch_size = a.batch;
    if (sub.count("--data-dir")) cfg.data_dir = a.data_dir;

    RunResult res = run_scenario(cfg, a.workers);
    RunReport rep = build_report(res);
    write_run_outputs(rep, a.out_dir);
    print_run_summary(rep);
    std::printf("outputs in %s\n", a.out_dir.c_str());
    return 0;
}

// --- gradcheck ----------------------------------------------------------------

// Finite-difference audit of every analytic gradient the trainer uses: the
// plain masked model and both decomposed objectives, including gate logits,
// adaptives and attention coefficients.
int cmd_gradcheck(std::uint64_t seed, double tolerance) {
    MadeConfig cfg;
    cfg.input_dim = 6;
    cfg.hidden = {7, 5};
    cfg.direct_connections = true;
    // Central differences and the relu kink do not mix; tanh exercises the
    // same backward code without measure-zero noise.
    cfg.activation = Activation::Tanh;

    RngStream rng(derive_seed(seed, "gradcheck"));
    MaskSet masks;
    {
        auto [o, asg] = sample_ordering_and_assignments(cfg, rng);
        masks = build_masks(cfg, o, asg);
    }
    DenseMatrix batch(4, cfg.input_dim);
    for (double& v : batch.values) v = rng.bernoulli(0.5) ? 1.0 : 0.0;

    bool ok = true;
    const auto report = [&](const char* name, const GradCheckResult& r) {
        const bool pass = r.max_rel_err <= tolerance;
        ok = ok && pass;
        std::printf("%-22s max_rel_err=%.3e over %zu params  %s\n", name, r.max_rel_err, r.checked,
                    pass ? "ok" : "FAIL");
    };

    {
        ParamSet params = make_params(cfg);
        glorot_init(params, rng);
        std::vector<double*> ptrs;
        append_pointers(params, ptrs);
        const auto loss = [&] {
            ForwardCache cache;
            made_forward(cfg, masked_weights(params, masks), params.biases, batch, cache);
            return made_nll(cfg, cache, batch);
        };
        ForwardCache cache;
        const auto eff = masked_weights(params, masks);
        made_forward(cfg, eff, params.biases, batch, cache);
        MadeBackward bw;
        made_backward(cfg, eff, cache, batch, bw);
        Vector analytic;
        for (std::size_t i = 0; i < bw.grad_w_eff.size(); ++i) {
            for (std::size_t j = 0; j < bw.grad_w_eff[i].size(); ++j) {
                analytic.push_back(bw.grad_w_eff[i].values[j] * masks[i].values[j]);
            }
        }
        for (const auto& b : bw.grad_b) analytic.insert(analytic.end(), b.begin(), b.end());
        // Floor at 1e-6: masked coordinates have an exactly-zero analytic
        // gradient while the central difference still carries ~1e-11 of
        // cancellation noise from the loss evaluation.
        report("masked nll", finite_diff_check(loss, ptrs, analytic, 1e-5, 1e-6));
    }

    for (const bool masked_l1 : {true, false}) {
        ClientDecomp dec;
        dec.base = make_params(cfg);
        glorot_init(dec.base, rng);
        dec.gate_logits = make_gate_logits(cfg, rng);
        init_task_adaptive(dec, 100.0);
        std::vector<FrozenTaskSnapshot> snapshots;
        snapshots.push_back(snapshot_task(dec, 0, 0.1));
        init_task_adaptive(dec, 50.0);  // second task so the drift term is live

        KnowledgeBase kb;
        for (std::size_t e = 0; e < 2; ++e) {
            KnowledgeEntry entry;
            entry.client = e + 1;  // self is client 0, both entries attend
            entry.task = 0;
            for (const auto& w : dec.base.weights) {
                DenseMatrix k(w.rows, w.cols);
                for (double& v : k.values) v = rng.normal(0.0, 0.05);
                entry.weights.push_back(std::move(k));
            }
            kb.entries.push_back(std::move(entry));
            dec.alpha.emplace_back(dec.base.weights.size(), 0.1);
        }

        LossOptions opts;
        opts.lambda1 = 1e-3;
        opts.lambda2 = 10.0;
        opts.l1_mask_weights = masked_l1;

        std::vector<double*> ptrs;
        append_pointers(dec, ptrs);
        const auto loss = [&] {
            return decomposed_loss(cfg, masks, dec, kb, 0, snapshots, batch, opts, nullptr).total;
        };
        DecompGrads g = make_grads_like(dec);
        decomposed_loss(cfg, masks, dec, kb, 0, snapshots, batch, opts, &g);
        report(masked_l1 ? "decomposed (masked L1)" : "decomposed (plain L1)",
               finite_diff_check(loss, ptrs, flatten_grads(g), 1e-5, 1e-6));
    }

    std::printf("gradcheck %s (tolerance %.1e)\n", ok ? "passed" : "failed", tolerance);
    return ok ? 0 : 1;
}

// --- ablate-masks ---------------------------------------------------------------

int cmd_ablate(const std::string& config_path, const std::string& clients_csv,
               const std::string& sync_mode, const std::string& method,
               const std::string& out_path, std::size_t workers) {
    std::vector<std::size_t> client_counts;
    {
        std::string tok;
        for (char ch : clients_csv + ",") {
            if (ch == ',') {
                if (!tok.empty()) client_counts.push_back(std::stoul(tok));
                tok.clear();
            } else {
                tok += ch;
            }
        }
    }
    if (client_counts.empty()) throw UsageError("--clients needs at least one count");
    std::vector<bool> sync_values;
    if (sync_mode == "both") {
        sync_values = {true, false};
    } else if (sync_mode == "on") {
        sync_values = {true};
    } else if (sync_mode == "off") {
        sync_values = {false};
    } else {
        throw UsageError("--sync must be one of: both, on, off");
    }

    ScenarioConfig base = load_config(config_path);
    if (!method.empty()) base.method = method_from_name(method);

    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    std::printf("%-8s %-6s %12s %12s %12s\n", "clients", "sync", "avg_nll", "new_nll", "comm");
    for (std::size_t k : client_counts) {
        for (bool sync : sync_values) {
            ScenarioConfig cfg = base;
            cfg.clients = k;
            cfg.masks.synchronized_masks = sync;
            RunResult res = run_scenario(cfg, workers);
            const std::size_t last = res.losses.tasks() - 1;
            const double avg = avg_task_nll(res.losses, last);
            const double nn = new_task_loss(res.losses, last);
            std::printf("%-8zu %-6s %12.6f %12.6f %12zu\n", k, sync ? "on" : "off", avg, nn,
                        res.ledger.total());
            rows.push_back(nlohmann::ordered_json{{"clients", k},
                                                  {"synchronized", sync},
                                                  {"avg_task_nll", avg},
                                                  {"new_task_nll", nn},
                                                  {"comm_total", res.ledger.total()}});
        }
    }
    if (!out_path.empty()) {
        detail::write_file(out_path, rows.dump(2) + "\n");
        std::printf("wrote %s\n", out_path.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated continual learning for masked autoencoders"};
    app.require_subcommand(1);

    RunArgs ra;
    CLI::App* run = app.add_subcommand("run", "run one experiment and export its reports");
    run->add_option("--config", ra.config_path, "scenario json")->required();
    run->add_option("--method", ra.method, "override the configured method");
    run->add_option("--seed", ra.seed, "override the configured seed");
    run->add_option("--out", ra.out_dir, "output directory (default: out)");
    run->add_option("--workers", ra.workers, "client threads (default: 1)");
    run->add_option("--rounds", ra.rounds, "override rounds per task");
    run->add_option("--clients", ra.clients, "override client count");
    run->add_option("--tasks", ra.tasks, "override tasks per client");
    run->add_option("--epochs", ra.epochs, "override epochs per round");
    run->add_option("--batch-size", ra.batch, "override batch size");
    run->add_option("--data-dir", ra.data_dir, "dataset directory (default: $CONFEDMADE_DATA_DIR)");

    std::uint64_t gc_seed = 1;
    double gc_tol = 1e-4;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference audit of all gradients");
    gc->add_option("--seed", gc_seed, "rng seed (default: 1)");
    gc->add_option("--tolerance", gc_tol, "max relative error accepted (default: 1e-4)");

    std::string ab_config, ab_clients = "1,2,5", ab_sync = "both", ab_method, ab_out;
    std::size_t ab_workers = 1;
    CLI::App* ab = app.add_subcommand("ablate-masks",
                                      "rerun a scenario across client counts and mask modes");
    ab->add_option("--config", ab_config, "scenario json")->required();
    ab->add_option("--clients", ab_clients, "comma separated client counts (default: 1,2,5)");
    ab->add_option("--sync", ab_sync, "both | on | off (default: both)");
    ab->add_option("--method", ab_method, "override the configured method");
    ab->add_option("--out", ab_out, "write the ablation table to this json file");
    ab->add_option("--workers", ab_workers, "client threads (default: 1)");

    std::vector<std::string> cmp_dirs;
    CLI::App* rep = app.add_subcommand("report", "summarize finished runs");
    rep->add_option("--compare", cmp_dirs, "run directories (or report.json files)")
        ->required()
        ->expected(-1);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(ra, *run);
        if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_tol);
        if (ab->parsed()) {
            return cmd_ablate(ab_config, ab_clients, ab_sync, ab_method, ab_out, ab_workers);
        }
        if (rep->parsed()) {
            std::vector<ReportSummary> sums;
            for (const std::string& d : cmp_dirs) sums.push_back(load_report_summary(d));
            std::fputs(compare_reports_text(sums).c_str(), stdout);
            return 0;
        }
    } catch (const std::exception& e) {
        return fail(e);
    }
    return 0;
}
