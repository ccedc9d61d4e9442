#pragma once

// Round-based federated training engine. A FederatedRun owns the server
// state and every client runtime; run() drives the broadcast / local train /
// upload / aggregate loop over all tasks and rounds, and each protocol step
// is also public so tests can drive a round by hand and inspect the traffic.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <functional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "confedmade/adam.hpp"
#include "confedmade/baselines.hpp"
#include "confedmade/config.hpp"
#include "confedmade/decomposition.hpp"
#include "confedmade/errors.hpp"
#include "confedmade/ledger.hpp"
#include "confedmade/made.hpp"
#include "confedmade/methods.hpp"
#include "confedmade/metrics.hpp"
#include "confedmade/payloads.hpp"
#include "confedmade/scenario.hpp"

namespace confedmade {

// Arithmetic mean of the client parameter sets. Sums run in extended
// precision, in client order, so averaging k identical models returns them
// bit for bit and the result never depends on the worker count.
inline ParamSet fedavg_aggregate(const std::vector<ParamSet>& clients) {
    if (clients.empty()) throw ProtocolError("fedavg_aggregate: no client updates");
    for (std::size_t c = 1; c < clients.size(); ++c) {
        require_same_shape(clients[0], clients[c], "fedavg_aggregate");
    }
    const long double inv = 1.0L / static_cast<long double>(clients.size());
    ParamSet out = zeros_like(clients[0]);
    for (std::size_t i = 0; i < out.weights.size(); ++i) {
        for (std::size_t j = 0; j < out.weights[i].size(); ++j) {
            long double acc = 0.0L;
            for (const auto& c : clients) acc += c.weights[i].values[j];
            out.weights[i].values[j] = static_cast<double>(acc * inv);
        }
    }
    for (std::size_t i = 0; i < out.biases.size(); ++i) {
        for (std::size_t j = 0; j < out.biases[i].size(); ++j) {
            long double acc = 0.0L;
            for (const auto& c : clients) acc += c.biases[i][j];
            out.biases[i][j] = static_cast<double>(acc * inv);
        }
    }
    return out;
}

// Runs fn(0), .., fn(n-1) on up to `workers` threads. Every exception is
// captured in its index's slot and the lowest-index one is rethrown after
// the join, so a failing client reports identically at any worker count.
inline void parallel_for_index(std::size_t n, std::size_t workers,
                               const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    workers = std::clamp<std::size_t>(workers, 1, n);
    std::vector<std::exception_ptr> errors(n);
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                while (true) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= n) return;
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// --- mask state ----------------------------------------------------------------

struct MaskState {
    Ordering ordering;
    MaskAssignments assignments;
    MaskSet masks;
};

inline MaskState initial_mask_state(const MadeConfig& cfg, std::uint64_t seed) {
    RngStream rng(seed);
    MaskState ms;
    auto [ordering, assignments] = sample_ordering_and_assignments(cfg, rng);
    ms.ordering = std::move(ordering);
    ms.assignments = std::move(assignments);
    ms.masks = build_masks(cfg, ms.ordering, ms.assignments);
    return ms;
}

// Redraws only the agnostic pieces: the ordering when order-agnostic, the
// degrees when connectivity-agnostic. With both flags off this is a no-op,
// so a resample never disturbs a fixed-topology model.
inline void resample_mask_state(const MadeConfig& cfg, MaskState& ms, std::uint64_t seed) {
    if (!cfg.order_agnostic && !cfg.connectivity_agnostic) return;
    RngStream rng(seed);
    if (cfg.order_agnostic) ms.ordering = random_ordering(cfg.input_dim, rng);
    if (cfg.connectivity_agnostic) ms.assignments = sample_assignments(cfg, rng);
    ms.masks = build_masks(cfg, ms.ordering, ms.assignments);
}

// --- run state -------------------------------------------------------------------

struct ServerState {
    ParamSet global;
    KnowledgeBase kb;
    std::set<std::pair<std::size_t, std::size_t>> kb_keys;  // (client, task) duplicate guard
    std::vector<std::size_t> kb_sent;  // per client: kb entries already delivered
};

struct TaskView {
    DenseMatrix train;
    DenseMatrix validation;
    DenseMatrix test;
};

// Everything one client owns during a run. `masks` is the state the current
// round trains under; `canonical` is the initial topology, used for every
// evaluation so resampling noise never leaks into the metrics.
struct ClientRuntime {
    std::size_t id = 0;
    MaskState masks;
    MaskState canonical;
    std::uint64_t round_mask_seed = 0;  // last synchronized seed received

    ParamSet params;  // plain methods

    ClientDecomp dec;  // decomposition methods
    std::vector<FrozenTaskSnapshot> snapshots;
    KnowledgeBase kb;  // entries received from the server, local index order

    std::vector<FisherDiagonal> fishers;  // one per finished task (ewc)
    ParamSet prox_ref;
    bool has_prox_ref = false;

    std::vector<TaskView> tasks;
    DenseMatrix active_train;  // what this task's rounds actually fit
    std::size_t current_task = static_cast<std::size_t>(-1);

    AdamOptimizer opt;
    std::vector<std::size_t> slot_base_w, slot_base_b, slot_gates, slot_alpha;
    std::vector<std::vector<std::size_t>> slot_adaptives;
};

// One learned attention coefficient: how much `client` draws from knowledge
// published by (source_client, source_task) in weight tensor `layer`.
struct AlphaRecord {
    std::size_t client = 0;
    std::size_t source_client = 0;
    std::size_t source_task = 0;
    std::size_t layer = 0;
    double value = 0.0;
};

struct RunResult {
    ScenarioConfig config;  // after method wiring pins and input-dim resolution
    MethodWiring wiring;
    std::size_t clients = 0;
    std::size_t tasks = 0;
    LossMatrix losses;  // mean over clients
    std::vector<LossMatrix> per_client;
    CommLedger ledger;
    std::vector<AlphaRecord> alpha;
    std::vector<std::string> warnings;
    std::size_t workers = 1;
    double wall_seconds = 0.0;  // timing file only, never in the canonical report
};

namespace detail {

inline std::string weight_tensor_name(const MadeConfig& cfg, std::size_t i) {
    const std::size_t nl = cfg.hidden.size();
    if (i < nl) return "W" + std::to_string(i + 1);
    return i == nl ? "V" : "D";
}

inline std::string bias_tensor_name(const MadeConfig& cfg, std::size_t l) {
    return l < cfg.hidden.size() ? "b" + std::to_string(l + 1) : "c";
}

// Collapses every (client, task) block into a single task per output client.
// Rows are pooled split by split in (client, task, row) order and dealt out
// round-robin, so the stream is identical for any worker count.
inline ScenarioData pool_tasks(const ScenarioData& in, std::size_t clients_out) {
    if (clients_out == 0) throw UsageError("pool_tasks: need at least one client");
    struct RowRef {
        const BinaryDataset* ds;
        std::size_t row;
    };
    std::vector<RowRef> pooled[3];
    for (const auto& cl : in.clients) {
        for (const auto& td : cl.tasks) {
            for (std::size_t i : td.data.splits.train) pooled[0].push_back({&td.data, i});
            for (std::size_t i : td.data.splits.validation) pooled[1].push_back({&td.data, i});
            for (std::size_t i : td.data.splits.test) pooled[2].push_back({&td.data, i});
        }
    }
    ScenarioData out;
    out.input_dim = in.input_dim;
    out.warnings = in.warnings;
    out.clients.resize(clients_out);
    for (std::size_t c = 0; c < clients_out; ++c) {
        std::vector<RowRef> mine[3];
        for (int s = 0; s < 3; ++s) {
            for (std::size_t k = c; k < pooled[s].size(); k += clients_out) {
                mine[s].push_back(pooled[s][k]);
            }
        }
        TaskData td;
        td.spec.dataset = "union";
        td.description = "union";
        td.data.provenance = "union";
        const std::size_t total = mine[0].size() + mine[1].size() + mine[2].size();
        td.data.x = DenseMatrix(total, in.input_dim);
        std::size_t r = 0;
        for (int s = 0; s < 3; ++s) {
            auto& idx = s == 0   ? td.data.splits.train
                        : s == 1 ? td.data.splits.validation
                                 : td.data.splits.test;
            for (const RowRef& ref : mine[s]) {
                std::copy(ref.ds->x.row(ref.row), ref.ds->x.row(ref.row) + in.input_dim,
                          td.data.x.row(r));
                idx.push_back(r);
                ++r;
            }
        }
        td.data.validate();
        out.clients[c].tasks.push_back(std::move(td));
    }
    return out;
}

}  // namespace detail

// --- the engine -------------------------------------------------------------------

class FederatedRun {
  public:
    explicit FederatedRun(const ScenarioConfig& in, std::size_t workers = 1)
        : cfg_(in), wiring_(wiring_for(in.method)), workers_(std::max<std::size_t>(1, workers)) {
        if (wiring_.synchronized_masks) {
            cfg_.masks.synchronized_masks = *wiring_.synchronized_masks;
        }
        if (wiring_.direct_connections) {
            cfg_.model.direct_connections = *wiring_.direct_connections;
        }
        if (wiring_.order_agnostic) cfg_.model.order_agnostic = *wiring_.order_agnostic;
        if (wiring_.connectivity_agnostic) {
            cfg_.model.connectivity_agnostic = *wiring_.connectivity_agnostic;
        }

        // Offline variants pool every (client, task) block; the single-client
        // baselines run client 0's task sequence with no communication.
        ScenarioConfig data_cfg = cfg_;
        if (!wiring_.federated && !wiring_.union_tasks) {
            data_cfg.clients = 1;
            if (!data_cfg.client_tasks.empty()) data_cfg.client_tasks.resize(1);
        }
        ScenarioData data = materialize_scenario(data_cfg);
        if (!wiring_.federated && !wiring_.union_tasks && data.clients.size() > 1) {
            data.clients.resize(1);
        }
        const std::size_t t_orig = data.clients.empty() ? 0 : data.clients[0].tasks.size();
        if (wiring_.union_tasks) {
            data = detail::pool_tasks(data, wiring_.federated ? cfg_.clients : 1);
            rounds_ = cfg_.rounds_per_task * std::max<std::size_t>(t_orig, 1);
        } else {
            rounds_ = cfg_.rounds_per_task;
        }
        if (!wiring_.federated) {
            cfg_.clients = 1;
            if (!cfg_.client_tasks.empty()) cfg_.client_tasks.resize(1);
        }

        model_cfg_ = cfg_.model;
        model_cfg_.input_dim = data.input_dim;
        cfg_.model.input_dim = data.input_dim;
        warnings_ = data.warnings;
        n_clients_ = data.clients.size();
        tasks_ = data.clients.empty() ? 0 : data.clients[0].tasks.size();

        server_.global = make_params(model_cfg_);
        {
            RngStream g(derive_seed(cfg_.seed, "global-init"));
            glorot_init(server_.global, g);
        }
        server_.kb_sent.assign(n_clients_, 0);

        clients_.resize(n_clients_);
        per_client_losses_.resize(n_clients_);
        for (std::size_t c = 0; c < n_clients_; ++c) {
            ClientRuntime& cl = clients_[c];
            cl.id = c;
            const std::uint64_t mask_seed = cfg_.masks.synchronized_masks
                                                ? derive_seed(cfg_.seed, "mask-init")
                                                : derive_seed(cfg_.seed, "mask-client", {c});
            cl.masks = initial_mask_state(model_cfg_, mask_seed);
            cl.canonical = cl.masks;
            if (wiring_.decomposition) {
                cl.dec.base = server_.global;  // round 0 broadcast overwrites this anyway
                RngStream g(derive_seed(cfg_.seed, "gates", {c}));
                cl.dec.gate_logits = make_gate_logits(model_cfg_, g);
            } else if (wiring_.federated) {
                cl.params = make_params(model_cfg_);
                RngStream g(derive_seed(cfg_.seed, "client-init", {c}));
                glorot_init(cl.params, g);
            } else {
                cl.params = server_.global;  // same start as a one-client federation
            }
            for (const TaskData& td : data.clients[c].tasks) {
                cl.tasks.push_back(TaskView{split_matrix(td.data, td.data.splits.train),
                                            split_matrix(td.data, td.data.splits.validation),
                                            split_matrix(td.data, td.data.splits.test)});
            }
        }
    }

    // -- protocol steps, callable one by one ---------------------------------

    std::vector<BroadcastPayload> broadcast_round_start() {
        if (!wiring_.federated) throw UsageError("broadcast_round_start: method is not federated");
        const bool resampling = resampling_active();
        const bool sync_seed = cfg_.masks.synchronized_masks && !cfg_.masks.client_local;
        std::vector<BroadcastPayload> out(n_clients_);
        for (std::size_t c = 0; c < n_clients_; ++c) {
            BroadcastPayload& p = out[c];
            p.global = server_.global;
            if (sync_seed && (resampling || (task_ == 0 && round_ == 0))) {
                p.has_mask_seed = true;
                p.mask_seed = resampling ? derive_seed(cfg_.seed, "mask", {task_, round_})
                                         : derive_seed(cfg_.seed, "mask-init");
            }
            if (wiring_.decomposition && round_ == 0) {
                for (std::size_t e = server_.kb_sent[c]; e < server_.kb.entries.size(); ++e) {
                    const KnowledgeEntry& ke = server_.kb.entries[e];
                    if (ke.client == c) continue;  // a client never re-downloads its own work
                    KnowledgeDelta kd;
                    kd.client = ke.client;
                    kd.task = ke.task;
                    for (const DenseMatrix& w : ke.weights) {
                        kd.shapes.emplace_back(w.rows, w.cols);
                        kd.weights.push_back(sparsify(w));
                    }
                    p.knowledge.push_back(std::move(kd));
                }
            }
            ledger_.record(task_, round_, c, Direction::ServerToClient, "global",
                           p.global_nonzeros());
            if (p.has_mask_seed) {
                ledger_.record(task_, round_, c, Direction::ServerToClient, "mask-seed", 1);
            }
            if (!p.knowledge.empty()) {
                ledger_.record(task_, round_, c, Direction::ServerToClient, "knowledge",
                               p.knowledge_nonzeros());
            }
        }
        if (wiring_.decomposition && round_ == 0) {
            for (std::size_t c = 0; c < n_clients_; ++c) {
                server_.kb_sent[c] = server_.kb.entries.size();
            }
        }
        return out;
    }

    UploadPayload client_train_round(std::size_t c, const BroadcastPayload& payload) {
        ClientRuntime& cl = clients_.at(c);
        try {
            apply_broadcast(cl, payload);
            if (cl.current_task != task_) begin_client_task(cl);
            maybe_resample_round(cl);
            run_epochs(cl);
            return build_upload(cl);
        } catch (...) {
            rethrow_with_context(step_context(c));
        }
    }

    void aggregate(const std::vector<UploadPayload>& uploads) {
        if (!wiring_.federated) throw UsageError("aggregate: method is not federated");
        if (uploads.size() != n_clients_) {
            throw ProtocolError("aggregate: expected " + std::to_string(n_clients_) +
                                " uploads, got " + std::to_string(uploads.size()));
        }
        std::vector<ParamSet> params;
        params.reserve(uploads.size());
        for (std::size_t c = 0; c < uploads.size(); ++c) {
            if (uploads[c].client != c) {
                throw ProtocolError("aggregate: upload " + std::to_string(c) + " came from client " +
                                    std::to_string(uploads[c].client));
            }
            ledger_.record(task_, round_, c, Direction::ClientToServer, "update",
                           uploads[c].nonzero_count());
            params.push_back(upload_to_dense(uploads[c]));
            try {
                require_same_shape(params.back(), server_.global, "aggregate");
            } catch (const DimensionError& e) {
                throw ProtocolError("client " + std::to_string(c) +
                                    " uploaded parameters of the wrong shape: " + e.what());
            }
        }
        server_.global = fedavg_aggregate(params);
        ++round_;
    }

    // Trains the single local client for one round. Round counterpart of
    // broadcast + train + aggregate for the non-federated baselines.
    void local_round() {
        if (wiring_.federated) throw UsageError("local_round: method is federated");
        ClientRuntime& cl = clients_.at(0);
        try {
            if (cl.current_task != task_) begin_client_task(cl);
            maybe_resample_round(cl);
            run_epochs(cl);
        } catch (...) {
            rethrow_with_context(step_context(0));
        }
        ++round_;
    }

    // Task boundary: publish adaptives into the server knowledge base, pin
    // per-task snapshots, accumulate Fisher curvature, advance the counters.
    void finish_task() {
        if (task_ >= tasks_) throw UsageError("finish_task: no task in progress");
        for (std::size_t c = 0; c < n_clients_; ++c) {
            ClientRuntime& cl = clients_[c];
            try {
                if (cl.current_task != task_) begin_client_task(cl);  // zero-round edge
                if (wiring_.decomposition) {
                    KnowledgeEntry entry =
                        make_knowledge_entry(cl.dec, c, task_, cfg_.hp.sparsity_floor);
                    std::size_t nnz = 0;
                    for (const DenseMatrix& w : entry.weights) nnz += count_nonzero(w);
                    ledger_.record(task_, round_, c, Direction::ClientToServer, "adaptive", nnz);
                    if (!server_.kb_keys.insert({c, task_}).second) {
                        throw ProtocolError("duplicate knowledge entry for client " +
                                            std::to_string(c) + " task " + std::to_string(task_));
                    }
                    server_.kb.entries.push_back(std::move(entry));
                    cl.snapshots.push_back(snapshot_task(cl.dec, task_, cfg_.hp.mask_cutoff));
                }
                if (wiring_.ewc_penalty) {
                    MadeModel m;
                    m.cfg = model_cfg_;
                    m.params = cl.params;
                    m.ordering = cl.masks.ordering;
                    m.assignments = cl.masks.assignments;
                    m.masks = cl.masks.masks;
                    cl.fishers.push_back(compute_fisher(m, cl.tasks[task_].train));
                }
            } catch (...) {
                rethrow_with_context(step_context(c));
            }
        }
        ++task_;
        round_ = 0;
    }

    // Mean test NLL per past task, and the matching per-client rows. Call
    // after finish_task; evaluates the row for the task just finished.
    std::vector<double> evaluate_row() {
        if (task_ == 0) throw UsageError("evaluate_row: no finished task yet");
        const std::size_t t = task_ - 1;
        std::vector<std::vector<double>> rows(n_clients_);
        parallel_for_index(n_clients_, workers_, [&](std::size_t c) {
            try {
                rows[c] = eval_client(clients_[c], t);
            } catch (...) {
                rethrow_with_context("evaluating task " + std::to_string(t) + " client " +
                                     std::to_string(c) + ": ");
            }
        });
        std::vector<double> mean(t + 1, 0.0);
        for (std::size_t c = 0; c < n_clients_; ++c) {
            per_client_losses_[c].push_row(rows[c]);
            for (std::size_t i = 0; i <= t; ++i) mean[i] += rows[c][i];
        }
        for (double& v : mean) v /= static_cast<double>(n_clients_);
        losses_.push_row(mean);
        return mean;
    }

    RunResult run() {
        const auto start = std::chrono::steady_clock::now();
        for (std::size_t t = 0; t < tasks_; ++t) {
            for (std::size_t r = 0; r < rounds_; ++r) {
                if (wiring_.federated) {
                    const std::vector<BroadcastPayload> payloads = broadcast_round_start();
                    std::vector<UploadPayload> uploads(n_clients_);
                    parallel_for_index(n_clients_, workers_, [&](std::size_t c) {
                        uploads[c] = client_train_round(c, payloads[c]);
                    });
                    aggregate(uploads);
                } else {
                    local_round();
                }
            }
            finish_task();
            evaluate_row();
        }
        ledger_.verify();

        RunResult res;
        res.config = cfg_;
        res.wiring = wiring_;
        res.clients = n_clients_;
        res.tasks = tasks_;
        res.losses = losses_;
        res.per_client = per_client_losses_;
        res.ledger = ledger_;
        res.warnings = warnings_;
        res.workers = workers_;
        if (wiring_.decomposition) {
            for (std::size_t c = 0; c < n_clients_; ++c) {
                const ClientRuntime& cl = clients_[c];
                for (std::size_t e = 0; e < cl.kb.entries.size(); ++e) {
                    for (std::size_t i = 0; i < cl.dec.alpha[e].size(); ++i) {
                        res.alpha.push_back({c, cl.kb.entries[e].client, cl.kb.entries[e].task, i,
                                             cl.dec.alpha[e][i]});
                    }
                }
            }
        }
        res.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return res;
    }

    // -- introspection --------------------------------------------------------

    const ScenarioConfig& config() const { return cfg_; }
    const MadeConfig& model_config() const { return model_cfg_; }
    const MethodWiring& wiring() const { return wiring_; }
    const ServerState& server() const { return server_; }
    const ClientRuntime& client(std::size_t c) const { return clients_.at(c); }
    std::size_t clients() const { return n_clients_; }
    std::size_t tasks() const { return tasks_; }
    std::size_t rounds_per_task() const { return rounds_; }
    std::size_t task() const { return task_; }
    std::size_t round() const { return round_; }
    const CommLedger& ledger() const { return ledger_; }
    const LossMatrix& losses() const { return losses_; }

  private:
    bool resampling_active() const {
        return cfg_.masks.cadence != ResampleCadence::None &&
               (model_cfg_.order_agnostic || model_cfg_.connectivity_agnostic);
    }

    std::string step_context(std::size_t c) const {
        return "task " + std::to_string(task_) + " round " + std::to_string(round_) + " client " +
               std::to_string(c) + ": ";
    }

    void apply_broadcast(ClientRuntime& cl, const BroadcastPayload& payload) {
        ParamSet& target = wiring_.decomposition ? cl.dec.base : cl.params;
        try {
            require_same_shape(payload.global, target, "broadcast");
        } catch (const DimensionError& e) {
            throw ProtocolError(std::string("broadcast does not match the local architecture: ") +
                                e.what());
        }
        target = payload.global;
        if (wiring_.fedprox_penalty) {
            cl.prox_ref = payload.global;
            cl.has_prox_ref = true;
        }
        if (payload.has_mask_seed) cl.round_mask_seed = payload.mask_seed;
        for (const KnowledgeDelta& kd : payload.knowledge) {
            KnowledgeEntry e;
            e.client = kd.client;
            e.task = kd.task;
            for (std::size_t i = 0; i < kd.weights.size(); ++i) {
                DenseMatrix w(kd.shapes[i].first, kd.shapes[i].second);
                densify(kd.weights[i], w);
                e.weights.push_back(std::move(w));
            }
            cl.kb.entries.push_back(std::move(e));
            cl.dec.alpha.emplace_back(cl.dec.base.weights.size(), 0.1);
        }
    }

    void begin_client_task(ClientRuntime& cl) {
        cl.current_task = task_;
        if (wiring_.cumulative_data) {
            std::size_t total = 0;
            for (std::size_t i = 0; i <= task_; ++i) total += cl.tasks[i].train.rows;
            cl.active_train = DenseMatrix(total, model_cfg_.input_dim);
            std::size_t r = 0;
            for (std::size_t i = 0; i <= task_; ++i) {
                const DenseMatrix& src = cl.tasks[i].train;
                std::copy(src.values.begin(), src.values.end(), cl.active_train.row(r));
                r += src.rows;
            }
        } else {
            cl.active_train = cl.tasks[task_].train;
        }
        if (wiring_.decomposition) init_task_adaptive(cl.dec, cfg_.hp.lambda3);
        reset_optimizer(cl);
    }

    // Fresh optimizer per task; slots registered in a fixed order so moment
    // indices are stable. Weight decay applies to the base weights only.
    void reset_optimizer(ClientRuntime& cl) {
        cl.opt = AdamOptimizer(cfg_.hp.adam());
        cl.slot_base_w.clear();
        cl.slot_base_b.clear();
        cl.slot_gates.clear();
        cl.slot_alpha.clear();
        cl.slot_adaptives.clear();
        ParamSet& base = wiring_.decomposition ? cl.dec.base : cl.params;
        for (std::size_t i = 0; i < base.weights.size(); ++i) {
            cl.slot_base_w.push_back(cl.opt.register_slot(
                base.weights[i].size(), true, detail::weight_tensor_name(model_cfg_, i)));
        }
        for (std::size_t l = 0; l < base.biases.size(); ++l) {
            cl.slot_base_b.push_back(cl.opt.register_slot(
                base.biases[l].size(), false, detail::bias_tensor_name(model_cfg_, l)));
        }
        if (!wiring_.decomposition) return;
        for (std::size_t g = 0; g < cl.dec.gate_logits.size(); ++g) {
            cl.slot_gates.push_back(cl.opt.register_slot(cl.dec.gate_logits[g].size(), false,
                                                         "gate" + std::to_string(g)));
        }
        cl.slot_adaptives.resize(cl.dec.adaptives.size());
        for (std::size_t t = 0; t < cl.dec.adaptives.size(); ++t) {
            for (std::size_t i = 0; i < cl.dec.adaptives[t].size(); ++i) {
                cl.slot_adaptives[t].push_back(
                    cl.opt.register_slot(cl.dec.adaptives[t][i].size(), false,
                                         "A" + std::to_string(t) + "." +
                                             detail::weight_tensor_name(model_cfg_, i)));
            }
        }
        for (std::size_t e = 0; e < cl.dec.alpha.size(); ++e) {
            cl.slot_alpha.push_back(
                cl.opt.register_slot(cl.dec.alpha[e].size(), false, "alpha" + std::to_string(e)));
        }
    }

    void maybe_resample_round(ClientRuntime& cl) {
        if (cfg_.masks.cadence != ResampleCadence::PerRound || !resampling_active()) return;
        const std::uint64_t seed = use_shared_seed()
                                       ? cl.round_mask_seed
                                       : derive_seed(cfg_.seed, "mask-local", {cl.id, task_, round_});
        resample_mask_state(model_cfg_, cl.masks, seed);
    }

    void maybe_resample_batch(ClientRuntime& cl, std::size_t epoch, std::size_t batch) {
        if (cfg_.masks.cadence != ResampleCadence::PerBatch || !resampling_active()) return;
        const std::uint64_t seed =
            use_shared_seed()
                ? derive_seed(cl.round_mask_seed, "batch", {epoch, batch})
                : derive_seed(cfg_.seed, "mask-local", {cl.id, task_, round_, epoch, batch});
        resample_mask_state(model_cfg_, cl.masks, seed);
    }

    bool use_shared_seed() const {
        return wiring_.federated && cfg_.masks.synchronized_masks && !cfg_.masks.client_local;
    }

    void run_epochs(ClientRuntime& cl) {
        const DenseMatrix& train = cl.active_train;
        if (train.rows == 0) return;  // materialize already warned about this
        const std::size_t bs = std::min<std::size_t>(cfg_.batch_size, train.rows);
        for (std::size_t e = 0; e < cfg_.epochs_per_round; ++e) {
            RngStream perm(derive_seed(cfg_.seed, "batches", {cl.id, task_, round_, e}));
            const std::vector<std::size_t> order = perm.permutation(train.rows);
            DenseMatrix batch;
            for (std::size_t start = 0, b = 0; start < order.size(); start += bs, ++b) {
                maybe_resample_batch(cl, e, b);
                const std::size_t n = std::min(bs, order.size() - start);
                batch = DenseMatrix(n, train.cols);
                for (std::size_t k = 0; k < n; ++k) {
                    std::copy(train.row(order[start + k]), train.row(order[start + k]) + train.cols,
                              batch.row(k));
                }
                train_step(cl, batch);
            }
        }
    }

    void train_step(ClientRuntime& cl, const DenseMatrix& batch) {
        if (wiring_.decomposition) {
            LossOptions opts;
            opts.lambda1 = cfg_.hp.lambda1;
            opts.lambda2 = cfg_.hp.lambda2;
            opts.gate = cfg_.hp.gate_identity ? GateMode::One : GateMode::Sigmoid;
            opts.use_adaptive = cfg_.hp.use_adaptive;
            opts.use_knowledge = cfg_.hp.use_knowledge;
            opts.l1_mask_weights = wiring_.masked_objective;
            DecompGrads g = make_grads_like(cl.dec);
            decomposed_loss(model_cfg_, cl.masks.masks, cl.dec, cl.kb, cl.id, cl.snapshots, batch,
                            opts, &g);
            cl.opt.begin_step();
            for (std::size_t i = 0; i < cl.dec.base.weights.size(); ++i) {
                cl.opt.update(cl.slot_base_w[i], cl.dec.base.weights[i].values.data(),
                              g.base.weights[i].values.data());
            }
            for (std::size_t l = 0; l < cl.dec.base.biases.size(); ++l) {
                cl.opt.update(cl.slot_base_b[l], cl.dec.base.biases[l].data(),
                              g.base.biases[l].data());
            }
            for (std::size_t gi = 0; gi < cl.dec.gate_logits.size(); ++gi) {
                cl.opt.update(cl.slot_gates[gi], cl.dec.gate_logits[gi].data(),
                              g.gate_logits[gi].data());
            }
            for (std::size_t t = 0; t < cl.dec.adaptives.size(); ++t) {
                for (std::size_t i = 0; i < cl.dec.adaptives[t].size(); ++i) {
                    cl.opt.update(cl.slot_adaptives[t][i], cl.dec.adaptives[t][i].values.data(),
                                  g.adaptives[t][i].values.data());
                }
            }
            for (std::size_t e = 0; e < cl.dec.alpha.size(); ++e) {
                cl.opt.update(cl.slot_alpha[e], cl.dec.alpha[e].data(), g.alpha[e].data());
            }
            return;
        }

        const std::vector<DenseMatrix> eff = masked_weights(cl.params, cl.masks.masks);
        ForwardCache cache;
        made_forward(model_cfg_, eff, cl.params.biases, batch, cache);
        made_nll(model_cfg_, cache, batch);
        MadeBackward bw;
        made_backward(model_cfg_, eff, cache, batch, bw);
        ParamSet g = zeros_like(cl.params);
        for (std::size_t i = 0; i < g.weights.size(); ++i) {
            const DenseMatrix& m = cl.masks.masks[i];
            for (std::size_t j = 0; j < g.weights[i].size(); ++j) {
                g.weights[i].values[j] = bw.grad_w_eff[i].values[j] * m.values[j];
            }
        }
        g.biases = bw.grad_b;
        if (wiring_.ewc_penalty) {
            for (const FisherDiagonal& fd : cl.fishers) {
                ewc_penalty(cl.params, fd, cfg_.hp.ewc_lambda, &g);
            }
        }
        if (wiring_.fedprox_penalty && cl.has_prox_ref) {
            fedprox_penalty(cl.params, cl.prox_ref, cfg_.hp.fedprox_mu, &g);
        }
        cl.opt.begin_step();
        for (std::size_t i = 0; i < cl.params.weights.size(); ++i) {
            cl.opt.update(cl.slot_base_w[i], cl.params.weights[i].values.data(),
                          g.weights[i].values.data());
        }
        for (std::size_t l = 0; l < cl.params.biases.size(); ++l) {
            cl.opt.update(cl.slot_base_b[l], cl.params.biases[l].data(), g.biases[l].data());
        }
    }

    // What goes on the wire. Decomposition methods send the base gated by the
    // thresholded mask; the full method additionally zeroes coordinates the
    // autoregressive mask kills, plain methods send exactly those coordinates
    // they actually train. Biases always travel dense.
    UploadPayload build_upload(const ClientRuntime& cl) {
        ParamSet masked;
        if (wiring_.decomposition) {
            masked = cl.dec.base;
            std::vector<Vector> hat;
            if (!cfg_.hp.gate_identity) {
                hat = threshold_mask(cl.dec.gate_logits, cfg_.hp.mask_cutoff);
            }
            for (std::size_t i = 0; i < masked.weights.size(); ++i) {
                DenseMatrix& w = masked.weights[i];
                if (!cfg_.hp.gate_identity) {
                    const Vector& h = hat[gate_index_for_tensor(model_cfg_, i)];
                    for (std::size_t r = 0; r < w.rows; ++r) {
                        double* row = w.row(r);
                        for (std::size_t col = 0; col < w.cols; ++col) row[col] *= h[r];
                    }
                }
                if (wiring_.masked_objective) {
                    const DenseMatrix& m = cl.masks.masks[i];
                    for (std::size_t j = 0; j < w.size(); ++j) w.values[j] *= m.values[j];
                }
            }
        } else {
            masked = cl.params;
            for (std::size_t i = 0; i < masked.weights.size(); ++i) {
                const DenseMatrix& m = cl.masks.masks[i];
                for (std::size_t j = 0; j < masked.weights[i].size(); ++j) {
                    masked.weights[i].values[j] *= m.values[j];
                }
            }
        }
        return make_upload(cl.id, masked);
    }

    // Task i is evaluated through its frozen gate and attention, the current
    // base and adaptive, and the client's canonical mask topology.
    std::vector<double> eval_client(const ClientRuntime& cl, std::size_t upto) {
        std::vector<double> row(upto + 1, 0.0);
        for (std::size_t i = 0; i <= upto; ++i) {
            const DenseMatrix& test = cl.tasks[i].test;
            if (test.rows == 0) {
                throw DataError("task " + std::to_string(i) + " has no test rows");
            }
            std::vector<DenseMatrix> eff;
            if (wiring_.decomposition) {
                const FrozenTaskSnapshot& snap = cl.snapshots.at(i);
                ComposeSpec spec;
                spec.gate = cfg_.hp.gate_identity ? GateMode::One : GateMode::Sigmoid;
                spec.use_adaptive = cfg_.hp.use_adaptive;
                spec.use_knowledge = cfg_.hp.use_knowledge;
                spec.adaptive_task = i;
                spec.kb_limit = snap.alpha.size();
                spec.gate_logits = &snap.gate_logits;
                spec.alpha = &snap.alpha;
                eff = compose_weights(model_cfg_, cl.dec, cl.kb, cl.id, spec);
                for (std::size_t w = 0; w < eff.size(); ++w) {
                    const DenseMatrix& m = cl.canonical.masks[w];
                    for (std::size_t j = 0; j < eff[w].size(); ++j) eff[w].values[j] *= m.values[j];
                }
            } else {
                eff = masked_weights(cl.params, cl.canonical.masks);
            }
            const std::vector<Vector>& biases =
                wiring_.decomposition ? cl.dec.base.biases : cl.params.biases;
            ForwardCache cache;
            made_forward(model_cfg_, eff, biases, test, cache);
            row[i] = made_nll(model_cfg_, cache, test);
        }
        return row;
    }

    ScenarioConfig cfg_;
    MadeConfig model_cfg_;
    MethodWiring wiring_;
    std::size_t workers_ = 1;
    std::size_t n_clients_ = 0;
    std::size_t tasks_ = 0;
    std::size_t rounds_ = 0;
    std::size_t task_ = 0;
    std::size_t round_ = 0;
    ServerState server_;
    std::vector<ClientRuntime> clients_;
    CommLedger ledger_;
    LossMatrix losses_;
    std::vector<LossMatrix> per_client_losses_;
    std::vector<std::string> warnings_;
};

inline RunResult run_scenario(const ScenarioConfig& cfg, std::size_t workers = 1) {
    FederatedRun run(cfg, workers);
    return run.run();
}

}  // namespace confedmade
