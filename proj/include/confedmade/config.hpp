#pragma once

#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "confedmade/adam.hpp"
#include "confedmade/errors.hpp"
#include "confedmade/made.hpp"
#include "confedmade/methods.hpp"

namespace confedmade {

// Strict object reader: every key must be consumed by a get() call, leftovers
// raise ConfigError naming the key and its location. Keeps typos from being
// silently ignored.
class JsonReader {
public:
    JsonReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
    }

    const nlohmann::json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) {
                throw ConfigError(where_ + ": unknown key \"" + it.key() + "\"");
            }
        }
    }

    const std::string& where() const { return where_; }

private:
    const nlohmann::json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

// --- leaf config types --------------------------------------------------------

struct Hyperparams {
    double lambda1 = 1e-4;       // sparsity weight on gates and adaptives
    double lambda2 = 100.0;      // drift penalty weight
    double lambda3 = 100.0;      // adaptive init divisor
    double mask_cutoff = 0.1;    // gate threshold for uploads and frozen masks
    double sparsity_floor = 1e-6;  // magnitudes below this are dropped on transfer
    double ewc_lambda = 100.0;
    double fedprox_mu = 0.01;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 1e-4;
    bool adamw = true;  // false: plain adam, decay ignored
    bool gate_identity = false;  // identity gate and ungated uploads; degenerate-equivalence mode
    bool use_adaptive = true;
    bool use_knowledge = true;

    AdamConfig adam() const {
        AdamConfig a;
        a.lr = learning_rate;
        a.beta1 = beta1;
        a.beta2 = beta2;
        a.eps = epsilon;
        a.weight_decay = adamw ? weight_decay : 0.0;
        return a;
    }
};

enum class ResampleCadence { None, PerRound, PerBatch };

inline std::string cadence_name(ResampleCadence c) {
    switch (c) {
        case ResampleCadence::None: return "none";
        case ResampleCadence::PerRound: return "per-round";
        case ResampleCadence::PerBatch: return "per-batch";
    }
    throw ConfigError("unknown resample cadence");
}

inline ResampleCadence cadence_from_name(const std::string& s) {
    if (s == "none") return ResampleCadence::None;
    if (s == "per-round") return ResampleCadence::PerRound;
    if (s == "per-batch") return ResampleCadence::PerBatch;
    throw ConfigError("resample cadence must be none, per-round or per-batch, got \"" + s + "\"");
}

struct MaskPolicy {
    bool synchronized_masks = true;  // one broadcast seed per resample vs per-client streams
    ResampleCadence cadence = ResampleCadence::PerRound;
    bool client_local = false;  // resample from client-local streams even when synchronized
};

struct TaskSpec {
    std::string dataset;       // key into ScenarioConfig::datasets
    std::vector<int> classes;  // empty: every row
    std::size_t train_n = 0;   // 0: proportional share of the filtered rows
    std::size_t val_n = 0;
    std::size_t test_n = 0;
};

// Where a dataset's rows come from. Exactly one kind per entry; fields that
// do not apply to the kind are rejected.
struct DatasetSource {
    std::string kind = "synth-images";  // idx | csv | synth-images | synth-mixture

    // idx
    std::string images;
    std::string labels;
    double threshold = 0.5;

    // csv
    std::string path;
    bool label_column = false;

    // synth-images
    std::size_t n = 2000;  // also synth-mixture
    std::size_t side = 14;
    std::size_t classes = 10;
    double flip_noise = 0.08;

    // synth-mixture
    std::size_t components = 2;
    std::size_t dim = 20;

    std::uint64_t seed = 0;  // 0: derived from the experiment seed and dataset name
};

struct ScenarioConfig {
    std::string name = "experiment";
    Method method = Method::Confedmade;
    std::size_t clients = 5;
    std::string scenario = "A";  // A | B | C | overlap | custom
    std::size_t tasks_per_client = 5;
    std::vector<std::vector<TaskSpec>> client_tasks;  // custom scenario only
    std::vector<std::vector<int>> overlap_groups;  // overlap scenario: group id per (client, task);
                                                   // equal ids share a class subset, distinct ids are disjoint
    std::size_t overlap_classes = 3;  // classes per overlap group
    std::size_t rounds_per_task = 50;
    std::size_t epochs_per_round = 1;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
    double train_fraction = 0.8;
    double validation_fraction = 0.1;  // remainder is test
    MadeConfig model;
    MaskPolicy masks;
    Hyperparams hp;
    std::map<std::string, DatasetSource> datasets;
    std::string data_dir;  // empty: CONFEDMADE_DATA_DIR, else synthetic fallback
};

// --- parsing ------------------------------------------------------------------

inline Hyperparams hyperparams_from_json(const nlohmann::json& j, const std::string& where) {
    Hyperparams hp;
    JsonReader r(j, where);
    r.get("lambda1", hp.lambda1);
    r.get("lambda2", hp.lambda2);
    r.get("lambda3", hp.lambda3);
    r.get("mask_cutoff", hp.mask_cutoff);
    r.get("sparsity_floor", hp.sparsity_floor);
    r.get("ewc_lambda", hp.ewc_lambda);
    r.get("fedprox_mu", hp.fedprox_mu);
    r.get("learning_rate", hp.learning_rate);
    r.get("beta1", hp.beta1);
    r.get("beta2", hp.beta2);
    r.get("epsilon", hp.epsilon);
    r.get("weight_decay", hp.weight_decay);
    r.get("adamw", hp.adamw);
    r.get("gate_identity", hp.gate_identity);
    r.get("use_adaptive", hp.use_adaptive);
    r.get("use_knowledge", hp.use_knowledge);
    r.finish();
    if (hp.lambda1 < 0.0 || hp.lambda2 < 0.0) throw ConfigError(where + ": lambda1/lambda2 must be >= 0");
    if (hp.lambda3 <= 0.0) throw ConfigError(where + ": lambda3 must be > 0");
    if (hp.mask_cutoff < 0.0 || hp.mask_cutoff >= 1.0) throw ConfigError(where + ": mask_cutoff must lie in [0, 1)");
    if (hp.sparsity_floor < 0.0) throw ConfigError(where + ": sparsity_floor must be >= 0");
    if (hp.learning_rate < 0.0) throw ConfigError(where + ": learning_rate must be >= 0");
    return hp;
}

inline MaskPolicy mask_policy_from_json(const nlohmann::json& j, const std::string& where) {
    MaskPolicy mp;
    JsonReader r(j, where);
    r.get("synchronized", mp.synchronized_masks);
    std::string cadence = cadence_name(mp.cadence);
    r.get("resample", cadence);
    r.get("client_local", mp.client_local);
    r.finish();
    mp.cadence = cadence_from_name(cadence);
    return mp;
}

inline MadeConfig model_from_json(const nlohmann::json& j, const std::string& where) {
    MadeConfig m;
    m.hidden = {500};
    JsonReader r(j, where);
    r.get("input_dim", m.input_dim);
    r.get("hidden", m.hidden);
    r.get("direct_connections", m.direct_connections);
    r.get("order_agnostic", m.order_agnostic);
    r.get("connectivity_agnostic", m.connectivity_agnostic);
    std::string act = activation_name(m.activation);
    r.get("activation", act);
    r.get("prob_clamp", m.prob_clamp);
    r.finish();
    try {
        m.activation = activation_from_name(act);
    } catch (const std::exception& e) {
        throw ConfigError(where + ".activation: " + e.what());
    }
    if (m.hidden.empty()) throw ConfigError(where + ".hidden: need at least one hidden layer");
    for (std::size_t h : m.hidden) {
        if (h == 0) throw ConfigError(where + ".hidden: layer widths must be positive");
    }
    if (!(m.prob_clamp > 0.0 && m.prob_clamp < 0.5)) {
        throw ConfigError(where + ".prob_clamp: must lie in (0, 0.5)");
    }
    return m;
}

inline TaskSpec task_from_json(const nlohmann::json& j, const std::string& where) {
    TaskSpec t;
    JsonReader r(j, where);
    r.get("dataset", t.dataset);
    r.get("classes", t.classes);
    r.get("train", t.train_n);
    r.get("validation", t.val_n);
    r.get("test", t.test_n);
    r.finish();
    if (t.dataset.empty()) throw ConfigError(where + ": task needs a dataset id");
    return t;
}

inline DatasetSource dataset_from_json(const nlohmann::json& j, const std::string& where) {
    DatasetSource d;
    JsonReader r(j, where);
    r.get("kind", d.kind);
    auto forbid = [&](const char* key) {
        if (r.has(key)) {
            throw ConfigError(where + "." + key + ": not valid for kind \"" + d.kind + "\"");
        }
    };
    if (d.kind == "idx") {
        r.get("images", d.images);
        r.get("labels", d.labels);
        r.get("threshold", d.threshold);
        forbid("path");
        forbid("n");
        if (d.images.empty()) throw ConfigError(where + ": idx source needs an images file");
    } else if (d.kind == "csv") {
        r.get("path", d.path);
        r.get("label_column", d.label_column);
        forbid("images");
        forbid("n");
        if (d.path.empty()) throw ConfigError(where + ": csv source needs a path");
    } else if (d.kind == "synth-images") {
        r.get("n", d.n);
        r.get("side", d.side);
        r.get("classes", d.classes);
        r.get("flip_noise", d.flip_noise);
        r.get("seed", d.seed);
        forbid("path");
        forbid("images");
        if (d.side < 2 || d.side % 2 != 0) throw ConfigError(where + ".side: must be even and >= 2");
        if (d.classes == 0) throw ConfigError(where + ".classes: must be positive");
    } else if (d.kind == "synth-mixture") {
        r.get("n", d.n);
        r.get("components", d.components);
        r.get("dim", d.dim);
        r.get("seed", d.seed);
        forbid("path");
        forbid("images");
        if (d.components == 0 || d.dim == 0) throw ConfigError(where + ": mixture needs components and dim");
    } else {
        throw ConfigError(where + ".kind: expected idx, csv, synth-images or synth-mixture, got \"" + d.kind + "\"");
    }
    r.finish();
    if (d.n == 0 && (d.kind == "synth-images" || d.kind == "synth-mixture")) {
        throw ConfigError(where + ".n: synthetic sources need a positive row count");
    }
    return d;
}

inline ScenarioConfig config_from_json(const nlohmann::json& j) {
    ScenarioConfig cfg;
    cfg.model.hidden = {500};
    JsonReader r(j, "config");
    r.get("name", cfg.name);
    std::string method = method_name(cfg.method);
    r.get("method", method);
    r.get("clients", cfg.clients);
    r.get("scenario", cfg.scenario);
    r.get("tasks_per_client", cfg.tasks_per_client);
    r.get("rounds_per_task", cfg.rounds_per_task);
    r.get("epochs_per_round", cfg.epochs_per_round);
    r.get("batch_size", cfg.batch_size);
    r.get("seed", cfg.seed);
    r.get("train_fraction", cfg.train_fraction);
    r.get("validation_fraction", cfg.validation_fraction);
    r.get("data_dir", cfg.data_dir);

    try {
        cfg.method = method_from_name(method);
    } catch (const UsageError& e) {
        throw ConfigError(std::string("config.method: ") + e.what());
    }
    if (r.has("model")) cfg.model = model_from_json(r.raw("model"), "config.model");
    if (r.has("masks")) cfg.masks = mask_policy_from_json(r.raw("masks"), "config.masks");
    if (r.has("hyperparameters")) {
        cfg.hp = hyperparams_from_json(r.raw("hyperparameters"), "config.hyperparameters");
    }
    if (r.has("datasets")) {
        const auto& ds = r.raw("datasets");
        if (!ds.is_object()) throw ConfigError("config.datasets: expected an object");
        for (auto it = ds.begin(); it != ds.end(); ++it) {
            cfg.datasets[it.key()] = dataset_from_json(it.value(), "config.datasets." + it.key());
        }
    }
    if (r.has("client_tasks")) {
        const auto& ct = r.raw("client_tasks");
        if (!ct.is_array()) throw ConfigError("config.client_tasks: expected an array per client");
        for (std::size_t c = 0; c < ct.size(); ++c) {
            if (!ct[c].is_array()) throw ConfigError("config.client_tasks: expected an array per client");
            std::vector<TaskSpec> tasks;
            for (std::size_t t = 0; t < ct[c].size(); ++t) {
                tasks.push_back(task_from_json(
                    ct[c][t], "config.client_tasks[" + std::to_string(c) + "][" + std::to_string(t) + "]"));
            }
            cfg.client_tasks.push_back(std::move(tasks));
        }
    }
    r.get("overlap", cfg.overlap_groups);
    r.get("overlap_classes", cfg.overlap_classes);
    r.finish();

    if (cfg.clients == 0) throw ConfigError("config.clients: need at least one client");
    if (cfg.scenario != "A" && cfg.scenario != "B" && cfg.scenario != "C" && cfg.scenario != "overlap" &&
        cfg.scenario != "custom") {
        throw ConfigError("config.scenario: expected A, B, C, overlap or custom, got \"" + cfg.scenario + "\"");
    }
    if (cfg.scenario == "overlap") {
        if (cfg.overlap_groups.size() != cfg.clients) {
            throw ConfigError("config.overlap: need one group row per client");
        }
        const std::size_t t0 = cfg.overlap_groups[0].size();
        if (t0 == 0) throw ConfigError("config.overlap: every client needs at least one task");
        for (const auto& row : cfg.overlap_groups) {
            if (row.size() != t0) throw ConfigError("config.overlap: rows must have equal length");
            for (int g : row) {
                if (g < 0) throw ConfigError("config.overlap: group ids must be >= 0");
            }
        }
        if (cfg.overlap_classes == 0) throw ConfigError("config.overlap_classes: must be positive");
    } else if (!cfg.overlap_groups.empty()) {
        throw ConfigError("config.overlap: only valid with scenario \"overlap\"");
    }
    if (cfg.scenario == "custom") {
        if (cfg.client_tasks.empty()) throw ConfigError("config: custom scenario needs client_tasks");
        if (cfg.client_tasks.size() != cfg.clients) {
            throw ConfigError("config.client_tasks: need one task list per client");
        }
        const std::size_t t0 = cfg.client_tasks[0].size();
        if (t0 == 0) throw ConfigError("config.client_tasks: every client needs at least one task");
        for (const auto& tasks : cfg.client_tasks) {
            if (tasks.size() != t0) {
                throw ConfigError("config.client_tasks: task rounds are synchronized, every client needs "
                                  "the same number of tasks");
            }
        }
        for (const auto& tasks : cfg.client_tasks) {
            for (const auto& t : tasks) {
                if (!cfg.datasets.count(t.dataset)) {
                    throw ConfigError("config.client_tasks: unknown dataset id \"" + t.dataset + "\"");
                }
            }
        }
    } else if (!cfg.client_tasks.empty()) {
        throw ConfigError("config.client_tasks: only valid with scenario \"custom\"");
    }
    if (cfg.scenario != "custom" && cfg.tasks_per_client == 0) {
        throw ConfigError("config.tasks_per_client: must be positive");
    }
    if (cfg.rounds_per_task == 0) throw ConfigError("config.rounds_per_task: must be positive");
    if (cfg.epochs_per_round == 0) throw ConfigError("config.epochs_per_round: must be positive");
    if (cfg.batch_size == 0) throw ConfigError("config.batch_size: must be positive");
    if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) {
        throw ConfigError("config.train_fraction: must lie in (0, 1)");
    }
    if (cfg.validation_fraction < 0.0 || cfg.train_fraction + cfg.validation_fraction >= 1.0) {
        throw ConfigError("config: train_fraction + validation_fraction must leave room for test data");
    }
    return cfg;
}

inline ScenarioConfig parse_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline ScenarioConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

// --- serialization ------------------------------------------------------------

inline nlohmann::ordered_json hyperparams_to_json(const Hyperparams& hp) {
    return {
        {"lambda1", hp.lambda1},
        {"lambda2", hp.lambda2},
        {"lambda3", hp.lambda3},
        {"mask_cutoff", hp.mask_cutoff},
        {"sparsity_floor", hp.sparsity_floor},
        {"ewc_lambda", hp.ewc_lambda},
        {"fedprox_mu", hp.fedprox_mu},
        {"learning_rate", hp.learning_rate},
        {"beta1", hp.beta1},
        {"beta2", hp.beta2},
        {"epsilon", hp.epsilon},
        {"weight_decay", hp.weight_decay},
        {"adamw", hp.adamw},
        {"gate_identity", hp.gate_identity},
        {"use_adaptive", hp.use_adaptive},
        {"use_knowledge", hp.use_knowledge},
    };
}

inline nlohmann::ordered_json mask_policy_to_json(const MaskPolicy& mp) {
    return {
        {"synchronized", mp.synchronized_masks},
        {"resample", cadence_name(mp.cadence)},
        {"client_local", mp.client_local},
    };
}

inline nlohmann::ordered_json model_to_json(const MadeConfig& m) {
    return {
        {"input_dim", m.input_dim},
        {"hidden", m.hidden},
        {"direct_connections", m.direct_connections},
        {"order_agnostic", m.order_agnostic},
        {"connectivity_agnostic", m.connectivity_agnostic},
        {"activation", activation_name(m.activation)},
        {"prob_clamp", m.prob_clamp},
    };
}

inline nlohmann::ordered_json task_to_json(const TaskSpec& t) {
    return {
        {"dataset", t.dataset},
        {"classes", t.classes},
        {"train", t.train_n},
        {"validation", t.val_n},
        {"test", t.test_n},
    };
}

inline nlohmann::ordered_json dataset_to_json(const DatasetSource& d) {
    nlohmann::ordered_json j{{"kind", d.kind}};
    if (d.kind == "idx") {
        j["images"] = d.images;
        j["labels"] = d.labels;
        j["threshold"] = d.threshold;
    } else if (d.kind == "csv") {
        j["path"] = d.path;
        j["label_column"] = d.label_column;
    } else if (d.kind == "synth-images") {
        j["n"] = d.n;
        j["side"] = d.side;
        j["classes"] = d.classes;
        j["flip_noise"] = d.flip_noise;
        j["seed"] = d.seed;
    } else if (d.kind == "synth-mixture") {
        j["n"] = d.n;
        j["components"] = d.components;
        j["dim"] = d.dim;
        j["seed"] = d.seed;
    }
    return j;
}

inline nlohmann::ordered_json config_to_json(const ScenarioConfig& cfg) {
    nlohmann::ordered_json j{
        {"name", cfg.name},
        {"method", method_name(cfg.method)},
        {"clients", cfg.clients},
        {"scenario", cfg.scenario},
        {"tasks_per_client", cfg.tasks_per_client},
        {"rounds_per_task", cfg.rounds_per_task},
        {"epochs_per_round", cfg.epochs_per_round},
        {"batch_size", cfg.batch_size},
        {"seed", cfg.seed},
        {"train_fraction", cfg.train_fraction},
        {"validation_fraction", cfg.validation_fraction},
        {"model", model_to_json(cfg.model)},
        {"masks", mask_policy_to_json(cfg.masks)},
        {"hyperparameters", hyperparams_to_json(cfg.hp)},
    };
    if (!cfg.datasets.empty()) {
        nlohmann::ordered_json ds = nlohmann::ordered_json::object();
        for (const auto& [id, src] : cfg.datasets) ds[id] = dataset_to_json(src);
        j["datasets"] = ds;
    }
    if (!cfg.client_tasks.empty()) {
        nlohmann::ordered_json ct = nlohmann::ordered_json::array();
        for (const auto& tasks : cfg.client_tasks) {
            nlohmann::ordered_json row = nlohmann::ordered_json::array();
            for (const auto& t : tasks) row.push_back(task_to_json(t));
            ct.push_back(row);
        }
        j["client_tasks"] = ct;
    }
    if (!cfg.overlap_groups.empty()) {
        j["overlap"] = cfg.overlap_groups;
        j["overlap_classes"] = cfg.overlap_classes;
    }
    if (!cfg.data_dir.empty()) j["data_dir"] = cfg.data_dir;
    return j;
}

}  // namespace confedmade
