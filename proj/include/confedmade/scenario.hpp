#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "confedmade/config.hpp"
#include "confedmade/data.hpp"
#include "confedmade/errors.hpp"
#include "confedmade/rng.hpp"

namespace confedmade {

// One client-task's data, already filtered, sharded and split. The splits
// index into data.x; split_matrix extracts them for training/eval.
struct TaskData {
    TaskSpec spec;
    std::string description;
    BinaryDataset data;
};

struct ClientData {
    std::vector<TaskData> tasks;
};

struct ScenarioData {
    std::size_t input_dim = 0;
    std::vector<ClientData> clients;
    std::vector<std::string> warnings;
};

// Expanded task table plus any synthetic sources the builder injected.
struct ScenarioPlan {
    std::vector<std::vector<TaskSpec>> client_tasks;
    std::map<std::string, DatasetSource> datasets;
};

inline DenseMatrix split_matrix(const BinaryDataset& ds, const std::vector<std::size_t>& idx) {
    DenseMatrix out(idx.size(), ds.dim());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= ds.n()) throw ValidationError("split_matrix: index out of range");
        std::copy(ds.x.row(idx[i]), ds.x.row(idx[i]) + ds.dim(), out.row(i));
    }
    return out;
}

inline std::string resolve_data_dir(const ScenarioConfig& cfg) {
    if (!cfg.data_dir.empty()) return cfg.data_dir;
    const char* env = std::getenv("CONFEDMADE_DATA_DIR");
    return env ? std::string(env) : std::string();
}

namespace detail {

inline std::string find_file(const std::string& dir, const std::vector<std::string>& names) {
    if (dir.empty()) return {};
    for (const auto& name : names) {
        for (const char* suffix : {"", ".gz"}) {
            std::filesystem::path p = std::filesystem::path(dir) / (name + suffix);
            std::error_code ec;
            if (std::filesystem::exists(p, ec)) return p.string();
        }
    }
    return {};
}

inline std::string resolve_path(const std::string& dir, const std::string& name) {
    std::filesystem::path p(name);
    if (p.is_absolute() || dir.empty()) return name;
    return (std::filesystem::path(dir) / p).string();
}

struct SourcePick {
    std::string id;
    DatasetSource src;
    std::size_t class_count = 0;  // for class-subset planning
    bool real = false;            // backed by files rather than the synthetic generator
};

// A labeled image source for digit-style tasks: a configured entry wins,
// then IDX files under the data dir, then the synthetic surrogate.
inline SourcePick pick_image_source(const ScenarioConfig& cfg, const std::string& data_dir,
                                    const std::vector<std::string>& preferred_ids,
                                    const std::vector<std::string>& idx_names,
                                    const std::string& labels_suffix, std::size_t synth_classes,
                                    std::size_t synth_n) {
    for (const auto& id : preferred_ids) {
        auto it = cfg.datasets.find(id);
        if (it == cfg.datasets.end()) continue;
        SourcePick pick;
        pick.id = id;
        pick.src = it->second;
        if (pick.src.kind == "synth-images") {
            pick.class_count = pick.src.classes;
        } else if (pick.src.kind == "idx" || pick.src.kind == "csv") {
            pick.class_count = synth_classes;  // verified against labels at load time
            pick.real = true;
        } else {
            throw ConfigError("dataset \"" + id + "\": class-split scenarios need a labeled image source");
        }
        return pick;
    }
    std::string images = find_file(data_dir, idx_names);
    if (!images.empty()) {
        std::vector<std::string> label_names;
        for (const auto& n : idx_names) {
            std::string l = n;
            auto pos = l.find("images");
            if (pos != std::string::npos) l.replace(pos, 6, "labels");
            pos = l.find("idx3");
            if (pos != std::string::npos) l.replace(pos, 4, "idx1");
            label_names.push_back(l);
        }
        std::string labels = find_file(data_dir, label_names);
        if (!labels.empty()) {
            SourcePick pick;
            pick.id = preferred_ids.front() + labels_suffix;
            pick.src.kind = "idx";
            pick.src.images = images;
            pick.src.labels = labels;
            pick.class_count = synth_classes;
            pick.real = true;
            return pick;
        }
    }
    SourcePick pick;
    pick.id = preferred_ids.front();
    pick.src.kind = "synth-images";
    pick.src.n = synth_n;
    pick.src.classes = synth_classes;
    pick.class_count = synth_classes;
    return pick;
}

inline SourcePick pick_digit_source(const ScenarioConfig& cfg, const std::string& data_dir) {
    return pick_image_source(cfg, data_dir, {"mnist", "digits"},
                             {"train-images-idx3-ubyte", "train-images.idx3-ubyte"}, "", 10, 20000);
}

inline SourcePick pick_letter_source(const ScenarioConfig& cfg, const std::string& data_dir) {
    return pick_image_source(cfg, data_dir, {"emnist", "letters"},
                             {"emnist-letters-train-images-idx3-ubyte"}, "", 26, 26000);
}

inline void set_table_counts(TaskSpec& t, bool real, std::size_t classes_per_task) {
    if (!real) return;
    // per-task split sizes used with the real image corpora; scaled down with
    // a warning when the filtered class has fewer rows
    if (classes_per_task == 1) {
        t.train_n = 5626;
        t.val_n = 1126;
        t.test_n = 1127;
    } else if (classes_per_task == 13) {
        t.train_n = 42817;
        t.val_n = 8564;
        t.test_n = 8563;
    }
}

}  // namespace detail

// Expands scenario A/B/C/overlap into explicit per-client task lists; custom
// configs pass through. Class draws are per client from the experiment seed.
inline ScenarioPlan plan_scenario(const ScenarioConfig& cfg) {
    ScenarioPlan plan;
    plan.datasets = cfg.datasets;
    const std::string data_dir = resolve_data_dir(cfg);

    if (cfg.scenario == "custom") {
        if (cfg.client_tasks.size() != cfg.clients) {
            throw ConfigError("custom scenario: client_tasks has " +
                              std::to_string(cfg.client_tasks.size()) + " rows for " +
                              std::to_string(cfg.clients) + " clients");
        }
        plan.client_tasks = cfg.client_tasks;
        return plan;
    }

    if (cfg.scenario == "A") {
        auto pick = detail::pick_digit_source(cfg, data_dir);
        plan.datasets[pick.id] = pick.src;
        if (cfg.tasks_per_client > pick.class_count) {
            throw ConfigError("scenario A: " + std::to_string(cfg.tasks_per_client) +
                              " tasks per client need distinct classes but \"" + pick.id + "\" has " +
                              std::to_string(pick.class_count));
        }
        for (std::size_t c = 0; c < cfg.clients; ++c) {
            RngStream rng(derive_seed(cfg.seed, "scenario-classes", {c}));
            auto perm = rng.permutation(pick.class_count);
            std::vector<TaskSpec> tasks;
            for (std::size_t t = 0; t < cfg.tasks_per_client; ++t) {
                TaskSpec spec;
                spec.dataset = pick.id;
                spec.classes = {static_cast<int>(perm[t])};
                detail::set_table_counts(spec, pick.real, 1);
                tasks.push_back(spec);
            }
            plan.client_tasks.push_back(std::move(tasks));
        }
        return plan;
    }

    if (cfg.scenario == "B") {
        if (plan.datasets.empty()) {
            const std::size_t dims[4] = {20, 16, 24, 18};
            for (std::size_t i = 0; i < 4; ++i) {
                DatasetSource d;
                d.kind = "synth-mixture";
                d.n = 8000;
                d.components = 2 + i % 2;
                d.dim = dims[i];
                plan.datasets["binary-" + std::to_string(i)] = d;
            }
        }
        std::vector<TaskSpec> sequence;
        for (const auto& [id, src] : plan.datasets) {
            TaskSpec spec;
            spec.dataset = id;
            sequence.push_back(spec);
        }
        plan.client_tasks.assign(cfg.clients, sequence);
        return plan;
    }

    if (cfg.scenario == "C") {
        auto digits = detail::pick_digit_source(cfg, data_dir);
        auto letters = detail::pick_letter_source(cfg, data_dir);
        plan.datasets[digits.id] = digits.src;
        plan.datasets[letters.id] = letters.src;
        const std::size_t T = cfg.tasks_per_client;
        const std::size_t n_digit = (T + 1) / 2;
        const std::size_t n_letter = T / 2;
        const std::size_t letter_k = 13;
        if (n_digit > digits.class_count) {
            throw ConfigError("scenario C: not enough classes in \"" + digits.id + "\" for " +
                              std::to_string(n_digit) + " single-class tasks");
        }
        if (n_letter * letter_k > letters.class_count) {
            throw ConfigError("scenario C: not enough classes in \"" + letters.id + "\" for " +
                              std::to_string(n_letter) + " tasks of " + std::to_string(letter_k));
        }
        for (std::size_t c = 0; c < cfg.clients; ++c) {
            RngStream digit_rng(derive_seed(cfg.seed, "scenario-classes", {c, 0}));
            RngStream letter_rng(derive_seed(cfg.seed, "scenario-classes", {c, 1}));
            auto digit_perm = digit_rng.permutation(digits.class_count);
            auto letter_perm = letter_rng.permutation(letters.class_count);
            std::vector<TaskSpec> tasks;
            std::size_t di = 0, li = 0;
            for (std::size_t t = 0; t < T; ++t) {
                TaskSpec spec;
                if (t % 2 == 0) {
                    spec.dataset = digits.id;
                    spec.classes = {static_cast<int>(digit_perm[di++])};
                    detail::set_table_counts(spec, digits.real, 1);
                } else {
                    spec.dataset = letters.id;
                    for (std::size_t k = 0; k < letter_k; ++k) {
                        spec.classes.push_back(static_cast<int>(letter_perm[li++]));
                    }
                    detail::set_table_counts(spec, letters.real, letter_k);
                }
                tasks.push_back(spec);
            }
            plan.client_tasks.push_back(std::move(tasks));
        }
        return plan;
    }

    if (cfg.scenario == "overlap") {
        auto pick = detail::pick_digit_source(cfg, data_dir);
        plan.datasets[pick.id] = pick.src;
        std::set<int> group_set;
        for (const auto& row : cfg.overlap_groups) group_set.insert(row.begin(), row.end());
        const std::size_t k = cfg.overlap_classes;
        if (group_set.size() * k > pick.class_count) {
            throw ConfigError("overlap scenario: " + std::to_string(group_set.size()) + " groups of " +
                              std::to_string(k) + " classes exceed the " +
                              std::to_string(pick.class_count) + " available");
        }
        RngStream rng(derive_seed(cfg.seed, "overlap-groups", {}));
        auto perm = rng.permutation(pick.class_count);
        std::map<int, std::vector<int>> group_classes;
        std::size_t next = 0;
        for (int g : group_set) {
            std::vector<int>& cls = group_classes[g];
            for (std::size_t i = 0; i < k; ++i) cls.push_back(static_cast<int>(perm[next++]));
        }
        for (const auto& row : cfg.overlap_groups) {
            std::set<int> seen;
            std::vector<TaskSpec> tasks;
            for (int g : row) {
                if (!seen.insert(g).second) {
                    throw ConfigError("overlap scenario: a client cannot receive the same group twice");
                }
                TaskSpec spec;
                spec.dataset = pick.id;
                spec.classes = group_classes.at(g);
                tasks.push_back(spec);
            }
            plan.client_tasks.push_back(std::move(tasks));
        }
        return plan;
    }

    throw ConfigError("unknown scenario \"" + cfg.scenario + "\"");
}

namespace detail {

inline BinaryDataset load_source(const std::string& id, const DatasetSource& src,
                                 const std::string& data_dir, std::uint64_t root_seed) {
    BinaryDataset ds;
    if (src.kind == "idx") {
        std::string labels = src.labels.empty() ? std::string() : resolve_path(data_dir, src.labels);
        ds = load_idx_images_binarized(resolve_path(data_dir, src.images), labels, src.threshold);
    } else if (src.kind == "csv") {
        ds = load_binary_csv(resolve_path(data_dir, src.path), src.label_column);
    } else if (src.kind == "synth-images") {
        const std::uint64_t base = src.seed ? src.seed : derive_seed(root_seed, "dataset:" + id);
        SyntheticImageSpec spec;
        spec.side = src.side;
        spec.classes = src.classes;
        spec.flip_noise = src.flip_noise;
        spec.prototype_seed = derive_seed(base, "prototypes");
        std::vector<std::size_t> counts(src.classes, src.n / src.classes);
        for (std::size_t c = 0; c < src.n % src.classes; ++c) ++counts[c];
        RngStream rng(derive_seed(base, "rows"));
        ds = synth_class_images(spec, counts, rng);
    } else if (src.kind == "synth-mixture") {
        const std::uint64_t base = src.seed ? src.seed : derive_seed(root_seed, "dataset:" + id);
        RngStream spec_rng(derive_seed(base, "mixture"));
        BernoulliMixture mix = random_mixture(src.components, src.dim, spec_rng);
        RngStream rng(derive_seed(base, "rows"));
        ds = sample_mixture(mix, src.n, rng);
    } else {
        throw ConfigError("dataset \"" + id + "\": unknown kind \"" + src.kind + "\"");
    }
    ds.provenance = id;
    return ds;
}

struct SplitCounts {
    std::size_t train = 0, validation = 0, test = 0;
    std::size_t total() const { return train + validation + test; }
};

// This consumer's share of its declared counts for one of its classes.
inline SplitCounts class_share(const TaskSpec& spec, std::size_t n_classes, std::size_t k) {
    auto share = [&](std::size_t n) { return n / n_classes + (k < n % n_classes ? 1 : 0); };
    SplitCounts s;
    s.train = share(spec.train_n);
    s.validation = share(spec.val_n);
    s.test = share(spec.test_n);
    return s;
}

inline bool is_proportional(const TaskSpec& spec) {
    return spec.train_n == 0 && spec.val_n == 0 && spec.test_n == 0;
}

struct Allocation {
    std::vector<std::size_t> train, validation, test;
};

inline std::string describe_task(const TaskSpec& spec) {
    if (spec.classes.empty()) return spec.dataset;
    std::string s = spec.dataset + "[";
    for (std::size_t i = 0; i < spec.classes.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(spec.classes[i]);
    }
    return s + "]";
}

}  // namespace detail

// Builds every client's task data. Rows of one source are sharded disjointly
// across all (client, task) consumers in client-major order; splits honor
// explicit counts (capped with a warning when the source runs short) and the
// configured fractions otherwise. Widths are zero-padded to a common size.
inline ScenarioData materialize_scenario(const ScenarioConfig& cfg) {
    const ScenarioPlan plan = plan_scenario(cfg);
    const std::string data_dir = resolve_data_dir(cfg);
    ScenarioData out;

    if (plan.client_tasks.empty()) throw ConfigError("scenario produced no tasks");
    const std::size_t T = plan.client_tasks[0].size();
    for (const auto& tasks : plan.client_tasks) {
        if (tasks.size() != T) throw ConfigError("scenario produced unequal task counts");
    }

    // one client's tasks on the same dataset must not repeat a class
    for (std::size_t c = 0; c < plan.client_tasks.size(); ++c) {
        std::map<std::string, std::set<int>> seen;
        for (const auto& spec : plan.client_tasks[c]) {
            for (int cls : spec.classes) {
                if (!seen[spec.dataset].insert(cls).second) {
                    throw ConfigError("client " + std::to_string(c) + " sees class " +
                                      std::to_string(cls) + " of \"" + spec.dataset + "\" twice");
                }
            }
        }
    }

    struct Consumer {
        std::size_t client, task;
        const TaskSpec* spec;
    };
    std::map<std::string, std::vector<Consumer>> consumers;
    for (std::size_t c = 0; c < plan.client_tasks.size(); ++c) {
        for (std::size_t t = 0; t < T; ++t) {
            const TaskSpec& spec = plan.client_tasks[c][t];
            if (!plan.datasets.count(spec.dataset)) {
                throw ConfigError("task references unknown dataset \"" + spec.dataset + "\"");
            }
            consumers[spec.dataset].push_back({c, t, &spec});
        }
    }

    std::map<std::string, BinaryDataset> sources;
    std::vector<std::vector<detail::Allocation>> alloc(plan.client_tasks.size());
    for (auto& row : alloc) row.resize(T);

    for (auto& [id, group] : consumers) {
        const BinaryDataset& ds =
            sources.emplace(id, detail::load_source(id, plan.datasets.at(id), data_dir, cfg.seed))
                .first->second;

        bool any_class = false, any_whole = false;
        for (const auto& cons : group) (cons.spec->classes.empty() ? any_whole : any_class) = true;
        if (any_class && any_whole) {
            throw ConfigError("dataset \"" + id + "\": cannot mix class-subset and whole-dataset tasks");
        }
        if (any_class && ds.labels.empty()) {
            throw ConfigError("dataset \"" + id + "\": class selection needs labels");
        }

        // row pools, one per class (or a single pool for whole-dataset use),
        // each shuffled from its own seed stream
        std::map<int, std::vector<std::size_t>> pools;
        if (any_class) {
            std::set<int> wanted;
            for (const auto& cons : group) wanted.insert(cons.spec->classes.begin(), cons.spec->classes.end());
            for (int cls : wanted) {
                std::vector<std::size_t>& pool = pools[cls];
                for (std::size_t i = 0; i < ds.n(); ++i) {
                    if (ds.labels[i] == cls) pool.push_back(i);
                }
                if (pool.empty()) {
                    throw ConfigError("dataset \"" + id + "\" has no rows of class " + std::to_string(cls));
                }
                RngStream rng(derive_seed(cfg.seed, "data-shard:" + id, {static_cast<std::uint64_t>(cls)}));
                rng.shuffle(pool);
            }
        } else {
            std::vector<std::size_t>& pool = pools[-1];
            pool.resize(ds.n());
            std::iota(pool.begin(), pool.end(), std::size_t{0});
            RngStream rng(derive_seed(cfg.seed, "data-shard-all:" + id, {}));
            rng.shuffle(pool);
        }

        for (auto& [cls, pool] : pools) {
            std::vector<const Consumer*> takers;
            for (const auto& cons : group) {
                const auto& classes = cons.spec->classes;
                if (cls == -1 || std::find(classes.begin(), classes.end(), cls) != classes.end()) {
                    takers.push_back(&cons);
                }
            }
            std::size_t cursor = 0;
            auto take = [&](std::vector<std::size_t>& into, std::size_t want) {
                const std::size_t got = std::min(want, pool.size() - cursor);
                into.insert(into.end(), pool.begin() + cursor, pool.begin() + cursor + got);
                cursor += got;
                return got;
            };
            // explicit counts reserve rows first, leftovers go to the
            // proportional consumers
            for (const Consumer* cons : takers) {
                if (detail::is_proportional(*cons->spec)) continue;
                const auto& classes = cons->spec->classes;
                std::size_t k = 0;
                if (cls != -1) {
                    k = static_cast<std::size_t>(
                        std::find(classes.begin(), classes.end(), cls) - classes.begin());
                }
                const std::size_t m = cls == -1 ? 1 : classes.size();
                detail::SplitCounts want = detail::class_share(*cons->spec, m, k);
                detail::Allocation& a = alloc[cons->client][cons->task];
                std::size_t got = take(a.train, want.train);
                got += take(a.validation, want.validation);
                got += take(a.test, want.test);
                if (got < want.total()) {
                    out.warnings.push_back("client " + std::to_string(cons->client) + " task " +
                                           std::to_string(cons->task) + " (" +
                                           detail::describe_task(*cons->spec) + "): requested " +
                                           std::to_string(want.total()) + " rows, got " +
                                           std::to_string(got));
                }
            }
            std::vector<const Consumer*> prop;
            for (const Consumer* cons : takers) {
                if (detail::is_proportional(*cons->spec)) prop.push_back(cons);
            }
            const std::size_t remaining = pool.size() - cursor;
            for (std::size_t j = 0; j < prop.size(); ++j) {
                const std::size_t share = remaining / prop.size() + (j < remaining % prop.size() ? 1 : 0);
                const std::size_t n_train = static_cast<std::size_t>(share * cfg.train_fraction);
                const std::size_t n_val = static_cast<std::size_t>(share * cfg.validation_fraction);
                detail::Allocation& a = alloc[prop[j]->client][prop[j]->task];
                take(a.train, n_train);
                take(a.validation, n_val);
                take(a.test, share - n_train - n_val);
            }
        }
    }

    // assemble per-task datasets, then pad to a common width
    out.clients.resize(plan.client_tasks.size());
    std::size_t width = cfg.model.input_dim;
    for (const auto& [id, ds] : sources) width = std::max(width, ds.dim());
    if (cfg.model.input_dim != 0) {
        for (const auto& [id, ds] : sources) {
            if (ds.dim() > cfg.model.input_dim) {
                throw ConfigError("dataset \"" + id + "\" is " + std::to_string(ds.dim()) +
                                  " wide but the model input is " + std::to_string(cfg.model.input_dim));
            }
        }
    }
    out.input_dim = width;

    for (std::size_t c = 0; c < plan.client_tasks.size(); ++c) {
        out.clients[c].tasks.resize(T);
        for (std::size_t t = 0; t < T; ++t) {
            const TaskSpec& spec = plan.client_tasks[c][t];
            const detail::Allocation& a = alloc[c][t];
            const BinaryDataset& src = sources.at(spec.dataset);

            std::vector<std::size_t> rows;
            rows.reserve(a.train.size() + a.validation.size() + a.test.size());
            rows.insert(rows.end(), a.train.begin(), a.train.end());
            rows.insert(rows.end(), a.validation.begin(), a.validation.end());
            rows.insert(rows.end(), a.test.begin(), a.test.end());

            TaskData& td = out.clients[c].tasks[t];
            td.spec = spec;
            td.description = detail::describe_task(spec);
            BinaryDataset narrow = take_rows(src, rows);
            td.data.labels = std::move(narrow.labels);
            td.data.provenance = td.description;
            td.data.x = DenseMatrix(narrow.n(), width);
            for (std::size_t i = 0; i < narrow.n(); ++i) {
                std::copy(narrow.x.row(i), narrow.x.row(i) + narrow.dim(), td.data.x.row(i));
            }
            auto iota_range = [](std::size_t lo, std::size_t hi) {
                std::vector<std::size_t> v(hi - lo);
                std::iota(v.begin(), v.end(), lo);
                return v;
            };
            td.data.splits.train = iota_range(0, a.train.size());
            td.data.splits.validation = iota_range(a.train.size(), a.train.size() + a.validation.size());
            td.data.splits.test =
                iota_range(a.train.size() + a.validation.size(), rows.size());
            td.data.validate();
            if (td.data.splits.train.empty()) {
                out.warnings.push_back("client " + std::to_string(c) + " task " + std::to_string(t) +
                                       " (" + td.description + "): no training rows");
            }
        }
    }
    return out;
}

}  // namespace confedmade
