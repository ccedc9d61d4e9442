#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "confedmade/errors.hpp"
#include "confedmade/linalg.hpp"
#include "confedmade/param_set.hpp"
#include "confedmade/rng.hpp"

namespace confedmade {

// Masks aligned index for index with ParamSet::weights.
using MaskSet = std::vector<DenseMatrix>;

struct MadeConfig {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    bool direct_connections = false;
    bool order_agnostic = false;
    bool connectivity_agnostic = false;
    Activation activation = Activation::Relu;
    double prob_clamp = 1e-7;
    std::uint64_t mask_seed = 0;  // seed of the stream the current masks came from

    std::size_t n_hidden_layers() const { return hidden.size(); }
    std::size_t n_weight_tensors() const {
        return hidden.size() + 1 + (direct_connections ? 1 : 0);
    }
    std::size_t output_weight_index() const { return hidden.size(); }
    std::size_t direct_weight_index() const { return hidden.size() + 1; }

    void validate() const {
        if (input_dim < 2) throw ConfigError("model needs input_dim >= 2");
        if (hidden.empty()) throw ConfigError("model needs at least one hidden layer");
        for (std::size_t k : hidden) {
            if (k == 0) throw ConfigError("hidden layer width must be positive");
        }
        if (prob_clamp <= 0.0 || prob_clamp >= 0.5) {
            throw ConfigError("prob_clamp must lie in (0, 0.5)");
        }
    }
};

// rank[d] is the position of input d in the autoregressive order, 1..D.
struct Ordering {
    std::vector<std::uint32_t> rank;

    std::size_t dim() const { return rank.size(); }

    void validate() const {
        std::vector<bool> seen(rank.size(), false);
        for (std::uint32_t r : rank) {
            if (r < 1 || r > rank.size() || seen[r - 1]) {
                throw ValidationError("ordering is not a permutation of 1..D");
            }
            seen[r - 1] = true;
        }
    }
};

inline Ordering identity_ordering(std::size_t d) {
    Ordering o;
    o.rank.resize(d);
    for (std::size_t i = 0; i < d; ++i) o.rank[i] = static_cast<std::uint32_t>(i + 1);
    return o;
}

inline Ordering random_ordering(std::size_t d, RngStream& rng) {
    Ordering o = identity_ordering(d);
    rng.shuffle(o.rank);
    return o;
}

// degrees[l][k] is the connectivity degree of hidden unit k in layer l,
// drawn uniformly from {1..D-1}.
struct MaskAssignments {
    std::vector<std::vector<std::uint32_t>> degrees;
};

inline MaskAssignments sample_assignments(const MadeConfig& cfg, RngStream& rng) {
    cfg.validate();
    MaskAssignments a;
    a.degrees.resize(cfg.hidden.size());
    const std::uint64_t hi = cfg.input_dim - 1;
    for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
        a.degrees[l].resize(cfg.hidden[l]);
        for (std::size_t k = 0; k < cfg.hidden[l]; ++k) {
            a.degrees[l][k] = static_cast<std::uint32_t>(rng.uniform_u64(1, hi));
        }
    }
    return a;
}

// Mask rules. A hidden unit with degree m may read inputs of rank <= m
// (first layer) or units of degree <= m (deeper layers). Output d may read
// hidden units of degree < rank(d) and, through the direct weights, inputs
// of strictly smaller rank. Together these make output d a function of the
// inputs preceding d only.
inline MaskSet build_masks(const MadeConfig& cfg, const Ordering& ordering,
                           const MaskAssignments& assignments) {
    cfg.validate();
    ordering.validate();
    if (ordering.dim() != cfg.input_dim) throw DimensionError("ordering dimension mismatch");
    if (assignments.degrees.size() != cfg.hidden.size()) {
        throw DimensionError("assignments layer count mismatch");
    }
    for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
        if (assignments.degrees[l].size() != cfg.hidden[l]) {
            throw DimensionError("assignments width mismatch at layer " + std::to_string(l));
        }
        for (std::uint32_t m : assignments.degrees[l]) {
            if (m < 1 || m >= cfg.input_dim) {
                throw ValidationError("connectivity degree outside 1..D-1");
            }
        }
    }

    MaskSet masks;
    masks.reserve(cfg.n_weight_tensors());

    const auto& first = assignments.degrees[0];
    DenseMatrix m1(cfg.hidden[0], cfg.input_dim);
    for (std::size_t k = 0; k < cfg.hidden[0]; ++k) {
        for (std::size_t d = 0; d < cfg.input_dim; ++d) {
            m1.at(k, d) = first[k] >= ordering.rank[d] ? 1.0 : 0.0;
        }
    }
    masks.push_back(std::move(m1));

    for (std::size_t l = 1; l < cfg.hidden.size(); ++l) {
        const auto& cur = assignments.degrees[l];
        const auto& prev = assignments.degrees[l - 1];
        DenseMatrix ml(cfg.hidden[l], cfg.hidden[l - 1]);
        for (std::size_t k = 0; k < cur.size(); ++k) {
            for (std::size_t p = 0; p < prev.size(); ++p) {
                ml.at(k, p) = cur[k] >= prev[p] ? 1.0 : 0.0;
            }
        }
        masks.push_back(std::move(ml));
    }

    const auto& last = assignments.degrees.back();
    DenseMatrix mv(cfg.input_dim, cfg.hidden.back());
    for (std::size_t d = 0; d < cfg.input_dim; ++d) {
        for (std::size_t k = 0; k < last.size(); ++k) {
            mv.at(d, k) = ordering.rank[d] > last[k] ? 1.0 : 0.0;
        }
    }
    masks.push_back(std::move(mv));

    if (cfg.direct_connections) {
        DenseMatrix md(cfg.input_dim, cfg.input_dim);
        for (std::size_t d = 0; d < cfg.input_dim; ++d) {
            for (std::size_t e = 0; e < cfg.input_dim; ++e) {
                md.at(d, e) = ordering.rank[d] > ordering.rank[e] ? 1.0 : 0.0;
            }
        }
        masks.push_back(std::move(md));
    }
    return masks;
}

inline ParamSet make_params(const MadeConfig& cfg) {
    cfg.validate();
    ParamSet p;
    p.weights.emplace_back(cfg.hidden[0], cfg.input_dim);
    for (std::size_t l = 1; l < cfg.hidden.size(); ++l) {
        p.weights.emplace_back(cfg.hidden[l], cfg.hidden[l - 1]);
    }
    p.weights.emplace_back(cfg.input_dim, cfg.hidden.back());
    if (cfg.direct_connections) p.weights.emplace_back(cfg.input_dim, cfg.input_dim);
    for (std::size_t k : cfg.hidden) p.biases.emplace_back(k, 0.0);
    p.biases.emplace_back(cfg.input_dim, 0.0);
    return p;
}

inline void glorot_init(ParamSet& p, RngStream& rng) {
    for (auto& w : p.weights) {
        const double limit = std::sqrt(6.0 / static_cast<double>(w.rows + w.cols));
        for (double& v : w.values) v = rng.uniform(-limit, limit);
    }
    for (auto& b : p.biases) std::fill(b.begin(), b.end(), 0.0);
}

struct MadeModel {
    MadeConfig cfg;
    ParamSet params;
    Ordering ordering;
    MaskAssignments assignments;
    MaskSet masks;

    void rebuild_masks() { masks = build_masks(cfg, ordering, assignments); }
};

// Ordering is a fresh permutation only in order-agnostic mode, otherwise the
// identity; connectivity degrees are always drawn.
inline std::pair<Ordering, MaskAssignments> sample_ordering_and_assignments(
    const MadeConfig& cfg, RngStream& rng) {
    Ordering o = cfg.order_agnostic ? random_ordering(cfg.input_dim, rng)
                                    : identity_ordering(cfg.input_dim);
    return {std::move(o), sample_assignments(cfg, rng)};
}

inline MadeModel make_made(const MadeConfig& cfg, RngStream& rng) {
    cfg.validate();
    MadeModel m;
    m.cfg = cfg;
    m.params = make_params(cfg);
    glorot_init(m.params, rng);
    auto [ordering, assignments] = sample_ordering_and_assignments(cfg, rng);
    m.ordering = std::move(ordering);
    m.assignments = std::move(assignments);
    m.rebuild_masks();
    return m;
}

inline void resample_ordering(MadeModel& m, RngStream& rng) {
    if (!m.cfg.order_agnostic) {
        throw UsageError("resample_ordering requires the order-agnostic flag");
    }
    m.ordering = random_ordering(m.cfg.input_dim, rng);
    m.rebuild_masks();
}

inline void resample_connectivity(MadeModel& m, RngStream& rng) {
    if (!m.cfg.connectivity_agnostic) {
        throw UsageError("resample_connectivity requires the connectivity-agnostic flag");
    }
    m.assignments = sample_assignments(m.cfg, rng);
    m.rebuild_masks();
}

// Materialize W ⊙ M once; forward and backward both run on the product.
inline std::vector<DenseMatrix> masked_weights(const ParamSet& p, const MaskSet& masks) {
    if (p.weights.size() != masks.size()) {
        throw DimensionError("masked_weights: mask count mismatch");
    }
    std::vector<DenseMatrix> eff(p.weights.size());
    for (std::size_t i = 0; i < p.weights.size(); ++i) hadamard(p.weights[i], masks[i], eff[i]);
    return eff;
}

// --- forward / loss / backward -------------------------------------------

struct ForwardCache {
    std::vector<DenseMatrix> h;  // h[0] = input batch, h[1..L] activations
    DenseMatrix logits;
    DenseMatrix probs;  // raw sigmoid outputs, clamping happens in the loss
};

inline void made_forward(const MadeConfig& cfg, const std::vector<DenseMatrix>& eff_weights,
                         const std::vector<Vector>& biases, const DenseMatrix& x,
                         ForwardCache& cache) {
    if (x.cols != cfg.input_dim) throw DimensionError("made_forward: input width mismatch");
    const std::size_t nl = cfg.hidden.size();
    cache.h.resize(nl + 1);
    cache.h[0] = x;
    for (std::size_t l = 0; l < nl; ++l) {
        affine_batch(cache.h[l], eff_weights[l], biases[l], cache.h[l + 1]);
        for (double& v : cache.h[l + 1].values) v = activate(cfg.activation, v);
    }
    affine_batch(cache.h[nl], eff_weights[cfg.output_weight_index()], biases[nl], cache.logits);
    if (cfg.direct_connections) {
        affine_batch_add(x, eff_weights[cfg.direct_weight_index()], cache.logits);
    }
    cache.probs.rows = cache.logits.rows;
    cache.probs.cols = cache.logits.cols;
    cache.probs.values.resize(cache.logits.size());
    for (std::size_t i = 0; i < cache.logits.size(); ++i) {
        cache.probs.values[i] = sigmoid(cache.logits.values[i]);
    }
}

// Per-example negative log-likelihood, output probabilities clamped away
// from 0 and 1. Returns the batch mean; per_example receives the sums over
// input coordinates when non-null.
inline double made_nll(const MadeConfig& cfg, const ForwardCache& cache, const DenseMatrix& x,
                       Vector* per_example = nullptr) {
    if (!cache.probs.same_shape(x)) throw DimensionError("made_nll: prob/input shape mismatch");
    const double lo = cfg.prob_clamp;
    const double hi = 1.0 - cfg.prob_clamp;
    if (per_example) per_example->assign(x.rows, 0.0);
    double total = 0.0;
    for (std::size_t s = 0; s < x.rows; ++s) {
        const double* ps = cache.probs.row(s);
        const double* xs = x.row(s);
        double ex = 0.0;
        for (std::size_t d = 0; d < x.cols; ++d) {
            const double p = std::clamp(ps[d], lo, hi);
            ex -= xs[d] * std::log(p) + (1.0 - xs[d]) * std::log(1.0 - p);
        }
        if (per_example) (*per_example)[s] = ex;
        total += ex;
    }
    return total / static_cast<double>(x.rows);
}

struct MadeBackward {
    // Gradients with respect to the effective (masked) weight matrices and
    // the biases, for the batch-mean NLL. Multiply by the mask to get the
    // gradient of the raw tensor behind it.
    std::vector<DenseMatrix> grad_w_eff;
    std::vector<Vector> grad_b;
};

inline void made_backward(const MadeConfig& cfg, const std::vector<DenseMatrix>& eff_weights,
                          const ForwardCache& cache, const DenseMatrix& x, MadeBackward& out) {
    const std::size_t nl = cfg.hidden.size();
    const double lo = cfg.prob_clamp;
    const double hi = 1.0 - cfg.prob_clamp;
    const double scale = 1.0 / static_cast<double>(x.rows);

    out.grad_w_eff.assign(eff_weights.size(), DenseMatrix{});
    for (std::size_t i = 0; i < eff_weights.size(); ++i) {
        out.grad_w_eff[i] = DenseMatrix(eff_weights[i].rows, eff_weights[i].cols);
    }
    out.grad_b.assign(nl + 1, Vector{});
    for (std::size_t l = 0; l < nl; ++l) out.grad_b[l].assign(cfg.hidden[l], 0.0);
    out.grad_b[nl].assign(cfg.input_dim, 0.0);

    // Saturated outputs sit on the clamp boundary where the loss is locally
    // constant, so their logit gradient is exactly zero.
    DenseMatrix dlogits(x.rows, x.cols);
    for (std::size_t s = 0; s < x.rows; ++s) {
        const double* ps = cache.probs.row(s);
        const double* xs = x.row(s);
        double* ds = dlogits.row(s);
        for (std::size_t d = 0; d < x.cols; ++d) {
            ds[d] = (ps[d] > lo && ps[d] < hi) ? (ps[d] - xs[d]) * scale : 0.0;
        }
    }

    accumulate_weight_grad(dlogits, cache.h[nl], out.grad_w_eff[cfg.output_weight_index()]);
    for (std::size_t s = 0; s < x.rows; ++s) {
        const double* ds = dlogits.row(s);
        for (std::size_t d = 0; d < x.cols; ++d) out.grad_b[nl][d] += ds[d];
    }
    if (cfg.direct_connections) {
        accumulate_weight_grad(dlogits, cache.h[0], out.grad_w_eff[cfg.direct_weight_index()]);
    }

    DenseMatrix dh(x.rows, cfg.hidden[nl - 1]);
    dh.values.assign(dh.size(), 0.0);
    backprop_input_grad(dlogits, eff_weights[cfg.output_weight_index()], dh);

    for (std::size_t l = nl; l >= 1; --l) {
        DenseMatrix dz(x.rows, cfg.hidden[l - 1]);
        for (std::size_t s = 0; s < x.rows; ++s) {
            const double* hs = cache.h[l].row(s);
            const double* dhs = dh.row(s);
            double* dzs = dz.row(s);
            for (std::size_t k = 0; k < cfg.hidden[l - 1]; ++k) {
                dzs[k] = dhs[k] * activate_grad_from_output(cfg.activation, hs[k]);
            }
        }
        accumulate_weight_grad(dz, cache.h[l - 1], out.grad_w_eff[l - 1]);
        for (std::size_t s = 0; s < x.rows; ++s) {
            const double* dzs = dz.row(s);
            for (std::size_t k = 0; k < cfg.hidden[l - 1]; ++k) out.grad_b[l - 1][k] += dzs[k];
        }
        if (l > 1) {
            dh = DenseMatrix(x.rows, cfg.hidden[l - 2]);
            backprop_input_grad(dz, eff_weights[l - 1], dh);
        }
    }
}

// Convenience single-model paths.

inline double model_nll(const MadeModel& m, const DenseMatrix& x, Vector* per_example = nullptr) {
    ForwardCache c;
    made_forward(m.cfg, masked_weights(m.params, m.masks), m.params.biases, x, c);
    return made_nll(m.cfg, c, x, per_example);
}

// Conditional probabilities p(x_d = 1 | x_<d) for one binary input vector.
inline Vector forward_probs(const MadeModel& m, const Vector& x) {
    for (double v : x) {
        if (v != 0.0 && v != 1.0) {
            throw ValidationError("forward_probs: input entry " + std::to_string(v) +
                                  " is not binary");
        }
    }
    DenseMatrix row(1, m.cfg.input_dim);
    if (x.size() != m.cfg.input_dim) throw DimensionError("forward_probs: input width mismatch");
    row.values = x;
    ForwardCache c;
    made_forward(m.cfg, masked_weights(m.params, m.masks), m.params.biases, row, c);
    return c.probs.values;
}

// Ancestral sampling in the model's autoregressive order.
inline DenseMatrix made_sample(const MadeModel& m, std::size_t n, RngStream& rng) {
    const std::size_t d = m.cfg.input_dim;
    std::vector<std::size_t> by_rank(d);
    for (std::size_t i = 0; i < d; ++i) by_rank[m.ordering.rank[i] - 1] = i;

    const auto eff = masked_weights(m.params, m.masks);
    DenseMatrix out(n, d);
    ForwardCache cache;
    DenseMatrix row(1, d);
    for (std::size_t s = 0; s < n; ++s) {
        row.values.assign(d, 0.0);
        for (std::size_t r = 0; r < d; ++r) {
            made_forward(m.cfg, eff, m.params.biases, row, cache);
            const std::size_t idx = by_rank[r];
            const double p = std::clamp(cache.probs.at(0, idx), m.cfg.prob_clamp,
                                        1.0 - m.cfg.prob_clamp);
            row.values[idx] = rng.bernoulli(p) ? 1.0 : 0.0;
        }
        std::copy(row.values.begin(), row.values.end(), out.row(s));
    }
    return out;
}

// --- binary checkpoints ----------------------------------------------------
//
// Layout: magic, header ints, ordering, degrees, then raw little-endian f64
// blocks in parameter order. Masks are rebuilt on load.

namespace detail {

inline void put_bytes(std::ofstream& f, const void* p, std::size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(f, b, 4);
}

inline void put_u64(std::ofstream& f, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(f, b, 8);
}

inline void put_f64(std::ofstream& f, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    put_u64(f, u);
}

inline void get_bytes(std::ifstream& f, void* p, std::size_t n, const char* what) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (f.gcount() != static_cast<std::streamsize>(n)) {
        throw FormatError(std::string("checkpoint truncated reading ") + what);
    }
}

inline std::uint32_t get_u32(std::ifstream& f, const char* what) {
    unsigned char b[4];
    get_bytes(f, b, 4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::ifstream& f, const char* what) {
    unsigned char b[8];
    get_bytes(f, b, 8, what);
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return u;
}

inline double get_f64(std::ifstream& f, const char* what) {
    const std::uint64_t u = get_u64(f, what);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

}  // namespace detail

inline bool all_finite_model(const MadeModel& m) {
    for (const auto& w : m.params.weights) {
        if (!all_finite(w.values)) return false;
    }
    for (const auto& b : m.params.biases) {
        if (!all_finite(b)) return false;
    }
    return true;
}

inline constexpr char kCheckpointMagic[8] = {'C', 'F', 'M', 'M', 'D', 'L', '0', '1'};

inline void save_checkpoint(const MadeModel& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    detail::put_bytes(f, kCheckpointMagic, 8);
    detail::put_u32(f, static_cast<std::uint32_t>(m.cfg.input_dim));
    detail::put_u32(f, static_cast<std::uint32_t>(m.cfg.hidden.size()));
    std::uint32_t flags = 0;
    if (m.cfg.direct_connections) flags |= 1u;
    if (m.cfg.order_agnostic) flags |= 2u;
    if (m.cfg.connectivity_agnostic) flags |= 4u;
    detail::put_u32(f, flags);
    detail::put_u32(f, static_cast<std::uint32_t>(m.cfg.activation));
    detail::put_u64(f, m.cfg.mask_seed);
    detail::put_f64(f, m.cfg.prob_clamp);
    for (std::size_t k : m.cfg.hidden) detail::put_u32(f, static_cast<std::uint32_t>(k));
    for (std::uint32_t r : m.ordering.rank) detail::put_u32(f, r);
    for (const auto& layer : m.assignments.degrees) {
        for (std::uint32_t deg : layer) detail::put_u32(f, deg);
    }
    for (const auto& w : m.params.weights) {
        for (double v : w.values) detail::put_f64(f, v);
    }
    for (const auto& b : m.params.biases) {
        for (double v : b) detail::put_f64(f, v);
    }
    if (!f) throw IoError("write failed for checkpoint: " + path);
}

inline MadeModel load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    detail::get_bytes(f, magic, 8, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw FormatError("not a model checkpoint: " + path);
    }
    MadeConfig cfg;
    cfg.input_dim = detail::get_u32(f, "input_dim");
    const std::uint32_t nl = detail::get_u32(f, "hidden layer count");
    const std::uint32_t flags = detail::get_u32(f, "flags");
    cfg.direct_connections = (flags & 1u) != 0;
    cfg.order_agnostic = (flags & 2u) != 0;
    cfg.connectivity_agnostic = (flags & 4u) != 0;
    const std::uint32_t act = detail::get_u32(f, "activation");
    if (act > 2) throw FormatError("checkpoint has unknown activation code");
    cfg.activation = static_cast<Activation>(act);
    cfg.mask_seed = detail::get_u64(f, "mask seed");
    cfg.prob_clamp = detail::get_f64(f, "prob_clamp");
    cfg.hidden.resize(nl);
    for (auto& k : cfg.hidden) k = detail::get_u32(f, "hidden width");
    cfg.validate();

    MadeModel m;
    m.cfg = cfg;
    m.ordering.rank.resize(cfg.input_dim);
    for (auto& r : m.ordering.rank) r = detail::get_u32(f, "ordering");
    m.ordering.validate();
    m.assignments.degrees.resize(nl);
    for (std::size_t l = 0; l < nl; ++l) {
        m.assignments.degrees[l].resize(cfg.hidden[l]);
        for (auto& deg : m.assignments.degrees[l]) deg = detail::get_u32(f, "degree");
    }
    m.params = make_params(cfg);
    for (auto& w : m.params.weights) {
        for (double& v : w.values) v = detail::get_f64(f, "weights");
    }
    for (auto& b : m.params.biases) {
        for (double& v : b) v = detail::get_f64(f, "biases");
    }
    if (!all_finite_model(m)) throw FormatError("checkpoint holds non-finite parameters");
    m.rebuild_masks();
    return m;
}

}  // namespace confedmade
