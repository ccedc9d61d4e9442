#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "confedmade/errors.hpp"
#include "confedmade/gradcheck.hpp"
#include "confedmade/linalg.hpp"
#include "confedmade/made.hpp"
#include "confedmade/param_set.hpp"

namespace confedmade {

// A task-end adaptive tensor set published by one client. Entries are
// append-only and never mutated after insertion.
struct KnowledgeEntry {
    std::size_t client = 0;
    std::size_t task = 0;
    std::vector<DenseMatrix> weights;
};

struct KnowledgeBase {
    std::vector<KnowledgeEntry> entries;
};

// Client-side split of the model weights: a shared base B gated row-wise by
// a trainable sigmoid mask, one adaptive tensor set per task seen so far,
// and one attention scalar per (knowledge entry, weight tensor). Biases stay
// undecomposed and live in base.biases.
struct ClientDecomp {
    ParamSet base;
    std::vector<Vector> gate_logits;                // per hidden layer, then per output unit
    std::vector<std::vector<DenseMatrix>> adaptives;  // adaptives[task][tensor]
    std::vector<std::vector<double>> alpha;           // alpha[kb entry][tensor]
};

// State pinned at a task boundary. base_ref/adaptive_ref anchor the drift
// penalty while later tasks train; gate_logits/alpha reconstruct the
// task-i model for evaluation after the client has moved on.
struct FrozenTaskSnapshot {
    std::size_t task = 0;
    std::vector<Vector> mask_binary;  // thresholded gate, same layout as gate_logits
    std::vector<DenseMatrix> base_ref;
    std::vector<DenseMatrix> adaptive_ref;
    std::vector<Vector> gate_logits;
    std::vector<std::vector<double>> alpha;
};

enum class GateMode {
    Sigmoid,  // multiply base rows by the sigmoid of the gate logit
    One,      // pass the base through untouched (no multiply at all)
};

struct LossOptions {
    double lambda1 = 0.0001;
    double lambda2 = 100.0;
    GateMode gate = GateMode::Sigmoid;
    bool use_adaptive = true;
    bool use_knowledge = true;
    // true: the adaptive L1 runs over A ⊙ M (autoregressive support only);
    // false: over the raw adaptives.
    bool l1_mask_weights = true;
};

// Which gate vector applies to weight tensor i: hidden tensors use their own
// layer's logits, the output and direct tensors share the output logits.
inline std::size_t gate_index_for_tensor(const MadeConfig& cfg, std::size_t i) {
    return i < cfg.hidden.size() ? i : cfg.hidden.size();
}

inline std::vector<Vector> make_gate_logits(const MadeConfig& cfg, RngStream& rng,
                                            double stddev = 0.5) {
    std::vector<Vector> g(cfg.hidden.size() + 1);
    for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
        g[l].resize(cfg.hidden[l]);
        for (double& v : g[l]) v = rng.normal(0.0, stddev);
    }
    g.back().resize(cfg.input_dim);
    for (double& v : g.back()) v = rng.normal(0.0, stddev);
    return g;
}

inline void validate_gate_shapes(const MadeConfig& cfg, const std::vector<Vector>& gates) {
    if (gates.size() != cfg.hidden.size() + 1) {
        throw DimensionError("gate logits: expected one vector per hidden layer plus output");
    }
    for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
        if (gates[l].size() != cfg.hidden[l]) {
            throw DimensionError("gate logits width mismatch at layer " + std::to_string(l));
        }
    }
    if (gates.back().size() != cfg.input_dim) {
        throw DimensionError("output gate logits width mismatch");
    }
}

// m_hat = 1[sigmoid(logit) > cutoff], one bit per row of each weight tensor.
inline std::vector<Vector> threshold_mask(const std::vector<Vector>& gate_logits,
                                          double cutoff) {
    if (cutoff < 0.0 || cutoff >= 1.0) {
        throw ValidationError("threshold_mask: cutoff must lie in [0, 1)");
    }
    std::vector<Vector> hat(gate_logits.size());
    for (std::size_t l = 0; l < gate_logits.size(); ++l) {
        hat[l].resize(gate_logits[l].size());
        for (std::size_t k = 0; k < gate_logits[l].size(); ++k) {
            hat[l][k] = sigmoid(gate_logits[l][k]) > cutoff ? 1.0 : 0.0;
        }
    }
    return hat;
}

// New task: the adaptive starts as a scaled copy of the base.
inline void init_task_adaptive(ClientDecomp& dec, double lambda3) {
    if (lambda3 <= 0.0) throw ConfigError("adaptive init scale must be positive");
    std::vector<DenseMatrix> a;
    a.reserve(dec.base.weights.size());
    for (const auto& w : dec.base.weights) {
        DenseMatrix t(w.rows, w.cols);
        for (std::size_t i = 0; i < w.size(); ++i) t.values[i] = w.values[i] / lambda3;
        a.push_back(std::move(t));
    }
    dec.adaptives.push_back(std::move(a));
}

inline void apply_sparsity_floor(std::vector<DenseMatrix>& ws, double floor) {
    for (auto& w : ws) {
        for (double& v : w.values) {
            if (std::abs(v) < floor) v = 0.0;
        }
    }
}

inline FrozenTaskSnapshot snapshot_task(const ClientDecomp& dec, std::size_t task,
                                        double cutoff) {
    if (task >= dec.adaptives.size()) throw ValidationError("snapshot_task: no such task");
    FrozenTaskSnapshot s;
    s.task = task;
    s.mask_binary = threshold_mask(dec.gate_logits, cutoff);
    s.base_ref = dec.base.weights;
    s.adaptive_ref = dec.adaptives[task];
    s.gate_logits = dec.gate_logits;
    s.alpha = dec.alpha;
    return s;
}

inline KnowledgeEntry make_knowledge_entry(const ClientDecomp& dec, std::size_t client,
                                           std::size_t task, double floor) {
    if (task >= dec.adaptives.size()) throw ValidationError("make_knowledge_entry: no such task");
    KnowledgeEntry e;
    e.client = client;
    e.task = task;
    e.weights = dec.adaptives[task];
    apply_sparsity_floor(e.weights, floor);
    return e;
}

// --- composition ------------------------------------------------------------

struct ComposeSpec {
    GateMode gate = GateMode::Sigmoid;
    bool use_adaptive = true;
    bool use_knowledge = true;
    std::size_t adaptive_task = 0;     // which of dec.adaptives feeds the sum
    std::size_t kb_limit = SIZE_MAX;   // only entries [0, kb_limit) are visible
    const std::vector<Vector>* gate_logits = nullptr;            // default: dec.gate_logits
    const std::vector<std::vector<double>>* alpha = nullptr;     // default: dec.alpha
};

// composed[i] = gate(B[i]) + A[i] + sum_e alpha[e][i] * kb[e].weights[i],
// skipping the client's own knowledge entries. The autoregressive mask is
// applied by the caller (it distributes over every term).
inline std::vector<DenseMatrix> compose_weights(const MadeConfig& cfg, const ClientDecomp& dec,
                                                const KnowledgeBase& kb, std::size_t self_client,
                                                const ComposeSpec& spec) {
    const std::vector<Vector>& gates = spec.gate_logits ? *spec.gate_logits : dec.gate_logits;
    const std::vector<std::vector<double>>& alpha = spec.alpha ? *spec.alpha : dec.alpha;
    if (spec.gate == GateMode::Sigmoid) validate_gate_shapes(cfg, gates);

    std::vector<DenseMatrix> composed(dec.base.weights.size());
    for (std::size_t i = 0; i < dec.base.weights.size(); ++i) {
        const DenseMatrix& b = dec.base.weights[i];
        DenseMatrix& c = composed[i];
        c = b;
        if (spec.gate == GateMode::Sigmoid) {
            const Vector& g = gates[gate_index_for_tensor(cfg, i)];
            for (std::size_t r = 0; r < c.rows; ++r) {
                const double s = sigmoid(g[r]);
                double* row = c.row(r);
                for (std::size_t col = 0; col < c.cols; ++col) row[col] *= s;
            }
        }
        if (spec.use_adaptive) {
            if (spec.adaptive_task >= dec.adaptives.size()) {
                throw ValidationError("compose_weights: adaptive task out of range");
            }
            const DenseMatrix& a = dec.adaptives[spec.adaptive_task][i];
            if (!a.same_shape(c)) throw DimensionError("compose_weights: adaptive shape");
            for (std::size_t j = 0; j < c.size(); ++j) c.values[j] += a.values[j];
        }
        if (spec.use_knowledge) {
            const std::size_t limit = std::min(spec.kb_limit, kb.entries.size());
            for (std::size_t e = 0; e < limit; ++e) {
                if (kb.entries[e].client == self_client) continue;
                if (e >= alpha.size()) throw ValidationError("compose_weights: missing alpha row");
                const double coef = alpha[e][i];
                if (coef == 0.0) continue;
                const DenseMatrix& aw = kb.entries[e].weights[i];
                if (!aw.same_shape(c)) throw DimensionError("compose_weights: kb shape");
                axpy(coef, aw.values.data(), c.values.data(), c.size());
            }
        }
    }
    return composed;
}

// --- loss and gradients -------------------------------------------------------

struct DecompGrads {
    ParamSet base;  // weights + biases
    std::vector<Vector> gate_logits;
    std::vector<std::vector<DenseMatrix>> adaptives;
    std::vector<std::vector<double>> alpha;
};

inline DecompGrads make_grads_like(const ClientDecomp& dec) {
    DecompGrads g;
    g.base = zeros_like(dec.base);
    g.gate_logits.resize(dec.gate_logits.size());
    for (std::size_t l = 0; l < dec.gate_logits.size(); ++l) {
        g.gate_logits[l].assign(dec.gate_logits[l].size(), 0.0);
    }
    g.adaptives.resize(dec.adaptives.size());
    for (std::size_t t = 0; t < dec.adaptives.size(); ++t) {
        g.adaptives[t].reserve(dec.adaptives[t].size());
        for (const auto& a : dec.adaptives[t]) g.adaptives[t].emplace_back(a.rows, a.cols);
    }
    g.alpha.resize(dec.alpha.size());
    for (std::size_t e = 0; e < dec.alpha.size(); ++e) g.alpha[e].assign(dec.alpha[e].size(), 0.0);
    return g;
}

struct DecompLossResult {
    double total = 0.0;
    double nll = 0.0;
    double sparsity = 0.0;  // raw sum, total adds lambda1 * sparsity
    double drift = 0.0;     // raw sum, total adds lambda2 * drift
};

// Batch-mean NLL through the composed weights plus the two regularizers:
//   lambda1 * ( sum sigmoid(gate) + sum_j |A^(j) (⊙ M)| )
//   lambda2 * sum_{i<t} || (B - B_ref_i) ⊙ m_hat_i + (A^(i) - A_ref_i) ||^2
// The drift runs over raw weights, deliberately not masked. Past adaptives
// receive gradient only through the drift term; the data term touches the
// current task's adaptive alone.
inline DecompLossResult decomposed_loss(const MadeConfig& cfg, const MaskSet& masks,
                                        const ClientDecomp& dec, const KnowledgeBase& kb,
                                        std::size_t self_client,
                                        const std::vector<FrozenTaskSnapshot>& snapshots,
                                        const DenseMatrix& batch, const LossOptions& opts,
                                        DecompGrads* grads) {
    if (dec.adaptives.empty() && opts.use_adaptive) {
        throw ValidationError("decomposed_loss: no adaptive tensors for current task");
    }
    const std::size_t cur_task = dec.adaptives.empty() ? 0 : dec.adaptives.size() - 1;

    ComposeSpec spec;
    spec.gate = opts.gate;
    spec.use_adaptive = opts.use_adaptive;
    spec.use_knowledge = opts.use_knowledge;
    spec.adaptive_task = cur_task;
    const auto composed = compose_weights(cfg, dec, kb, self_client, spec);

    std::vector<DenseMatrix> eff(composed.size());
    for (std::size_t i = 0; i < composed.size(); ++i) hadamard(composed[i], masks[i], eff[i]);

    ForwardCache cache;
    made_forward(cfg, eff, dec.base.biases, batch, cache);

    DecompLossResult res;
    res.nll = made_nll(cfg, cache, batch);

    MadeBackward bw;
    if (grads) {
        made_backward(cfg, eff, cache, batch, bw);
        for (std::size_t i = 0; i < bw.grad_w_eff.size(); ++i) {
            // chain through the autoregressive mask, then fan out to B, the
            // gate, the current adaptive and the attention scalars
            DenseMatrix dcomp;
            hadamard(bw.grad_w_eff[i], masks[i], dcomp);

            if (opts.gate == GateMode::Sigmoid) {
                const Vector& g = dec.gate_logits[gate_index_for_tensor(cfg, i)];
                Vector& dg = grads->gate_logits[gate_index_for_tensor(cfg, i)];
                const DenseMatrix& b = dec.base.weights[i];
                DenseMatrix& db = grads->base.weights[i];
                for (std::size_t r = 0; r < dcomp.rows; ++r) {
                    const double s = sigmoid(g[r]);
                    const double* dc = dcomp.row(r);
                    const double* br = b.row(r);
                    double* dbr = db.row(r);
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dcomp.cols; ++c) {
                        dbr[c] += dc[c] * s;
                        acc += dc[c] * br[c];
                    }
                    dg[r] += acc * s * (1.0 - s);
                }
            } else {
                axpy(1.0, dcomp.values.data(), grads->base.weights[i].values.data(),
                     dcomp.size());
            }
            if (opts.use_adaptive) {
                axpy(1.0, dcomp.values.data(), grads->adaptives[cur_task][i].values.data(),
                     dcomp.size());
            }
            if (opts.use_knowledge) {
                for (std::size_t e = 0; e < kb.entries.size() && e < dec.alpha.size(); ++e) {
                    if (kb.entries[e].client == self_client) continue;
                    grads->alpha[e][i] += dot(dcomp.values.data(),
                                              kb.entries[e].weights[i].values.data(),
                                              dcomp.size());
                }
            }
        }
        for (std::size_t l = 0; l < bw.grad_b.size(); ++l) {
            axpy(1.0, bw.grad_b[l].data(), grads->base.biases[l].data(), bw.grad_b[l].size());
        }
    }

    if (opts.lambda1 != 0.0) {
        if (opts.gate == GateMode::Sigmoid) {
            for (std::size_t l = 0; l < dec.gate_logits.size(); ++l) {
                for (std::size_t k = 0; k < dec.gate_logits[l].size(); ++k) {
                    const double s = sigmoid(dec.gate_logits[l][k]);
                    res.sparsity += s;
                    if (grads) grads->gate_logits[l][k] += opts.lambda1 * s * (1.0 - s);
                }
            }
        }
        if (opts.use_adaptive) {
            for (std::size_t t = 0; t < dec.adaptives.size(); ++t) {
                for (std::size_t i = 0; i < dec.adaptives[t].size(); ++i) {
                    const DenseMatrix& a = dec.adaptives[t][i];
                    const DenseMatrix* m = opts.l1_mask_weights ? &masks[i] : nullptr;
                    DenseMatrix* da = grads ? &grads->adaptives[t][i] : nullptr;
                    for (std::size_t j = 0; j < a.size(); ++j) {
                        const double gate = m ? m->values[j] : 1.0;
                        if (gate == 0.0) continue;
                        const double v = a.values[j];
                        res.sparsity += std::abs(v);
                        if (da && v != 0.0) {
                            da->values[j] += opts.lambda1 * (v > 0.0 ? 1.0 : -1.0);
                        }
                    }
                }
            }
        }
    }

    if (opts.lambda2 != 0.0 && opts.use_adaptive) {
        for (const auto& snap : snapshots) {
            if (snap.task >= dec.adaptives.size() || snap.task == cur_task) continue;
            for (std::size_t i = 0; i < dec.base.weights.size(); ++i) {
                const Vector& hat = snap.mask_binary[gate_index_for_tensor(cfg, i)];
                const DenseMatrix& b = dec.base.weights[i];
                const DenseMatrix& bref = snap.base_ref[i];
                const DenseMatrix& a = dec.adaptives[snap.task][i];
                const DenseMatrix& aref = snap.adaptive_ref[i];
                DenseMatrix* db = grads ? &grads->base.weights[i] : nullptr;
                DenseMatrix* da = grads ? &grads->adaptives[snap.task][i] : nullptr;
                for (std::size_t r = 0; r < b.rows; ++r) {
                    const double h = hat[r];
                    for (std::size_t c = 0; c < b.cols; ++c) {
                        const std::size_t j = r * b.cols + c;
                        const double delta =
                            (b.values[j] - bref.values[j]) * h + (a.values[j] - aref.values[j]);
                        res.drift += delta * delta;
                        if (grads) {
                            const double g = 2.0 * opts.lambda2 * delta;
                            db->values[j] += g * h;
                            da->values[j] += g;
                        }
                    }
                }
            }
        }
    }

    res.total = res.nll + opts.lambda1 * res.sparsity + opts.lambda2 * res.drift;
    if (!std::isfinite(res.total)) {
        throw NumericError("decomposed loss diverged: nll=" + std::to_string(res.nll) +
                           " sparsity=" + std::to_string(res.sparsity) +
                           " drift=" + std::to_string(res.drift));
    }
    return res;
}

// The two published objective variants differ only in whether the adaptive
// L1 runs on the masked support.
inline DecompLossResult confedmade_loss(const MadeConfig& cfg, const MaskSet& masks,
                                        const ClientDecomp& dec, const KnowledgeBase& kb,
                                        std::size_t self_client,
                                        const std::vector<FrozenTaskSnapshot>& snapshots,
                                        const DenseMatrix& batch, double lambda1, double lambda2,
                                        DecompGrads* grads) {
    LossOptions opts;
    opts.lambda1 = lambda1;
    opts.lambda2 = lambda2;
    opts.l1_mask_weights = true;
    return decomposed_loss(cfg, masks, dec, kb, self_client, snapshots, batch, opts, grads);
}

inline DecompLossResult fedweit_loss(const MadeConfig& cfg, const MaskSet& masks,
                                     const ClientDecomp& dec, const KnowledgeBase& kb,
                                     std::size_t self_client,
                                     const std::vector<FrozenTaskSnapshot>& snapshots,
                                     const DenseMatrix& batch, double lambda1, double lambda2,
                                     DecompGrads* grads) {
    LossOptions opts;
    opts.lambda1 = lambda1;
    opts.lambda2 = lambda2;
    opts.l1_mask_weights = false;
    return decomposed_loss(cfg, masks, dec, kb, self_client, snapshots, batch, opts, grads);
}

// Gradient-check plumbing: a stable flat ordering over everything trainable.
inline void append_pointers(ClientDecomp& dec, std::vector<double*>& out) {
    append_pointers(dec.base, out);
    for (auto& g : dec.gate_logits) append_pointers(g, out);
    for (auto& task : dec.adaptives) {
        for (auto& a : task) append_pointers(a, out);
    }
    for (auto& row : dec.alpha) append_pointers(row, out);
}

inline Vector flatten_grads(const DecompGrads& g) {
    Vector out;
    for (const auto& w : g.base.weights) out.insert(out.end(), w.values.begin(), w.values.end());
    for (const auto& b : g.base.biases) out.insert(out.end(), b.begin(), b.end());
    for (const auto& gl : g.gate_logits) out.insert(out.end(), gl.begin(), gl.end());
    for (const auto& task : g.adaptives) {
        for (const auto& a : task) out.insert(out.end(), a.values.begin(), a.values.end());
    }
    for (const auto& row : g.alpha) out.insert(out.end(), row.begin(), row.end());
    return out;
}

}  // namespace confedmade
