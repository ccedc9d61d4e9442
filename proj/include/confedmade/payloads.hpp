#pragma once

#include <cstdint>
#include <cstring>
#include <utility>
#include <vector>

#include "confedmade/errors.hpp"
#include "confedmade/param_set.hpp"

namespace confedmade {

// Everything that crosses the client/server boundary is built from these
// types, so the privacy boundary (parameters and seeds only, never data rows)
// is enforced by construction. serialize() exists so tests can recount
// transmitted scalars and scan the wire bytes for planted data values.

using SparseEntries = std::vector<std::pair<std::uint64_t, double>>;

inline SparseEntries sparsify(const DenseMatrix& m) {
    SparseEntries out;
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m.values[i] != 0.0) out.emplace_back(static_cast<std::uint64_t>(i), m.values[i]);
    }
    return out;
}

inline void densify(const SparseEntries& entries, DenseMatrix& into) {
    into.fill(0.0);
    for (const auto& [idx, value] : entries) {
        if (idx >= into.size()) throw FormatError("sparse entry index out of range");
        into.values[idx] = value;
    }
}

namespace wire {

inline void push_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void push_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    push_u64(out, u);
}

struct Cursor {
    const std::vector<std::uint8_t>* bytes;
    std::size_t pos = 0;

    std::uint64_t u64() {
        if (pos + 8 > bytes->size()) throw FormatError("payload truncated");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>((*bytes)[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }

    double f64() {
        const std::uint64_t u = u64();
        double v;
        std::memcpy(&v, &u, 8);
        return v;
    }
};

inline void push_sparse(std::vector<std::uint8_t>& out, const SparseEntries& entries) {
    push_u64(out, entries.size());
    for (const auto& [idx, value] : entries) {
        push_u64(out, idx);
        push_f64(out, value);
    }
}

inline SparseEntries read_sparse(Cursor& c) {
    SparseEntries entries(c.u64());
    for (auto& [idx, value] : entries) {
        idx = c.u64();
        value = c.f64();
    }
    return entries;
}

inline void push_vector(std::vector<std::uint8_t>& out, const Vector& v) {
    push_u64(out, v.size());
    for (double x : v) push_f64(out, x);
}

inline Vector read_vector(Cursor& c) {
    Vector v(c.u64());
    for (double& x : v) x = c.f64();
    return v;
}

}  // namespace wire

// Client -> server, once per round: the masked base weights as sparse
// (index, value) lists plus dense biases.
struct UploadPayload {
    std::size_t client = 0;
    std::vector<std::pair<std::size_t, std::size_t>> shapes;  // rows, cols per weight tensor
    std::vector<SparseEntries> weights;
    std::vector<Vector> biases;

    std::size_t nonzero_count() const {
        std::size_t n = 0;
        for (const auto& w : weights) n += w.size();
        for (const auto& b : biases) {
            for (double v : b) n += v != 0.0;
        }
        return n;
    }

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out;
        wire::push_u64(out, client);
        wire::push_u64(out, weights.size());
        for (std::size_t i = 0; i < weights.size(); ++i) {
            wire::push_u64(out, shapes[i].first);
            wire::push_u64(out, shapes[i].second);
            wire::push_sparse(out, weights[i]);
        }
        wire::push_u64(out, biases.size());
        for (const auto& b : biases) wire::push_vector(out, b);
        return out;
    }
};

inline UploadPayload make_upload(std::size_t client, const ParamSet& masked) {
    UploadPayload up;
    up.client = client;
    for (const auto& w : masked.weights) {
        up.shapes.emplace_back(w.rows, w.cols);
        up.weights.push_back(sparsify(w));
    }
    up.biases = masked.biases;
    return up;
}

inline ParamSet upload_to_dense(const UploadPayload& up) {
    ParamSet p;
    for (std::size_t i = 0; i < up.weights.size(); ++i) {
        DenseMatrix w(up.shapes[i].first, up.shapes[i].second);
        densify(up.weights[i], w);
        p.weights.push_back(std::move(w));
    }
    p.biases = up.biases;
    return p;
}

inline UploadPayload parse_upload(const std::vector<std::uint8_t>& bytes) {
    wire::Cursor c{&bytes};
    UploadPayload up;
    up.client = c.u64();
    const std::size_t n_tensors = c.u64();
    for (std::size_t i = 0; i < n_tensors; ++i) {
        const std::size_t rows = c.u64();
        const std::size_t cols = c.u64();
        up.shapes.emplace_back(rows, cols);
        up.weights.push_back(wire::read_sparse(c));
    }
    const std::size_t n_biases = c.u64();
    for (std::size_t i = 0; i < n_biases; ++i) up.biases.push_back(wire::read_vector(c));
    if (c.pos != bytes.size()) throw FormatError("trailing bytes after upload payload");
    return up;
}

// A knowledge-base entry in transit: one client's sparsified task-adaptive
// weights, keyed by its origin.
struct KnowledgeDelta {
    std::size_t client = 0;
    std::size_t task = 0;
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    std::vector<SparseEntries> weights;

    std::size_t nonzero_count() const {
        std::size_t n = 0;
        for (const auto& w : weights) n += w.size();
        return n;
    }
};

// Server -> client, once per round: dense averaged parameters, optionally the
// shared mask seed (one scalar) and, at task start, the kb entries the client
// has not seen yet.
struct BroadcastPayload {
    ParamSet global;
    bool has_mask_seed = false;
    std::uint64_t mask_seed = 0;
    std::vector<KnowledgeDelta> knowledge;

    std::size_t global_nonzeros() const { return count_nonzero(global); }

    std::size_t knowledge_nonzeros() const {
        std::size_t n = 0;
        for (const auto& k : knowledge) n += k.nonzero_count();
        return n;
    }

    std::size_t seed_scalars() const { return has_mask_seed ? 1 : 0; }

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out;
        wire::push_u64(out, global.weights.size());
        for (const auto& w : global.weights) {
            wire::push_u64(out, w.rows);
            wire::push_u64(out, w.cols);
            for (double v : w.values) wire::push_f64(out, v);
        }
        wire::push_u64(out, global.biases.size());
        for (const auto& b : global.biases) wire::push_vector(out, b);
        wire::push_u64(out, has_mask_seed ? 1 : 0);
        wire::push_u64(out, mask_seed);
        wire::push_u64(out, knowledge.size());
        for (const auto& k : knowledge) {
            wire::push_u64(out, k.client);
            wire::push_u64(out, k.task);
            wire::push_u64(out, k.weights.size());
            for (std::size_t i = 0; i < k.weights.size(); ++i) {
                wire::push_u64(out, k.shapes[i].first);
                wire::push_u64(out, k.shapes[i].second);
                wire::push_sparse(out, k.weights[i]);
            }
        }
        return out;
    }
};

// Counts the non-zero scalars in a serialized upload; tests compare this
// against the ledger entry for the same round.
inline std::size_t recount_upload(const std::vector<std::uint8_t>& bytes) {
    const UploadPayload up = parse_upload(bytes);
    std::size_t n = 0;
    for (const auto& w : up.weights) {
        for (const auto& [idx, value] : w) n += value != 0.0;
    }
    for (const auto& b : up.biases) {
        for (double v : b) n += v != 0.0;
    }
    return n;
}

}  // namespace confedmade
