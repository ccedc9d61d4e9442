#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "confedmade/errors.hpp"

namespace confedmade {

using Vector = std::vector<double>;

// Row-major dense matrix. Masks are stored as DenseMatrix with {0,1} entries;
// sparsity is accounted for at communication time, never in storage.
struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vector values;

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), values(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    double* row(std::size_t r) { return values.data() + r * cols; }
    const double* row(std::size_t r) const { return values.data() + r * cols; }
    std::size_t size() const { return values.size(); }

    bool same_shape(const DenseMatrix& o) const { return rows == o.rows && cols == o.cols; }

    void fill(double v) { std::fill(values.begin(), values.end(), v); }
};

inline void require_shape(const DenseMatrix& m, std::size_t rows, std::size_t cols,
                          const std::string& name) {
    if (m.rows != rows || m.cols != cols) {
        throw DimensionError(name + ": expected " + std::to_string(rows) + "x" +
                             std::to_string(cols) + ", got " + std::to_string(m.rows) + "x" +
                             std::to_string(m.cols));
    }
}

inline void require_binary(const DenseMatrix& m, const std::string& name) {
    for (double v : m.values) {
        if (v != 0.0 && v != 1.0) {
            throw ValidationError(name + ": mask entry " + std::to_string(v) +
                                  " outside {0,1}");
        }
    }
}

inline bool all_finite(const Vector& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

// Canonical dot product: four fixed accumulator lanes, remainder last. The
// lane split is part of the numeric contract; every matrix product below uses
// it so results are identical no matter which code path computed them.
inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((s0 + s1) + (s2 + s3)) + tail;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// out = A ⊙ B (elementwise)
inline void hadamard(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& out) {
    if (!a.same_shape(b)) throw DimensionError("hadamard: shape mismatch");
    out.rows = a.rows;
    out.cols = a.cols;
    out.values.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out.values[i] = a.values[i] * b.values[i];
}

// --- masked affine layer -----------------------------------------------
//
// y = b + (W ⊙ M) x, the per-layer building block of the masked autoencoder.
// The activation is applied by the caller.

inline Vector masked_affine_forward(const Vector& x, const DenseMatrix& w, const DenseMatrix& m,
                                    const Vector& b) {
    if (!w.same_shape(m)) throw DimensionError("masked_affine_forward: W/M shape mismatch");
    if (x.size() != w.cols) {
        throw DimensionError("masked_affine_forward: x has " + std::to_string(x.size()) +
                             " entries, W has " + std::to_string(w.cols) + " columns");
    }
    if (b.size() != w.rows) throw DimensionError("masked_affine_forward: bias length mismatch");
    require_binary(m, "masked_affine_forward");

    Vector masked_row(w.cols);
    Vector y(w.rows);
    for (std::size_t r = 0; r < w.rows; ++r) {
        const double* wr = w.row(r);
        const double* mr = m.row(r);
        for (std::size_t c = 0; c < w.cols; ++c) masked_row[c] = wr[c] * mr[c];
        y[r] = b[r] + dot(masked_row.data(), x.data(), w.cols);
    }
    return y;
}

struct MaskedAffineGrads {
    DenseMatrix grad_w;
    Vector grad_b;
    Vector grad_x;
};

// grad_W = (grad_out ⊗ x) ⊙ M,  grad_b = grad_out,  grad_x = (W ⊙ M)ᵀ grad_out.
// grad_W is exactly zero wherever M is zero.
inline MaskedAffineGrads masked_affine_backward(const Vector& grad_out, const Vector& x,
                                                const DenseMatrix& w, const DenseMatrix& m) {
    if (!w.same_shape(m)) throw DimensionError("masked_affine_backward: W/M shape mismatch");
    if (grad_out.size() != w.rows || x.size() != w.cols) {
        throw DimensionError("masked_affine_backward: gradient/input shape mismatch");
    }

    MaskedAffineGrads g;
    g.grad_w = DenseMatrix(w.rows, w.cols);
    g.grad_b = grad_out;
    g.grad_x.assign(w.cols, 0.0);
    for (std::size_t r = 0; r < w.rows; ++r) {
        const double go = grad_out[r];
        const double* mr = m.row(r);
        const double* wr = w.row(r);
        double* gw = g.grad_w.row(r);
        for (std::size_t c = 0; c < w.cols; ++c) {
            gw[c] = go * x[c] * mr[c];
            g.grad_x[c] += wr[c] * mr[c] * go;
        }
    }
    return g;
}

// --- batched products ----------------------------------------------------
//
// X is n_examples x in_dim, weights are out_dim x in_dim (rows = receiving
// units). Per-row accumulation order matches the vector path above.

// Y[s,r] = dot(W[r,:], X[s,:]) + b[r]
inline void affine_batch(const DenseMatrix& x, const DenseMatrix& w, const Vector& b,
                         DenseMatrix& y) {
    y.rows = x.rows;
    y.cols = w.rows;
    y.values.assign(y.rows * y.cols, 0.0);
    for (std::size_t s = 0; s < x.rows; ++s) {
        const double* xs = x.row(s);
        double* ys = y.row(s);
        for (std::size_t r = 0; r < w.rows; ++r) ys[r] = b[r] + dot(w.row(r), xs, w.cols);
    }
}

// Y[s,r] += dot(W[r,:], X[s,:])
inline void affine_batch_add(const DenseMatrix& x, const DenseMatrix& w, DenseMatrix& y) {
    for (std::size_t s = 0; s < x.rows; ++s) {
        const double* xs = x.row(s);
        double* ys = y.row(s);
        for (std::size_t r = 0; r < w.rows; ++r) ys[r] += dot(w.row(r), xs, w.cols);
    }
}

// grad_W[r,:] += sum_s dY[s,r] * X[s,:]
inline void accumulate_weight_grad(const DenseMatrix& dy, const DenseMatrix& x,
                                   DenseMatrix& grad_w) {
    for (std::size_t s = 0; s < x.rows; ++s) {
        const double* xs = x.row(s);
        const double* ds = dy.row(s);
        for (std::size_t r = 0; r < grad_w.rows; ++r) {
            if (ds[r] != 0.0) axpy(ds[r], xs, grad_w.row(r), grad_w.cols);
        }
    }
}

// dX[s,:] += sum_r dY[s,r] * W[r,:]
inline void backprop_input_grad(const DenseMatrix& dy, const DenseMatrix& w, DenseMatrix& dx) {
    for (std::size_t s = 0; s < dy.rows; ++s) {
        const double* ds = dy.row(s);
        double* xs = dx.row(s);
        for (std::size_t r = 0; r < w.rows; ++r) {
            if (ds[r] != 0.0) axpy(ds[r], w.row(r), xs, w.cols);
        }
    }
}

// --- activations ----------------------------------------------------------

enum class Activation { Relu, Tanh, Sigmoid };

inline double sigmoid(double z) {
    if (z >= 0.0) {
        const double e = std::exp(-z);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double activate(Activation a, double z) {
    switch (a) {
        case Activation::Relu: return z > 0.0 ? z : 0.0;
        case Activation::Tanh: return std::tanh(z);
        case Activation::Sigmoid: return sigmoid(z);
    }
    return z;
}

// Derivative expressed through the activation output.
inline double activate_grad_from_output(Activation a, double out) {
    switch (a) {
        case Activation::Relu: return out > 0.0 ? 1.0 : 0.0;
        case Activation::Tanh: return 1.0 - out * out;
        case Activation::Sigmoid: return out * (1.0 - out);
    }
    return 1.0;
}

inline Activation activation_from_name(const std::string& name) {
    if (name == "relu") return Activation::Relu;
    if (name == "tanh") return Activation::Tanh;
    if (name == "sigmoid") return Activation::Sigmoid;
    throw ConfigError("unknown activation '" + name + "' (expected relu|tanh|sigmoid)");
}

inline std::string activation_name(Activation a) {
    switch (a) {
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Sigmoid: return "sigmoid";
    }
    return "relu";
}

}  // namespace confedmade
