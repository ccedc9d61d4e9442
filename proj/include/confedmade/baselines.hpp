#pragma once

#include <algorithm>
#include <cstddef>

#include "confedmade/errors.hpp"
#include "confedmade/made.hpp"
#include "confedmade/param_set.hpp"

namespace confedmade {

// Curvature estimate for the quadratic retention penalty: per-parameter mean
// squared single-example NLL gradient, plus the parameter copy it was taken at.
struct FisherDiagonal {
    ParamSet accumulators;
    ParamSet reference;
    bool has_data = false;
};

inline FisherDiagonal compute_fisher(const MadeModel& model, const DenseMatrix& data) {
    if (data.rows == 0) throw DataError("fisher estimate needs at least one example");
    FisherDiagonal fd;
    fd.reference = model.params;
    fd.accumulators = zeros_like(model.params);

    const auto eff = masked_weights(model.params, model.masks);
    ForwardCache cache;
    MadeBackward back;
    DenseMatrix row(1, model.cfg.input_dim);
    for (std::size_t s = 0; s < data.rows; ++s) {
        std::copy(data.row(s), data.row(s) + data.cols, row.row(0));
        made_forward(model.cfg, eff, model.params.biases, row, cache);
        made_backward(model.cfg, eff, cache, row, back);
        for (std::size_t i = 0; i < fd.accumulators.weights.size(); ++i) {
            DenseMatrix& acc = fd.accumulators.weights[i];
            const DenseMatrix& g = back.grad_w_eff[i];
            const DenseMatrix& m = model.masks[i];
            for (std::size_t k = 0; k < acc.size(); ++k) {
                const double raw = g.values[k] * m.values[k];
                acc.values[k] += raw * raw;
            }
        }
        for (std::size_t i = 0; i < fd.accumulators.biases.size(); ++i) {
            Vector& acc = fd.accumulators.biases[i];
            const Vector& g = back.grad_b[i];
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k] * g[k];
        }
    }
    const double scale = 1.0 / static_cast<double>(data.rows);
    paramset_scale(fd.accumulators, scale);
    fd.has_data = true;
    return fd;
}

// (lambda/2) * sum_j F_j (theta_j - theta*_j)^2; adds lambda*F*(theta-theta*)
// to grads when given
inline double ewc_penalty(const ParamSet& params, const FisherDiagonal& fd, double lambda,
                          ParamSet* grads = nullptr) {
    if (!fd.has_data) return 0.0;
    require_same_shape(params, fd.reference, "ewc_penalty");
    require_same_shape(params, fd.accumulators, "ewc_penalty");
    if (grads) require_same_shape(params, *grads, "ewc_penalty grads");
    double total = 0.0;
    for (std::size_t i = 0; i < params.weights.size(); ++i) {
        const DenseMatrix& w = params.weights[i];
        const DenseMatrix& r = fd.reference.weights[i];
        const DenseMatrix& f = fd.accumulators.weights[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double d = w.values[k] - r.values[k];
            total += f.values[k] * d * d;
            if (grads) grads->weights[i].values[k] += lambda * f.values[k] * d;
        }
    }
    for (std::size_t i = 0; i < params.biases.size(); ++i) {
        const Vector& b = params.biases[i];
        const Vector& r = fd.reference.biases[i];
        const Vector& f = fd.accumulators.biases[i];
        for (std::size_t k = 0; k < b.size(); ++k) {
            const double d = b[k] - r[k];
            total += f[k] * d * d;
            if (grads) (*grads).biases[i][k] += lambda * f[k] * d;
        }
    }
    return 0.5 * lambda * total;
}

// (mu/2) * ||theta - theta_ref||^2 against the last received global
// parameters; adds mu*(theta-theta_ref) to grads when given
inline double fedprox_penalty(const ParamSet& params, const ParamSet& reference, double mu,
                              ParamSet* grads = nullptr) {
    require_same_shape(params, reference, "fedprox_penalty");
    if (grads) require_same_shape(params, *grads, "fedprox_penalty grads");
    double total = 0.0;
    for (std::size_t i = 0; i < params.weights.size(); ++i) {
        const DenseMatrix& w = params.weights[i];
        const DenseMatrix& r = reference.weights[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double d = w.values[k] - r.values[k];
            total += d * d;
            if (grads) grads->weights[i].values[k] += mu * d;
        }
    }
    for (std::size_t i = 0; i < params.biases.size(); ++i) {
        const Vector& b = params.biases[i];
        const Vector& r = reference.biases[i];
        for (std::size_t k = 0; k < b.size(); ++k) {
            const double d = b[k] - r[k];
            total += d * d;
            if (grads) (*grads).biases[i][k] += mu * d;
        }
    }
    return 0.5 * mu * total;
}

}  // namespace confedmade
