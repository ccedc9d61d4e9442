#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "confedmade/errors.hpp"
#include "confedmade/linalg.hpp"

namespace confedmade {

// Full parameter set of a masked autoencoder. Weight order is fixed:
// hidden layers first (W^1..W^L), then the output weights V, then the
// direct input->output weights D when enabled. Biases follow the same
// convention: hidden biases then the output bias c. Mask sets mirror
// `weights` index for index.
struct ParamSet {
    std::vector<DenseMatrix> weights;
    std::vector<Vector> biases;

    bool same_shape(const ParamSet& o) const {
        if (weights.size() != o.weights.size() || biases.size() != o.biases.size()) return false;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (!weights[i].same_shape(o.weights[i])) return false;
        }
        for (std::size_t i = 0; i < biases.size(); ++i) {
            if (biases[i].size() != o.biases[i].size()) return false;
        }
        return true;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& w : weights) n += w.size();
        for (const auto& b : biases) n += b.size();
        return n;
    }

    void fill(double v) {
        for (auto& w : weights) w.fill(v);
        for (auto& b : biases) std::fill(b.begin(), b.end(), v);
    }
};

inline ParamSet zeros_like(const ParamSet& p) {
    ParamSet z;
    z.weights.reserve(p.weights.size());
    for (const auto& w : p.weights) z.weights.emplace_back(w.rows, w.cols);
    z.biases.reserve(p.biases.size());
    for (const auto& b : p.biases) z.biases.emplace_back(b.size(), 0.0);
    return z;
}

inline void require_same_shape(const ParamSet& a, const ParamSet& b, const std::string& where) {
    if (!a.same_shape(b)) throw DimensionError(where + ": parameter shape mismatch");
}

// dst += alpha * src, across every tensor.
inline void paramset_axpy(double alpha, const ParamSet& src, ParamSet& dst) {
    require_same_shape(src, dst, "paramset_axpy");
    for (std::size_t i = 0; i < src.weights.size(); ++i) {
        axpy(alpha, src.weights[i].values.data(), dst.weights[i].values.data(),
             src.weights[i].size());
    }
    for (std::size_t i = 0; i < src.biases.size(); ++i) {
        axpy(alpha, src.biases[i].data(), dst.biases[i].data(), src.biases[i].size());
    }
}

inline void paramset_scale(ParamSet& p, double alpha) {
    for (auto& w : p.weights) {
        for (double& v : w.values) v *= alpha;
    }
    for (auto& b : p.biases) {
        for (double& v : b) v *= alpha;
    }
}

inline std::size_t count_nonzero(const DenseMatrix& m) {
    std::size_t n = 0;
    for (double v : m.values) {
        if (v != 0.0) ++n;
    }
    return n;
}

inline std::size_t count_nonzero(const ParamSet& p) {
    std::size_t n = 0;
    for (const auto& w : p.weights) n += count_nonzero(w);
    for (const auto& b : p.biases) {
        for (double v : b) {
            if (v != 0.0) ++n;
        }
    }
    return n;
}

}  // namespace confedmade
