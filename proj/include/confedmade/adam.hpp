#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "confedmade/errors.hpp"
#include "confedmade/linalg.hpp"

namespace confedmade {

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Decoupled decay, applied only to slots registered with decay=true
    // (weight matrices; never biases, gate logits or attention scalars).
    double weight_decay = 0.0;
};

struct AdamMoments {
    Vector m;
    Vector v;
};

// One Adam update over a flat array. `t` is the 1-based global step count.
// Decay is decoupled from the moment estimates: the gradient feeding m/v is
// the raw loss gradient, the shrink term acts on the value directly.
inline void adam_step(double* value, const double* grad, std::size_t n, AdamMoments& mom,
                      std::uint64_t t, const AdamConfig& cfg, bool decay,
                      const std::string& tensor_name = "") {
    if (t == 0) throw ValidationError("adam_step: step count must be >= 1");
    if (mom.m.size() != n) {
        mom.m.assign(n, 0.0);
        mom.v.assign(n, 0.0);
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    const double wd = decay ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grad[i];
        if (!std::isfinite(g)) {
            throw NumericError("adam_step: non-finite gradient in tensor '" +
                               (tensor_name.empty() ? std::string("<unnamed>") : tensor_name) +
                               "' at index " + std::to_string(i));
        }
        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = mom.m[i] / bc1;
        const double vhat = mom.v[i] / bc2;
        value[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * value[i]);
    }
}

// Keeps the moments for a fixed set of tensors and a shared step counter.
// Slots must be registered once, in a stable order, before the first step.
class AdamOptimizer {
  public:
    explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

    std::size_t register_slot(std::size_t n, bool decay, std::string name = "") {
        slots_.push_back(
            Slot{AdamMoments{Vector(n, 0.0), Vector(n, 0.0)}, n, decay, std::move(name)});
        return slots_.size() - 1;
    }

    void begin_step() { ++t_; }

    void update(std::size_t slot, double* value, const double* grad) {
        if (slot >= slots_.size()) throw ValidationError("AdamOptimizer: unknown slot");
        Slot& s = slots_[slot];
        adam_step(value, grad, s.size, s.moments, t_, cfg_, s.decay, s.name);
    }

    std::uint64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

  private:
    struct Slot {
        AdamMoments moments;
        std::size_t size;
        bool decay;
        std::string name;
    };
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    std::uint64_t t_ = 0;
};

}  // namespace confedmade
