#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "confedmade/errors.hpp"
#include "confedmade/param_set.hpp"

namespace confedmade {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
};

inline void append_pointers(Vector& v, std::vector<double*>& out) {
    for (double& x : v) out.push_back(&x);
}

inline void append_pointers(DenseMatrix& m, std::vector<double*>& out) {
    append_pointers(m.values, out);
}

inline void append_pointers(ParamSet& p, std::vector<double*>& out) {
    for (auto& w : p.weights) append_pointers(w, out);
    for (auto& b : p.biases) append_pointers(b, out);
}

// Central-difference check of an analytic gradient. `params[i]` is the
// storage the loss reads; `analytic[i]` the gradient claimed for it.
// Relative error is |a-c| / max(|a|, |c|, floor); the floor keeps near-zero
// pairs from blowing up. A loss that fails to reproduce itself bitwise on
// double evaluation is rejected outright.
inline GradCheckResult finite_diff_check(const std::function<double()>& loss,
                                         const std::vector<double*>& params,
                                         const std::vector<double>& analytic,
                                         double epsilon = 1e-5, double rel_floor = 1e-8) {
    if (params.size() != analytic.size()) {
        throw DimensionError("finite_diff_check: analytic gradient length mismatch");
    }
    if (epsilon <= 0.0) throw ValidationError("finite_diff_check: epsilon must be positive");
    if (loss() != loss()) {
        throw NumericError("finite_diff_check: loss is not deterministic");
    }

    GradCheckResult res;
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* p = params[i];
        const double saved = *p;
        *p = saved + epsilon;
        const double fp = loss();
        *p = saved - epsilon;
        const double fm = loss();
        *p = saved;
        const double numeric = (fp - fm) / (2.0 * epsilon);
        const double denom =
            std::max({rel_floor, std::abs(analytic[i]), std::abs(numeric)});
        const double rel = std::abs(analytic[i] - numeric) / denom;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = i;
            res.worst_analytic = analytic[i];
            res.worst_numeric = numeric;
        }
        ++res.checked;
    }
    return res;
}

}  // namespace confedmade
