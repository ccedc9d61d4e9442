#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "confedmade/errors.hpp"

namespace confedmade {

// Held-out NLL per (completed task t, evaluated task i), i <= t, averaged
// over clients. Stored as a packed lower triangle; row t has t+1 entries.
class LossMatrix {
public:
    std::size_t tasks() const { return rows_; }

    void push_row(const std::vector<double>& row) {
        if (row.size() != rows_ + 1) {
            throw DimensionError("loss matrix row " + std::to_string(rows_) + " needs " +
                                 std::to_string(rows_ + 1) + " entries, got " +
                                 std::to_string(row.size()));
        }
        for (double v : row) {
            if (!std::isfinite(v)) throw NumericError("loss matrix entry is not finite");
        }
        entries_.insert(entries_.end(), row.begin(), row.end());
        ++rows_;
    }

    double at(std::size_t t, std::size_t i) const {
        if (t >= rows_ || i > t) throw DimensionError("loss matrix index out of range");
        return entries_[t * (t + 1) / 2 + i];
    }

    const std::vector<double>& packed() const { return entries_; }

private:
    std::size_t rows_ = 0;
    std::vector<double> entries_;
};

// mean loss over every task seen so far, at completion of task t
inline double avg_task_nll(const LossMatrix& lm, std::size_t t) {
    double sum = 0.0;
    for (std::size_t i = 0; i <= t; ++i) sum += lm.at(t, i);
    return sum / static_cast<double>(t + 1);
}

inline double base_task_loss(const LossMatrix& lm, std::size_t t) { return lm.at(t, 0); }

inline double new_task_loss(const LossMatrix& lm, std::size_t t) { return lm.at(t, t); }

struct ForgettingResult {
    double value = 0.0;
    bool defined = false;  // false when fewer than two tasks exist
};

// Final loss on each past task minus the best loss it ever had, clipped at
// zero and averaged. Positive only when performance degraded.
inline ForgettingResult avg_forgetting(const LossMatrix& lm) {
    ForgettingResult r;
    const std::size_t T = lm.tasks();
    if (T < 2) return r;
    r.defined = true;
    double sum = 0.0;
    for (std::size_t i = 0; i + 1 < T; ++i) {
        double best = lm.at(i, i);
        for (std::size_t t = i; t + 1 < T; ++t) best = std::min(best, lm.at(t, i));
        sum += std::max(0.0, lm.at(T - 1, i) - best);
    }
    r.value = sum / static_cast<double>(T - 1);
    return r;
}

// The as-written variant: worst earlier loss minus the final loss, clipped.
// With losses this scores improvement instead of degradation; kept selectable
// for auditing.
inline ForgettingResult avg_forgetting_literal(const LossMatrix& lm) {
    ForgettingResult r;
    const std::size_t T = lm.tasks();
    if (T < 2) return r;
    r.defined = true;
    double sum = 0.0;
    for (std::size_t i = 0; i + 1 < T; ++i) {
        double worst = lm.at(i, i);
        for (std::size_t t = i; t + 1 < T; ++t) worst = std::max(worst, lm.at(t, i));
        sum += std::max(0.0, worst - lm.at(T - 1, i));
    }
    r.value = sum / static_cast<double>(T - 1);
    return r;
}

enum class ForgettingMode { Adopted, Literal };

inline ForgettingResult avg_forgetting(const LossMatrix& lm, ForgettingMode mode) {
    return mode == ForgettingMode::Adopted ? avg_forgetting(lm) : avg_forgetting_literal(lm);
}

}  // namespace confedmade
