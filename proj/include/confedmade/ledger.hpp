#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "confedmade/errors.hpp"

namespace confedmade {

enum class Direction { ServerToClient, ClientToServer };

inline std::string direction_name(Direction d) {
    return d == Direction::ServerToClient ? "server-to-client" : "client-to-server";
}

// One transmission event. "what" is the payload component: global (the dense
// averaged parameters), mask-seed, knowledge (task-start kb delta), update
// (per-round masked upload) or adaptive (task-end kb contribution).
struct LedgerRow {
    std::size_t task = 0;
    std::size_t round = 0;
    std::size_t client = 0;
    Direction direction = Direction::ServerToClient;
    std::string what;
    std::size_t scalars = 0;
};

class CommLedger {
public:
    void record(std::size_t task, std::size_t round, std::size_t client, Direction dir,
                const std::string& what, std::size_t scalars) {
        rows_.push_back({task, round, client, dir, what, scalars});
        total_ += scalars;
        per_task_[task] += scalars;
        per_direction_[dir] += scalars;
        per_what_[what] += scalars;
    }

    const std::vector<LedgerRow>& rows() const { return rows_; }
    std::size_t total() const { return total_; }

    std::size_t total_for_task(std::size_t task) const {
        auto it = per_task_.find(task);
        return it == per_task_.end() ? 0 : it->second;
    }

    std::size_t total_for(Direction dir) const {
        auto it = per_direction_.find(dir);
        return it == per_direction_.end() ? 0 : it->second;
    }

    std::size_t total_for(const std::string& what) const {
        auto it = per_what_.find(what);
        return it == per_what_.end() ? 0 : it->second;
    }

    const std::map<std::string, std::size_t>& totals_by_what() const { return per_what_; }
    const std::map<std::size_t, std::size_t>& totals_by_task() const { return per_task_; }

    // recompute every running total from the rows; throws if they drifted
    void verify() const {
        std::size_t total = 0;
        std::map<std::size_t, std::size_t> per_task;
        std::map<Direction, std::size_t> per_dir;
        std::map<std::string, std::size_t> per_what;
        for (const auto& r : rows_) {
            total += r.scalars;
            per_task[r.task] += r.scalars;
            per_dir[r.direction] += r.scalars;
            per_what[r.what] += r.scalars;
        }
        if (total != total_ || per_task != per_task_ || per_dir != per_direction_ ||
            per_what != per_what_) {
            throw ProtocolError("ledger totals do not match the recorded rows");
        }
    }

private:
    std::vector<LedgerRow> rows_;
    std::size_t total_ = 0;
    std::map<std::size_t, std::size_t> per_task_;
    std::map<Direction, std::size_t> per_direction_;
    std::map<std::string, std::size_t> per_what_;
};

}  // namespace confedmade
