#pragma once

#include <optional>
#include <string>
#include <vector>

#include "confedmade/errors.hpp"

namespace confedmade {

enum class Method {
    Offline,
    FedOffline,
    Finetune,
    CumulativeReplay,
    Ewc,
    FedProx,
    FedavgMade,
    FedweitMade,
    FedweitMadeStar,
    Confedmade,
};

inline const std::vector<std::pair<Method, std::string>>& method_table() {
    static const std::vector<std::pair<Method, std::string>> table = {
        {Method::Offline, "offline"},
        {Method::FedOffline, "fed-offline"},
        {Method::Finetune, "finetune"},
        {Method::CumulativeReplay, "cumulative-replay"},
        {Method::Ewc, "ewc"},
        {Method::FedProx, "fedprox"},
        {Method::FedavgMade, "fedavg-made"},
        {Method::FedweitMade, "fedweit-made"},
        {Method::FedweitMadeStar, "fedweit-made-star"},
        {Method::Confedmade, "confedmade"},
    };
    return table;
}

inline std::string method_name(Method m) {
    for (const auto& [method, name] : method_table()) {
        if (method == m) return name;
    }
    throw ValidationError("unknown method enum value");
}

inline std::string method_names_joined() {
    std::string out;
    for (const auto& [method, name] : method_table()) {
        if (!out.empty()) out += ", ";
        out += name;
    }
    return out;
}

inline Method method_from_name(const std::string& name) {
    for (const auto& [method, n] : method_table()) {
        if (n == name) return method;
    }
    throw UsageError("unknown method '" + name + "' (valid: " + method_names_joined() + ")");
}

// How a method plugs into the round engine. The struct is introspectable so
// tests can assert each name maps to the intended combination. The optional
// fields pin mask/architecture choices that belong to the method definition;
// unset means the scenario configuration decides.
struct MethodWiring {
    Method method = Method::Confedmade;

    bool federated = true;        // false: one client, no communication
    bool decomposition = false;   // base/adaptive/attention split vs a plain model
    bool masked_objective = false;  // adaptive L1 and uploads gated by the
                                    // autoregressive mask (the full approach);
                                    // false with decomposition = plain variant
    bool union_tasks = false;     // collapse the task sequence into one task
    bool cumulative_data = false;  // task t trains on all data up to t
    bool ewc_penalty = false;
    bool fedprox_penalty = false;

    std::optional<bool> synchronized_masks;
    std::optional<bool> direct_connections;
    std::optional<bool> order_agnostic;
    std::optional<bool> connectivity_agnostic;
};

inline MethodWiring wiring_for(Method m) {
    MethodWiring w;
    w.method = m;
    switch (m) {
        case Method::Offline:
            w.federated = false;
            w.union_tasks = true;
            break;
        case Method::FedOffline:
            w.union_tasks = true;
            break;
        case Method::Finetune:
            break;
        case Method::CumulativeReplay:
            w.cumulative_data = true;
            break;
        case Method::Ewc:
            w.federated = false;
            w.ewc_penalty = true;
            break;
        case Method::FedProx:
            w.fedprox_penalty = true;
            break;
        case Method::FedavgMade:
            break;
        case Method::FedweitMade:
            // the plain combination: distinct per-client masks, no direct
            // connections, no resampling, unmasked objective
            w.decomposition = true;
            w.synchronized_masks = false;
            w.direct_connections = false;
            w.order_agnostic = false;
            w.connectivity_agnostic = false;
            break;
        case Method::FedweitMadeStar:
            // plain objective plus the shared-mask and direct-connection
            // architecture findings
            w.decomposition = true;
            w.synchronized_masks = true;
            w.direct_connections = true;
            break;
        case Method::Confedmade:
            w.decomposition = true;
            w.masked_objective = true;
            w.synchronized_masks = true;
            w.direct_connections = true;
            break;
    }
    return w;
}

}  // namespace confedmade
