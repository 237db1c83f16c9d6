#pragma once

#include "pipeinfer/types.hpp"

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

namespace pipeinfer {

struct LayerRange {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool operator==(const LayerRange&) const = default;
};

struct PipelinePlan {
    std::vector<LayerRange> stages; // stage i runs on node i
    bool dedicated_draft_node = false;

    int n_stages() const { return static_cast<int>(stages.size()); }
    int n_nodes() const { return n_stages() + (dedicated_draft_node ? 1 : 0); }
    NodeId draft_node() const { return dedicated_draft_node ? n_stages() : 0; }
};

// Contiguous layer ranges proportional to `weights` (equal when empty). Each
// node gets the floor of its share, at least one layer; leftover layers go to
// the earliest nodes.
inline PipelinePlan plan_layer_split(std::size_t n_layers, int n_nodes, std::vector<double> weights = {}) {
    if (n_nodes < 1) {
        throw ConfigError("need at least one pipeline node");
    }
    const auto n = static_cast<std::size_t>(n_nodes);
    if (n_layers < n) {
        throw ConfigError("cannot split " + std::to_string(n_layers) + " layers over " + std::to_string(n_nodes) +
                          " nodes");
    }
    if (weights.empty()) {
        weights.assign(n, 1.0);
    }
    if (weights.size() != n) {
        throw ConfigError("one speed weight per node required");
    }
    for (double w : weights) {
        if (!(w > 0.0) || !std::isfinite(w)) {
            throw ConfigError("speed weights must be positive");
        }
    }
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);

    std::vector<std::size_t> counts(n);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double share = static_cast<double>(n_layers) * weights[i] / total;
        counts[i] = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(share + 1e-9)));
        assigned += counts[i];
    }
    while (assigned > n_layers) {
        std::size_t big = 0;
        for (std::size_t i = 1; i < n; ++i) {
            if (counts[i] >= counts[big]) {
                big = i;
            }
        }
        --counts[big];
        --assigned;
    }
    for (std::size_t i = 0; assigned < n_layers; i = (i + 1) % n) {
        ++counts[i];
        ++assigned;
    }

    PipelinePlan plan;
    std::size_t at = 0;
    for (std::size_t c : counts) {
        plan.stages.push_back({at, at + c});
        at += c;
    }
    return plan;
}

} // namespace pipeinfer
