#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "hgct/tensor.hpp"
#include "hgct/ops.hpp"

namespace hgct {

// Body topology: an undirected tree over V joints with a designated center.
struct SkeletonGraph {
    int v = 0;
    std::vector<std::pair<int, int>> edges;  // intra-body connections
    std::vector<int> parent;                 // parent[center] == center
    int center = 0;

    // Throws TopologyError unless edges form a connected tree whose parent
    // chains all terminate at the center.
    void validate() const;

    // Hop distance of each joint from the center.
    std::vector<int> center_distance() const;

    static SkeletonGraph ntu25();
    static SkeletonGraph chain(int v, int center);
    static SkeletonGraph load_json(const std::string& path);
    void save_json(const std::string& path) const;
};

// Builds a graph from V, edges and center, deriving the parent map by BFS.
SkeletonGraph make_graph(int v, std::vector<std::pair<int, int>> edges, int center);

// The three spatial partitions, each V x V row-major, row-degree-normalized:
//   0: self loops, 1: centripetal neighbors, 2: centrifugal neighbors.
// Entry (i, j) of partition k is nonzero iff j is i's neighbor of class k;
// rows are divided by their sums.
std::array<std::vector<double>, 3> build_partitions(const SkeletonGraph& graph);

enum class TopologyMode { Fixed, Learnable, LearnableScaled };

const char* topology_mode_name(TopologyMode m);
TopologyMode topology_mode_from_name(const std::string& s);

// Per-layer adjacency state. In Fixed mode only the base partitions exist;
// in the learnable modes the three matrices are parameters initialized from
// the base and held constant (gradient-blocked) for the first freeze_epochs.
template <typename T>
struct PartitionedAdjacency {
    TopologyMode mode = TopologyMode::LearnableScaled;
    int freeze_epochs = 5;
    int v = 0;
    std::array<Tensor<T>, 3> base;      // A_o, constant
    std::array<Tensor<T>, 3> learned;   // A~, parameters (learnable modes)
    Tensor<T> lambda;                   // balance scalar (scaled mode)

    static PartitionedAdjacency make(const SkeletonGraph& graph, TopologyMode mode,
                                     int freeze_epochs = 5) {
        PartitionedAdjacency pa;
        pa.mode = mode;
        pa.freeze_epochs = freeze_epochs;
        pa.v = graph.v;
        const auto parts = build_partitions(graph);
        for (int k = 0; k < 3; ++k) {
            std::vector<T> vals(parts[k].begin(), parts[k].end());
            pa.base[k] = Tensor<T>::from_data({graph.v, graph.v}, vals);
            if (mode != TopologyMode::Fixed) {
                pa.learned[k] = Tensor<T>::from_data({graph.v, graph.v}, std::move(vals));
                pa.learned[k].set_requires_grad(true);
            }
        }
        if (mode == TopologyMode::LearnableScaled) {
            pa.lambda = Tensor<T>::scalar(T(1));
            pa.lambda.set_requires_grad(true);
        }
        return pa;
    }

    // The three matrices entering the forward pass at the given epoch.
    std::array<Tensor<T>, 3> effective(int epoch) const {
        std::array<Tensor<T>, 3> out;
        const bool frozen = epoch < freeze_epochs;
        for (int k = 0; k < 3; ++k) {
            switch (mode) {
                case TopologyMode::Fixed:
                    out[k] = base[k];
                    break;
                case TopologyMode::Learnable:
                    out[k] = frozen ? learned[k].detach() : learned[k];
                    break;
                case TopologyMode::LearnableScaled: {
                    Tensor<T> a = frozen ? learned[k].detach() : learned[k];
                    out[k] = mul(a, lambda);
                    break;
                }
            }
        }
        return out;
    }

    template <typename Visitor>
    void visit_params(const std::string& prefix, Visitor&& fn) {
        if (mode != TopologyMode::Fixed)
            for (int k = 0; k < 3; ++k)
                fn(prefix + ".adj" + std::to_string(k), learned[k], /*decay=*/true);
        if (mode == TopologyMode::LearnableScaled) fn(prefix + ".lambda", lambda, /*decay=*/true);
    }
};

}  // namespace hgct
