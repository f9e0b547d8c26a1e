#include "hgct/topology.hpp"

#include <fstream>
#include <queue>

#include <json.hpp>

namespace hgct {

void SkeletonGraph::validate() const {
    if (v < 1) throw TopologyError("graph must have at least one joint");
    if (center < 0 || center >= v) throw TopologyError("center joint out of range");
    if (static_cast<int>(edges.size()) != v - 1)
        throw TopologyError("graph must be a tree: expected " + std::to_string(v - 1) +
                            " edges, got " + std::to_string(edges.size()));
    std::vector<std::vector<int>> adj(v);
    for (auto [i, j] : edges) {
        if (i < 0 || i >= v || j < 0 || j >= v) throw TopologyError("edge joint out of range");
        if (i == j) throw TopologyError("self-loop edge in graph");
        adj[i].push_back(j);
        adj[j].push_back(i);
    }
    std::vector<bool> seen(v, false);
    std::queue<int> q;
    q.push(center);
    seen[center] = true;
    int count = 0;
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        ++count;
        for (int w : adj[u])
            if (!seen[w]) {
                seen[w] = true;
                q.push(w);
            }
    }
    if (count != v) throw TopologyError("graph is disconnected");
    if (static_cast<int>(parent.size()) != v) throw TopologyError("parent map size mismatch");
    for (int j = 0; j < v; ++j) {
        int cur = j;
        for (int steps = 0; steps <= v; ++steps) {
            if (cur == center) break;
            cur = parent[cur];
            if (steps == v) throw TopologyError("parent chain does not terminate at center");
        }
    }
}

std::vector<int> SkeletonGraph::center_distance() const {
    std::vector<std::vector<int>> adj(v);
    for (auto [i, j] : edges) {
        adj[i].push_back(j);
        adj[j].push_back(i);
    }
    std::vector<int> dist(v, -1);
    std::queue<int> q;
    q.push(center);
    dist[center] = 0;
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        for (int w : adj[u])
            if (dist[w] < 0) {
                dist[w] = dist[u] + 1;
                q.push(w);
            }
    }
    return dist;
}

SkeletonGraph make_graph(int v, std::vector<std::pair<int, int>> edges, int center) {
    SkeletonGraph g;
    g.v = v;
    g.edges = std::move(edges);
    g.center = center;
    std::vector<std::vector<int>> adj(v);
    for (auto [i, j] : g.edges) {
        if (i < 0 || i >= v || j < 0 || j >= v) throw TopologyError("edge joint out of range");
        adj[i].push_back(j);
        adj[j].push_back(i);
    }
    g.parent.assign(v, -1);
    g.parent[center] = center;
    std::queue<int> q;
    q.push(center);
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        for (int w : adj[u])
            if (g.parent[w] < 0) {
                g.parent[w] = u;
                q.push(w);
            }
    }
    for (int j = 0; j < v; ++j)
        if (g.parent[j] < 0) throw TopologyError("graph is disconnected");
    g.validate();
    return g;
}

SkeletonGraph SkeletonGraph::ntu25() {
    // Kinect v2 joint layout, 0-based; center is the spine joint between the
    // shoulders.
    static const std::vector<std::pair<int, int>> kEdges = {
        {0, 1},   {1, 20},  {2, 20},  {3, 2},   {4, 20},  {5, 4},   {6, 5},   {7, 6},
        {8, 20},  {9, 8},   {10, 9},  {11, 10}, {12, 0},  {13, 12}, {14, 13}, {15, 14},
        {16, 0},  {17, 16}, {18, 17}, {19, 18}, {21, 22}, {22, 7},  {23, 24}, {24, 11}};
    return make_graph(25, kEdges, 20);
}

SkeletonGraph SkeletonGraph::chain(int v, int center) {
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i + 1 < v; ++i) edges.emplace_back(i, i + 1);
    return make_graph(v, std::move(edges), center);
}

SkeletonGraph SkeletonGraph::load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open graph file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad graph JSON in " + path + ": " + e.what());
    }
    if (!j.contains("V") || !j.contains("edges") || !j.contains("center"))
        throw ParseError("graph JSON must contain V, edges, center");
    std::vector<std::pair<int, int>> edges;
    for (const auto& e : j["edges"]) {
        if (!e.is_array() || e.size() != 2) throw ParseError("graph edge must be a pair");
        edges.emplace_back(e[0].get<int>(), e[1].get<int>());
    }
    return make_graph(j["V"].get<int>(), std::move(edges), j["center"].get<int>());
}

void SkeletonGraph::save_json(const std::string& path) const {
    nlohmann::json j;
    j["V"] = v;
    j["center"] = center;
    auto arr = nlohmann::json::array();
    for (auto [i, k] : edges) arr.push_back({i, k});
    j["edges"] = arr;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write graph file: " + path);
    out << j.dump(2) << "\n";
}

std::array<std::vector<double>, 3> build_partitions(const SkeletonGraph& graph) {
    graph.validate();
    const int v = graph.v;
    const auto dist = graph.center_distance();
    std::array<std::vector<double>, 3> parts;
    for (auto& p : parts) p.assign(static_cast<size_t>(v) * v, 0.0);
    for (int i = 0; i < v; ++i) parts[0][static_cast<size_t>(i) * v + i] = 1.0;
    for (auto [i, j] : graph.edges) {
        // entry (a, b): b is a's neighbor; centripetal if b is closer to the
        // center than a, centrifugal otherwise
        auto classify = [&](int a, int b) {
            const int k = dist[b] < dist[a] ? 1 : 2;
            parts[k][static_cast<size_t>(a) * v + b] = 1.0;
        };
        classify(i, j);
        classify(j, i);
    }
    for (auto& p : parts)
        for (int i = 0; i < v; ++i) {
            double s = 0;
            for (int j = 0; j < v; ++j) s += p[static_cast<size_t>(i) * v + j];
            if (s > 0)
                for (int j = 0; j < v; ++j) p[static_cast<size_t>(i) * v + j] /= s;
        }
    return parts;
}

const char* topology_mode_name(TopologyMode m) {
    switch (m) {
        case TopologyMode::Fixed: return "fixed";
        case TopologyMode::Learnable: return "learnable";
        case TopologyMode::LearnableScaled: return "scaled";
    }
    return "?";
}

TopologyMode topology_mode_from_name(const std::string& s) {
    if (s == "fixed") return TopologyMode::Fixed;
    if (s == "learnable") return TopologyMode::Learnable;
    if (s == "scaled") return TopologyMode::LearnableScaled;
    throw ConfigError("unknown topology mode: " + s + " (expected fixed|learnable|scaled)");
}

}  // namespace hgct
