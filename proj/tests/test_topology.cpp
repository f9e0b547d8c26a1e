#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hgct/topology.hpp"

using namespace hgct;

TEST_CASE("single joint graph partitions") {
    auto g = make_graph(1, {}, 0);
    auto parts = build_partitions(g);
    CHECK(parts[0] == std::vector<double>{1.0});
    CHECK(parts[1] == std::vector<double>{0.0});
    CHECK(parts[2] == std::vector<double>{0.0});
}

TEST_CASE("three-joint chain with center 1") {
    auto g = SkeletonGraph::chain(3, 1);
    auto parts = build_partitions(g);
    // self loops
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(parts[0][i * 3 + j] == (i == j ? 1.0 : 0.0));
    // centripetal: 0 -> 1 and 2 -> 1, each the only entry in its row
    CHECK(parts[1][0 * 3 + 1] == 1.0);
    CHECK(parts[1][2 * 3 + 1] == 1.0);
    CHECK(parts[1][1 * 3 + 0] == 0.0);
    // centrifugal: 1 -> 0 and 1 -> 2 share row 1
    CHECK(parts[2][1 * 3 + 0] == 0.5);
    CHECK(parts[2][1 * 3 + 2] == 0.5);
    CHECK(parts[2][0 * 3 + 1] == 0.0);
}

TEST_CASE("partition union covers I + Adj exactly") {
    auto g = SkeletonGraph::ntu25();
    auto parts = build_partitions(g);
    const int v = g.v;
    // adjacency indicator
    std::vector<int> adj(v * v, 0);
    for (auto [i, j] : g.edges) {
        adj[i * v + j] = 1;
        adj[j * v + i] = 1;
    }
    for (int i = 0; i < v; ++i)
        for (int j = 0; j < v; ++j) {
            int nz = 0;
            for (int k = 0; k < 3; ++k) nz += parts[k][i * v + j] > 0 ? 1 : 0;
            const int expect = (i == j ? 1 : 0) + adj[i * v + j];
            CHECK(nz == expect);  // partitions are disjoint and cover I + Adj
        }
    // row normalization: every row sums to 0 or 1
    for (int k = 0; k < 3; ++k)
        for (int i = 0; i < v; ++i) {
            double s = 0;
            for (int j = 0; j < v; ++j) s += parts[k][i * v + j];
            CHECK((std::abs(s) < 1e-12 || std::abs(s - 1.0) < 1e-12));
        }
}

TEST_CASE("ntu25 graph is a valid tree") {
    auto g = SkeletonGraph::ntu25();
    CHECK(g.v == 25);
    CHECK(g.edges.size() == 24);
    CHECK(g.center == 20);
    CHECK_NOTHROW(g.validate());
    CHECK(g.parent[g.center] == g.center);
}

TEST_CASE("disconnected graph is rejected") {
    CHECK_THROWS_AS(make_graph(4, {{0, 1}, {2, 3}}, 0), TopologyError);
    CHECK_THROWS_AS(make_graph(3, {{0, 1}}, 0), TopologyError);       // too few edges
    CHECK_THROWS_AS(make_graph(3, {{0, 1}, {0, 5}}, 0), TopologyError);
}

TEST_CASE("effective adjacency equals base at initialization in every mode") {
    auto g = SkeletonGraph::chain(4, 1);
    auto fixed = PartitionedAdjacency<double>::make(g, TopologyMode::Fixed);
    auto learn = PartitionedAdjacency<double>::make(g, TopologyMode::Learnable);
    auto scaled = PartitionedAdjacency<double>::make(g, TopologyMode::LearnableScaled);
    for (int epoch : {0, 3, 7})
        for (int k = 0; k < 3; ++k) {
            auto f = fixed.effective(epoch)[k];
            auto l = learn.effective(epoch)[k];
            auto s = scaled.effective(epoch)[k];
            for (int64_t i = 0; i < f.numel(); ++i) {
                CHECK(l.values()[i] == f.values()[i]);
                CHECK(s.values()[i] == f.values()[i]);
            }
        }
}

TEST_CASE("lambda scales the learnable matrices exactly") {
    auto g = SkeletonGraph::chain(4, 1);
    auto pa = PartitionedAdjacency<double>::make(g, TopologyMode::LearnableScaled);
    pa.lambda.data()[0] = 2.0;
    for (int k = 0; k < 3; ++k) {
        auto eff = pa.effective(10)[k];
        for (int64_t i = 0; i < eff.numel(); ++i)
            CHECK(eff.values()[i] == 2.0 * pa.learned[k].values()[i]);
    }
}

TEST_CASE("freeze window blocks adjacency gradients") {
    auto g = SkeletonGraph::chain(3, 1);
    auto run = [&](TopologyMode mode, int epoch, bool expect_adj_grad, bool expect_lambda_grad) {
        auto pa = PartitionedAdjacency<double>::make(g, mode, /*freeze_epochs=*/5);
        Rng rng(1);
        auto x = Tensor<double>::randn({2, 2, 3, 3}, rng).set_requires_grad(true);
        auto eff = pa.effective(epoch);
        Tensor<double> acc;
        for (int k = 0; k < 3; ++k) {
            auto flat = reshape(x, {x.numel() / 3, int64_t(3)});
            auto y = sum_all(matmul(flat, eff[k]));
            acc = k == 0 ? y : add(acc, y);
        }
        acc.backward();
        CHECK(x.has_grad());
        if (mode == TopologyMode::Fixed) return;
        CHECK(pa.learned[0].has_grad() == expect_adj_grad);
        if (mode == TopologyMode::LearnableScaled)
            CHECK(pa.lambda.has_grad() == expect_lambda_grad);
    };
    run(TopologyMode::Learnable, 0, false, false);
    run(TopologyMode::Learnable, 5, true, false);
    run(TopologyMode::LearnableScaled, 0, false, true);  // lambda always trainable
    run(TopologyMode::LearnableScaled, 10, true, true);
}

TEST_CASE("fixed mode produces constant tensors across epochs") {
    auto g = SkeletonGraph::chain(5, 2);
    auto pa = PartitionedAdjacency<double>::make(g, TopologyMode::Fixed);
    auto before = pa.effective(0);
    auto after = pa.effective(100);
    for (int k = 0; k < 3; ++k)
        for (int64_t i = 0; i < before[k].numel(); ++i)
            CHECK(before[k].values()[i] == after[k].values()[i]);
    CHECK(!before[0].requires_grad());
}

TEST_CASE("graph json round trip") {
    auto g = SkeletonGraph::ntu25();
    const std::string path = "/tmp/hgct_test_graph.json";
    g.save_json(path);
    auto g2 = SkeletonGraph::load_json(path);
    CHECK(g2.v == g.v);
    CHECK(g2.center == g.center);
    CHECK(g2.edges == g.edges);
    CHECK(g2.parent == g.parent);
}
