#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "hgct/skeleton.hpp"

using namespace hgct;
namespace fs = std::filesystem;

namespace {

fs::path tmpdir() {
    auto p = fs::temp_directory_path() / "hgct_skeleton_tests";
    fs::create_directories(p);
    return p;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

}  // namespace

TEST_CASE("load_jsonl basic cases") {
    DatasetManifest mf{25, 3, 4};
    SUBCASE("empty file gives empty split") {
        auto p = tmpdir() / "empty.jsonl";
        write_file(p, "");
        auto split = load_jsonl(p.string(), mf, "train");
        CHECK(split.samples.empty());
    }
    SUBCASE("one-line file") {
        SkeletonSequence seq = SkeletonSequence::zeros(3, 2, 25, 1, 2);
        seq.at(0, 0, 0, 0) = 1.5f;
        DatasetSplit split;
        split.samples.push_back(seq);
        split.class_count = 4;
        split.v = 25;
        split.c = 3;
        auto p = tmpdir() / "one.jsonl";
        save_jsonl(split, p.string());
        auto loaded = load_jsonl(p.string(), mf, "train");
        REQUIRE(loaded.samples.size() == 1);
        CHECK(loaded.samples[0].t == 2);
        CHECK(loaded.samples[0].v == 25);
        CHECK(loaded.samples[0].m == 1);
        CHECK(loaded.samples[0].label == 2);
        CHECK(loaded.samples[0].at(0, 0, 0, 0) == 1.5f);
    }
    SUBCASE("wrong joint count is a schema error") {
        // 24 joints under a V=25 manifest
        std::string body = "[";
        for (int i = 0; i < 24; ++i) body += std::string(i ? "," : "") + "[0,0,0]";
        body += "]";
        auto p = tmpdir() / "bad_joints.jsonl";
        write_file(p, "{\"label\":0,\"coords\":[[" + body + "]]}\n");
        CHECK_THROWS_AS(load_jsonl(p.string(), mf, "train"), SchemaError);
    }
    SUBCASE("malformed json names the line") {
        auto p = tmpdir() / "bad.jsonl";
        write_file(p, "{\"label\":0,\"coords\":[[[[0,0,0]]]]}\n{nope\n");
        try {
            DatasetManifest m1{1, 3, 4};
            load_jsonl(p.string(), m1, "train");
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find(":2") != std::string::npos);
        }
    }
    SUBCASE("label out of range rejected") {
        auto p = tmpdir() / "bad_label.jsonl";
        DatasetManifest m1{1, 3, 4};
        write_file(p, "{\"label\":9,\"coords\":[[[[0,0,0]]]]}\n");
        CHECK_THROWS_AS(load_jsonl(p.string(), m1, "train"), SchemaError);
    }
}

namespace {

std::string ntu_body_line() { return "72057594037931101 0 1 1 1 1 0 0.1 -0.2 2\n"; }

std::string ntu_joint_line(double x, double y, double z) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%g %g %g 100 200 300 400 0.1 0.2 0.3 0.4 2\n", x, y, z);
    return buf;
}

std::string make_ntu_file(int frames, int bodies) {
    std::string s = std::to_string(frames) + "\n";
    for (int t = 0; t < frames; ++t) {
        s += std::to_string(bodies) + "\n";
        for (int m = 0; m < bodies; ++m) {
            s += ntu_body_line();
            s += "25\n";
            for (int j = 0; j < 25; ++j)
                s += ntu_joint_line(0.01 * j + t, 0.02 * j, 0.03 * j + m);
        }
    }
    return s;
}

}  // namespace

TEST_CASE("parse_ntu_skeleton") {
    SUBCASE("well-formed two-frame file") {
        auto p = tmpdir() / "S001C001P001R001A043.skeleton";
        write_file(p, make_ntu_file(2, 1));
        auto seq = parse_ntu_skeleton(p.string());
        CHECK(seq.c == 3);
        CHECK(seq.t == 2);
        CHECK(seq.v == 25);
        CHECK(seq.m == 1);
        CHECK(seq.label == 42);  // A043, zero-based
        CHECK(seq.at(0, 1, 3, 0) == doctest::Approx(0.03 + 1));
    }
    SUBCASE("zero frames rejected") {
        auto p = tmpdir() / "S001C001P001R001A001_empty.skeleton";
        write_file(p, "0\n");
        CHECK_THROWS_AS(parse_ntu_skeleton(p.string()), ParseError);
    }
    SUBCASE("truncated file rejected") {
        auto p = tmpdir() / "S001C001P001R001A001_trunc.skeleton";
        auto full = make_ntu_file(2, 1);
        write_file(p, full.substr(0, full.size() / 2));
        CHECK_THROWS_AS(parse_ntu_skeleton(p.string()), ParseError);
    }
    SUBCASE("wrong joint count rejected") {
        auto p = tmpdir() / "S001C001P001R001A001_24j.skeleton";
        std::string s = "1\n1\n" + ntu_body_line() + "24\n";
        for (int j = 0; j < 24; ++j) s += ntu_joint_line(0, 0, 0);
        write_file(p, s);
        CHECK_THROWS_AS(parse_ntu_skeleton(p.string()), ParseError);
    }
    SUBCASE("variable body count zero-fills missing bodies") {
        auto p = tmpdir() / "S001C001P001R001A007_2b.skeleton";
        std::string s = "2\n";
        s += "1\n" + ntu_body_line() + "25\n";
        for (int j = 0; j < 25; ++j) s += ntu_joint_line(1, 1, 1);
        s += "2\n";
        for (int m = 0; m < 2; ++m) {
            s += ntu_body_line() + "25\n";
            for (int j = 0; j < 25; ++j) s += ntu_joint_line(2, 2, 2);
        }
        write_file(p, s);
        auto seq = parse_ntu_skeleton(p.string());
        CHECK(seq.m == 2);
        CHECK(seq.at(0, 0, 0, 1) == 0.0f);  // absent body in frame 0
        CHECK(seq.at(0, 1, 0, 1) == 2.0f);
    }
}

TEST_CASE("resample") {
    auto make_seq = [](int t) {
        SkeletonSequence s = SkeletonSequence::zeros(1, t, 1, 1, 0);
        for (int i = 0; i < t; ++i) s.at(0, i, 0, 0) = static_cast<float>(i);
        return s;
    };
    SUBCASE("identity when already at target") {
        auto s = make_seq(64);
        auto r = resample(s, 64, SampleMode::Eval, nullptr);
        CHECK(r.coords == s.coords);
    }
    SUBCASE("downsampling by two picks even frames") {
        auto idx = resample_indices_eval(128, 64);
        for (int i = 0; i < 64; ++i)
            CHECK(idx[i] == static_cast<int>(std::llround(i * 127.0 / 63.0)));
        CHECK(idx[0] == 0);
        CHECK(idx[1] == 2);
        CHECK(idx[2] == 4);
        CHECK(idx[63] == 127);
    }
    SUBCASE("eval resampling is idempotent") {
        auto s = make_seq(100);
        auto once = resample(s, 64, SampleMode::Eval, nullptr);
        auto twice = resample(once, 64, SampleMode::Eval, nullptr);
        CHECK(once.coords == twice.coords);
    }
    SUBCASE("indices are non-decreasing, with repetition when short") {
        auto idx = resample_indices_eval(10, 64);
        for (size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] >= idx[i - 1]);
        CHECK(idx.front() == 0);
        CHECK(idx.back() == 9);
    }
    SUBCASE("train mode crops at least 90 percent") {
        auto s = make_seq(100);
        Rng rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            auto r = resample(s, 64, SampleMode::Train, &rng);
            CHECK(r.t == 64);
            // frames come from a contiguous window of length >= 90
            const float lo = r.at(0, 0, 0, 0);
            const float hi = r.at(0, 63, 0, 0);
            CHECK(hi - lo >= 89.0f);
            CHECK(lo >= 0.0f);
            CHECK(hi <= 99.0f);
        }
    }
    SUBCASE("single frame input repeats") {
        auto s = make_seq(1);
        auto r = resample(s, 8, SampleMode::Eval, nullptr);
        CHECK(r.t == 8);
        for (int i = 0; i < 8; ++i) CHECK(r.at(0, i, 0, 0) == 0.0f);
    }
}

TEST_CASE("center") {
    auto graph = SkeletonGraph::chain(3, 1);
    SUBCASE("constant offset removed") {
        SkeletonSequence s = SkeletonSequence::zeros(3, 2, 3, 1, 0);
        SkeletonSequence off = s;
        for (int c = 0; c < 3; ++c)
            for (int t = 0; t < 2; ++t)
                for (int v = 0; v < 3; ++v) {
                    s.at(c, t, v, 0) = static_cast<float>(c + t + v);
                    off.at(c, t, v, 0) = s.at(c, t, v, 0) + 5.0f;
                }
        auto cs = center(s, graph);
        auto co = center(off, graph);
        CHECK(cs.coords == co.coords);
    }
    SUBCASE("already centered sample unchanged") {
        SkeletonSequence s = SkeletonSequence::zeros(3, 2, 3, 1, 0);
        s.at(0, 0, 0, 0) = 1.0f;  // center joint (1) at origin in frame 0
        s.at(0, 1, 2, 0) = 2.0f;
        auto c = center(s, graph);
        CHECK(c.coords == s.coords);
    }
    SUBCASE("single joint collapses to zero") {
        auto g1 = make_graph(1, {}, 0);
        SkeletonSequence s = SkeletonSequence::zeros(3, 1, 1, 1, 0);
        s.at(0, 0, 0, 0) = 1.0f;
        s.at(1, 0, 0, 0) = 2.0f;
        s.at(2, 0, 0, 0) = 3.0f;
        auto c = center(s, g1);
        for (float x : c.coords) CHECK(x == 0.0f);
    }
    SUBCASE("all-zero sample returned unchanged") {
        SkeletonSequence s = SkeletonSequence::zeros(3, 2, 3, 1, 0);
        auto c = center(s, graph);
        CHECK(c.coords == s.coords);
    }
    SUBCASE("absent second body stays zero") {
        SkeletonSequence s = SkeletonSequence::zeros(3, 2, 3, 2, 0);
        for (int v = 0; v < 3; ++v) s.at(0, 0, v, 0) = 1.0f + v;
        auto c = center(s, graph);
        for (int t = 0; t < 2; ++t)
            for (int v = 0; v < 3; ++v)
                for (int ci = 0; ci < 3; ++ci) CHECK(c.at(ci, t, v, 1) == 0.0f);
    }
}

TEST_CASE("to_bone") {
    auto graph = SkeletonGraph::chain(2, 0);
    SUBCASE("child at parent + (1,0,0)") {
        SkeletonSequence s = SkeletonSequence::zeros(3, 1, 2, 1, 0);
        s.at(0, 0, 0, 0) = 0.5f;
        s.at(0, 0, 1, 0) = 1.5f;
        auto b = to_bone(s, graph);
        CHECK(b.at(0, 0, 1, 0) == 1.0f);
        CHECK(b.at(0, 0, 0, 0) == 0.0f);  // center row is zero
    }
    SUBCASE("rigid translation leaves bones unchanged") {
        Rng rng(5);
        SkeletonSequence s = SkeletonSequence::zeros(3, 3, 2, 1, 0);
        for (float& x : s.coords) x = static_cast<float>(rng.gauss());
        SkeletonSequence shifted = s;
        for (int c = 0; c < 3; ++c)
            for (int t = 0; t < 3; ++t)
                for (int v = 0; v < 2; ++v) shifted.at(c, t, v, 0) += 2.5f;
        auto b0 = to_bone(s, graph);
        auto b1 = to_bone(shifted, graph);
        for (size_t i = 0; i < b0.coords.size(); ++i)
            CHECK(std::abs(b0.coords[i] - b1.coords[i]) < 1e-6f);
    }
    SUBCASE("path sums reconstruct joint minus center") {
        auto g = SkeletonGraph::ntu25();
        Rng rng(6);
        SkeletonSequence s = SkeletonSequence::zeros(3, 2, 25, 1, 0);
        for (float& x : s.coords) x = static_cast<float>(rng.gauss());
        auto b = to_bone(s, g);
        for (int j = 0; j < 25; ++j)
            for (int c = 0; c < 3; ++c)
                for (int t = 0; t < 2; ++t) {
                    double sum = 0;
                    int cur = j;
                    while (cur != g.center) {
                        sum += b.at(c, t, cur, 0);
                        cur = g.parent[cur];
                    }
                    const double expect = s.at(c, t, j, 0) - s.at(c, t, g.center, 0);
                    CHECK(std::abs(sum - expect) < 1e-6);
                }
    }
}

TEST_CASE("to_motion") {
    SUBCASE("static sequence gives zeros exactly") {
        SkeletonSequence s = SkeletonSequence::zeros(3, 4, 2, 1, 0);
        for (float& x : s.coords) x = 1.25f;
        auto m = to_motion(s);
        for (float x : m.coords) CHECK(x == 0.0f);
    }
    SUBCASE("linear motion gives constant steps with zero tail") {
        SkeletonSequence s = SkeletonSequence::zeros(1, 4, 1, 1, 0);
        for (int t = 0; t < 4; ++t) s.at(0, t, 0, 0) = 0.5f * t;
        auto m = to_motion(s);
        CHECK(m.at(0, 0, 0, 0) == 0.5f);
        CHECK(m.at(0, 1, 0, 0) == 0.5f);
        CHECK(m.at(0, 2, 0, 0) == 0.5f);
        CHECK(m.at(0, 3, 0, 0) == 0.0f);
    }
    SUBCASE("single frame gives zeros") {
        SkeletonSequence s = SkeletonSequence::zeros(3, 1, 2, 1, 0);
        s.at(0, 0, 0, 0) = 3.0f;
        auto m = to_motion(s);
        for (float x : m.coords) CHECK(x == 0.0f);
    }
}

TEST_CASE("synth_dataset determinism and balance") {
    SynthSpec spec;
    spec.per_class_train = 5;
    spec.per_class_test = 3;
    spec.seed = 7;
    auto a = synth_dataset(spec);
    auto b = synth_dataset(spec);
    REQUIRE(a.train.samples.size() == 40);
    REQUIRE(a.test.samples.size() == 24);
    for (size_t i = 0; i < a.train.samples.size(); ++i)
        CHECK(a.train.samples[i].coords == b.train.samples[i].coords);
    std::vector<int> counts(8, 0);
    for (const auto& s : a.train.samples) ++counts[static_cast<size_t>(s.label)];
    for (int c : counts) CHECK(c == 5);  // exactly per_class per label

    SynthSpec bad = spec;
    bad.per_class_train = 0;
    CHECK_THROWS_AS(synth_dataset(bad), ConfigError);
}

TEST_CASE("synth_dataset with zero noise varies only by phase") {
    SynthSpec spec;
    spec.per_class_train = 3;
    spec.per_class_test = 1;
    spec.noise_sigma = 0.0;
    spec.seed = 11;
    auto ds = synth_dataset(spec);
    // two samples of the same class: the set of joints that move at all must
    // coincide, and non-limb joints are bit-identical (rest pose)
    const auto& s0 = ds.train.samples[0];
    const auto& s1 = ds.train.samples[1];
    REQUIRE(s0.label == s1.label);
    int moving = 0;
    for (int v = 0; v < 25; ++v) {
        bool m0 = false, m1 = false;
        for (int t = 0; t < s0.t; ++t)
            for (int c = 0; c < 3; ++c) {
                m0 = m0 || s0.at(c, t, v, 0) != s0.at(c, 0, v, 0);
                m1 = m1 || s1.at(c, t, v, 0) != s1.at(c, 0, v, 0);
            }
        CHECK(m0 == m1);
        if (m0) ++moving;
        if (!m0)
            for (int t = 0; t < s0.t; ++t)
                for (int c = 0; c < 3; ++c) CHECK(s0.at(c, t, v, 0) == s1.at(c, t, v, 0));
    }
    CHECK(moving >= 4);
}

TEST_CASE("nearest-centroid baseline sits between chance and perfect") {
    SynthSpec spec;
    spec.per_class_train = 40;
    spec.per_class_test = 25;
    spec.seed = 3;
    auto ds = synth_dataset(spec);
    const size_t dim = ds.train.samples[0].coords.size();
    std::vector<std::vector<double>> centroids(8, std::vector<double>(dim, 0.0));
    std::vector<int> counts(8, 0);
    for (const auto& s : ds.train.samples) {
        for (size_t i = 0; i < dim; ++i) centroids[static_cast<size_t>(s.label)][i] += s.coords[i];
        ++counts[static_cast<size_t>(s.label)];
    }
    for (int k = 0; k < 8; ++k)
        for (size_t i = 0; i < dim; ++i) centroids[static_cast<size_t>(k)][i] /= counts[k];
    int hit = 0;
    for (const auto& s : ds.test.samples) {
        int best = -1;
        double best_d = 0;
        for (int k = 0; k < 8; ++k) {
            double d = 0;
            for (size_t i = 0; i < dim; ++i) {
                const double diff = s.coords[i] - centroids[static_cast<size_t>(k)][i];
                d += diff * diff;
            }
            if (best < 0 || d < best_d) {
                best = k;
                best_d = d;
            }
        }
        if (best == s.label) ++hit;
    }
    const double acc = static_cast<double>(hit) / static_cast<double>(ds.test.samples.size());
    INFO("nearest-centroid accuracy " << acc);
    CHECK(acc > 0.125);  // better than chance
    CHECK(acc < 1.0);    // but not perfect
}

TEST_CASE("dataset dir round trip") {
    SynthSpec spec;
    spec.per_class_train = 2;
    spec.per_class_test = 1;
    spec.seed = 5;
    auto ds = synth_dataset(spec);
    auto dir = tmpdir() / "ds_roundtrip";
    save_dataset_dir(ds, dir.string());
    auto loaded = load_dataset_dir(dir.string());
    CHECK(loaded.manifest.classes == 8);
    REQUIRE(loaded.train.samples.size() == ds.train.samples.size());
    for (size_t i = 0; i < ds.train.samples.size(); ++i) {
        CHECK(loaded.train.samples[i].label == ds.train.samples[i].label);
        CHECK(loaded.train.samples[i].coords == ds.train.samples[i].coords);
    }
}
