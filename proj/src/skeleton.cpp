#include "hgct/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace hgct {

// ---------------------------------------------------------------------------
// JSON-lines format
// ---------------------------------------------------------------------------

DatasetSplit load_jsonl(const std::string& path, const DatasetManifest& manifest,
                        const std::string& split_name) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file: " + path);
    DatasetSplit split;
    split.class_count = manifest.classes;
    split.name = split_name;
    split.v = manifest.v;
    split.c = manifest.c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
        }
        const std::string where = path + ":" + std::to_string(lineno);
        if (!j.contains("label") || !j.contains("coords"))
            throw SchemaError(where + ": sample must have label and coords");
        const int label = j["label"].get<int>();
        if (label < 0 || (manifest.classes > 0 && label >= manifest.classes))
            throw SchemaError(where + ": label " + std::to_string(label) + " out of range");
        const auto& coords = j["coords"];
        if (!coords.is_array() || coords.empty())
            throw SchemaError(where + ": coords must be a non-empty [T][M][V][C] array");
        const int t = static_cast<int>(coords.size());
        const int m = static_cast<int>(coords[0].size());
        SkeletonSequence seq = SkeletonSequence::zeros(manifest.c, t, manifest.v, m, label);
        for (int ti = 0; ti < t; ++ti) {
            const auto& frame = coords[ti];
            if (static_cast<int>(frame.size()) != m)
                throw SchemaError(where + ": inconsistent body count at frame " +
                                  std::to_string(ti));
            for (int mi = 0; mi < m; ++mi) {
                const auto& body = frame[mi];
                if (static_cast<int>(body.size()) != manifest.v)
                    throw SchemaError(where + ": expected " + std::to_string(manifest.v) +
                                      " joints, got " + std::to_string(body.size()));
                for (int vi = 0; vi < manifest.v; ++vi) {
                    const auto& pt = body[vi];
                    if (static_cast<int>(pt.size()) != manifest.c)
                        throw SchemaError(where + ": expected " + std::to_string(manifest.c) +
                                          " coordinates per joint");
                    for (int ci = 0; ci < manifest.c; ++ci) {
                        const double x = pt[ci].get<double>();
                        if (!std::isfinite(x)) throw SchemaError(where + ": non-finite coordinate");
                        seq.at(ci, ti, vi, mi) = static_cast<float>(x);
                    }
                }
            }
        }
        split.samples.push_back(std::move(seq));
    }
    return split;
}

void save_jsonl(const DatasetSplit& split, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write dataset file: " + path);
    for (const auto& seq : split.samples) {
        nlohmann::json coords = nlohmann::json::array();
        for (int ti = 0; ti < seq.t; ++ti) {
            nlohmann::json frame = nlohmann::json::array();
            for (int mi = 0; mi < seq.m; ++mi) {
                nlohmann::json body = nlohmann::json::array();
                for (int vi = 0; vi < seq.v; ++vi) {
                    nlohmann::json pt = nlohmann::json::array();
                    for (int ci = 0; ci < seq.c; ++ci) pt.push_back(seq.at(ci, ti, vi, mi));
                    body.push_back(std::move(pt));
                }
                frame.push_back(std::move(body));
            }
            coords.push_back(std::move(frame));
        }
        nlohmann::json j;
        j["label"] = seq.label;
        j["coords"] = std::move(coords);
        out << j.dump() << "\n";
    }
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad manifest JSON in " + path + ": " + e.what());
    }
    DatasetManifest m;
    m.v = j.value("V", 25);
    m.c = j.value("C", 3);
    m.classes = j.value("classes", 0);
    return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    nlohmann::json j;
    j["V"] = m.v;
    j["C"] = m.c;
    j["classes"] = m.classes;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

Dataset load_dataset_dir(const std::string& dir) {
    Dataset ds;
    ds.manifest = load_manifest((fs::path(dir) / "manifest.json").string());
    ds.train = load_jsonl((fs::path(dir) / "train.jsonl").string(), ds.manifest, "train");
    ds.test = load_jsonl((fs::path(dir) / "test.jsonl").string(), ds.manifest, "test");
    return ds;
}

void save_dataset_dir(const Dataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    save_manifest(ds.manifest, (fs::path(dir) / "manifest.json").string());
    save_jsonl(ds.train, (fs::path(dir) / "train.jsonl").string());
    save_jsonl(ds.test, (fs::path(dir) / "test.jsonl").string());
}

// ---------------------------------------------------------------------------
// NTU .skeleton text format
// ---------------------------------------------------------------------------

SkeletonSequence parse_ntu_skeleton(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open skeleton file: " + path);
    auto need_int = [&](const char* what) {
        long long x;
        if (!(in >> x)) throw ParseError(path + ": truncated file while reading " + what);
        return x;
    };
    auto need_real = [&](const char* what) {
        double x;
        if (!(in >> x)) throw ParseError(path + ": truncated file while reading " + what);
        return x;
    };

    const long long frames = need_int("frame count");
    if (frames < 1) throw ParseError(path + ": file has no frames");
    // per frame, per body: 25 joints of xyz
    std::vector<std::vector<std::array<float, 75>>> data(static_cast<size_t>(frames));
    int max_bodies = 0;
    for (long long ti = 0; ti < frames; ++ti) {
        const long long bodies = need_int("body count");
        if (bodies < 0 || bodies > 10) throw ParseError(path + ": implausible body count");
        max_bodies = std::max<int>(max_bodies, static_cast<int>(bodies));
        for (long long mi = 0; mi < bodies; ++mi) {
            // body metadata: id + 9 tracking fields
            std::string body_id;
            if (!(in >> body_id)) throw ParseError(path + ": truncated body header");
            for (int k = 0; k < 9; ++k) need_real("body metadata");
            const long long joints = need_int("joint count");
            if (joints != 25)
                throw ParseError(path + ": joint count " + std::to_string(joints) +
                                 " != 25");
            std::array<float, 75> xyz{};
            for (int vi = 0; vi < 25; ++vi) {
                xyz[vi * 3 + 0] = static_cast<float>(need_real("joint x"));
                xyz[vi * 3 + 1] = static_cast<float>(need_real("joint y"));
                xyz[vi * 3 + 2] = static_cast<float>(need_real("joint z"));
                // depth/color projections, orientation quaternion, tracking state
                for (int k = 0; k < 9; ++k) need_real("joint metadata");
            }
            data[static_cast<size_t>(ti)].push_back(xyz);
        }
    }
    if (max_bodies == 0) throw ParseError(path + ": no bodies observed");

    SkeletonSequence seq = SkeletonSequence::zeros(3, static_cast<int>(frames), 25, max_bodies);
    for (size_t ti = 0; ti < data.size(); ++ti)
        for (size_t mi = 0; mi < data[ti].size(); ++mi)
            for (int vi = 0; vi < 25; ++vi)
                for (int ci = 0; ci < 3; ++ci)
                    seq.at(ci, static_cast<int>(ti), vi, static_cast<int>(mi)) =
                        data[ti][mi][vi * 3 + ci];

    // Action code "A###" in the filename gives the zero-based label.
    const std::string stem = fs::path(path).stem().string();
    for (size_t i = 0; i + 1 < stem.size(); ++i) {
        if (stem[i] == 'A' && std::isdigit(static_cast<unsigned char>(stem[i + 1]))) {
            size_t j = i + 1;
            int code = 0;
            while (j < stem.size() && std::isdigit(static_cast<unsigned char>(stem[j]))) {
                code = code * 10 + (stem[j] - '0');
                ++j;
            }
            seq.label = code - 1;
            break;
        }
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

std::vector<int> resample_indices_eval(int t_in, int t_out) {
    std::vector<int> idx(static_cast<size_t>(t_out));
    if (t_out == 1) {
        idx[0] = 0;
        return idx;
    }
    for (int i = 0; i < t_out; ++i)
        idx[static_cast<size_t>(i)] = static_cast<int>(
            std::llround(static_cast<double>(i) * (t_in - 1) / (t_out - 1)));
    return idx;
}

static SkeletonSequence gather_frames(const SkeletonSequence& seq, const std::vector<int>& idx) {
    SkeletonSequence out = SkeletonSequence::zeros(seq.c, static_cast<int>(idx.size()), seq.v,
                                                   seq.m, seq.label);
    for (int ci = 0; ci < seq.c; ++ci)
        for (size_t ti = 0; ti < idx.size(); ++ti)
            for (int vi = 0; vi < seq.v; ++vi)
                for (int mi = 0; mi < seq.m; ++mi)
                    out.at(ci, static_cast<int>(ti), vi, mi) = seq.at(ci, idx[ti], vi, mi);
    return out;
}

SkeletonSequence resample(const SkeletonSequence& seq, int t_out, SampleMode mode, Rng* rng) {
    if (seq.t < 1) throw ShapeError("resample requires at least one frame");
    if (mode == SampleMode::Eval) return gather_frames(seq, resample_indices_eval(seq.t, t_out));
    if (!rng) throw UsageError("train-mode resample needs an rng");
    const int min_len = std::max(1, static_cast<int>(std::ceil(0.9 * seq.t)));
    const int len = min_len + static_cast<int>(rng->uniform_int(
                                  static_cast<uint64_t>(seq.t - min_len + 1)));
    const int start =
        static_cast<int>(rng->uniform_int(static_cast<uint64_t>(seq.t - len + 1)));
    auto idx = resample_indices_eval(len, t_out);
    for (int& i : idx) i += start;
    return gather_frames(seq, idx);
}

SkeletonSequence center(const SkeletonSequence& seq, const SkeletonGraph& graph) {
    if (seq.v != graph.v) throw ShapeError("center: joint count does not match graph");
    bool any_nonzero = false;
    for (float x : seq.coords)
        if (x != 0.0f) {
            any_nonzero = true;
            break;
        }
    if (!any_nonzero) {
        log_warn("center: all-zero sample left unchanged");
        return seq;
    }
    SkeletonSequence out = seq;
    std::vector<float> ref(static_cast<size_t>(seq.c));
    for (int ci = 0; ci < seq.c; ++ci) ref[static_cast<size_t>(ci)] = seq.at(ci, 0, graph.center, 0);
    for (int mi = 0; mi < seq.m; ++mi) {
        if (!seq.body_nonzero(mi)) continue;  // absent bodies stay zero
        for (int ci = 0; ci < seq.c; ++ci)
            for (int ti = 0; ti < seq.t; ++ti)
                for (int vi = 0; vi < seq.v; ++vi)
                    out.at(ci, ti, vi, mi) -= ref[static_cast<size_t>(ci)];
    }
    return out;
}

SkeletonSequence to_bone(const SkeletonSequence& seq, const SkeletonGraph& graph) {
    if (seq.v != graph.v) throw ShapeError("to_bone: joint count does not match graph");
    SkeletonSequence out = seq;
    for (int ci = 0; ci < seq.c; ++ci)
        for (int ti = 0; ti < seq.t; ++ti)
            for (int vi = 0; vi < seq.v; ++vi) {
                const int p = graph.parent[vi];
                for (int mi = 0; mi < seq.m; ++mi)
                    out.at(ci, ti, vi, mi) = seq.at(ci, ti, vi, mi) - seq.at(ci, ti, p, mi);
            }
    return out;
}

SkeletonSequence to_motion(const SkeletonSequence& seq) {
    SkeletonSequence out = SkeletonSequence::zeros(seq.c, seq.t, seq.v, seq.m, seq.label);
    for (int ci = 0; ci < seq.c; ++ci)
        for (int ti = 0; ti + 1 < seq.t; ++ti)
            for (int vi = 0; vi < seq.v; ++vi)
                for (int mi = 0; mi < seq.m; ++mi)
                    out.at(ci, ti, vi, mi) = seq.at(ci, ti + 1, vi, mi) - seq.at(ci, ti, vi, mi);
    return out;
}

const char* modality_name(Modality m) {
    switch (m) {
        case Modality::Joint: return "joint";
        case Modality::Bone: return "bone";
        case Modality::JointMotion: return "joint-motion";
        case Modality::BoneMotion: return "bone-motion";
    }
    return "?";
}

Modality modality_from_name(const std::string& s) {
    if (s == "joint") return Modality::Joint;
    if (s == "bone") return Modality::Bone;
    if (s == "joint-motion") return Modality::JointMotion;
    if (s == "bone-motion") return Modality::BoneMotion;
    throw ConfigError("unknown modality: " + s);
}

SkeletonSequence apply_modality(const SkeletonSequence& seq, const SkeletonGraph& graph,
                                Modality mod) {
    switch (mod) {
        case Modality::Joint: return seq;
        case Modality::Bone: return to_bone(seq, graph);
        case Modality::JointMotion: return to_motion(seq);
        case Modality::BoneMotion: return to_motion(to_bone(seq, graph));
    }
    throw UsageError("bad modality");
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

namespace {

// Rest pose for the 25-joint body, roughly in meters. x: left/right,
// y: up, z: forward.
constexpr float kRestPose[25][3] = {
    {0.00f, 0.00f, 0.00f},    // 0 base of spine
    {0.00f, 0.25f, 0.00f},    // 1 middle of spine
    {0.00f, 0.60f, 0.00f},    // 2 neck
    {0.00f, 0.75f, 0.00f},    // 3 head
    {0.20f, 0.50f, 0.00f},    // 4 left shoulder
    {0.28f, 0.25f, 0.00f},    // 5 left elbow
    {0.30f, 0.02f, 0.00f},    // 6 left wrist
    {0.30f, -0.08f, 0.00f},   // 7 left hand
    {-0.20f, 0.50f, 0.00f},   // 8 right shoulder
    {-0.28f, 0.25f, 0.00f},   // 9 right elbow
    {-0.30f, 0.02f, 0.00f},   // 10 right wrist
    {-0.30f, -0.08f, 0.00f},  // 11 right hand
    {0.10f, -0.10f, 0.00f},   // 12 left hip
    {0.11f, -0.55f, 0.00f},   // 13 left knee
    {0.12f, -1.00f, 0.00f},   // 14 left ankle
    {0.12f, -1.06f, 0.12f},   // 15 left foot
    {-0.10f, -0.10f, 0.00f},  // 16 right hip
    {-0.11f, -0.55f, 0.00f},  // 17 right knee
    {-0.12f, -1.00f, 0.00f},  // 18 right ankle
    {-0.12f, -1.06f, 0.12f},  // 19 right foot
    {0.00f, 0.50f, 0.00f},    // 20 spine (shoulder center)
    {0.30f, -0.16f, 0.00f},   // 21 left hand tip
    {0.34f, -0.10f, 0.00f},   // 22 left thumb
    {-0.30f, -0.16f, 0.00f},  // 23 right hand tip
    {-0.34f, -0.10f, 0.00f},  // 24 right thumb
};

struct LimbJoint {
    int joint;
    float amp;
};

// Oscillating subtrees; amplitude grows toward the distal joints.
const std::vector<std::vector<LimbJoint>> kLimbs = {
    {{4, 0.04f}, {5, 0.14f}, {6, 0.26f}, {7, 0.30f}, {21, 0.36f}, {22, 0.33f}},      // left arm
    {{8, 0.04f}, {9, 0.14f}, {10, 0.26f}, {11, 0.30f}, {23, 0.36f}, {24, 0.33f}},    // right arm
    {{12, 0.04f}, {13, 0.16f}, {14, 0.30f}, {15, 0.34f}},                            // left leg
    {{16, 0.04f}, {17, 0.16f}, {18, 0.30f}, {19, 0.34f}},                            // right leg
};

constexpr double kPhaseRange = 1.2 * M_PI;
constexpr double kFreqLow = 1.0;   // cycles per sequence
constexpr double kFreqHigh = 3.0;

SkeletonSequence synth_sample(const SynthSpec& spec, int label, uint64_t salt) {
    Rng rng(salt);
    const double phase = rng.uniform(0.0, kPhaseRange);
    const int limb = label / 2;
    const double freq = (label % 2) ? kFreqHigh : kFreqLow;
    SkeletonSequence seq = SkeletonSequence::zeros(3, spec.t, spec.v, 1, label);
    for (int ti = 0; ti < spec.t; ++ti)
        for (int vi = 0; vi < spec.v; ++vi)
            for (int ci = 0; ci < 3; ++ci) seq.at(ci, ti, vi, 0) = kRestPose[vi][ci];
    for (int ti = 0; ti < spec.t; ++ti) {
        const double disp =
            std::sin(2.0 * M_PI * freq * static_cast<double>(ti) / spec.t + phase);
        for (const auto& lj : kLimbs[static_cast<size_t>(limb)])
            seq.at(2, ti, lj.joint, 0) += static_cast<float>(lj.amp * disp);  // swing forward
    }
    if (spec.noise_sigma > 0)
        for (float& x : seq.coords) x += static_cast<float>(rng.gauss(0.0, spec.noise_sigma));
    return seq;
}

}  // namespace

Dataset synth_dataset(const SynthSpec& spec) {
    if (spec.per_class_train < 1 || spec.per_class_test < 1)
        throw ConfigError("synth_dataset: per_class must be >= 1");
    if (spec.classes < 2 || spec.classes > 8)
        throw ConfigError("synth_dataset: classes must be in [2, 8]");
    if (spec.v != 25) throw ConfigError("synth_dataset: generator is defined on the 25-joint body");
    if (spec.t < 2) throw ConfigError("synth_dataset: t must be >= 2");

    Dataset ds;
    ds.manifest = DatasetManifest{spec.v, 3, spec.classes};
    auto fill = [&](DatasetSplit& split, const std::string& name, int per_class, uint64_t split_salt) {
        split.name = name;
        split.class_count = spec.classes;
        split.v = spec.v;
        split.c = 3;
        for (int label = 0; label < spec.classes; ++label)
            for (int i = 0; i < per_class; ++i) {
                const uint64_t salt = Rng::mix(
                    spec.seed, split_salt * 1000003ULL +
                                   static_cast<uint64_t>(label) * 1009ULL +
                                   static_cast<uint64_t>(i));
                split.samples.push_back(synth_sample(spec, label, salt));
            }
    };
    fill(ds.train, "train", spec.per_class_train, 1);
    fill(ds.test, "test", spec.per_class_test, 2);
    return ds;
}

}  // namespace hgct
