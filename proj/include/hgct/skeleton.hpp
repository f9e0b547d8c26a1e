#pragma once

#include <string>
#include <vector>

#include "hgct/topology.hpp"
#include "hgct/util.hpp"

namespace hgct {

// One labeled sample: coordinates of V joints over T frames for M bodies.
// Stored row-major as [C][T][V][M]; absent bodies are all-zero slices.
struct SkeletonSequence {
    int c = 0, t = 0, v = 0, m = 0;
    std::vector<float> coords;
    int label = -1;

    float& at(int ci, int ti, int vi, int mi) {
        return coords[((static_cast<size_t>(ci) * t + ti) * v + vi) * m + mi];
    }
    float at(int ci, int ti, int vi, int mi) const {
        return coords[((static_cast<size_t>(ci) * t + ti) * v + vi) * m + mi];
    }
    static SkeletonSequence zeros(int c, int t, int v, int m, int label = -1) {
        SkeletonSequence s;
        s.c = c;
        s.t = t;
        s.v = v;
        s.m = m;
        s.label = label;
        s.coords.assign(static_cast<size_t>(c) * t * v * m, 0.0f);
        return s;
    }
    bool body_nonzero(int mi) const {
        for (int ci = 0; ci < c; ++ci)
            for (int ti = 0; ti < t; ++ti)
                for (int vi = 0; vi < v; ++vi)
                    if (at(ci, ti, vi, mi) != 0.0f) return true;
        return false;
    }
};

struct DatasetSplit {
    std::vector<SkeletonSequence> samples;
    int class_count = 0;
    std::string name;  // "train" or "test"
    int v = 0;
    int c = 0;
};

struct DatasetManifest {
    int v = 25;
    int c = 3;
    int classes = 0;
};

// Native JSON-lines format: one {"label":int,"coords":[T][M][V][C]} object per
// line plus a sidecar manifest.
DatasetSplit load_jsonl(const std::string& path, const DatasetManifest& manifest,
                        const std::string& split_name);
void save_jsonl(const DatasetSplit& split, const std::string& path);

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& m, const std::string& path);

// Dataset directory layout: train.jsonl, test.jsonl, manifest.json.
struct Dataset {
    DatasetSplit train;
    DatasetSplit test;
    DatasetManifest manifest;
};
Dataset load_dataset_dir(const std::string& dir);
void save_dataset_dir(const Dataset& ds, const std::string& dir);

// NTU RGB+D .skeleton text file; action label parsed from the "A###" token of
// the filename (zero-based).
SkeletonSequence parse_ntu_skeleton(const std::string& path);

enum class SampleMode { Train, Eval };

// Temporal resampling to a fixed frame count. Eval mode picks
// round(linspace(0, T-1, T_out)); train mode first takes a random contiguous
// crop of at least 90% of the frames.
SkeletonSequence resample(const SkeletonSequence& seq, int t_out, SampleMode mode, Rng* rng);

// Eval-mode output frame indices (exposed for tests).
std::vector<int> resample_indices_eval(int t_in, int t_out);

// Translation normalization: subtract the center joint's coordinates of the
// first frame of the first body. All-zero body slices stay zero.
SkeletonSequence center(const SkeletonSequence& seq, const SkeletonGraph& graph);

// Parent-relative coordinates; zero at the center joint.
SkeletonSequence to_bone(const SkeletonSequence& seq, const SkeletonGraph& graph);

// Frame differences; the final frame is zero so motion[t] pairs with frame t.
SkeletonSequence to_motion(const SkeletonSequence& seq);

enum class Modality { Joint, Bone, JointMotion, BoneMotion };
const char* modality_name(Modality m);
Modality modality_from_name(const std::string& s);
SkeletonSequence apply_modality(const SkeletonSequence& seq, const SkeletonGraph& graph,
                                Modality mod);

// Synthetic 8-class task on the 25-joint body: which limb subtree oscillates
// (left/right arm, left/right leg) crossed with oscillation frequency
// (low/high). Neither factor alone separates all classes.
struct SynthSpec {
    int classes = 8;
    int per_class_train = 250;
    int per_class_test = 50;
    int v = 25;
    int t = 64;
    double noise_sigma = 0.01;
    uint64_t seed = 0;
};
Dataset synth_dataset(const SynthSpec& spec);

}  // namespace hgct
