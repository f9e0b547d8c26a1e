#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hgct/tensor.hpp"
#include "hgct/topology.hpp"

namespace hgct {

// DSTT block hyperparameters (defaults are the published settings).
struct DsttConfig {
    int c_e = 128;
    double alpha = 0.25;  // temporal fraction: C_e^T = alpha * C_e
    int s_heads = 6;
    int t_heads = 8;
    int gamma = 3;  // CwFF expansion
    double attn_drop = 0.0;
    double ff_drop = 0.0;
    bool use_joint_type = true;
    bool use_frame_order = true;

    int c_t() const { return static_cast<int>(alpha * c_e + 0.5); }
    int c_s() const { return c_e - c_t(); }
    void validate() const;
};

struct ModelConfig {
    std::vector<int> stage_channels{128, 128, 128};
    int stgc_blocks_per_stage = 2;
    DsttConfig dstt;
    TopologyMode topology = TopologyMode::LearnableScaled;
    int freeze_epochs = 5;
    int num_classes = 120;
    int v = 25;
    int c_in = 3;
    double head_dropout = 0.0;

    void validate() const;
};

struct TrainConfig {
    double lr0 = 0.05;
    double momentum = 0.9;
    double weight_decay = 0.0002;
    int epochs = 60;
    std::vector<int> milestones{40, 50};
    double decay = 0.1;
    int warmup_epochs = 5;
    double label_smoothing = 0.1;
    int batch_size = 64;
    uint64_t seed = 1;
    Dtype dtype = Dtype::f32;
    int frames = 64;
    // Stop once the test accuracy reaches this value; <= 0 disables.
    double stop_at_test_accuracy = -1.0;

    void validate() const;
};

// Flat key=value configuration with dotted sections (model.*, train.*).
using KvPairs = std::vector<std::pair<std::string, std::string>>;

KvPairs parse_config_file(const std::string& path);
KvPairs parse_config_text(const std::string& text, const std::string& origin);

// Applies pairs onto the configs; unknown keys and type mismatches throw
// ConfigError naming the key. Later pairs win.
void apply_config(const KvPairs& pairs, ModelConfig& model, TrainConfig& train);

// Canonical full dump; reloading it reproduces the same resolved configs.
KvPairs resolved_config(const ModelConfig& model, const TrainConfig& train);

void write_config_file(const KvPairs& pairs, const std::string& path);

// Largest h <= preferred with c % h == 0 (head-count adjustment for ablation
// settings where the default does not divide the stream width).
int largest_divisor_leq(int c, int preferred);

inline const char* tool_version() { return "hgct 1.0.0"; }

// Reproducibility record written next to every run's outputs.
struct RunManifest {
    std::string command;
    std::string tool = tool_version();
    KvPairs resolved;
    std::string data_path;
    std::string out_dir;
    uint64_t seed = 0;
    std::string modality = "joint";
};

void write_manifest(const RunManifest& m, const std::string& path);
RunManifest read_manifest(const std::string& path);

// Analytic parameter count; equals the runtime enumeration of a constructed
// model exactly.
int64_t count_params(const ModelConfig& cfg);

// Analytic multiply-accumulate count for one sample, additive over blocks.
struct FlopReport {
    struct Item {
        std::string name;
        int64_t macs;
    };
    std::vector<Item> items;
    int64_t macs = 0;      // total
    int64_t flops_2x = 0;  // 2 * macs
};
FlopReport count_flops(const ModelConfig& cfg, int64_t t = 64, int64_t v = 25);

}  // namespace hgct
