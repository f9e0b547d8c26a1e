#include <fstream>

#include <json.hpp>

#include "hgct/model.hpp"

namespace hgct {

void DsttConfig::validate() const {
    if (c_e < 2) throw ConfigError("dstt.c_e must be >= 2");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("dstt.alpha must be in (0, 1)");
    const int cs = c_s(), ct = c_t();
    if (cs < 1 || ct < 1) throw ConfigError("dstt channel split leaves an empty stream");
    if (s_heads < 1 || cs % s_heads != 0)
        throw ConfigError("dstt.s_heads (" + std::to_string(s_heads) +
                          ") must divide the spatial width " + std::to_string(cs));
    if (t_heads < 1 || ct % t_heads != 0)
        throw ConfigError("dstt.t_heads (" + std::to_string(t_heads) +
                          ") must divide the temporal width " + std::to_string(ct));
    if (gamma < 1) throw ConfigError("dstt.gamma must be >= 1");
    if (attn_drop < 0.0 || attn_drop >= 1.0 || ff_drop < 0.0 || ff_drop >= 1.0)
        throw ConfigError("dstt dropout rates must be in [0, 1)");
}

void ModelConfig::validate() const {
    if (stage_channels.size() != 3) throw ConfigError("model must have exactly 3 stages");
    for (int c : stage_channels) {
        if (c < 4 || c % 4 != 0)
            throw ConfigError("stage channels must be positive multiples of 4");
    }
    if (stgc_blocks_per_stage < 1) throw ConfigError("stgc_blocks_per_stage must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (v < 1) throw ConfigError("v must be >= 1");
    if (c_in != 2 && c_in != 3) throw ConfigError("c_in must be 2 or 3");
    if (freeze_epochs < 0) throw ConfigError("freeze_epochs must be >= 0");
    if (head_dropout < 0.0 || head_dropout >= 1.0)
        throw ConfigError("head_dropout must be in [0, 1)");
    dstt.validate();
}

void TrainConfig::validate() const {
    if (lr0 <= 0) throw ConfigError("train.lr0 must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train.momentum must be in [0, 1)");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (decay <= 0) throw ConfigError("train.decay must be positive");
    if (warmup_epochs < 0) throw ConfigError("train.warmup_epochs must be >= 0");
    if (label_smoothing < 0 || label_smoothing >= 1)
        throw ConfigError("train.label_smoothing must be in [0, 1)");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (frames < 1) throw ConfigError("train.frames must be >= 1");
    for (size_t i = 1; i < milestones.size(); ++i)
        if (milestones[i] <= milestones[i - 1])
            throw ConfigError("train.milestones must be strictly increasing");
}

// ---------------------------------------------------------------------------
// Analytic parameter count (mirrors the constructors exactly)
// ---------------------------------------------------------------------------

namespace {

int64_t conv_params(int64_t cin, int64_t cout, int64_t kt, int64_t groups = 1,
                    bool bias = true) {
    return cout * (cin / groups) * kt + (bias ? cout : 0);
}

int64_t bn_params(int64_t c) { return 2 * c; }

int64_t stgc_params(int64_t cin, int64_t cout, int v, TopologyMode mode) {
    int64_t p = 0;
    if (mode != TopologyMode::Fixed) p += 3 * static_cast<int64_t>(v) * v;
    if (mode == TopologyMode::LearnableScaled) p += 1;
    // convs feeding a batch norm carry no bias
    p += 3 * conv_params(cin, cout, 1, 1, false) + bn_params(cout);  // spatial
    const int64_t cb = cout / 4;
    p += conv_params(cout, cb, 1, 1, false) + 2 * bn_params(cb) +
         conv_params(cb, cb, 5, 1, false);  // branch a
    p += conv_params(cout, cb, 1, 1, false) + 2 * bn_params(cb) +
         conv_params(cb, cb, 5, 1, false);                      // branch b
    p += conv_params(cout, cb, 1, 1, false) + 2 * bn_params(cb);  // branch c
    p += conv_params(cout, cb, 1, 1, false) + bn_params(cb);      // branch d
    if (cin != cout) p += conv_params(cin, cout, 1);              // residual
    return p;
}

// mhsa: q/v/o projections carry a bias, the key projection does not
int64_t mhsa_params(int64_t c) { return 4 * c * c + 3 * c; }

int64_t dstt_params(int64_t cin, const DsttConfig& d, bool first_stage, int v) {
    const int64_t cs = d.c_s(), ct = d.c_t(), ce = d.c_e;
    const int64_t hidden = static_cast<int64_t>(d.gamma) * ce;
    int64_t p = 0;
    p += conv_params(cin, cs, 1);      // spatial embedding
    p += conv_params(cin, ct, 3);      // temporal embedding
    if (first_stage) p += cs * v;      // joint-type table
    p += bn_params(cs) + bn_params(ct);  // pre-attention layer norms
    p += mhsa_params(cs);              // GSA
    p += mhsa_params(ct);              // GTA
    p += bn_params(ce);                // CwFF layer norm
    p += conv_params(ce, hidden, 1);
    p += conv_params(hidden, hidden, 3, hidden);  // depthwise
    p += conv_params(hidden, ce, 1);
    return p;
}

}  // namespace

int64_t count_params(const ModelConfig& cfg) {
    cfg.validate();
    int64_t p = bn_params(static_cast<int64_t>(cfg.c_in) * cfg.v);  // data batch norm
    int64_t c = cfg.c_in;
    for (size_t si = 0; si < cfg.stage_channels.size(); ++si) {
        const int64_t cout = cfg.stage_channels[si];
        for (int bi = 0; bi < cfg.stgc_blocks_per_stage; ++bi) {
            p += stgc_params(c, cout, cfg.v, cfg.topology);
            c = cout;
        }
        p += dstt_params(c, cfg.dstt, si == 0, cfg.v);
        if (c != cfg.dstt.c_e) p += conv_params(c, cfg.dstt.c_e, 1);
        c = cfg.dstt.c_e;
    }
    p += c * cfg.num_classes + cfg.num_classes;  // head
    return p;
}

// ---------------------------------------------------------------------------
// Analytic MAC count, additive over blocks. Normalization, activation and
// softmax costs are ignored (under 2% of the total).
// ---------------------------------------------------------------------------

namespace {

int64_t stgc_macs(int64_t cin, int64_t cout, int64_t t, int64_t v) {
    const int64_t tv = t * v;
    int64_t m = 0;
    m += 3 * cin * t * v * v;       // joint contraction per partition
    m += 3 * cin * cout * tv;       // per-partition 1x1 convs
    const int64_t cb = cout / 4;
    m += 3 * cout * cb * tv;        // branch reduces (a, b, c)
    m += 2 * 5 * cb * cb * tv;      // dilated 5x1 convs
    m += cout * cb * tv;            // bottleneck
    if (cin != cout) m += cin * cout * tv;  // residual projection
    return m;
}

int64_t dstt_macs(int64_t cin, const DsttConfig& d, int64_t t, int64_t v) {
    const int64_t cs = d.c_s(), ct = d.c_t(), ce = d.c_e;
    const int64_t hidden = static_cast<int64_t>(d.gamma) * ce;
    const int64_t tv = t * v;
    int64_t m = 0;
    m += cin * cs * tv;            // 1x1 spatial embedding
    m += 3 * cin * ct * tv;        // 3x1 temporal embedding
    m += 4 * cs * cs * tv;         // GSA projections over T*V tokens
    m += 2 * t * v * v * cs;       // GSA scores + weighted values
    m += 4 * ct * ct * tv;         // GTA projections
    m += 2 * v * t * t * ct;       // GTA scores + weighted values
    m += ce * hidden * tv;         // CwFF expand
    m += 3 * hidden * tv;          // CwFF depthwise 3x1
    m += hidden * ce * tv;         // CwFF squeeze
    return m;
}

}  // namespace

FlopReport count_flops(const ModelConfig& cfg, int64_t t, int64_t v) {
    cfg.validate();
    FlopReport r;
    auto push = [&](const std::string& name, int64_t macs) {
        r.items.push_back({name, macs});
        r.macs += macs;
    };
    int64_t c = cfg.c_in;
    for (size_t si = 0; si < cfg.stage_channels.size(); ++si) {
        const std::string sp = "stage" + std::to_string(si);
        const int64_t cout = cfg.stage_channels[si];
        for (int bi = 0; bi < cfg.stgc_blocks_per_stage; ++bi) {
            push(sp + ".stgc" + std::to_string(bi), stgc_macs(c, cout, t, v));
            c = cout;
        }
        int64_t m = dstt_macs(c, cfg.dstt, t, v);
        if (c != cfg.dstt.c_e) m += c * cfg.dstt.c_e * t * v;  // residual projection
        push(sp + ".dstt", m);
        c = cfg.dstt.c_e;
    }
    push("head", c * cfg.num_classes);
    r.flops_2x = 2 * r.macs;
    return r;
}

// ---------------------------------------------------------------------------
// JSON helpers for checkpoints, feature CSV
// ---------------------------------------------------------------------------

namespace detail {

nlohmann::json model_config_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["stage_channels"] = cfg.stage_channels;
    j["stgc_blocks_per_stage"] = cfg.stgc_blocks_per_stage;
    j["topology"] = topology_mode_name(cfg.topology);
    j["freeze_epochs"] = cfg.freeze_epochs;
    j["num_classes"] = cfg.num_classes;
    j["v"] = cfg.v;
    j["c_in"] = cfg.c_in;
    j["head_dropout"] = cfg.head_dropout;
    j["dstt"] = {{"c_e", cfg.dstt.c_e},
                 {"alpha", cfg.dstt.alpha},
                 {"s_heads", cfg.dstt.s_heads},
                 {"t_heads", cfg.dstt.t_heads},
                 {"gamma", cfg.dstt.gamma},
                 {"attn_drop", cfg.dstt.attn_drop},
                 {"ff_drop", cfg.dstt.ff_drop},
                 {"use_joint_type", cfg.dstt.use_joint_type},
                 {"use_frame_order", cfg.dstt.use_frame_order}};
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.stage_channels = j.at("stage_channels").get<std::vector<int>>();
    cfg.stgc_blocks_per_stage = j.at("stgc_blocks_per_stage").get<int>();
    cfg.topology = topology_mode_from_name(j.at("topology").get<std::string>());
    cfg.freeze_epochs = j.at("freeze_epochs").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.v = j.at("v").get<int>();
    cfg.c_in = j.at("c_in").get<int>();
    cfg.head_dropout = j.at("head_dropout").get<double>();
    const auto& d = j.at("dstt");
    cfg.dstt.c_e = d.at("c_e").get<int>();
    cfg.dstt.alpha = d.at("alpha").get<double>();
    cfg.dstt.s_heads = d.at("s_heads").get<int>();
    cfg.dstt.t_heads = d.at("t_heads").get<int>();
    cfg.dstt.gamma = d.at("gamma").get<int>();
    cfg.dstt.attn_drop = d.at("attn_drop").get<double>();
    cfg.dstt.ff_drop = d.at("ff_drop").get<double>();
    cfg.dstt.use_joint_type = d.at("use_joint_type").get<bool>();
    cfg.dstt.use_frame_order = d.at("use_frame_order").get<bool>();
    cfg.validate();
    return cfg;
}

nlohmann::json graph_json(const SkeletonGraph& g) {
    nlohmann::json j;
    j["V"] = g.v;
    j["center"] = g.center;
    auto arr = nlohmann::json::array();
    for (auto [a, b] : g.edges) arr.push_back({a, b});
    j["edges"] = arr;
    return j;
}

SkeletonGraph graph_from_json(const nlohmann::json& j) {
    std::vector<std::pair<int, int>> edges;
    for (const auto& e : j.at("edges")) edges.emplace_back(e[0].get<int>(), e[1].get<int>());
    return make_graph(j.at("V").get<int>(), std::move(edges), j.at("center").get<int>());
}

}  // namespace detail

void write_feature_csv(const std::vector<FeatureRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write feature dump: " + path);
    out << "stage,kind,index,response\n";
    char buf[64];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%.9g", r.response);
        out << r.stage << "," << r.kind << "," << r.index << "," << buf << "\n";
    }
    if (!out) throw IoError("feature dump write failed: " + path);
}

}  // namespace hgct
