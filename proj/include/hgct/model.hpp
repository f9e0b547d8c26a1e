#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "hgct/blocks.hpp"

namespace hgct {

template <typename T>
struct ForwardTrace {
    std::vector<BlockTrace<T>> stages;  // one record per stage (its DSTT block)
};

// Three-stage assembly: per stage, a run of STGC blocks followed by a DSTT
// block with a residual from the STGC output (1x1-projected when widths
// differ). Head is global average pooling over (T, V) plus one affine map.
template <typename T>
struct HgctModel {
    ModelConfig cfg;
    SkeletonGraph graph;
    BatchNorm2d<T> data_bn;  // over C_in*V flattened channels

    struct Stage {
        std::vector<StgcBlock<T>> stgcs;
        DsttBlock<T> dstt;
        Conv2dTV<T> dstt_residual;
        bool has_dstt_residual = false;
    };
    std::vector<Stage> stages;
    Linear<T> head;

    static HgctModel make(const ModelConfig& cfg, const SkeletonGraph& graph, Rng& rng) {
        cfg.validate();
        if (graph.v != cfg.v) throw ConfigError("graph joint count does not match model config");
        HgctModel m;
        m.cfg = cfg;
        m.graph = graph;
        m.data_bn = BatchNorm2d<T>::make(static_cast<int64_t>(cfg.c_in) * cfg.v);
        int64_t c = cfg.c_in;
        for (size_t si = 0; si < cfg.stage_channels.size(); ++si) {
            Stage st;
            const int64_t cout = cfg.stage_channels[si];
            for (int bi = 0; bi < cfg.stgc_blocks_per_stage; ++bi) {
                st.stgcs.push_back(StgcBlock<T>::make(c, cout, graph, cfg.topology,
                                                      cfg.freeze_epochs, rng));
                c = cout;
            }
            st.dstt = DsttBlock<T>::make(c, cfg.dstt, static_cast<int>(si), cfg.v, rng);
            if (c != cfg.dstt.c_e) {
                st.dstt_residual = Conv2dTV<T>::make(c, cfg.dstt.c_e, 1, ConvOpts{}, true, rng);
                st.has_dstt_residual = true;
            }
            c = cfg.dstt.c_e;
            m.stages.push_back(std::move(st));
        }
        m.head = Linear<T>::make(c, cfg.num_classes, rng);
        return m;
    }

    // x: [B, C_in, T, V] -> logits [B, num_classes]
    Tensor<T> forward(const Tensor<T>& x, int epoch, bool training, Rng* rng = nullptr,
                      ForwardTrace<T>* trace = nullptr) {
        const Shape& s = x.shape();
        if (s.size() != 4 || s[1] != cfg.c_in || s[3] != cfg.v)
            throw ShapeError("model input must be [B," + std::to_string(cfg.c_in) + ",T," +
                             std::to_string(cfg.v) + "], got " + shape_str(s));
        const int64_t b = s[0], t = s[2], v = s[3];
        // normalize each (channel, joint) pair over the batch and time
        Tensor<T> h = permute(x, {0, 1, 3, 2});  // [B, C, V, T]
        h = reshape(h, {b, cfg.c_in * v, t, int64_t(1)});
        h = data_bn.forward(h, training);
        h = permute(reshape(h, {b, static_cast<int64_t>(cfg.c_in), v, t}), {0, 1, 3, 2});
        if (trace) trace->stages.assign(stages.size(), {});
        for (size_t si = 0; si < stages.size(); ++si) {
            Stage& st = stages[si];
            for (auto& blk : st.stgcs) h = blk.forward(h, epoch, training);
            Tensor<T> res = st.has_dstt_residual ? st.dstt_residual.forward(h) : h;
            Tensor<T> d =
                st.dstt.forward(h, training, rng, trace ? &trace->stages[si] : nullptr);
            h = add(d, res);
        }
        Tensor<T> pooled = mean_axes(h, {2, 3});  // [B, C_e]
        if (training && cfg.head_dropout > 0.0) {
            if (!rng) throw UsageError("head dropout needs an rng in training mode");
            pooled = dropout(pooled, cfg.head_dropout, training, *rng);
        }
        return head.forward(pooled);
    }

    template <typename F>
    void visit_params(F&& fn) {
        data_bn.visit_params("data_bn", fn);
        for (size_t si = 0; si < stages.size(); ++si) {
            const std::string sp = "stage" + std::to_string(si);
            for (size_t bi = 0; bi < stages[si].stgcs.size(); ++bi)
                stages[si].stgcs[bi].visit_params(sp + ".stgc" + std::to_string(bi), fn);
            stages[si].dstt.visit_params(sp + ".dstt", fn);
            if (stages[si].has_dstt_residual)
                stages[si].dstt_residual.visit_params(sp + ".dstt_residual", fn);
        }
        head.visit_params("head", fn);
    }

    template <typename F>
    void visit_buffers(F&& fn) {
        data_bn.visit_buffers("data_bn", fn);
        for (size_t si = 0; si < stages.size(); ++si) {
            const std::string sp = "stage" + std::to_string(si);
            for (size_t bi = 0; bi < stages[si].stgcs.size(); ++bi)
                stages[si].stgcs[bi].visit_buffers(sp + ".stgc" + std::to_string(bi), fn);
        }
    }

    // Runtime enumeration of learnable scalars.
    int64_t param_count() {
        int64_t total = 0;
        visit_params([&](const std::string&, Tensor<T>& t, bool) { total += t.numel(); });
        return total;
    }
};

// ---------------------------------------------------------------------------
// Checkpoint: JSON manifest + little-endian IEEE-754 buffer blob
// ---------------------------------------------------------------------------

inline constexpr char kCkptMagic[8] = {'H', 'G', 'C', 'T', 'C', 'K', 'P', 'T'};
inline constexpr int kCkptVersion = 1;

struct CheckpointMeta {
    int epoch = 0;
    uint64_t seed = 0;
};

namespace detail {
nlohmann::json model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json graph_json(const SkeletonGraph& g);
SkeletonGraph graph_from_json(const nlohmann::json& j);
}  // namespace detail

template <typename T>
void save_checkpoint(HgctModel<T>& model, const std::string& path, const CheckpointMeta& meta) {
    nlohmann::json manifest;
    manifest["version"] = kCkptVersion;
    manifest["dtype"] = dtype_name(dtype_of<T>());
    manifest["model"] = detail::model_config_json(model.cfg);
    manifest["graph"] = detail::graph_json(model.graph);
    manifest["meta"] = {{"epoch", meta.epoch}, {"seed", meta.seed}};

    std::vector<std::pair<std::string, Tensor<T>*>> entries;
    model.visit_params([&](const std::string& n, Tensor<T>& t, bool) { entries.push_back({n, &t}); });
    model.visit_buffers([&](const std::string& n, Tensor<T>& t) { entries.push_back({n, &t}); });

    auto tensors = nlohmann::json::array();
    uint64_t offset = 0;
    for (auto& [name, tp] : entries) {
        nlohmann::json e;
        e["name"] = name;
        e["dtype"] = dtype_name(dtype_of<T>());
        e["shape"] = tp->shape();
        e["offset"] = offset;
        e["nbytes"] = static_cast<uint64_t>(tp->numel()) * sizeof(T);
        tensors.push_back(std::move(e));
        offset += static_cast<uint64_t>(tp->numel()) * sizeof(T);
    }
    manifest["tensors"] = std::move(tensors);

    const std::string header = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kCkptMagic, 8);
    const uint64_t hlen = header.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (auto& [name, tp] : entries)
        out.write(reinterpret_cast<const char*>(tp->values().data()),
                  static_cast<std::streamsize>(tp->numel() * sizeof(T)));
    if (!out) throw IoError("checkpoint write failed: " + path);
}

template <typename T>
HgctModel<T> load_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr,
                             const ModelConfig* expected_cfg = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path);
    uint64_t hlen = 0;
    if (!in.read(reinterpret_cast<char*>(&hlen), 8)) throw IoError("truncated checkpoint header");
    std::string header(hlen, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(hlen)))
        throw IoError("truncated checkpoint header");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad checkpoint manifest: ") + e.what());
    }
    if (manifest.value("version", -1) != kCkptVersion)
        throw IoError("unsupported checkpoint version");
    if (manifest.value("dtype", "") != dtype_name(dtype_of<T>()))
        throw IoError("checkpoint dtype " + manifest.value("dtype", "?") +
                      " does not match requested " + dtype_name(dtype_of<T>()));

    const ModelConfig cfg = detail::model_config_from_json(manifest.at("model"));
    if (expected_cfg) {
        if (expected_cfg->v != cfg.v || expected_cfg->c_in != cfg.c_in ||
            expected_cfg->num_classes != cfg.num_classes)
            throw ShapeError("checkpoint model geometry differs from the requested config");
    }
    const SkeletonGraph graph = detail::graph_from_json(manifest.at("graph"));
    Rng rng(0);
    HgctModel<T> model = HgctModel<T>::make(cfg, graph, rng);

    std::map<std::string, Tensor<T>*> slots;
    model.visit_params([&](const std::string& n, Tensor<T>& t, bool) {
        if (!slots.emplace(n, &t).second) throw Error("duplicate parameter name: " + n);
    });
    model.visit_buffers([&](const std::string& n, Tensor<T>& t) {
        if (!slots.emplace(n, &t).second) throw Error("duplicate buffer name: " + n);
    });

    const std::streampos blob_start = in.tellg();
    size_t loaded = 0;
    for (const auto& e : manifest.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        auto it = slots.find(name);
        if (it == slots.end()) throw IoError("checkpoint tensor has no slot in model: " + name);
        Tensor<T>* tp = it->second;
        const Shape shape = e.at("shape").get<Shape>();
        if (shape != tp->shape())
            throw ShapeError("checkpoint tensor " + name + " shape " + shape_str(shape) +
                             " != model " + shape_str(tp->shape()));
        const uint64_t off = e.at("offset").get<uint64_t>();
        const uint64_t nbytes = e.at("nbytes").get<uint64_t>();
        if (nbytes != static_cast<uint64_t>(tp->numel()) * sizeof(T))
            throw IoError("checkpoint tensor " + name + " byte count mismatch");
        in.seekg(blob_start + static_cast<std::streamoff>(off));
        if (!in.read(reinterpret_cast<char*>(tp->data().data()),
                     static_cast<std::streamsize>(nbytes)))
            throw IoError("truncated checkpoint blob at tensor " + name);
        ++loaded;
    }
    if (loaded != slots.size())
        throw IoError("checkpoint is missing " + std::to_string(slots.size() - loaded) +
                      " model tensors");
    if (meta_out) {
        meta_out->epoch = manifest["meta"].value("epoch", 0);
        meta_out->seed = manifest["meta"].value("seed", uint64_t(0));
    }
    return model;
}

// ---------------------------------------------------------------------------
// Feature-response dump
// ---------------------------------------------------------------------------

struct FeatureRecord {
    int stage;
    std::string kind;  // spatial | temporal | block_output
    int index;
    double response;
};

// Per-stage responses: mean channel L2 norm of the disentangled streams per
// joint (spatial) and per frame (temporal), plus the per-joint norms of the
// stage output; each (stage, kind) series is normalized so its max is 1.
template <typename T>
std::vector<FeatureRecord> feature_responses(HgctModel<T>& model, const Tensor<T>& batch) {
    NoGradGuard ng;
    ForwardTrace<T> trace;
    model.forward(batch, /*epoch=*/1 << 20, /*training=*/false, nullptr, &trace);
    std::vector<FeatureRecord> records;
    auto channel_norm_profile = [](const Tensor<T>& f, bool over_joints) {
        // f: [B, C, T, V]
        const Shape& s = f.shape();
        const int64_t b = s[0], c = s[1], t = s[2], v = s[3];
        const int64_t len = over_joints ? v : t;
        std::vector<double> r(static_cast<size_t>(len), 0.0);
        const T* p = f.values().data();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ti = 0; ti < t; ++ti)
                for (int64_t vi = 0; vi < v; ++vi) {
                    double sq = 0;
                    for (int64_t ci = 0; ci < c; ++ci) {
                        const double x = p[((bi * c + ci) * t + ti) * v + vi];
                        sq += x * x;
                    }
                    r[static_cast<size_t>(over_joints ? vi : ti)] += std::sqrt(sq);
                }
        const double count = static_cast<double>(over_joints ? b * t : b * v);
        for (double& x : r) x /= count;
        return r;
    };
    auto append = [&](int stage, const std::string& kind, std::vector<double> r) {
        double mx = 0;
        for (double x : r) mx = std::max(mx, x);
        if (mx > 0)
            for (double& x : r) x /= mx;
        for (size_t i = 0; i < r.size(); ++i)
            records.push_back({stage, kind, static_cast<int>(i), r[i]});
    };
    for (size_t si = 0; si < trace.stages.size(); ++si) {
        const auto& st = trace.stages[si];
        append(static_cast<int>(si), "spatial", channel_norm_profile(st.f_spatial, true));
        append(static_cast<int>(si), "temporal", channel_norm_profile(st.f_temporal, false));
        append(static_cast<int>(si), "block_output", channel_norm_profile(st.output, true));
    }
    return records;
}

void write_feature_csv(const std::vector<FeatureRecord>& records, const std::string& path);

}  // namespace hgct
