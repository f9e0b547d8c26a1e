#include "hgct/train.hpp"

#include <sstream>

#include <json.hpp>

namespace hgct {

void write_scores_csv(const EvalResult& res, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write scores: " + path);
    out << "sample,label";
    for (int j = 0; j < res.classes; ++j) out << ",score" << j;
    out << "\n";
    char buf[64];
    const size_t n = res.labels.size();
    for (size_t i = 0; i < n; ++i) {
        out << i << "," << res.labels[i];
        for (int j = 0; j < res.classes; ++j) {
            std::snprintf(buf, sizeof(buf), "%.9g",
                          res.scores[i * static_cast<size_t>(res.classes) + j]);
            out << "," << buf;
        }
        out << "\n";
    }
    if (!out) throw IoError("scores write failed: " + path);
}

EvalResult read_scores_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open scores: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ": empty scores file");
    int classes = 0;
    {
        std::stringstream ss(line);
        std::string col;
        int ncol = 0;
        while (std::getline(ss, col, ',')) ++ncol;
        classes = ncol - 2;
        if (classes < 1) throw ParseError(path + ": scores header needs score columns");
    }
    EvalResult res;
    res.classes = classes;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string col;
        std::vector<std::string> cols;
        while (std::getline(ss, col, ',')) cols.push_back(col);
        if (static_cast<int>(cols.size()) != classes + 2)
            throw ParseError(path + ":" + std::to_string(lineno) + ": bad column count");
        res.labels.push_back(std::stoi(cols[1]));
        for (int j = 0; j < classes; ++j)
            res.scores.push_back(std::stod(cols[static_cast<size_t>(2 + j)]));
    }
    // recompute accuracy from the stored scores
    int64_t hit = 0;
    for (size_t i = 0; i < res.labels.size(); ++i) {
        int best = 0;
        for (int j = 1; j < classes; ++j)
            if (res.scores[i * static_cast<size_t>(classes) + j] >
                res.scores[i * static_cast<size_t>(classes) + best])
                best = j;
        if (best == res.labels[i]) ++hit;
    }
    res.accuracy =
        res.labels.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(res.labels.size());
    return res;
}

EvalResult fuse_scores(const std::vector<EvalResult>& streams, const std::vector<double>& weights) {
    if (streams.empty()) throw UsageError("fuse_scores needs at least one stream");
    const size_t n = streams[0].labels.size();
    const int k = streams[0].classes;
    std::vector<double> w = weights;
    if (w.empty()) w.assign(streams.size(), 1.0);
    if (w.size() != streams.size()) throw UsageError("fuse_scores weight count mismatch");
    double wsum = 0;
    for (double x : w) {
        if (x < 0) throw UsageError("fuse_scores weights must be non-negative");
        wsum += x;
    }
    if (wsum <= 0) throw UsageError("fuse_scores weights sum to zero");
    for (const auto& s : streams) {
        if (s.labels.size() != n || s.classes != k)
            throw ShapeError("fuse_scores streams have mismatched shapes");
        if (s.labels != streams[0].labels)
            throw ShapeError("fuse_scores streams have mismatched sample order");
    }
    EvalResult fused;
    fused.classes = k;
    fused.labels = streams[0].labels;
    fused.scores.assign(n * static_cast<size_t>(k), 0.0);
    for (size_t si = 0; si < streams.size(); ++si)
        for (size_t i = 0; i < fused.scores.size(); ++i)
            fused.scores[i] += w[si] / wsum * streams[si].scores[i];
    int64_t hit = 0;
    for (size_t i = 0; i < n; ++i) {
        int best = 0;
        for (int j = 1; j < k; ++j)
            if (fused.scores[i * static_cast<size_t>(k) + j] >
                fused.scores[i * static_cast<size_t>(k) + best])
                best = j;
        if (best == fused.labels[i]) ++hit;
    }
    fused.accuracy = n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
    return fused;
}

void write_report_json(const RunReport& r, const std::string& path) {
    nlohmann::json j;
    j["epochs_run"] = r.epochs_run;
    j["early_stopped"] = r.early_stopped;
    j["wall_seconds"] = r.wall_seconds;
    j["final_test_accuracy"] = r.final_test_accuracy;
    j["checkpoint"] = r.checkpoint_path;
    auto arr = nlohmann::json::array();
    for (const auto& e : r.epochs)
        arr.push_back({{"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"train_accuracy", e.train_accuracy},
                       {"test_accuracy", e.test_accuracy},
                       {"lr", e.lr}});
    j["epochs"] = arr;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path);
    out << j.dump(2) << "\n";
}

void write_report_csv(const RunReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path);
    out << "epoch,train_loss,train_accuracy,test_accuracy,lr\n";
    char buf[160];
    for (const auto& e : r.epochs) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss,
                      e.train_accuracy, e.test_accuracy, e.lr);
        out << buf;
    }
}

AblationAxis ablation_axis_from_name(const std::string& s) {
    if (s == "topology") return AblationAxis::Topology;
    if (s == "alpha") return AblationAxis::Alpha;
    if (s == "gamma") return AblationAxis::Gamma;
    if (s == "positional") return AblationAxis::Positional;
    throw ConfigError("unknown ablation axis: " + s +
                      " (expected topology|alpha|gamma|positional)");
}

const char* ablation_axis_name(AblationAxis a) {
    switch (a) {
        case AblationAxis::Topology: return "topology";
        case AblationAxis::Alpha: return "alpha";
        case AblationAxis::Gamma: return "gamma";
        case AblationAxis::Positional: return "positional";
    }
    return "?";
}

std::vector<ModelConfig> ablation_configs(AblationAxis axis, const ModelConfig& base,
                                          std::vector<std::string>* settings) {
    std::vector<ModelConfig> cfgs;
    std::vector<std::string> names;
    switch (axis) {
        case AblationAxis::Topology:
            for (TopologyMode m :
                 {TopologyMode::Fixed, TopologyMode::Learnable, TopologyMode::LearnableScaled}) {
                ModelConfig c = base;
                c.topology = m;
                cfgs.push_back(c);
                names.push_back(topology_mode_name(m));
            }
            break;
        case AblationAxis::Alpha:
            for (double a : {0.5, 0.25, 0.125}) {
                ModelConfig c = base;
                c.dstt.alpha = a;
                // keep head counts valid when the stream widths change
                c.dstt.s_heads = largest_divisor_leq(c.dstt.c_s(), base.dstt.s_heads);
                c.dstt.t_heads = largest_divisor_leq(c.dstt.c_t(), base.dstt.t_heads);
                cfgs.push_back(c);
                char buf[16];
                std::snprintf(buf, sizeof(buf), "1/%d", static_cast<int>(1.0 / a + 0.5));
                names.push_back(buf);
            }
            break;
        case AblationAxis::Gamma:
            for (int g : {1, 2, 3, 4}) {
                ModelConfig c = base;
                c.dstt.gamma = g;
                cfgs.push_back(c);
                names.push_back(std::to_string(g));
            }
            break;
        case AblationAxis::Positional: {
            const std::pair<bool, bool> combos[4] = {
                {false, false}, {false, true}, {true, false}, {true, true}};
            const char* labels[4] = {"none", "frame-order", "joint-type",
                                     "joint-type+frame-order"};
            for (int i = 0; i < 4; ++i) {
                ModelConfig c = base;
                c.dstt.use_joint_type = combos[i].first;
                c.dstt.use_frame_order = combos[i].second;
                cfgs.push_back(c);
                names.push_back(labels[i]);
            }
            break;
        }
    }
    if (settings) *settings = names;
    return cfgs;
}

void write_ablation_json(AblationAxis axis, const std::vector<AblationRow>& rows,
                         const std::string& path) {
    nlohmann::json j;
    j["axis"] = ablation_axis_name(axis);
    auto arr = nlohmann::json::array();
    for (const auto& r : rows)
        arr.push_back({{"setting", r.setting}, {"params", r.params}, {"accuracy", r.accuracy}});
    j["rows"] = arr;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write ablation table: " + path);
    out << j.dump(2) << "\n";
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write ablation table: " + path);
    out << "setting,params,accuracy\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.9g", r.accuracy);
        out << r.setting << "," << r.params << "," << buf << "\n";
    }
}

}  // namespace hgct
