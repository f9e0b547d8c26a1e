#include "hgct/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace hgct {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

double parse_double(const std::string& key, const std::string& val) {
    // accepts plain fractions like 1/4 for readability of alpha settings
    const size_t slash = val.find('/');
    try {
        if (slash != std::string::npos) {
            const double num = std::stod(val.substr(0, slash));
            const double den = std::stod(val.substr(slash + 1));
            if (den == 0) throw std::invalid_argument("division by zero");
            return num / den;
        }
        size_t pos = 0;
        const double x = std::stod(val, &pos);
        if (pos != val.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + val + "'");
    }
}

int64_t parse_int(const std::string& key, const std::string& val) {
    try {
        size_t pos = 0;
        const long long x = std::stoll(val, &pos);
        if (pos != val.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + val + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& val) {
    if (val == "true" || val == "1" || val == "yes" || val == "on") return true;
    if (val == "false" || val == "0" || val == "no" || val == "off") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + val + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& val) {
    std::vector<int> out;
    if (trim(val).empty()) return out;
    std::stringstream ss(val);
    std::string item;
    while (std::getline(ss, item, ','))
        out.push_back(static_cast<int>(parse_int(key, trim(item))));
    return out;
}

std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

}  // namespace

KvPairs parse_config_text(const std::string& text, const std::string& origin) {
    KvPairs pairs;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) +
                              ": expected key=value, got '" + t + "'");
        pairs.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return pairs;
}

KvPairs parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

void apply_config(const KvPairs& pairs, ModelConfig& model, TrainConfig& train) {
    for (const auto& [key, val] : pairs) {
        if (key == "model.stage_channels") model.stage_channels = parse_int_list(key, val);
        else if (key == "model.stgc_blocks_per_stage")
            model.stgc_blocks_per_stage = static_cast<int>(parse_int(key, val));
        else if (key == "model.topology") model.topology = topology_mode_from_name(val);
        else if (key == "model.freeze_epochs") model.freeze_epochs = static_cast<int>(parse_int(key, val));
        else if (key == "model.num_classes") model.num_classes = static_cast<int>(parse_int(key, val));
        else if (key == "model.v") model.v = static_cast<int>(parse_int(key, val));
        else if (key == "model.c_in") model.c_in = static_cast<int>(parse_int(key, val));
        else if (key == "model.head_dropout") model.head_dropout = parse_double(key, val);
        else if (key == "model.c_e") model.dstt.c_e = static_cast<int>(parse_int(key, val));
        else if (key == "model.alpha") model.dstt.alpha = parse_double(key, val);
        else if (key == "model.s_heads") model.dstt.s_heads = static_cast<int>(parse_int(key, val));
        else if (key == "model.t_heads") model.dstt.t_heads = static_cast<int>(parse_int(key, val));
        else if (key == "model.gamma") model.dstt.gamma = static_cast<int>(parse_int(key, val));
        else if (key == "model.attn_drop") model.dstt.attn_drop = parse_double(key, val);
        else if (key == "model.ff_drop") model.dstt.ff_drop = parse_double(key, val);
        else if (key == "model.use_joint_type") model.dstt.use_joint_type = parse_bool(key, val);
        else if (key == "model.use_frame_order") model.dstt.use_frame_order = parse_bool(key, val);
        else if (key == "train.lr0") train.lr0 = parse_double(key, val);
        else if (key == "train.momentum") train.momentum = parse_double(key, val);
        else if (key == "train.weight_decay") train.weight_decay = parse_double(key, val);
        else if (key == "train.epochs") train.epochs = static_cast<int>(parse_int(key, val));
        else if (key == "train.milestones") train.milestones = parse_int_list(key, val);
        else if (key == "train.decay") train.decay = parse_double(key, val);
        else if (key == "train.warmup_epochs") train.warmup_epochs = static_cast<int>(parse_int(key, val));
        else if (key == "train.label_smoothing") train.label_smoothing = parse_double(key, val);
        else if (key == "train.batch_size") train.batch_size = static_cast<int>(parse_int(key, val));
        else if (key == "train.seed") train.seed = static_cast<uint64_t>(parse_int(key, val));
        else if (key == "train.dtype") train.dtype = dtype_from_name(val);
        else if (key == "train.frames") train.frames = static_cast<int>(parse_int(key, val));
        else if (key == "train.stop_at_test_accuracy") train.stop_at_test_accuracy = parse_double(key, val);
        else throw ConfigError("unknown config key: '" + key + "'");
    }
    model.validate();
    train.validate();
}

KvPairs resolved_config(const ModelConfig& m, const TrainConfig& t) {
    KvPairs p;
    p.emplace_back("model.stage_channels", fmt_int_list(m.stage_channels));
    p.emplace_back("model.stgc_blocks_per_stage", std::to_string(m.stgc_blocks_per_stage));
    p.emplace_back("model.topology", topology_mode_name(m.topology));
    p.emplace_back("model.freeze_epochs", std::to_string(m.freeze_epochs));
    p.emplace_back("model.num_classes", std::to_string(m.num_classes));
    p.emplace_back("model.v", std::to_string(m.v));
    p.emplace_back("model.c_in", std::to_string(m.c_in));
    p.emplace_back("model.head_dropout", fmt_double(m.head_dropout));
    p.emplace_back("model.c_e", std::to_string(m.dstt.c_e));
    p.emplace_back("model.alpha", fmt_double(m.dstt.alpha));
    p.emplace_back("model.s_heads", std::to_string(m.dstt.s_heads));
    p.emplace_back("model.t_heads", std::to_string(m.dstt.t_heads));
    p.emplace_back("model.gamma", std::to_string(m.dstt.gamma));
    p.emplace_back("model.attn_drop", fmt_double(m.dstt.attn_drop));
    p.emplace_back("model.ff_drop", fmt_double(m.dstt.ff_drop));
    p.emplace_back("model.use_joint_type", m.dstt.use_joint_type ? "true" : "false");
    p.emplace_back("model.use_frame_order", m.dstt.use_frame_order ? "true" : "false");
    p.emplace_back("train.lr0", fmt_double(t.lr0));
    p.emplace_back("train.momentum", fmt_double(t.momentum));
    p.emplace_back("train.weight_decay", fmt_double(t.weight_decay));
    p.emplace_back("train.epochs", std::to_string(t.epochs));
    p.emplace_back("train.milestones", fmt_int_list(t.milestones));
    p.emplace_back("train.decay", fmt_double(t.decay));
    p.emplace_back("train.warmup_epochs", std::to_string(t.warmup_epochs));
    p.emplace_back("train.label_smoothing", fmt_double(t.label_smoothing));
    p.emplace_back("train.batch_size", std::to_string(t.batch_size));
    p.emplace_back("train.seed", std::to_string(t.seed));
    p.emplace_back("train.dtype", t.dtype == Dtype::f32 ? "f32" : "f64");
    p.emplace_back("train.frames", std::to_string(t.frames));
    p.emplace_back("train.stop_at_test_accuracy", fmt_double(t.stop_at_test_accuracy));
    return p;
}

void write_config_file(const KvPairs& pairs, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config file: " + path);
    for (const auto& [k, v] : pairs) out << k << "=" << v << "\n";
}

int largest_divisor_leq(int c, int preferred) {
    for (int h = std::min(c, preferred); h >= 1; --h)
        if (c % h == 0) return h;
    return 1;
}

void write_manifest(const RunManifest& m, const std::string& path) {
    nlohmann::json j;
    j["command"] = m.command;
    j["tool"] = m.tool;
    j["data"] = m.data_path;
    j["out"] = m.out_dir;
    j["seed"] = m.seed;
    j["modality"] = m.modality;
    auto cfg = nlohmann::json::object();
    for (const auto& [k, v] : m.resolved) cfg[k] = v;
    j["resolved"] = cfg;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

RunManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad manifest JSON in " + path + ": " + e.what());
    }
    RunManifest m;
    m.command = j.value("command", "");
    m.tool = j.value("tool", "");
    m.data_path = j.value("data", "");
    m.out_dir = j.value("out", "");
    m.seed = j.value("seed", uint64_t(0));
    m.modality = j.value("modality", "joint");
    const nlohmann::json resolved = j.value("resolved", nlohmann::json::object());
    for (const auto& [k, v] : resolved.items()) m.resolved.emplace_back(k, v.get<std::string>());
    return m;
}

}  // namespace hgct
