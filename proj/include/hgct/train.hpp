#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "hgct/model.hpp"
#include "hgct/skeleton.hpp"

namespace hgct {

// ---------------------------------------------------------------------------
// Schedule and loss
// ---------------------------------------------------------------------------

// Per-step learning rate: linear warmup from lr0/(warmup_epochs*spe) to lr0,
// then step decay at the milestone epochs.
inline double lr_at(int64_t step, int64_t steps_per_epoch, const TrainConfig& cfg) {
    const int64_t warm_steps = static_cast<int64_t>(cfg.warmup_epochs) * steps_per_epoch;
    if (step < warm_steps)
        return cfg.lr0 * static_cast<double>(step + 1) / static_cast<double>(warm_steps);
    const int64_t epoch = step / steps_per_epoch;
    double lr = cfg.lr0;
    for (int m : cfg.milestones)
        if (epoch >= m) lr *= cfg.decay;
    return lr;
}

// Cross entropy against q = (1-eps)*onehot + eps/K, averaged over the batch.
template <typename T>
Tensor<T> label_smoothed_ce(const Tensor<T>& logits, const std::vector<int>& labels, double eps) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw ShapeError("logits must be [B, K]");
    const int64_t b = s[0], k = s[1];
    if (static_cast<int64_t>(labels.size()) != b) throw ShapeError("label count != batch size");
    std::vector<T> q(static_cast<size_t>(b * k), static_cast<T>(eps / static_cast<double>(k)));
    for (int64_t i = 0; i < b; ++i) {
        if (labels[i] < 0 || labels[i] >= k)
            throw Error("label " + std::to_string(labels[i]) + " out of range for K=" +
                        std::to_string(k));
        q[static_cast<size_t>(i * k + labels[i])] += static_cast<T>(1.0 - eps);
    }
    Tensor<T> target = Tensor<T>::from_data({b, k}, std::move(q));
    Tensor<T> lsm = log_softmax(logits, 1);
    return mul_scalar(sum_all(mul(target, lsm)), static_cast<T>(-1.0 / static_cast<double>(b)));
}

// ---------------------------------------------------------------------------
// SGD with momentum; decay applies to gradients (classic L2 fold-in).
// Parameters that received no gradient this step are skipped, which is what
// keeps frozen adjacency matrices bit-identical.
// ---------------------------------------------------------------------------

template <typename T>
class SgdOptimizer {
public:
    SgdOptimizer(HgctModel<T>& model, double momentum, double weight_decay)
        : momentum_(momentum), weight_decay_(weight_decay) {
        model.visit_params([&](const std::string& name, Tensor<T>& t, bool decay) {
            slots_.push_back({name, t, decay, std::vector<T>(static_cast<size_t>(t.numel()), T(0))});
        });
    }

    void step(double lr) {
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            auto g = s.param.grad();
            auto p = s.param.data();
            const T m = static_cast<T>(momentum_);
            const T wd = s.decay ? static_cast<T>(weight_decay_) : T(0);
            const T lrt = static_cast<T>(lr);
            for (size_t i = 0; i < p.size(); ++i) {
                s.velocity[i] = m * s.velocity[i] + g[i] + wd * p[i];
                p[i] -= lrt * s.velocity[i];
            }
        }
    }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    size_t size() const { return slots_.size(); }

private:
    struct Slot {
        std::string name;
        Tensor<T> param;
        bool decay;
        std::vector<T> velocity;
    };
    double momentum_, weight_decay_;
    std::vector<Slot> slots_;
};

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

// One network row per body; samples with several non-empty bodies get their
// logits averaged afterwards.
template <typename T>
struct Batch {
    Tensor<T> input;                       // [R, C, T, V]
    std::vector<int> labels;               // per sample
    std::vector<std::vector<int>> rows;    // sample -> its row indices
    bool trivial_rows = true;              // every sample is exactly one row
};

template <typename T>
Batch<T> assemble_batch(const std::vector<const SkeletonSequence*>& samples,
                        const SkeletonGraph& graph, Modality modality, int frames,
                        SampleMode mode, Rng* rng) {
    Batch<T> batch;
    std::vector<SkeletonSequence> prepped;
    std::vector<std::pair<size_t, int>> row_src;  // (prepped index, body index)
    for (const auto* sp : samples) {
        SkeletonSequence seq = resample(*sp, frames, mode, rng);
        seq = center(seq, graph);
        seq = apply_modality(seq, graph, modality);
        std::vector<int> bodies;
        for (int mi = 0; mi < seq.m; ++mi)
            if (seq.body_nonzero(mi)) bodies.push_back(mi);
        if (bodies.empty()) bodies.push_back(0);
        prepped.push_back(std::move(seq));
        std::vector<int> row_ids;
        for (int mi : bodies) {
            row_ids.push_back(static_cast<int>(row_src.size()));
            row_src.emplace_back(prepped.size() - 1, mi);
        }
        if (row_ids.size() != 1) batch.trivial_rows = false;
        batch.rows.push_back(std::move(row_ids));
        batch.labels.push_back(sp->label);
    }
    const int64_t r = static_cast<int64_t>(row_src.size());
    const int64_t c = samples.empty() ? 3 : samples[0]->c;
    const int64_t v = graph.v;
    Tensor<T> x({r, c, frames, v});
    auto xd = x.data();
    for (int64_t ri = 0; ri < r; ++ri) {
        const SkeletonSequence& seq = prepped[row_src[static_cast<size_t>(ri)].first];
        const int mi = row_src[static_cast<size_t>(ri)].second;
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t ti = 0; ti < frames; ++ti)
                for (int64_t vi = 0; vi < v; ++vi)
                    xd[((ri * c + ci) * frames + ti) * v + vi] = static_cast<T>(
                        seq.at(static_cast<int>(ci), static_cast<int>(ti), static_cast<int>(vi), mi));
    }
    batch.input = std::move(x);
    return batch;
}

// Per-sample logits; averages body rows when a sample produced several.
template <typename T>
Tensor<T> reduce_body_logits(const Tensor<T>& row_logits, const Batch<T>& batch) {
    if (batch.trivial_rows) return row_logits;
    const int64_t n = static_cast<int64_t>(batch.rows.size());
    const int64_t r = row_logits.shape()[0];
    std::vector<T> w(static_cast<size_t>(n * r), T(0));
    for (int64_t i = 0; i < n; ++i)
        for (int row : batch.rows[static_cast<size_t>(i)])
            w[static_cast<size_t>(i * r + row)] =
                static_cast<T>(1.0 / batch.rows[static_cast<size_t>(i)].size());
    return matmul(Tensor<T>::from_data({n, r}, std::move(w)), row_logits);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> per_class;        // accuracy per label
    std::vector<double> scores;           // [n, K] softmax rows
    std::vector<int> labels;
    int classes = 0;
};

template <typename T>
EvalResult evaluate(HgctModel<T>& model, const DatasetSplit& split, const SkeletonGraph& graph,
                    Modality modality, int frames, int batch_size) {
    NoGradGuard ng;
    EvalResult res;
    res.classes = model.cfg.num_classes;
    const int64_t k = model.cfg.num_classes;
    std::vector<int64_t> class_total(static_cast<size_t>(k), 0), class_hit(static_cast<size_t>(k), 0);
    int64_t hit = 0;
    for (size_t start = 0; start < split.samples.size(); start += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(split.samples.size(), start + static_cast<size_t>(batch_size));
        std::vector<const SkeletonSequence*> chunk;
        for (size_t i = start; i < end; ++i) chunk.push_back(&split.samples[i]);
        Batch<T> batch = assemble_batch<T>(chunk, graph, modality, frames, SampleMode::Eval, nullptr);
        Tensor<T> logits =
            reduce_body_logits(model.forward(batch.input, 1 << 20, false), batch);
        Tensor<T> probs = softmax(logits, 1);
        const auto pv = probs.values();
        for (size_t i = 0; i < chunk.size(); ++i) {
            int best = 0;
            for (int64_t j = 1; j < k; ++j)
                if (pv[i * k + j] > pv[i * k + best]) best = static_cast<int>(j);
            const int label = batch.labels[i];
            res.labels.push_back(label);
            for (int64_t j = 0; j < k; ++j)
                res.scores.push_back(static_cast<double>(pv[i * k + j]));
            ++class_total[static_cast<size_t>(label)];
            if (best == label) {
                ++hit;
                ++class_hit[static_cast<size_t>(label)];
            }
        }
    }
    res.accuracy = split.samples.empty()
                       ? 0.0
                       : static_cast<double>(hit) / static_cast<double>(split.samples.size());
    for (int64_t j = 0; j < k; ++j)
        res.per_class.push_back(class_total[j] ? static_cast<double>(class_hit[j]) / class_total[j]
                                               : 0.0);
    return res;
}

void write_scores_csv(const EvalResult& res, const std::string& path);
EvalResult read_scores_csv(const std::string& path);

// Mean (optionally weighted) of softmax score matrices; inputs must align.
EvalResult fuse_scores(const std::vector<EvalResult>& streams,
                       const std::vector<double>& weights = {});

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    double lr = 0.0;
};

struct RunReport {
    std::vector<EpochStats> epochs;
    int epochs_run = 0;
    bool early_stopped = false;
    double wall_seconds = 0.0;
    double final_test_accuracy = 0.0;
    std::string checkpoint_path;
};

void write_report_json(const RunReport& r, const std::string& path);
void write_report_csv(const RunReport& r, const std::string& path);

template <typename T>
struct TrainOutput {
    RunReport report;
    EvalResult final_eval;
    std::shared_ptr<HgctModel<T>> model;
};

template <typename T>
TrainOutput<T> train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                     const Dataset& data, const SkeletonGraph& graph, Modality modality,
                     const std::string& out_dir = "", bool verbose = true) {
    model_cfg.validate();
    train_cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    Rng init_rng(Rng::mix(train_cfg.seed, 0x1217));
    auto model = std::make_shared<HgctModel<T>>(HgctModel<T>::make(model_cfg, graph, init_rng));
    SgdOptimizer<T> opt(*model, train_cfg.momentum, train_cfg.weight_decay);
    Rng dropout_rng(Rng::mix(train_cfg.seed, 0xD509));

    const int64_t n = static_cast<int64_t>(data.train.samples.size());
    if (n == 0) throw Error("training split is empty");
    const int64_t spe = (n + train_cfg.batch_size - 1) / train_cfg.batch_size;

    TrainOutput<T> out;
    int64_t gstep = 0;
    std::vector<size_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        Rng shuffle_rng(Rng::mix(train_cfg.seed, 0x5AFF + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        Rng aug_rng(Rng::mix(train_cfg.seed, 0xA000 + static_cast<uint64_t>(epoch)));
        double loss_sum = 0.0;
        int64_t train_hit = 0;
        for (int64_t start = 0; start < n; start += train_cfg.batch_size) {
            const int64_t end = std::min(n, start + train_cfg.batch_size);
            std::vector<const SkeletonSequence*> chunk;
            for (int64_t i = start; i < end; ++i)
                chunk.push_back(&data.train.samples[order[static_cast<size_t>(i)]]);
            Batch<T> batch = assemble_batch<T>(chunk, graph, modality, train_cfg.frames,
                                               SampleMode::Train, &aug_rng);
            Tensor<T> logits = reduce_body_logits(
                model->forward(batch.input, epoch, true, &dropout_rng), batch);
            Tensor<T> loss = label_smoothed_ce(logits, batch.labels, train_cfg.label_smoothing);
            const double lval = static_cast<double>(loss.item());
            if (!std::isfinite(lval))
                throw Error("training aborted: non-finite loss at epoch " +
                            std::to_string(epoch) + ", step " + std::to_string(gstep));
            loss.backward();
            opt.step(lr_at(gstep, spe, train_cfg));
            opt.zero_grad();
            loss_sum += lval * static_cast<double>(end - start);
            const auto lv = logits.values();
            const int64_t k = model_cfg.num_classes;
            for (size_t i = 0; i < chunk.size(); ++i) {
                int best = 0;
                for (int64_t j = 1; j < k; ++j)
                    if (lv[i * k + j] > lv[i * k + best]) best = static_cast<int>(j);
                if (best == batch.labels[i]) ++train_hit;
            }
            ++gstep;
        }
        EvalResult ev = evaluate(*model, data.test, graph, modality, train_cfg.frames,
                                 train_cfg.batch_size);
        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_sum / static_cast<double>(n);
        st.train_accuracy = static_cast<double>(train_hit) / static_cast<double>(n);
        st.test_accuracy = ev.accuracy;
        st.lr = lr_at(gstep - 1, spe, train_cfg);
        out.report.epochs.push_back(st);
        out.report.epochs_run = epoch + 1;
        out.final_eval = std::move(ev);
        if (verbose)
            log_info("epoch " + std::to_string(epoch) + ": loss " +
                     std::to_string(st.train_loss) + ", train acc " +
                     std::to_string(st.train_accuracy) + ", test acc " +
                     std::to_string(st.test_accuracy));
        if (train_cfg.stop_at_test_accuracy > 0 &&
            st.test_accuracy >= train_cfg.stop_at_test_accuracy) {
            out.report.early_stopped = true;
            break;
        }
    }
    out.report.final_test_accuracy = out.final_eval.accuracy;
    out.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        const std::string ckpt = (std::filesystem::path(out_dir) / "checkpoint.ckpt").string();
        save_checkpoint(*model, ckpt,
                        CheckpointMeta{out.report.epochs_run, train_cfg.seed});
        out.report.checkpoint_path = ckpt;
        write_report_json(out.report, (std::filesystem::path(out_dir) / "report.json").string());
        write_report_csv(out.report, (std::filesystem::path(out_dir) / "report.csv").string());
        write_scores_csv(out.final_eval,
                         (std::filesystem::path(out_dir) / "scores.csv").string());
    }
    out.model = model;
    return out;
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

enum class AblationAxis { Topology, Alpha, Gamma, Positional };
AblationAxis ablation_axis_from_name(const std::string& s);
const char* ablation_axis_name(AblationAxis a);

struct AblationRow {
    std::string setting;
    int64_t params = 0;
    double accuracy = 0.0;
};

std::vector<ModelConfig> ablation_configs(AblationAxis axis, const ModelConfig& base,
                                          std::vector<std::string>* settings);

template <typename T>
std::vector<AblationRow> run_ablation(AblationAxis axis, const ModelConfig& base,
                                      const TrainConfig& train_cfg, const Dataset& data,
                                      const SkeletonGraph& graph, Modality modality,
                                      bool verbose = false) {
    std::vector<std::string> settings;
    const auto cfgs = ablation_configs(axis, base, &settings);
    std::vector<AblationRow> rows;
    for (size_t i = 0; i < cfgs.size(); ++i) {
        AblationRow row;
        row.setting = settings[i];
        row.params = count_params(cfgs[i]);
        auto out = train<T>(cfgs[i], train_cfg, data, graph, modality, "", verbose);
        row.accuracy = out.report.final_test_accuracy;
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_ablation_json(AblationAxis axis, const std::vector<AblationRow>& rows,
                         const std::string& path);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path);

}  // namespace hgct
