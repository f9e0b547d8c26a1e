#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "hgct/train.hpp"

using namespace hgct;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.stage_channels = {8, 8, 8};
    cfg.stgc_blocks_per_stage = 1;
    cfg.num_classes = 8;
    cfg.v = 25;
    cfg.c_in = 3;
    cfg.dstt.c_e = 8;
    cfg.dstt.alpha = 0.25;
    cfg.dstt.s_heads = 2;
    cfg.dstt.t_heads = 2;
    cfg.dstt.gamma = 2;
    cfg.freeze_epochs = 1;
    return cfg;
}

TrainConfig tiny_train(int epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 8;
    t.frames = 12;
    t.warmup_epochs = 1;
    t.milestones = {100, 200};
    t.seed = 5;
    return t;
}

Dataset tiny_data(int per_class_train = 2, int per_class_test = 1) {
    SynthSpec spec;
    spec.per_class_train = per_class_train;
    spec.per_class_test = per_class_test;
    spec.t = 16;
    spec.seed = 9;
    return synth_dataset(spec);
}

}  // namespace

TEST_CASE("lr schedule") {
    TrainConfig cfg;  // lr0 = 0.05, warmup 5, milestones {40, 50}, decay 0.1
    const int64_t spe = 100;
    SUBCASE("published values at epochs 10, 45, 55") {
        CHECK(lr_at(10 * spe, spe, cfg) == doctest::Approx(0.05).epsilon(1e-12));
        CHECK(lr_at(45 * spe, spe, cfg) == doctest::Approx(0.005).epsilon(1e-12));
        CHECK(lr_at(55 * spe, spe, cfg) == doctest::Approx(0.0005).epsilon(1e-12));
    }
    SUBCASE("mid-warmup hits half the peak within a step quantum") {
        const int64_t step = 5 * spe / 2;
        CHECK(std::abs(lr_at(step, spe, cfg) - 0.025) <= 0.05 / (5 * spe) + 1e-12);
    }
    SUBCASE("warmup starts near zero and is monotone") {
        CHECK(lr_at(0, spe, cfg) == doctest::Approx(0.05 / (5 * spe)));
        for (int64_t s = 1; s < 5 * spe; ++s) CHECK(lr_at(s, spe, cfg) > lr_at(s - 1, spe, cfg));
    }
    SUBCASE("piecewise-constant after warmup with drops exactly at milestones") {
        CHECK(lr_at(40 * spe - 1, spe, cfg) == doctest::Approx(0.05));
        CHECK(lr_at(40 * spe, spe, cfg) == doctest::Approx(0.005));
        CHECK(lr_at(50 * spe - 1, spe, cfg) == doctest::Approx(0.005));
        CHECK(lr_at(50 * spe, spe, cfg) == doctest::Approx(0.0005));
    }
}

TEST_CASE("label smoothed cross entropy") {
    SUBCASE("eps=0 uniform logits K=2 gives ln 2") {
        auto logits = Tensor<double>::from_data({1, 2}, {0.3, 0.3});
        CHECK(label_smoothed_ce(logits, {0}, 0.0).item() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("uniform logits make the loss label-independent") {
        auto logits = Tensor<double>::from_data({1, 4}, {1.1, 1.1, 1.1, 1.1});
        for (int label = 0; label < 4; ++label)
            CHECK(label_smoothed_ce(logits, {label}, 0.1).item() ==
                  doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("closed form for eps=0.1, K=2, logits [ln2, 0], label 0") {
        auto logits = Tensor<double>::from_data({1, 2}, {std::log(2.0), 0.0});
        const double expect = -(0.95 * std::log(2.0 / 3.0) + 0.05 * std::log(1.0 / 3.0));
        CHECK(label_smoothed_ce(logits, {0}, 0.1).item() ==
              doctest::Approx(expect).epsilon(1e-9));
        CHECK(std::abs(label_smoothed_ce(logits, {0}, 0.1).item() - 0.4402) < 1e-4);
    }
    SUBCASE("eps=0 equals plain cross entropy within 1e-7") {
        Rng rng(3);
        auto logits = Tensor<double>::randn({4, 6}, rng);
        std::vector<int> labels{1, 0, 5, 3};
        // reference: -log softmax at the target, averaged
        double ref = 0;
        for (int i = 0; i < 4; ++i) {
            double mx = -1e300, z = 0;
            for (int j = 0; j < 6; ++j) mx = std::max(mx, logits.values()[i * 6 + j]);
            for (int j = 0; j < 6; ++j) z += std::exp(logits.values()[i * 6 + j] - mx);
            ref -= logits.values()[i * 6 + labels[static_cast<size_t>(i)]] - mx - std::log(z);
        }
        ref /= 4;
        CHECK(std::abs(label_smoothed_ce(logits, labels, 0.0).item() - ref) < 1e-7);
    }
    SUBCASE("label out of range rejected") {
        auto logits = Tensor<double>::from_data({1, 2}, {0.0, 0.0});
        CHECK_THROWS_AS(label_smoothed_ce(logits, {2}, 0.1), Error);
    }
    SUBCASE("gradient flows") {
        Rng rng(4);
        auto logits = Tensor<double>::randn({3, 5}, rng).set_requires_grad(true);
        label_smoothed_ce(logits, {0, 2, 4}, 0.1).backward();
        CHECK(logits.has_grad());
    }
}

TEST_CASE("sgd step") {
    auto cfg = tiny_model();
    auto graph = SkeletonGraph::ntu25();
    SUBCASE("vanilla gradient descent") {
        Rng rng(1);
        auto model = HgctModel<double>::make(cfg, graph, rng);
        SgdOptimizer<double> opt(model, 0.0, 0.0);
        // take the head weight as the probe
        const double before = model.head.weight.values()[0];
        Tensor<double> x = Tensor<double>::randn({2, 3, 8, 25}, rng);
        sum_all(model.forward(x, 5, true)).backward();
        const double g = model.head.weight.grad()[0];
        opt.step(0.1);
        CHECK(model.head.weight.values()[0] == doctest::Approx(before - 0.1 * g).epsilon(1e-12));
    }
    SUBCASE("two momentum steps with constant gradient displace by lr*g*2.9") {
        Rng rng(2);
        auto model = HgctModel<double>::make(cfg, graph, rng);
        SgdOptimizer<double> opt(model, 0.9, 0.0);
        auto& w = model.head.bias;
        const double b0 = w.values()[0];
        auto drive = [&]() {
            // puts gradient 1 on coordinate 0, 0 elsewhere
            sum_all(narrow(mul_scalar(w, 1.0), 0, 0, 1)).backward();
        };
        drive();
        opt.step(0.01);  // v = 1, p -= 0.01
        opt.zero_grad();
        drive();
        opt.step(0.01);  // v = 0.9 + 1 = 1.9, p -= 0.019
        CHECK(w.values()[0] == doctest::Approx(b0 - 0.01 * (1.0 + 1.9)).epsilon(1e-12));
    }
    SUBCASE("lr = 0 leaves parameters bit-identical") {
        Rng rng(3);
        auto model = HgctModel<double>::make(cfg, graph, rng);
        SgdOptimizer<double> opt(model, 0.9, 0.0002);
        std::vector<double> before;
        model.visit_params([&](const std::string&, Tensor<double>& t, bool) {
            before.insert(before.end(), t.values().begin(), t.values().end());
        });
        Tensor<double> x = Tensor<double>::randn({2, 3, 8, 25}, rng);
        sum_all(model.forward(x, 5, true)).backward();
        opt.step(0.0);
        std::vector<double> after;
        model.visit_params([&](const std::string&, Tensor<double>& t, bool) {
            after.insert(after.end(), t.values().begin(), t.values().end());
        });
        CHECK(before == after);
    }
    SUBCASE("frozen adjacency receives no update") {
        Rng rng(4);
        ModelConfig fcfg = tiny_model();
        fcfg.freeze_epochs = 5;
        fcfg.topology = TopologyMode::LearnableScaled;
        auto model = HgctModel<double>::make(fcfg, graph, rng);
        SgdOptimizer<double> opt(model, 0.9, 0.0002);
        auto before = std::vector<double>(
            model.stages[0].stgcs[0].adjacency.learned[0].values().begin(),
            model.stages[0].stgcs[0].adjacency.learned[0].values().end());
        Tensor<double> x = Tensor<double>::randn({2, 3, 8, 25}, rng);
        // epoch 0 < freeze_epochs: adjacency is detached
        label_smoothed_ce(model.forward(x, 0, true), {1, 2}, 0.1).backward();
        opt.step(0.05);
        auto after = std::vector<double>(
            model.stages[0].stgcs[0].adjacency.learned[0].values().begin(),
            model.stages[0].stgcs[0].adjacency.learned[0].values().end());
        CHECK(before == after);  // bit-identical through the frozen window
        // lambda still updates (always trainable)
        CHECK(model.stages[0].stgcs[0].adjacency.lambda.values()[0] != 1.0);
        // past the freeze the matrices move
        opt.zero_grad();
        label_smoothed_ce(model.forward(x, 5, true), {1, 2}, 0.1).backward();
        opt.step(0.05);
        auto after2 = std::vector<double>(
            model.stages[0].stgcs[0].adjacency.learned[0].values().begin(),
            model.stages[0].stgcs[0].adjacency.learned[0].values().end());
        CHECK(after2 != after);
    }
}

TEST_CASE("evaluate") {
    SUBCASE("argmax invariance under per-row positive affine transforms") {
        // evaluate() reduces to argmax of softmax scores; affine transforms of
        // a logit row never change the argmax
        Rng rng(5);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> row(6);
            for (double& x : row) x = rng.gauss();
            const double a = 0.1 + 3.0 * rng.uniform01();
            const double b = rng.gauss();
            int best1 = 0, best2 = 0;
            for (int j = 1; j < 6; ++j) {
                if (row[j] > row[best1]) best1 = j;
                if (a * row[j] + b > a * row[best2] + b) best2 = j;
            }
            CHECK(best1 == best2);
        }
    }
    SUBCASE("accuracy on a tiny split") {
        auto data = tiny_data();
        Rng rng(6);
        auto model = HgctModel<float>::make(tiny_model(), SkeletonGraph::ntu25(), rng);
        auto res = evaluate(model, data.test, SkeletonGraph::ntu25(), Modality::Joint, 12, 4);
        CHECK(res.labels.size() == data.test.samples.size());
        CHECK(res.scores.size() == data.test.samples.size() * 8);
        CHECK(res.accuracy >= 0.0);
        CHECK(res.accuracy <= 1.0);
        // scores are valid distributions
        for (size_t i = 0; i < res.labels.size(); ++i) {
            double s = 0;
            for (int j = 0; j < 8; ++j) s += res.scores[i * 8 + j];
            CHECK(std::abs(s - 1.0) < 1e-5);
        }
    }
}

TEST_CASE("fuse_scores") {
    EvalResult a;
    a.classes = 2;
    a.labels = {0, 1, 0, 1};
    a.scores = {0.9, 0.1, 0.2, 0.8, 0.4, 0.6, 0.7, 0.3};  // acc 0.5
    int hit = 0;
    for (int i = 0; i < 4; ++i)
        if ((a.scores[i * 2] > a.scores[i * 2 + 1] ? 0 : 1) == a.labels[static_cast<size_t>(i)]) ++hit;
    a.accuracy = hit / 4.0;
    SUBCASE("fusing a set with itself is idempotent") {
        auto f = fuse_scores({a, a});
        CHECK(f.accuracy == doctest::Approx(a.accuracy));
        for (size_t i = 0; i < a.scores.size(); ++i)
            CHECK(f.scores[i] == doctest::Approx(a.scores[i]).epsilon(1e-12));
    }
    SUBCASE("weights (1, 0) reproduce the first stream") {
        EvalResult b = a;
        for (double& x : b.scores) x = 0.5;
        auto f = fuse_scores({a, b}, {1.0, 0.0});
        for (size_t i = 0; i < a.scores.size(); ++i)
            CHECK(f.scores[i] == doctest::Approx(a.scores[i]).epsilon(1e-12));
    }
    SUBCASE("complementary errors fuse to perfect accuracy") {
        // stream 1 confidently right on samples {0,1}, mildly wrong on {2,3};
        // stream 2 the reverse
        EvalResult s1, s2;
        s1.classes = s2.classes = 2;
        s1.labels = s2.labels = {0, 1, 0, 1};
        s1.scores = {0.99, 0.01, 0.01, 0.99, 0.45, 0.55, 0.55, 0.45};
        s2.scores = {0.55, 0.45, 0.45, 0.55, 0.99, 0.01, 0.01, 0.99};
        auto f = fuse_scores({s1, s2});
        CHECK(f.accuracy == 1.0);
        // fused rows remain distributions
        for (int i = 0; i < 4; ++i)
            CHECK(std::abs(f.scores[i * 2] + f.scores[i * 2 + 1] - 1.0) < 1e-6);
    }
    SUBCASE("mismatched streams rejected") {
        EvalResult b = a;
        b.labels = {0, 1, 1, 0};
        CHECK_THROWS_AS(fuse_scores({a, b}), ShapeError);
    }
}

TEST_CASE("training smoke and determinism") {
    auto data = tiny_data();
    auto mcfg = tiny_model();
    SUBCASE("one epoch completes with finite loss") {
        auto out = train<float>(mcfg, tiny_train(1), data, SkeletonGraph::ntu25(),
                                Modality::Joint, "", false);
        REQUIRE(out.report.epochs.size() == 1);
        CHECK(std::isfinite(out.report.epochs[0].train_loss));
    }
    SUBCASE("fixed seed reproduces the loss trace bit-identically (f64)") {
        auto r1 = train<double>(mcfg, tiny_train(2), data, SkeletonGraph::ntu25(),
                                Modality::Joint, "", false);
        auto r2 = train<double>(mcfg, tiny_train(2), data, SkeletonGraph::ntu25(),
                                Modality::Joint, "", false);
        REQUIRE(r1.report.epochs.size() == r2.report.epochs.size());
        for (size_t i = 0; i < r1.report.epochs.size(); ++i) {
            CHECK(r1.report.epochs[i].train_loss == r2.report.epochs[i].train_loss);
            CHECK(r1.report.epochs[i].test_accuracy == r2.report.epochs[i].test_accuracy);
        }
    }
    SUBCASE("run artifacts are written") {
        const auto dir = fs::temp_directory_path() / "hgct_train_run";
        fs::remove_all(dir);
        auto out = train<float>(mcfg, tiny_train(1), data, SkeletonGraph::ntu25(),
                                Modality::Joint, dir.string(), false);
        CHECK(fs::exists(dir / "checkpoint.ckpt"));
        CHECK(fs::exists(dir / "report.json"));
        CHECK(fs::exists(dir / "report.csv"));
        CHECK(fs::exists(dir / "scores.csv"));
        auto scores = read_scores_csv((dir / "scores.csv").string());
        CHECK(scores.labels.size() == data.test.samples.size());
        CHECK(scores.accuracy == doctest::Approx(out.final_eval.accuracy).epsilon(1e-6));
    }
}

TEST_CASE("modalities feed the trainer") {
    auto data = tiny_data();
    for (Modality m : {Modality::Bone, Modality::JointMotion, Modality::BoneMotion}) {
        CAPTURE(modality_name(m));
        auto out = train<float>(tiny_model(), tiny_train(1), data, SkeletonGraph::ntu25(), m,
                                "", false);
        CHECK(std::isfinite(out.report.epochs[0].train_loss));
    }
}

TEST_CASE("ablation configs enumerate the published settings") {
    ModelConfig base;  // published defaults
    SUBCASE("topology axis has three modes") {
        std::vector<std::string> names;
        auto cfgs = ablation_configs(AblationAxis::Topology, base, &names);
        REQUIRE(cfgs.size() == 3);
        CHECK(names == std::vector<std::string>{"fixed", "learnable", "scaled"});
    }
    SUBCASE("alpha axis adjusts heads to keep the divisibility invariant") {
        std::vector<std::string> names;
        auto cfgs = ablation_configs(AblationAxis::Alpha, base, &names);
        REQUIRE(cfgs.size() == 3);
        CHECK(names == std::vector<std::string>{"1/2", "1/4", "1/8"});
        for (const auto& c : cfgs) CHECK_NOTHROW(c.validate());
        CHECK(cfgs[0].dstt.c_t() == 64);
        CHECK(cfgs[1].dstt.c_t() == 32);
        CHECK(cfgs[2].dstt.c_t() == 16);
    }
    SUBCASE("gamma axis params strictly increase") {
        std::vector<std::string> names;
        auto cfgs = ablation_configs(AblationAxis::Gamma, base, &names);
        REQUIRE(cfgs.size() == 4);
        int64_t prev = 0;
        for (const auto& c : cfgs) {
            const int64_t p = count_params(c);
            CHECK(p > prev);
            prev = p;
        }
    }
    SUBCASE("positional axis has four rows with equal params") {
        std::vector<std::string> names;
        auto cfgs = ablation_configs(AblationAxis::Positional, base, &names);
        REQUIRE(cfgs.size() == 4);
        const int64_t p0 = count_params(cfgs[0]);
        for (const auto& c : cfgs) CHECK(count_params(c) == p0);
    }
}

TEST_CASE("ablation runner trains each row on a micro task") {
    SynthSpec spec;
    spec.per_class_train = 1;
    spec.per_class_test = 1;
    spec.t = 8;
    spec.seed = 13;
    auto data = synth_dataset(spec);
    ModelConfig base = tiny_model();
    TrainConfig t = tiny_train(1);
    t.frames = 8;
    auto rows = run_ablation<float>(AblationAxis::Topology, base, t, data,
                                    SkeletonGraph::ntu25(), Modality::Joint);
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) {
        CHECK(r.params > 0);
        CHECK(r.accuracy >= 0.0);
        CHECK(r.accuracy <= 1.0);
    }
    // rows serialize
    const auto dir = fs::temp_directory_path() / "hgct_ablate";
    fs::create_directories(dir);
    write_ablation_json(AblationAxis::Topology, rows, (dir / "t.json").string());
    write_ablation_csv(rows, (dir / "t.csv").string());
    CHECK(fs::exists(dir / "t.json"));
}
