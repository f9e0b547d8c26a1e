#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hgct/gradcheck.hpp"

// Finite-difference verification of every differentiable op at randomized
// inputs, 10 seeds each, float64, tolerance 1e-4.

using namespace hgct;

namespace {

constexpr int kSeeds = 10;
constexpr double kTol = 1e-4;

// Random tensor with entries kept away from zero (for kinked ops).
Tensor<double> randn_margin(Shape shape, Rng& rng, double margin) {
    Tensor<double> t = Tensor<double>::randn(std::move(shape), rng);
    for (double& x : t.data())
        if (std::abs(x) < margin) x += x >= 0 ? margin : -margin;
    return t;
}

// Values with pairwise separation (pooling windows must not tie within h).
Tensor<double> distinct_values(Shape shape, Rng& rng) {
    Tensor<double> t(shape);
    auto d = t.data();
    std::vector<size_t> order(d.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (size_t i = 0; i < d.size(); ++i)
        d[order[i]] = 0.05 * static_cast<double>(i) + 0.001 * rng.uniform01();
    return t;
}

template <typename Fn>
void check_op(const char* name, Fn&& build) {
    double worst = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(Rng::mix(0xFD, static_cast<uint64_t>(seed)));
        worst = std::max(worst, build(rng));
    }
    INFO(name << " worst relative error " << worst);
    CHECK(worst < kTol);
}

double project_loss_check(std::vector<Tensor<double>> leaves,
                          const std::function<Tensor<double>()>& fwd, Rng& rng) {
    for (auto& l : leaves) l.set_requires_grad(true);
    Tensor<double> probe;
    auto loss = [&]() {
        Tensor<double> y = fwd();
        if (!probe.defined()) {
            Rng prng(rng.next_u64());
            probe = Tensor<double>::randn(y.shape(), prng);
        }
        return sum_all(mul(y, probe));
    };
    return finite_difference_check_many(loss, leaves);
}

}  // namespace

TEST_CASE("grad: elementwise binaries with broadcast") {
    check_op("add", [](Rng& rng) {
        auto a = Tensor<double>::randn({3, 4, 5}, rng);
        auto b = Tensor<double>::randn({4, 1}, rng);
        return project_loss_check({a, b}, [&]() { return add(a, b); }, rng);
    });
    check_op("sub", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 3}, rng);
        auto b = Tensor<double>::randn({2, 3}, rng);
        return project_loss_check({a, b}, [&]() { return sub(a, b); }, rng);
    });
    check_op("mul", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 5, 3}, rng);
        auto b = Tensor<double>::randn({1, 5, 1}, rng);
        return project_loss_check({a, b}, [&]() { return mul(a, b); }, rng);
    });
}

TEST_CASE("grad: scalar ops and activations") {
    check_op("mul_scalar", [](Rng& rng) {
        auto a = Tensor<double>::randn({4, 3}, rng);
        return project_loss_check({a}, [&]() { return mul_scalar(a, -1.7); }, rng);
    });
    check_op("add_scalar", [](Rng& rng) {
        auto a = Tensor<double>::randn({4, 3}, rng);
        return project_loss_check({a}, [&]() { return add_scalar(a, 0.3); }, rng);
    });
    check_op("relu", [](Rng& rng) {
        auto a = randn_margin({6, 5}, rng, 0.05);
        return project_loss_check({a}, [&]() { return relu(a); }, rng);
    });
    check_op("gelu", [](Rng& rng) {
        auto a = Tensor<double>::randn({6, 5}, rng);
        return project_loss_check({a}, [&]() { return gelu(a); }, rng);
    });
}

TEST_CASE("grad: shape ops") {
    check_op("reshape", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 3, 4}, rng);
        return project_loss_check({a}, [&]() { return reshape(a, {4, 3, 2}); }, rng);
    });
    check_op("permute", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 3, 4, 2}, rng);
        return project_loss_check({a}, [&]() { return permute(a, {3, 1, 0, 2}); }, rng);
    });
    check_op("concat", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 3, 4}, rng);
        auto b = Tensor<double>::randn({2, 2, 4}, rng);
        return project_loss_check({a, b}, [&]() { return concat<double>({a, b}, 1); }, rng);
    });
    check_op("narrow", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 6, 3}, rng);
        return project_loss_check({a}, [&]() { return narrow(a, 1, 2, 3); }, rng);
    });
}

TEST_CASE("grad: reductions") {
    check_op("sum_axes", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 3, 4}, rng);
        return project_loss_check({a}, [&]() { return sum_axes(a, {0, 2}); }, rng);
    });
    check_op("mean_axes", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 3, 4}, rng);
        return project_loss_check({a}, [&]() { return mean_axes(a, {1}, true); }, rng);
    });
}

TEST_CASE("grad: matmul variants") {
    check_op("matmul plain", [](Rng& rng) {
        auto a = Tensor<double>::randn({4, 3}, rng);
        auto b = Tensor<double>::randn({3, 5}, rng);
        return project_loss_check({a, b}, [&]() { return matmul(a, b); }, rng);
    });
    check_op("matmul batched broadcast", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 3, 4, 3}, rng);
        auto b = Tensor<double>::randn({1, 3, 3, 2}, rng);
        return project_loss_check({a, b}, [&]() { return matmul(a, b); }, rng);
    });
    check_op("matmul rank2 rhs", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 5, 3}, rng);
        auto b = Tensor<double>::randn({3, 4}, rng);
        return project_loss_check({a, b}, [&]() { return matmul(a, b); }, rng);
    });
    check_op("matmul trans_b", [](Rng& rng) {
        auto a = Tensor<double>::randn({2, 4, 3}, rng);
        auto b = Tensor<double>::randn({2, 5, 3}, rng);
        return project_loss_check({a, b}, [&]() { return matmul(a, b, false, true); }, rng);
    });
    check_op("matmul trans_a", [](Rng& rng) {
        auto a = Tensor<double>::randn({3, 4}, rng);
        auto b = Tensor<double>::randn({3, 5}, rng);
        return project_loss_check({a, b}, [&]() { return matmul(a, b, true, false); }, rng);
    });
}

TEST_CASE("grad: conv_tv variants") {
    check_op("conv 1x1", [](Rng& rng) {
        auto x = Tensor<double>::randn({2, 3, 4, 5}, rng);
        auto w = Tensor<double>::randn({4, 3, 1, 1}, rng);
        auto b = Tensor<double>::randn({4}, rng);
        return project_loss_check(
            {x, w, b},
            [&]() { return conv_tv<double>(x, w, std::optional(b), ConvOpts{}); }, rng);
    });
    check_op("conv 5x1 dilated padded", [](Rng& rng) {
        auto x = Tensor<double>::randn({2, 2, 9, 3}, rng);
        auto w = Tensor<double>::randn({3, 2, 5, 1}, rng);
        return project_loss_check(
            {x, w},
            [&]() { return conv_tv<double>(x, w, std::nullopt, ConvOpts{1, 4, 2, 1}); }, rng);
    });
    check_op("conv stride 2", [](Rng& rng) {
        auto x = Tensor<double>::randn({2, 2, 9, 3}, rng);
        auto w = Tensor<double>::randn({2, 2, 3, 1}, rng);
        return project_loss_check(
            {x, w},
            [&]() { return conv_tv<double>(x, w, std::nullopt, ConvOpts{2, 1, 1, 1}); }, rng);
    });
    check_op("conv grouped", [](Rng& rng) {
        auto x = Tensor<double>::randn({2, 6, 5, 2}, rng);
        auto w = Tensor<double>::randn({4, 3, 3, 1}, rng);
        auto b = Tensor<double>::randn({4}, rng);
        return project_loss_check(
            {x, w, b},
            [&]() { return conv_tv<double>(x, w, std::optional(b), ConvOpts{1, 1, 1, 2}); },
            rng);
    });
    check_op("conv depthwise", [](Rng& rng) {
        auto x = Tensor<double>::randn({2, 4, 6, 3}, rng);
        auto w = Tensor<double>::randn({4, 1, 3, 1}, rng);
        return project_loss_check(
            {x, w},
            [&]() { return conv_tv<double>(x, w, std::nullopt, ConvOpts{1, 1, 1, 4}); }, rng);
    });
}

TEST_CASE("grad: pooling") {
    check_op("max_pool_t", [](Rng& rng) {
        auto x = distinct_values({2, 2, 7, 2}, rng);
        return project_loss_check({x}, [&]() { return max_pool_t(x, 3, 1); }, rng);
    });
}

TEST_CASE("grad: softmax family") {
    check_op("softmax", [](Rng& rng) {
        auto x = Tensor<double>::randn({3, 5, 2}, rng);
        return project_loss_check({x}, [&]() { return softmax(x, 1); }, rng);
    });
    check_op("log_softmax", [](Rng& rng) {
        auto x = Tensor<double>::randn({4, 6}, rng);
        return project_loss_check({x}, [&]() { return log_softmax(x, 1); }, rng);
    });
}

TEST_CASE("grad: normalization layers") {
    check_op("layer_norm", [](Rng& rng) {
        auto x = Tensor<double>::randn({2, 5, 3}, rng);
        auto g = Tensor<double>::randn({5}, rng);
        auto b = Tensor<double>::randn({5}, rng);
        return project_loss_check({x, g, b}, [&]() { return layer_norm(x, 1, g, b); }, rng);
    });
    check_op("batch_norm train", [](Rng& rng) {
        auto x = Tensor<double>::randn({3, 4, 5, 2}, rng);
        auto g = Tensor<double>::randn({4}, rng);
        auto b = Tensor<double>::randn({4}, rng);
        Tensor<double> rm({4}, 0.0), rv({4}, 1.0);
        return project_loss_check(
            {x, g, b}, [&]() { return batch_norm(x, g, b, rm, rv, true); }, rng);
    });
    check_op("batch_norm eval", [](Rng& rng) {
        auto x = Tensor<double>::randn({3, 4, 5, 2}, rng);
        auto g = Tensor<double>::randn({4}, rng);
        auto b = Tensor<double>::randn({4}, rng);
        Tensor<double> rm = Tensor<double>::randn({4}, rng);
        Tensor<double> rv = Tensor<double>::from_data(
            {4}, {0.5, 1.5, 2.0, 0.8});
        return project_loss_check(
            {x, g, b}, [&]() { return batch_norm(x, g, b, rm, rv, false); }, rng);
    });
}

TEST_CASE("grad: dropout backward routes through the mask") {
    // dropout resamples per call, so verify against the saved mask directly
    Rng rng(3);
    auto x = Tensor<double>::randn({5, 4}, rng).set_requires_grad(true);
    Rng drop_rng(7);
    auto y = dropout(x, 0.4, true, drop_rng);
    sum_all(y).backward();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double mask = x.values()[i] != 0.0 ? y.values()[i] / x.values()[i] : 0.0;
        CHECK(x.grad()[i] == doctest::Approx(mask).epsilon(1e-12));
    }
}
