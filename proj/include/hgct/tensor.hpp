#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "hgct/util.hpp"

namespace hgct {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Row-major strides.
inline std::vector<int64_t> row_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

enum class Dtype { f32, f64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "float32" : "float64"; }

inline Dtype dtype_from_name(const std::string& s) {
    if (s == "float32" || s == "f32") return Dtype::f32;
    if (s == "float64" || s == "f64") return Dtype::f64;
    throw ConfigError("unknown dtype: " + s);
}

template <typename T>
constexpr Dtype dtype_of() {
    if constexpr (std::is_same_v<T, float>) return Dtype::f32;
    else return Dtype::f64;
}

namespace detail {
inline std::atomic<uint64_t> node_seq{0};

// Forward values must stay finite on finite inputs; checked in debug builds.
template <typename T>
inline void check_finite(const std::vector<T>& v, const char* op) {
#ifndef NDEBUG
    for (T x : v) {
        if (!std::isfinite(static_cast<double>(x)))
            throw Error(std::string("non-finite value produced by op '") + op + "'");
    }
#else
    (void)v;
    (void)op;
#endif
}

inline thread_local bool grad_mode = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

// Scoped disable of graph recording (eval-mode forwards).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;          // persistent on leaves, transient on interior nodes
    bool requires_grad = false;   // user-marked leaf
    bool needs_grad = false;      // participates in a backward pass
    uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this->grad and accumulates into input grads.
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), T(0));
    }
};

// Value-semantics handle to a node in the autodiff graph. Leaves are created
// by the user (parameters, inputs); ops append interior nodes whose backward
// closures run in strict reverse creation order.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) {
        for (int64_t d : shape)
            if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
        n_ = std::make_shared<Node<T>>();
        n_->shape = std::move(shape);
        n_->values.assign(shape_numel(n_->shape), fill);
        n_->seq = detail::node_seq.fetch_add(1, std::memory_order_relaxed);
    }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t(std::move(shape));
        t.n_->values = std::move(data);
        return t;
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
        Tensor t(std::move(shape));
        for (T& x : t.n_->values) x = static_cast<T>(rng.gauss(mean, stddev));
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
        Tensor t(std::move(shape));
        for (T& x : t.n_->values) x = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(n_->shape.size()); }
    int64_t dim(int64_t i) const { return n_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(n_->values.size()); }

    std::span<const T> values() const { return n_->values; }
    std::span<T> data() { return n_->values; }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        n_->requires_grad = b;
        n_->needs_grad = b;
        return *this;
    }

    bool has_grad() const { return !n_->grad.empty(); }
    std::span<const T> grad() const {
        if (n_->grad.empty()) throw UsageError("tensor has no gradient");
        return n_->grad;
    }
    void zero_grad() { n_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
        return n_->values[0];
    }

    T at(std::initializer_list<int64_t> idx) const {
        auto st = row_strides(shape());
        int64_t off = 0;
        size_t i = 0;
        for (int64_t v : idx) off += v * st[i++];
        return n_->values[static_cast<size_t>(off)];
    }

    // New leaf with copied values and no gradient flow.
    Tensor detach() const {
        Tensor t;
        t.n_ = std::make_shared<Node<T>>();
        t.n_->shape = n_->shape;
        t.n_->values = n_->values;
        t.n_->seq = detail::node_seq.fetch_add(1, std::memory_order_relaxed);
        return t;
    }

    // Reverse-mode pass from a scalar. Leaf gradients accumulate across calls
    // until zero_grad(); interior gradients are transient.
    void backward() const {
        if (numel() != 1) throw UsageError("backward() requires a scalar loss, got " + shape_str(shape()));
        if (!n_->needs_grad)
            throw UsageError("backward() on a tensor that is not connected to any requires_grad leaf");

        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<Node<T>*> stack{n_.get()};
        seen.insert(n_.get());
        while (!stack.empty()) {
            Node<T>* nd = stack.back();
            stack.pop_back();
            order.push_back(nd);
            for (auto& in : nd->inputs)
                if (in->needs_grad && seen.insert(in.get()).second) stack.push_back(in.get());
        }
        std::sort(order.begin(), order.end(),
                  [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

        n_->ensure_grad();
        n_->grad[0] += T(1);
        for (Node<T>* nd : order) {
            if (nd->backward_fn && !nd->grad.empty()) nd->backward_fn(*nd);
            if (!nd->requires_grad) {
                nd->grad.clear();
                nd->grad.shrink_to_fit();
            }
        }
    }

    std::shared_ptr<Node<T>> node() const { return n_; }

private:
    std::shared_ptr<Node<T>> n_;

    template <typename U>
    friend Tensor<U> make_op(Shape, std::vector<U>, std::vector<Tensor<U>>,
                             std::function<void(Node<U>&)>, const char*);
};

// Appends an interior node. The backward closure is dropped when grad
// recording is off or no input needs gradients, so eval-mode forwards do not
// retain the graph.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> values, std::vector<Tensor<T>> ins,
                  std::function<void(Node<T>&)> backward, const char* opname) {
    detail::check_finite(values, opname);
    Tensor<T> out;
    out.n_ = std::make_shared<Node<T>>();
    out.n_->shape = std::move(shape);
    out.n_->values = std::move(values);
    out.n_->seq = detail::node_seq.fetch_add(1, std::memory_order_relaxed);
    if (grad_enabled()) {
        bool ng = false;
        for (const auto& in : ins) ng = ng || in.node()->needs_grad;
        if (ng) {
            out.n_->needs_grad = true;
            out.n_->inputs.reserve(ins.size());
            for (const auto& in : ins) out.n_->inputs.push_back(in.node());
            out.n_->backward_fn = std::move(backward);
        }
    }
    return out;
}

// Accumulate helper used inside backward closures.
template <typename T>
inline void accum_grad(Node<T>& n, const T* src, size_t count) {
    n.ensure_grad();
    T* dst = n.grad.data();
    for (size_t i = 0; i < count; ++i) dst[i] += src[i];
}

}  // namespace hgct
