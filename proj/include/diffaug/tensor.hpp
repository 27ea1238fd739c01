// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffaug::ndgrad {

enum class Dtype { real32, real64 };

template <typename T>
constexpr Dtype dtype_of() {
    if constexpr (std::is_same_v<T, float>) return Dtype::real32;
    else return Dtype::real64;
}

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

[[noreturn]] inline void op_error(const std::string& op, const std::string& msg) {
    throw std::invalid_argument("ndgrad::" + op + ": " + msg);
}

// Define-by-run gradient recording is on unless a NoGradGuard is active on
// the current thread. Inference paths (sampling, pseudo-labeling) run under
// a guard so no graph is built.
inline thread_local int no_grad_depth = 0;

struct NoGradGuard {
    NoGradGuard() { ++no_grad_depth; }
    ~NoGradGuard() { --no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return no_grad_depth == 0; }

template <typename T>
class Tensor;

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    bool requires_grad = false;
    std::vector<T> grad;  // sized lazily during backward
    std::vector<Tensor<T>> parents;
    std::function<void(TensorNode<T>&)> backward_fn;
    const char* op = "leaf";
    uint64_t seq = 0;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

inline std::atomic<uint64_t> g_node_seq{1};

// Value-semantics handle over a shared graph node. Node values are treated
// as immutable once produced by an op; only leaf tensors (parameters, data)
// are mutated in place, and only between graph builds.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(std::move(shape), {});
    }
    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }
    static Tensor scalar(T v) { return full(Shape{}, v); }
    static Tensor from_data(Shape shape, std::vector<T> data) {
        auto node = std::make_shared<TensorNode<T>>();
        node->shape = std::move(shape);
        const int64_t n = shape_numel(node->shape);
        if (data.empty()) data.assign(size_t(n), T(0));
        if (int64_t(data.size()) != n)
            op_error("from_data", "data length " + std::to_string(data.size()) +
                                      " does not match shape " + shape_str(node->shape));
        node->value = std::move(data);
        node->seq = g_node_seq.fetch_add(1, std::memory_order_relaxed);
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return int64_t(node_->value.size()); }
    int64_t dim(size_t i) const { return node_->shape.at(i); }
    size_t rank() const { return node_->shape.size(); }
    Dtype dtype() const { return dtype_of<T>(); }

    const std::vector<T>& data() const { return node_->value; }
    // In-place mutation is reserved for leaves (parameter updates, loading).
    std::vector<T>& data_mut() { return node_->value; }

    T item() const {
        if (numel() != 1) op_error("item", "tensor " + shape_str(shape()) + " is not a scalar");
        return node_->value[0];
    }
    T at(std::initializer_list<int64_t> idx) const {
        int64_t off = 0;
        size_t k = 0;
        for (int64_t i : idx) off = off * node_->shape[k] + i, ++k;
        return node_->value[size_t(off)];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool r) {
        node_->requires_grad = r;
        return *this;
    }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    const std::vector<T>& grad() const {
        if (!has_grad()) op_error("grad", "no gradient present; call backward() first");
        return node_->grad;
    }
    // Gradient for this tensor, zeros when it did not participate in the
    // last backward pass.
    std::vector<T> grad_or_zeros() const {
        if (has_grad()) return node_->grad;
        return std::vector<T>(node_->value.size(), T(0));
    }
    void zero_grad() { node_->grad.clear(); }

    bool all_finite() const {
        for (T v : node_->value)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    // Reverse-mode sweep from a scalar output. Nodes are visited in reverse
    // creation order, which is a reverse topological order of the recorded
    // graph, each exactly once.
    void backward() const {
        if (numel() != 1)
            op_error("backward", "output must be a scalar, got shape " + shape_str(shape()));
        if (!node_->requires_grad)
            op_error("backward", "output does not require grad; nothing to differentiate");
        std::vector<TensorNode<T>*> order;
        collect(node_.get(), order);
        std::sort(order.begin(), order.end(),
                  [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->seq > b->seq; });
        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (TensorNode<T>* n : order) {
            if (n->backward_fn) {
                n->ensure_grad();
                n->backward_fn(*n);
            }
        }
    }

    TensorNode<T>* node() const { return node_.get(); }

    static Tensor adopt(std::shared_ptr<TensorNode<T>> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    static void collect(TensorNode<T>* root, std::vector<TensorNode<T>*>& out) {
        std::vector<TensorNode<T>*> stack{root};
        std::vector<TensorNode<T>*> seen;
        while (!stack.empty()) {
            TensorNode<T>* n = stack.back();
            stack.pop_back();
            if (std::find(seen.begin(), seen.end(), n) != seen.end()) continue;
            seen.push_back(n);
            out.push_back(n);
            for (const Tensor<T>& p : n->parents)
                if (p.node()->requires_grad) stack.push_back(p.node());
        }
    }

    std::shared_ptr<TensorNode<T>> node_;
};

// Builds an op node. Parents and the backward closure are only recorded when
// gradients are both enabled and needed, so inference is graph-free.
template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value,
                  std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backward_fn) {
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    node->seq = g_node_seq.fetch_add(1, std::memory_order_relaxed);
    bool needs = false;
    if (grad_enabled())
        for (const auto& p : parents)
            if (p.requires_grad()) needs = true;
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>::adopt(std::move(node));
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        op_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace diffaug::ndgrad
