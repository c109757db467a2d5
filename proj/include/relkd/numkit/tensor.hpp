#pragma once

// Dense row-major tensor with tape-based reverse-mode differentiation.
//
// A BasicTensor is a cheap handle onto a shared node. Ops build new nodes
// that remember their parents and a closure that pushes the node's gradient
// back into them; backward() walks that recording in reverse topological
// order. The recording is discarded when the last handle to the loss goes
// away, so every training step builds a fresh graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "relkd/error.hpp"

namespace relkd::numkit {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

inline thread_local int no_grad_depth = 0;

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // sized like data iff requires_grad
    bool requires_grad = false;
    bool leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
};

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// While alive, ops on this thread do not record a tape.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class BasicTensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    BasicTensor() = default;

    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        if (numkit::numel(shape) != data.size()) {
            throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                             std::to_string(numkit::numel(shape)) + " values, got " +
                             std::to_string(data.size()));
        }
        for (const T& v : data) {
            if (!std::isfinite(v)) throw NumericError("non-finite value in tensor construction");
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        set_requires_grad(requires_grad);
    }

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numkit::numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
        auto n = numkit::numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static BasicTensor scalar(T value, bool requires_grad = false) {
        return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }

    /// Direct write access. Only meaningful on leaves (parameters, inputs):
    /// mutating an op result does not propagate anywhere.
    std::span<T> mutable_data() { return node_->data; }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool on) {
        if (on && !node_->leaf) throw ContractError("requires_grad can only be toggled on leaves");
        node_->requires_grad = on;
        if (on) {
            node_->grad.assign(node_->data.size(), T(0));
        } else {
            node_->grad.clear();
            node_->grad.shrink_to_fit();
        }
    }

    /// Empty for intermediate results until backward() reaches them.
    std::span<const T> grad() const {
        if (!node_->requires_grad) throw ContractError("grad() on a tensor without requires_grad");
        return node_->grad;
    }

    std::span<T> mutable_grad() {
        if (!node_->requires_grad) throw ContractError("grad() on a tensor without requires_grad");
        return node_->grad;
    }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    /// Copy of the values cut off from the tape.
    BasicTensor detach() const { return BasicTensor(shape(), node_->data, false); }

    /// Deep copy of values and grad flag, as a new leaf.
    BasicTensor clone() const { return BasicTensor(shape(), node_->data, requires_grad()); }

    const NodePtr& node() const { return node_; }

    /// Used by ops to wrap a freshly computed node.
    static BasicTensor from_node(NodePtr n) {
        BasicTensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    NodePtr node_;
};

using Tensor = BasicTensor<float>;

/// Runs reverse-mode differentiation from a scalar loss. Gradients of leaves
/// accumulate across calls; callers reset them (zero_grad) between steps.
template <typename T>
void backward(const BasicTensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward(): loss is not connected to any tensor that requires grad");
    }
    using Node = detail::Node<T>;

    // Iterative post-order DFS gives a topological order without recursion limits.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (Node* n : order) {
        if (!n->leaf) n->grad.assign(n->data.size(), T(0));
    }
    loss.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

}  // namespace relkd::numkit
