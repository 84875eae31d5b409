#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ppmn/errors.hpp"

namespace ppmn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// One vertex of the autograd graph. `backward` reads this node's grad and
// accumulates into the grads of `parents`.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::string op;
    std::vector<NodePtr<T>> parents;
    std::function<void(const Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

// Dense row-major tensor handle with optional gradient tracking. Copies are
// shallow; two handles may refer to the same node.
template <typename T>
class Tensor {
public:
    using value_type = T;
    using BackwardFn = std::function<void(const Node<T>&)>;

    Tensor() = default;

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (ppmn::numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        for (auto e : shape) {
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        }
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->op = "leaf";
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto count = ppmn::numel(shape);
        return from(std::move(shape), std::vector<T>(count, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        auto count = ppmn::numel(shape);
        return from(std::move(shape), std::vector<T>(count, v), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    // Builds the output of a differentiable op. Values must be finite.
    static Tensor make_result(Shape shape, std::vector<T> data, std::string op,
                              std::vector<Tensor> inputs, BackwardFn backward) {
        for (const auto& v : data) {
            if (!std::isfinite(v)) throw NumericError("non-finite value produced by op '" + op + "'");
        }
        auto out = from(std::move(shape), std::move(data), false);
        out.node_->op = std::move(op);
        bool any = false;
        for (auto& in : inputs) {
            if (in.requires_grad()) any = true;
        }
        if (any) {
            out.node_->requires_grad = true;
            for (auto& in : inputs) out.node_->parents.push_back(in.node_);
            out.node_->backward = std::move(backward);
        }
        return out;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::string& op() const { return node_->op; }

    std::span<const T> data() const { return node_->value; }
    // Only leaves may be written after construction.
    std::span<T> mutable_data() {
        if (!node_->parents.empty()) throw UsageError("mutable_data on non-leaf tensor");
        return node_->value;
    }
    std::vector<T> to_vector() const { return node_->value; }

    T item() const {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    T at(std::initializer_list<std::size_t> index) const {
        if (index.size() != rank()) throw DimensionError("index rank mismatch");
        std::size_t flat = 0;
        std::size_t axis = 0;
        for (auto i : index) {
            if (i >= node_->shape[axis]) throw BoundsError("index out of range");
            flat = flat * node_->shape[axis] + i;
            ++axis;
        }
        return node_->value[flat];
    }

    // Empty span when no gradient has been accumulated.
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    // Detached copy: same values, fresh leaf.
    Tensor detach(bool requires_grad = false) const {
        return from(node_->shape, node_->value, requires_grad);
    }

    const NodePtr<T>& node() const { return node_; }

private:
    explicit Tensor(NodePtr<T> n) : node_(std::move(n)) {}
    NodePtr<T> node_;
};

// Reverse-mode sweep from a scalar. Nodes are visited in the reverse of a
// depth-first post-order over `parents`, so accumulation order is fixed by
// graph construction order.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw UsageError("backward requires a scalar loss");
    }
    if (!loss.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> marked;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    auto* root = loss.node().get();
    stack.emplace_back(root, 0);
    marked.insert(root);
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            auto* p = n->parents[next++].get();
            if (p->requires_grad && marked.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (auto* n : order) {
        if (n->requires_grad) n->ensure_grad();
    }
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward) n->backward(*n);
    }
}

}  // namespace ppmn
