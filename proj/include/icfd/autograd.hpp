#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "icfd/tensor.hpp"

namespace icfd::ag {

// Define-by-run reverse-mode autodiff. Each forward op allocates a Node
// holding its value, links to its parents and a closure that scatters the
// node's gradient into the parents' gradients. Leaves (parameters, inputs)
// persist across steps; interior nodes are freed when the last Var handle
// to the graph root is dropped.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // lazily allocated, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor<T>& ensure_grad() {
        if (grad.numel() == 0) grad = Tensor<T>::zeros(value.shape());
        return grad;
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var leaf(Tensor<T> value, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& grad() { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    void zero_grad() {
        if (node_->grad.numel() != 0) node_->grad.fill(T(0));
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

    T item() const { return node_->value.item(); }

    // Value copied into a fresh constant leaf; gradients do not flow past it.
    Var detach() const { return leaf(node_->value, false); }

    // Reverse pass from a scalar root. Gradients accumulate into every
    // reachable node with requires_grad set (leaves keep theirs until
    // zeroed by the caller).
    void backward() {
        if (node_->value.numel() != 1) throw ShapeError("backward() requires a scalar root");
        if (!node_->requires_grad) return;

        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> visited;
        std::vector<std::pair<Node<T>*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node<T>* p = n->parents[idx++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->ensure_grad().fill(T(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backward_fn && n->grad.numel() != 0) n->backward_fn(*n);
        }
    }

private:
    std::shared_ptr<Node<T>> node_;
};

// Builds an op node. requires_grad is inherited from the parents; the
// backward closure runs only when some parent actually needs gradients.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& p : parents) {
        n->requires_grad = n->requires_grad || p.requires_grad();
        n->parents.push_back(p.node());
    }
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return Var<T>(std::move(n));
}

// Adds src into dst's gradient buffer.
template <typename T>
void accumulate(Node<T>& dst, const Tensor<T>& src) {
    Tensor<T>& g = dst.ensure_grad();
    const T* s = src.data();
    T* d = g.data();
    const std::int64_t n = g.numel();
    for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

} // namespace icfd::ag
