#pragma once

#include "ddet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

namespace ddet {

// Reverse-mode autodiff over dynamically built graphs. Nodes hold their
// forward value; backward() walks the graph in reverse creation order and
// accumulates gradients into every node with needs_grad set (directly or
// through an ancestor).

inline uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // allocated on demand, same shape as value
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::function<void(Node<T>&)> backprop; // reads this->grad, adds into inputs' grads
    bool needs_grad = false;
    uint64_t id = next_node_id();

    Tensor<T>& ensure_grad() {
        if (grad.data.empty()) grad = Tensor<T>(value.shape);
        return grad;
    }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_var(Tensor<T> value, bool needs_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->needs_grad = needs_grad;
    return n;
}

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backprop) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in->needs_grad) n->needs_grad = true;
    if (n->needs_grad) n->backprop = std::move(backprop);
    return n;
}

// Backpropagate from a scalar (or pre-seeded) root.
template <typename T>
void backward(const Var<T>& root) {
    if (!root->needs_grad) return;
    if (root->grad.data.empty()) {
        if (root->value.numel() != 1)
            throw std::invalid_argument("backward: root must be scalar or have a pre-seeded gradient");
        root->ensure_grad().fill(T(1));
    }
    // collect reachable grad-requiring nodes
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& in : n->inputs) {
            if (in->needs_grad && !seen.count(in.get())) {
                seen.insert(in.get());
                stack.push_back(in.get());
            }
        }
    }
    std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });
    for (Node<T>* n : order) {
        if (n->backprop && !n->grad.data.empty()) n->backprop(*n);
    }
}

} // namespace ddet
