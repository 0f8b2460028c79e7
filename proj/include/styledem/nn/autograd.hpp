#pragma once

// Tape-free reverse-mode automatic differentiation. Every op output keeps
// shared ownership of its inputs, so holding the loss keeps the whole graph
// alive and dropping it frees everything.

#include <algorithm>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "styledem/nn/tensor.hpp"

namespace styledem::nn {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    // Lazily allocated gradient accumulator.
    Tensor<T>& grad_buffer() {
        if (grad.data.size() != value.data.size()) grad = Tensor<T>(value.shape);
        return grad;
    }
    Node& parent(std::size_t i) { return *parents[i]; }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node(std::make_shared<Node<T>>()) {
        node->value = std::move(value);
        node->requires_grad = requires_grad;
    }

    bool defined() const noexcept { return static_cast<bool>(node); }
    const Tensor<T>& value() const { return node->value; }
    Tensor<T>& mutable_value() { return node->value; }
    const Shape& shape() const { return node->value.shape; }
    int dim(std::size_t i) const { return node->value.dim(i); }
    std::size_t size() const { return node->value.size(); }
    bool requires_grad() const { return node && node->requires_grad; }
    void set_requires_grad(bool r) { node->requires_grad = r; }

    Tensor<T>& grad() { return node->grad_buffer(); }
    bool has_grad() const { return node->grad.size() == node->value.size(); }
    void zero_grad() {
        if (has_grad()) node->grad.fill(T(0));
    }

    // Same value, no history.
    Var detach() const { return Var(node->value, false); }

    std::shared_ptr<Node<T>> node;
};

// Builds an op output. History is recorded only when grad mode is on and at
// least one input needs a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
    Var<T> out(std::move(value), false);
    if (!grad_enabled()) return out;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var<T>& v) { return v.requires_grad(); });
    if (!any) return out;
    out.node->requires_grad = true;
    out.node->parents.reserve(inputs.size());
    for (auto& in : inputs) out.node->parents.push_back(in.node);
    out.node->backward = std::move(backward);
    return out;
}

// Propagates d(root)/d(.) into every reachable node that requires grad.
// Without a seed the root must be a scalar and is seeded with one.
template <class T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
    if (!root.requires_grad()) throw std::logic_error("backward: root does not require grad");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node.get(), 0}};
    seen.insert(root.node.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    Tensor<T>& g = root.node->grad_buffer();
    if (seed) {
        if (seed->size() != g.size()) throw std::invalid_argument("backward: seed shape mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
    } else {
        if (g.size() != 1) throw std::invalid_argument("backward: non-scalar root needs a seed");
        g[0] += T(1);
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward) n->backward(*n);
    }
}

}  // namespace styledem::nn
