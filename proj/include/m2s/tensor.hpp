#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "m2s/common.hpp"

namespace m2s {

// ---------------------------------------------------------------------------
// Autograd mode. Ops record gradient rules only while enabled.
// ---------------------------------------------------------------------------

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---------------------------------------------------------------------------
// Branch signature tracing.
//
// Piecewise ops (leaky_relu, min/max, clamp, argmax pooling) fold their branch
// choices into a running hash while a trace is active. The finite-difference
// harness compares the signatures of the two perturbed evaluations: a mismatch
// means the pair straddles a non-differentiable point and the probe must be
// re-drawn rather than compared against the analytic gradient.
// ---------------------------------------------------------------------------

class BranchTrace {
public:
    static bool active() { return state().active; }

    static void begin() {
        state().active = true;
        state().sig = 0xCBF29CE484222325ull;
    }

    static std::uint64_t end() {
        state().active = false;
        return state().sig;
    }

    static void note(std::uint64_t bits) {
        auto& s = state();
        s.sig = (s.sig ^ bits) * 0x100000001B3ull;
    }

private:
    struct State {
        bool active = false;
        std::uint64_t sig = 0;
    };
    static State& state() {
        thread_local State s;
        return s;
    }
};

// ---------------------------------------------------------------------------
// Tensor: dense rank-4 array with optional reverse-mode gradient tracking.
// Copying a Tensor shares the underlying node; clone() deep-copies.
// ---------------------------------------------------------------------------

template <typename T>
struct TensorNode {
    Shape4 shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Pulls this node's grad into its parents. Set only on recorded results.
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape4 s, bool requires_grad = false) {
        return full(s, T(0), requires_grad);
    }

    static Tensor full(Shape4 s, T v, bool requires_grad = false) {
        check_shape_valid(s, "Tensor");
        auto node = std::make_shared<TensorNode<T>>();
        node->shape = s;
        node->value.assign(s.numel(), v);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return full(Shape4{1, 1, 1, 1}, v, requires_grad);
    }

    static Tensor from_vector(Shape4 s, std::vector<T> data, bool requires_grad = false) {
        check_shape_valid(s, "Tensor");
        if (data.size() != s.numel()) {
            throw ValidationError("Tensor: data length " + std::to_string(data.size()) +
                                  " does not equal shape " + s.str() + " element count");
        }
        auto node = std::make_shared<TensorNode<T>>();
        node->shape = s;
        node->value = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape4& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }

    const std::vector<T>& value() const { return node_->value; }
    std::vector<T>& mutable_value() { return node_->value; }

    T at(int n, int c, int h, int w) const {
        const Shape4& s = node_->shape;
        return node_->value[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
    }

    T item() const {
        if (numel() != 1) {
            throw ValidationError("Tensor::item: tensor has " + std::to_string(numel()) +
                                  " elements, expected 1");
        }
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
    void drop_grad() { node_->grad.clear(); }

    // Deep copy, detached from any recorded graph.
    Tensor clone() const {
        auto node = std::make_shared<TensorNode<T>>();
        node->shape = node_->shape;
        node->value = node_->value;
        node->requires_grad = node_->requires_grad;
        return Tensor(std::move(node));
    }

    Tensor detach() const {
        auto node = std::make_shared<TensorNode<T>>();
        node->shape = node_->shape;
        node->value = node_->value;
        node->requires_grad = false;
        return Tensor(std::move(node));
    }

    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<TensorNode<T>> node_;
};

// Builds an op result. The gradient rule is recorded only when grad mode is on
// and some input needs it; otherwise the result is a plain value.
template <typename T>
Tensor<T> make_op_result(Shape4 shape, std::vector<T> value,
                         std::vector<Tensor<T>> inputs,
                         std::function<void(TensorNode<T>&)> backward_fn) {
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = shape;
    node->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& in : inputs) {
            if (in.requires_grad()) {
                any = true;
                break;
            }
        }
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (const auto& in : inputs) node->parents.push_back(in.node());
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// Tape: the recorded program in reverse topological order. Built from the loss
// node by depth-first search; replay visits each reachable node exactly once.
// ---------------------------------------------------------------------------

template <typename T>
class Tape {
public:
    static Tape build(const std::shared_ptr<TensorNode<T>>& root) {
        Tape tape;
        std::unordered_set<const TensorNode<T>*> seen;
        // Iterative post-order DFS; parents are visited in their recorded
        // order, so the resulting order is deterministic.
        std::vector<std::pair<std::shared_ptr<TensorNode<T>>, std::size_t>> stack;
        stack.emplace_back(root, 0);
        seen.insert(root.get());
        while (!stack.empty()) {
            auto& [node, next_parent] = stack.back();
            if (next_parent < node->parents.size()) {
                auto parent = node->parents[next_parent++];
                if (parent->backward_fn && seen.insert(parent.get()).second) {
                    stack.emplace_back(std::move(parent), 0);
                }
            } else {
                tape.order_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    // Reverse-order replay: propagate each node's grad into its parents.
    void replay() {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            TensorNode<T>& node = **it;
            if (node.backward_fn && !node.grad.empty()) {
                node.backward_fn(node);
            }
        }
    }

    std::size_t size() const { return order_.size(); }

private:
    std::vector<std::shared_ptr<TensorNode<T>>> order_;  // topological order
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable node that requires them; untouched tensors keep whatever grad
// buffer they had (zeros after zero_grad()).
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ValidationError("backward: loss must be a scalar, got shape " +
                              loss.shape().str());
    }
    if (!loss.requires_grad()) return;
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    auto tape = Tape<T>::build(loss.node());
    tape.replay();
}

}  // namespace m2s
