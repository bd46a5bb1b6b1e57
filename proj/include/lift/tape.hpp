#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "lift/tensor.hpp"

namespace lift {

/// Handle to a node recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, which is already a
// topological order, so backward() is a single reverse sweep. A tape is
// single-threaded; run independent tapes for parallel work.
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  // Receives the node's accumulated output gradient and pushes contributions
  // into its inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const TensorT& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(TensorT value) { return push(std::move(value), false, nullptr); }
  Var param(TensorT value) { return push(std::move(value), true, nullptr); }

  /// Records an op result. The node needs a gradient iff any input does.
  Var record(TensorT value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() root with respect to `v`; all-zero when
  /// `v` did not influence the root.
  TensorT grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() && n.value.size() != 0 ? TensorT::zeros(n.value.shape()) : n.grad;
  }

  /// Adds `contribution` into the gradient of `v` (no-op for constants).
  void accumulate(Var v, const TensorT& contribution) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = contribution;
      return;
    }
    auto dst = n.grad.data();
    auto src = contribution.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Mutable gradient buffer for in-place accumulation inside backward functions.
  TensorT* grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = TensorT::zeros(n.value.shape());
    return &n.grad;
  }

  /// Seeds d(root)/d(root) = 1 and propagates. `root` must hold one value.
  void backward(Var root) {
    if (nodes_.at(root.id).value.size() != 1) {
      throw DimensionError("backward root must be a scalar, got shape " +
                           shape_string(nodes_[root.id].value.shape()));
    }
    for (Node& n : nodes_) n.grad = TensorT{};
    backward_visits_ = 0;
    nodes_[root.id].grad = TensorT::full(nodes_[root.id].value.shape(), T{1});
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      ++backward_visits_;
      // Inputs always have smaller ids, so this node's gradient is final here.
      n.backward(*this, n.grad);
    }
  }

  /// Number of backward callbacks run by the last backward() call.
  std::size_t backward_visits() const noexcept { return backward_visits_; }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(TensorT value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), TensorT{}, std::move(backward), requires_grad});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::size_t backward_visits_ = 0;
};

}  // namespace lift
