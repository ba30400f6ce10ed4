#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <utility>

#include "lidarflow/error.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const {
    if (!tape_) throw UsageError("Var: not bound to a tape");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return tape().value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape().requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records forward values in execution order; backward() replays the
// recorded rules in reverse. One tape per thread of execution.
template <typename T>
class Tape {
 public:
  // Receives the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value) {
    const bool rg = value.requires_grad();
    return push(std::move(value), rg, nullptr);
  }
  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  // Output requires grad iff some input does; otherwise `fn` is discarded.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) {
      check_owner(in);
      rg = rg || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(fn) : nullptr);
  }
  template <typename Range>
  Var<T> record_range(Tensor<T> value, const Range& inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) {
      check_owner(in);
      rg = rg || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(fn) : nullptr);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient buffer of `id`, zero-allocated on first touch.
  Tensor<T>& grad_accumulator(std::size_t id) {
    Node& node = nodes_.at(id);
    if (node.grad.empty() && node.value.size() > 0) node.grad = Tensor<T>(node.value.shape());
    return node.grad;
  }

  // dLoss/dv after backward(); all zeros when v did not reach the loss.
  Tensor<T> grad(const Var<T>& v) const {
    check_owner(v);
    const Node& node = nodes_[v.id()];
    if (node.grad.empty()) return Tensor<T>(node.value.shape());
    return node.grad;
  }

  void backward(const Var<T>& loss) {
    check_owner(loss);
    if (value(loss.id()).size() != 1) {
      throw UsageError("backward: loss must be a scalar, got shape " +
                       value(loss.id()).shape().str());
    }
    grad_accumulator(loss.id())[0] += T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(*this, node.grad);
    }
  }

  void zero_grad() {
    for (auto& node : nodes_) node.grad = Tensor<T>();
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(fn)});
    return Var<T>(this, nodes_.size() - 1);
  }

  void check_owner(const Var<T>& v) const {
    if (&v.tape() != this) throw UsageError("Var recorded on a different tape");
  }

  std::deque<Node> nodes_;
};

}  // namespace lidarflow
