// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "genq/nnkit/tensor.hpp"

namespace genq::nn {

template <typename Scalar>
class Tape;

/// A named trainable tensor with its gradient accumulator.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<Scalar> v) : name(std::move(n)), value(std::move(v)) { zero_grad(); }

  void zero_grad() { grad = Tensor<Scalar>::zeros(value.shape()); }
};

/// Handle to a value recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Tensor<Scalar>& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] Tape<Scalar>* tape() const noexcept { return tape_; }
  [[nodiscard]] std::size_t id() const noexcept { return id_; }
  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Dynamic reverse-mode tape.
///
/// Operations append nodes in execution order. `backward` seeds the scalar
/// loss with 1 and replays the nodes in exact reverse order, each node pushing
/// its output gradient into its parents. Leaves bound to a Parameter flush
/// their accumulated gradient into `Parameter::grad` at the end.
template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<Scalar>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, {}, nullptr); }

  /// Leaf whose gradient is kept on the tape (see `grad`).
  Var<Scalar> variable(Tensor<Scalar> value) { return push(std::move(value), grad_enabled_, {}, nullptr); }

  /// Leaf bound to a parameter; non-trainable parameters behave as constants.
  Var<Scalar> parameter(Parameter<Scalar>& p) {
    Var<Scalar> v = push(p.value, grad_enabled_ && p.trainable, {}, nullptr);
    if (nodes_[v.id()].requires_grad) {
      nodes_[v.id()].bound = &p;
    }
    return v;
  }

  /// Record an operation. `backward` is dropped when no parent requires grad.
  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> parents, Backward backward) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    for (const auto& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id()].requires_grad;
      ids.push_back(p.id());
    }
    needs = needs && grad_enabled_;
    return push(std::move(value), needs, std::move(ids), needs ? std::move(backward) : nullptr);
  }

  /// Mutable gradient slot of `v` for use inside backward closures, or nullptr
  /// when `v` does not require a gradient.
  Tensor<Scalar>* grad_sink(const Var<Scalar>& v) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) {
      return nullptr;
    }
    if (n.grad.shape() != n.value.shape()) {
      n.grad = Tensor<Scalar>::zeros(n.value.shape());
    }
    return &n.grad;
  }

  void backward(const Var<Scalar>& loss) {
    check_owner(loss);
    if (loss.value().size() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    }
    for (auto& n : nodes_) {
      n.grad = Tensor<Scalar>();
    }
    visit_order_.clear();
    if (!nodes_[loss.id()].requires_grad) {
      return;
    }
    nodes_[loss.id()].grad = Tensor<Scalar>::full(loss.shape(), Scalar{1});
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) {
        continue;
      }
      visit_order_.push_back(i);
      if (n.backward) {
        n.backward(*this, n.grad);
      }
    }
    for (auto& n : nodes_) {
      if (n.bound != nullptr && !n.grad.empty()) {
        if (n.bound->grad.shape() != n.bound->value.shape()) {
          n.bound->zero_grad();
        }
        n.bound->grad.vector() += n.grad.vector();
      }
    }
  }

  /// Gradient of the last backward pass with respect to `v` (zeros if unused).
  [[nodiscard]] Tensor<Scalar> grad(const Var<Scalar>& v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? Tensor<Scalar>::zeros(n.value.shape()) : n.grad;
  }

  [[nodiscard]] const Tensor<Scalar>& value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Node ids visited by the last backward pass, in visiting order.
  [[nodiscard]] const std::vector<std::size_t>& last_visit_order() const noexcept { return visit_order_; }

  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }
  [[nodiscard]] bool grad_enabled() const noexcept { return grad_enabled_; }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    Backward backward;
    Parameter<Scalar>* bound = nullptr;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool requires_grad, std::vector<std::size_t> parents, Backward backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(parents), std::move(backward), nullptr});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  void check_owner(const Var<Scalar>& v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw ContractError("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
  bool grad_enabled_ = true;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return tape_->value(id_);
}

template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return tape_->requires_grad(id_);
}

}  // namespace genq::nn
