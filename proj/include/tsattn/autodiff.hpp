#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace tsattn {

/// A learnable tensor owned by a model, with its gradient accumulator.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<Scalar> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<Scalar>::zeros(value.shape())) {}

  void zero_grad() { std::fill(grad.storage().begin(), grad.storage().end(), Scalar{0}); }
};

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Gradient of the last backward() w.r.t. this value (zeros when unreachable).
  Tensor<Scalar> grad() const;

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode autodiff record. Values are immutable once written; nodes are
/// appended in execution order, so the node list is topologically sorted.
template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<Scalar>& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false); }

  Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad && grad_enabled_);
  }

  /// Records a model parameter; backward() accumulates into `p.grad`.
  Var<Scalar> parameter(Parameter<Scalar>& p) {
    auto v = push(p.value, grad_enabled_);
    if (grad_enabled_) bindings_.emplace_back(&p, v.id());
    return v;
  }

  /// Records the output of an op. `backward` is kept only when some input needs a gradient.
  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs,
                     Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || slots_[in.id()].requires_grad;
    if (!value.all_finite()) throw NumericError("non-finite value produced on tape");
    auto out = push(std::move(value), needs);
    if (needs) nodes_.push_back({out.id(), std::move(backward)});
    return out;
  }

  const Tensor<Scalar>& value(std::size_t id) const { return slots_.at(id).value; }
  bool requires_grad(std::size_t id) const { return slots_.at(id).requires_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Gradient accumulator for a slot, allocated on first use.
  Tensor<Scalar>& grad_buffer(std::size_t id) {
    auto& s = slots_.at(id);
    if (s.grad.empty()) s.grad = Tensor<Scalar>::zeros(s.value.shape());
    return s.grad;
  }

  /// Whether a slot wants gradient contributions.
  bool wants(const Var<Scalar>& v) const { return slots_[v.id()].requires_grad; }

  Tensor<Scalar> grad(std::size_t id) const {
    const auto& s = slots_.at(id);
    return s.grad.empty() ? Tensor<Scalar>::zeros(s.value.shape()) : s.grad;
  }

  void backward(const Var<Scalar>& loss) {
    const auto& lv = value(loss.id());
    if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(lv.shape()));
    if (backward_done_) throw ValidationError("backward: tape already consumed");
    backward_done_ = true;
    if (slots_[loss.id()].requires_grad) grad_buffer(loss.id())[0] = Scalar{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (slots_[it->output].grad.empty()) continue;
      it->backward(*this, slots_[it->output].grad);
    }
    for (auto& [param, id] : bindings_) {
      const auto& s = slots_[id];
      if (s.grad.empty()) continue;
      auto& pg = param->grad.storage();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += s.grad[i];
    }
  }

 private:
  struct Slot {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad;
  };
  struct Node {
    std::size_t output;
    Backward backward;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool requires_grad) {
    slots_.push_back({std::move(value), {}, requires_grad});
    return Var<Scalar>(this, slots_.size() - 1);
  }

  bool grad_enabled_;
  bool backward_done_ = false;
  std::deque<Slot> slots_;
  std::vector<Node> nodes_;
  std::vector<std::pair<Parameter<Scalar>*, std::size_t>> bindings_;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return tape_->value(id_);
}
template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return tape_->requires_grad(id_);
}
template <typename Scalar>
Tensor<Scalar> Var<Scalar>::grad() const {
  return tape_->grad(id_);
}

}  // namespace tsattn
