#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "necurve/diff/array.hpp"

namespace necurve::diff {

/// A trainable (or buffer) tensor living outside any tape.
struct Parameter {
  Array value;
  Array grad;
  bool trainable = true;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Array& value() const;
  const Array& grad() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape. Nodes are appended in topological order, so
/// backward walks them in reverse creation order. A tape supports exactly one
/// backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);
  /// Leaf whose gradient is kept on the tape.
  Var variable(Array value);
  /// Leaf bound to `param`; backward adds into `param.grad`.
  Var parameter(Parameter& param);

  /// Appends an op result. `fn` is skipped when no parent requires grad.
  Var record(Array value, std::vector<std::size_t> parents, BackwardFn fn);

  /// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
  void backward(Var root);

  const Array& value(std::size_t id) const { return nodes_[id].value; }
  /// Gradient of node `id`; an empty array means no gradient reached it.
  const Array& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator of `id`, zero-allocated on first use. For use in
  /// backward rules.
  Array& grad_accumulator(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Node {
    Array value;
    Array grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace necurve::diff
