#include "necurve/diff/tape.hpp"

#include "necurve/error.hpp"

namespace necurve::diff {

const Array& Var::value() const { return tape_->value(id_); }
const Array& Var::grad() const { return tape_->grad(id_); }

Var Tape::constant(Array value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Array value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& param) {
  Node node;
  node.value = param.value;
  node.requires_grad = param.trainable;
  node.param = &param;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Array value, std::vector<std::size_t> parents, BackwardFn fn) {
  if (consumed_) throw Error("Tape: cannot record after backward");
  Node node;
  node.value = std::move(value);
  for (std::size_t p : parents) node.requires_grad = node.requires_grad || nodes_[p].requires_grad;
  if (node.requires_grad) {
    node.parents = std::move(parents);
    node.backward = std::move(fn);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Array& Tape::grad_accumulator(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty() && !node.value.empty()) node.grad = Array(node.value.shape());
  return node.grad;
}

void Tape::backward(Var root) {
  if (consumed_) throw Error("Tape: backward already ran on this tape (single-shot)");
  if (&root.tape() != this) throw Error("Tape: root belongs to another tape");
  if (nodes_[root.id()].value.size() != 1) {
    throw ShapeError("Tape: backward root must hold one element, got " +
                     shape_str(nodes_[root.id()].value.shape()));
  }
  consumed_ = true;
  grad_accumulator(root.id())[0] = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.backward) node.backward(*this, i);
    if (node.param != nullptr) {
      Parameter& p = *node.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Array(p.value.shape());
      for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += node.grad[k];
    }
  }
}

}  // namespace necurve::diff
