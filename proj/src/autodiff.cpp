#include "spnas/autodiff.hpp"

#include "spnas/error.hpp"

namespace spnas {

Var Graph::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("constant: non-finite value");
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(Parameter& p) {
  if (!p.value.all_finite()) throw NumericError("parameter '" + p.name + "' holds a non-finite value");
  nodes_.push_back(Node{p.value, {}, {}, &p, p.requires_grad});
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
  if (!value.all_finite()) throw NumericError(std::string("primitive '") + op + "' produced a non-finite value");
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.graph() != this) throw ConfigError(std::string("primitive '") + op + "' mixes graphs");
    needs = needs || nodes_[in.id()].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_accumulator(Var v) {
  Node& n = nodes_[v.id()];
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.grad.empty() ? Tensor::zeros_like(n.value) : n.grad;
}

void Graph::backward(Var root) {
  if (root.graph() != this) throw ConfigError("backward: root belongs to another graph");
  if (value(root).numel() != 1) throw ShapeError("backward: root must be a scalar");
  for (Node& n : nodes_) n.grad = Tensor{};
  if (!nodes_[root.id()].needs_grad) return;
  grad_accumulator(root).fill(1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) {
      // The callback may allocate accumulators for earlier nodes; deque keeps
      // references stable across that.
      n.backward(*this, n.grad);
    } else if (n.param != nullptr) {
      if (!n.grad.all_finite()) throw NumericError("gradient for '" + n.param->name + "' is non-finite");
      auto& dst = n.param->grad;
      if (dst.shape() != n.grad.shape()) dst = Tensor::zeros_like(n.grad);
      for (std::size_t k = 0; k < dst.numel(); ++k) dst[k] += n.grad[k];
    }
  }
}

}  // namespace spnas
