#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "spnas/tensor.hpp"

namespace spnas {

class Graph;

// Trainable leaf storage. Lives outside any graph so it survives across steps;
// Graph::parameter() binds it as a leaf and backward() accumulates into grad.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool requires_grad = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)) {}

  void zero_grad() { grad.fill(0.0); }
  std::size_t numel() const { return value.numel(); }
};

// Handle to a node recorded on a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  // Gradient after Graph::backward(); zero tensor when the node got none.
  Tensor grad() const;

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Records primitive applications in order; backward() walks them in exact
// reverse order, so gradients are bitwise reproducible.
class Graph {
 public:
  // Called with the gradient flowing into this node's output.
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  explicit Graph(std::uint64_t seed = 0) : rng_(seed) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var scalar(double v) { return constant(Tensor::scalar(v)); }
  Var parameter(Parameter& p);

  // Records an op result. Checks finiteness and names `op` on failure.
  // `fn` is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op);

  void backward(Var root);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }
  // Accumulator for an input's gradient; allocated on first use.
  Tensor& grad_accumulator(Var v);
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  std::mt19937_64& rng() { return rng_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };
  std::deque<Node> nodes_;
  std::mt19937_64 rng_;
};

inline const Tensor& Var::value() const { return graph_->value(*this); }
inline Tensor Var::grad() const { return graph_->grad(*this); }

}  // namespace spnas
