// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with a tape-based reverse-mode autodiff graph.
//
// A Graph records one forward computation. Nodes are appended in creation
// order, which is a topological order, so backward() simply walks the node
// list in reverse. Gradients are accumulated additively. Parameters are bound
// read-only via Graph::param(); their gradients stay inside the graph until
// the caller pulls them out with accumulate_into(), so several graphs may read
// the same parameters concurrently.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace xopd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d, bool requires_grad = false);

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor scalar(double v);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const;
  // Row count when viewed as [rows x last_dim].
  std::size_t rows() const;
  std::size_t cols() const;
  double item() const;

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  // Allocates (or clears) the gradient accumulator.
  void zero_grad();
};

class Graph;

// Lightweight handle to a node of a Graph. Valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  // Gradient w.r.t. this node after backward(); empty span if none flowed.
  std::span<const double> grad() const;

  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

enum class GradMode { kRecord, kNoGrad };

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  explicit Graph(GradMode mode = GradMode::kRecord) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return mode_ == GradMode::kRecord; }

  // Constant input; never receives gradient.
  Var constant(Tensor t);
  // Leaf bound to an external tensor (read-only). One node per address.
  // Requires grad when the graph records and p.requires_grad is set.
  Var param(const Tensor& p);

  // Reverse pass from a scalar root. May be called once per graph.
  void backward(Var root);
  // Adds the gradient collected for p into p.grad (allocating it).
  void accumulate_into(Tensor& p) const;
  // Gradient collected for a bound parameter (empty if unused/no grad).
  std::span<const double> param_grad(const Tensor& p) const;

  std::size_t size() const { return nodes_.size(); }

  // Primitive construction; used by the op implementations.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);
  const Tensor& value(std::size_t id) const;
  bool node_requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Zero-initialised on first access.
  std::vector<double>& grad_buffer(std::size_t id);
  std::span<const double> grad_of(std::size_t id) const;

 private:
  struct Node {
    Tensor value;
    const Tensor* bound = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  GradMode mode_;
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_ids_;
  bool backward_done_ = false;
};

// ---- differentiable primitives -------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// a[m x n] + bias[n] broadcast over rows.
Var add_bias(Var a, Var bias);
Var embedding(Var table, std::span<const int> ids);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t start, std::size_t count);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var x);
Var tanh(Var x);
Var exp(Var x);
// Multi-head causal scaled dot-product attention over [L x D] inputs.
Var causal_attention(Var q, Var k, Var v, std::size_t n_heads);
Var log_softmax(Var x);
Var gather_log_prob(Var logp, std::span<const int> ids);
Var sum(Var x);
Var mean(Var x);
// Mean of x over entries where mask is nonzero.
Var mean_over_mask(Var x, std::span<const double> mask);
Var clamp(Var x, double lo, double hi);
Var minimum(Var a, Var b);
// Forward value of x with no gradient path.
Var detach(Var x);

}  // namespace xopd
