// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "xopd/errors.hpp"

namespace xopd {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape s, std::vector<double> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  for (auto dim : shape) {
    if (dim == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape s, bool rg) {
  const auto n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0), rg);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= shape.size()) throw ShapeError("axis " + std::to_string(i) + " out of range for " + shape_str(shape));
  return shape[i];
}

std::size_t Tensor::cols() const { return shape.empty() ? 1 : shape.back(); }

std::size_t Tensor::rows() const { return shape.empty() ? 1 : data.size() / shape.back(); }

double Tensor::item() const {
  if (data.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape));
  return data[0];
}

void Tensor::zero_grad() { grad = std::vector<double>(data.size(), 0.0); }

// ---- Var / Graph ------------------------------------------------------------

const Tensor& Var::value() const { return graph_->value(id_); }

bool Var::requires_grad() const { return graph_->node_requires_grad(id_); }

std::span<const double> Var::grad() const { return graph_->grad_of(id_); }

Var Graph::constant(Tensor t) {
  Node n;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(const Tensor& p) {
  if (auto it = bound_ids_.find(&p); it != bound_ids_.end()) return Var(this, it->second);
  Node n;
  n.bound = &p;
  n.requires_grad = recording() && p.requires_grad;
  nodes_.push_back(std::move(n));
  bound_ids_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (recording()) {
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [&](std::size_t i) { return nodes_[i].requires_grad; });
    if (n.requires_grad) {
      n.inputs = std::move(inputs);
      n.backward = std::move(backward);
    }
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.bound ? *n.bound : n.value;
}

std::vector<double>& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(id).numel(), 0.0);
  return n.grad;
}

std::span<const double> Graph::grad_of(std::size_t id) const { return nodes_[id].grad; }

void Graph::backward(Var root) {
  if (root.graph() != this) throw UsageError("backward root belongs to another graph");
  if (!recording()) throw UsageError("backward on a no-grad graph");
  if (backward_done_) throw UsageError("backward called twice on the same graph");
  if (value(root.id()).numel() != 1) {
    throw ShapeError("backward root must be scalar, got " + shape_str(value(root.id()).shape));
  }
  backward_done_ = true;
  if (!nodes_[root.id()].requires_grad) return;
  grad_buffer(root.id())[0] = 1.0;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

void Graph::accumulate_into(Tensor& p) const {
  const auto g = param_grad(p);
  if (!p.grad) p.zero_grad();
  if (g.empty()) return;
  auto& dst = *p.grad;
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

std::span<const double> Graph::param_grad(const Tensor& p) const {
  auto it = bound_ids_.find(&p);
  if (it == bound_ids_.end()) return {};
  return nodes_[it->second].grad;
}

// ---- kernels ----------------------------------------------------------------

namespace {

// c[m x n] += a[m x k] * b[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

std::vector<double> transpose(const double* x, std::size_t r, std::size_t c) {
  std::vector<double> t(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = x[i * c + j];
  return t;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank2(const Var& a, const char* op) {
  if (a.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " + shape_str(a.shape()));
  }
}

Graph& graph_of(const Var& a, const Var& b) {
  if (a.graph() != b.graph()) throw UsageError("operands belong to different graphs");
  return *a.graph();
}

// Elementwise unary op with derivative expressed through (x, y).
template <typename Fwd, typename Deriv>
Var unary(Var x, Fwd fwd, Deriv deriv) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape, std::vector<double>(xv.numel()));
  for (std::size_t i = 0; i < xv.numel(); ++i) out.data[i] = fwd(xv.data[i]);
  const auto xid = x.id();
  return x.graph()->record(std::move(out), {xid}, [xid, deriv](Graph& g, std::size_t self) {
    if (!g.node_requires_grad(xid)) return;
    const auto& xd = g.value(xid).data;
    const auto& yd = g.value(self).data;
    const auto gy = g.grad_of(self);
    auto& gx = g.grad_buffer(xid);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xd[i], yd[i]);
  });
}

}  // namespace

// ---- ops --------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  if (bv.shape[0] != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(av.shape) + " x " +
                     shape_str(bv.shape));
  }
  Tensor out = Tensor::zeros({m, n});
  gemm_acc(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  const auto aid = a.id(), bid = b.id();
  return g.record(std::move(out), {aid, bid}, [aid, bid, m, k, n](Graph& gr, std::size_t self) {
    const auto gc = gr.grad_of(self);
    if (gr.node_requires_grad(aid)) {
      // ga += gc * b^T
      const auto bt = transpose(gr.value(bid).data.data(), k, n);
      gemm_acc(gc.data(), bt.data(), gr.grad_buffer(aid).data(), m, n, k);
    }
    if (gr.node_requires_grad(bid)) {
      // gb += a^T * gc
      const auto at = transpose(gr.value(aid).data.data(), m, k);
      gemm_acc(at.data(), gc.data(), gr.grad_buffer(bid).data(), k, m, n);
    }
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape, std::vector<double>(av.numel()));
  for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] + bv.data[i];
  const auto aid = a.id(), bid = b.id();
  return g.record(std::move(out), {aid, bid}, [aid, bid](Graph& gr, std::size_t self) {
    const auto gy = gr.grad_of(self);
    for (auto id : {aid, bid}) {
      if (!gr.node_requires_grad(id)) continue;
      auto& gx = gr.grad_buffer(id);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    }
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a, b, "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape, std::vector<double>(av.numel()));
  for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] - bv.data[i];
  const auto aid = a.id(), bid = b.id();
  return g.record(std::move(out), {aid, bid}, [aid, bid](Graph& gr, std::size_t self) {
    const auto gy = gr.grad_of(self);
    if (gr.node_requires_grad(aid)) {
      auto& ga = gr.grad_buffer(aid);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
    }
    if (gr.node_requires_grad(bid)) {
      auto& gb = gr.grad_buffer(bid);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
    }
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape, std::vector<double>(av.numel()));
  for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] * bv.data[i];
  const auto aid = a.id(), bid = b.id();
  return g.record(std::move(out), {aid, bid}, [aid, bid](Graph& gr, std::size_t self) {
    const auto gy = gr.grad_of(self);
    if (gr.node_requires_grad(aid)) {
      const auto& bd = gr.value(bid).data;
      auto& ga = gr.grad_buffer(aid);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bd[i];
    }
    if (gr.node_requires_grad(bid)) {
      const auto& ad = gr.value(aid).data;
      auto& gb = gr.grad_buffer(bid);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * ad[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_bias(Var a, Var bias) {
  Graph& g = graph_of(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || bv.numel() != av.cols()) {
    throw ShapeError("add_bias: bias " + shape_str(bv.shape) + " does not match " +
                     shape_str(av.shape));
  }
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out(av.shape, av.data);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] += bv.data[c];
  const auto aid = a.id(), bid = bias.id();
  return g.record(std::move(out), {aid, bid}, [aid, bid, rows, cols](Graph& gr, std::size_t self) {
    const auto gy = gr.grad_of(self);
    if (gr.node_requires_grad(aid)) {
      auto& ga = gr.grad_buffer(aid);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
    }
    if (gr.node_requires_grad(bid)) {
      auto& gb = gr.grad_buffer(bid);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += gy[r * cols + c];
    }
  });
}

Var embedding(Var table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const Tensor& tv = table.value();
  const std::size_t vocab = tv.shape[0], dim = tv.shape[1];
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  Tensor out = Tensor::zeros({ids.size(), dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside [0, " + std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data.begin() + ids[i] * dim, dim, out.data.begin() + i * dim);
  }
  const auto tid = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return table.graph()->record(std::move(out), {tid},
                               [tid, idv = std::move(idv), dim](Graph& gr, std::size_t self) {
                                 const auto gy = gr.grad_of(self);
                                 auto& gt = gr.grad_buffer(tid);
                                 for (std::size_t i = 0; i < idv.size(); ++i) {
                                   double* row = gt.data() + idv[i] * dim;
                                   for (std::size_t c = 0; c < dim; ++c) row[c] += gy[i * dim + c];
                                 }
                               });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Graph& g = *parts[0].graph();
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.graph() != &g) throw UsageError("concat_rows: operands belong to different graphs");
    if (p.value().rank() != 2 || p.value().cols() != cols) {
      throw ShapeError("concat_rows: incompatible part " + shape_str(p.shape()));
    }
    offsets.push_back(rows * cols);
    rows += p.value().rows();
    ids.push_back(p.id());
  }
  Tensor out = Tensor::zeros({rows, cols});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& d = parts[i].value().data;
    std::copy(d.begin(), d.end(), out.data.begin() + offsets[i]);
  }
  return g.record(std::move(out), ids, [ids, offsets](Graph& gr, std::size_t self) {
    const auto gy = gr.grad_of(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!gr.node_requires_grad(ids[i])) continue;
      auto& gx = gr.grad_buffer(ids[i]);
      for (std::size_t j = 0; j < gx.size(); ++j) gx[j] += gy[offsets[i] + j];
    }
  });
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
  require_rank2(x, "slice_rows");
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  if (count == 0 || start + count > xv.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " + shape_str(xv.shape));
  }
  Tensor out({count, cols}, std::vector<double>(xv.data.begin() + start * cols,
                                                xv.data.begin() + (start + count) * cols));
  const auto xid = x.id();
  return x.graph()->record(std::move(out), {xid}, [xid, start, cols](Graph& gr, std::size_t self) {
    const auto gy = gr.grad_of(self);
    auto& gx = gr.grad_buffer(xid);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[start * cols + i] += gy[i];
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Graph& g = graph_of(x, gain);
  graph_of(x, bias);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gain.numel() != cols || bias.numel() != cols) {
    throw ShapeError("layer_norm: gain/bias size does not match " + shape_str(xv.shape));
  }
  const auto& gd = gain.value().data;
  const auto& bd = bias.value().data;
  Tensor out(xv.shape, std::vector<double>(xv.numel()));
  // normalized values and inverse std per row, kept for backward
  std::vector<double> xhat(xv.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * is;
      xhat[r * cols + c] = h;
      out.data[r * cols + c] = h * gd[c] + bd[c];
    }
  }
  const auto xid = x.id(), gid = gain.id(), bid = bias.id();
  return g.record(std::move(out), {xid, gid, bid},
                  [xid, gid, bid, rows, cols, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](Graph& gr, std::size_t self) {
                    const auto gy = gr.grad_of(self);
                    if (gr.node_requires_grad(gid)) {
                      auto& gg = gr.grad_buffer(gid);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c)
                          gg[c] += gy[r * cols + c] * xhat[r * cols + c];
                    }
                    if (gr.node_requires_grad(bid)) {
                      auto& gb = gr.grad_buffer(bid);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gb[c] += gy[r * cols + c];
                    }
                    if (gr.node_requires_grad(xid)) {
                      const auto& gd = gr.value(gid).data;
                      auto& gx = gr.grad_buffer(xid);
                      const double n = static_cast<double>(cols);
                      for (std::size_t r = 0; r < rows; ++r) {
                        double s1 = 0.0, s2 = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) {
                          const double dh = gy[r * cols + c] * gd[c];
                          s1 += dh;
                          s2 += dh * xhat[r * cols + c];
                        }
                        for (std::size_t c = 0; c < cols; ++c) {
                          const double dh = gy[r * cols + c] * gd[c];
                          gx[r * cols + c] +=
                              inv_std[r] * (dh - s1 / n - xhat[r * cols + c] * s2 / n);
                        }
                      }
                    }
                  });
}

Var gelu(Var x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
      [](double v, double) {
        const double u = k * (v + c * v * v * v);
        const double t = std::tanh(u);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * c * v * v);
      });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var clamp(Var x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var minimum(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a, b, "minimum");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape, std::vector<double>(av.numel()));
  for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = std::min(av.data[i], bv.data[i]);
  const auto aid = a.id(), bid = b.id();
  return g.record(std::move(out), {aid, bid}, [aid, bid](Graph& gr, std::size_t self) {
    const auto gy = gr.grad_of(self);
    const auto& ad = gr.value(aid).data;
    const auto& bd = gr.value(bid).data;
    // ties route the gradient to the first operand
    if (gr.node_requires_grad(aid)) {
      auto& ga = gr.grad_buffer(aid);
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (ad[i] <= bd[i]) ga[i] += gy[i];
    }
    if (gr.node_requires_grad(bid)) {
      auto& gb = gr.grad_buffer(bid);
      for (std::size_t i = 0; i < gb.size(); ++i)
        if (bd[i] < ad[i]) gb[i] += gy[i];
    }
  });
}

Var causal_attention(Var q, Var k, Var v, std::size_t n_heads) {
  Graph& g = graph_of(q, k);
  graph_of(q, v);
  require_rank2(q, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t len = q.value().shape[0], dim = q.value().shape[1];
  if (n_heads == 0 || dim % n_heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(dim) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = dim / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto& qd = q.value().data;
  const auto& kd = k.value().data;
  const auto& vd = v.value().data;
  Tensor out = Tensor::zeros({len, dim});
  // probs[h][t][j] for j <= t, stored as a dense lower triangle per head
  std::vector<double> probs(n_heads * len * len, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t t = 0; t < len; ++t) {
      double* p = probs.data() + (h * len + t) * len;
      const double* qt = qd.data() + t * dim + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= t; ++j) {
        const double* kj = kd.data() + j * dim + off;
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += qt[c] * kj[c];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      double* ot = out.data.data() + t * dim + off;
      for (std::size_t j = 0; j <= t; ++j) {
        p[j] /= z;
        const double* vj = vd.data() + j * dim + off;
        for (std::size_t c = 0; c < hd; ++c) ot[c] += p[j] * vj[c];
      }
    }
  }
  const auto qid = q.id(), kid = k.id(), vid = v.id();
  return g.record(
      std::move(out), {qid, kid, vid},
      [qid, kid, vid, len, dim, hd, n_heads, inv_sqrt, probs = std::move(probs)](Graph& gr,
                                                                                std::size_t self) {
        const auto go = gr.grad_of(self);
        const auto& qd = gr.value(qid).data;
        const auto& kd = gr.value(kid).data;
        const auto& vd = gr.value(vid).data;
        const bool need_q = gr.node_requires_grad(qid);
        const bool need_k = gr.node_requires_grad(kid);
        const bool need_v = gr.node_requires_grad(vid);
        std::vector<double> dq(len * dim, 0.0), dk(len * dim, 0.0), dv(len * dim, 0.0);
        std::vector<double> dp(len);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * hd;
          for (std::size_t t = 0; t < len; ++t) {
            const double* p = probs.data() + (h * len + t) * len;
            const double* got = go.data() + t * dim + off;
            double dot = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
              const double* vj = vd.data() + j * dim + off;
              double s = 0.0;
              for (std::size_t c = 0; c < hd; ++c) s += got[c] * vj[c];
              dp[j] = s;
              dot += p[j] * s;
              double* dvj = dv.data() + j * dim + off;
              for (std::size_t c = 0; c < hd; ++c) dvj[c] += p[j] * got[c];
            }
            const double* qt = qd.data() + t * dim + off;
            double* dqt = dq.data() + t * dim + off;
            for (std::size_t j = 0; j <= t; ++j) {
              const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
              const double* kj = kd.data() + j * dim + off;
              double* dkj = dk.data() + j * dim + off;
              for (std::size_t c = 0; c < hd; ++c) {
                dqt[c] += ds * kj[c];
                dkj[c] += ds * qt[c];
              }
            }
          }
        }
        auto flush = [&](bool need, std::size_t id, const std::vector<double>& d) {
          if (!need) return;
          auto& gx = gr.grad_buffer(id);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d[i];
        };
        flush(need_q, qid, dq);
        flush(need_k, kid, dk);
        flush(need_v, vid, dv);
      });
}

Var log_softmax(Var x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out(xv.shape, std::vector<double>(xv.numel()));
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (!std::isfinite(xr[c])) {
        throw NumericError("log_softmax: non-finite input at row " + std::to_string(r) +
                           ", column " + std::to_string(c));
      }
      mx = std::max(mx, xr[c]);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] = xr[c] - lz;
  }
  const auto xid = x.id();
  return x.graph()->record(std::move(out), {xid}, [xid, rows, cols](Graph& gr, std::size_t self) {
    const auto gy = gr.grad_of(self);
    const auto& y = gr.value(self).data;
    auto& gx = gr.grad_buffer(xid);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += gy[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        gx[r * cols + c] += gy[r * cols + c] - std::exp(y[r * cols + c]) * s;
    }
  });
}

Var gather_log_prob(Var logp, std::span<const int> ids) {
  const Tensor& lv = logp.value();
  const std::size_t rows = lv.rows(), cols = lv.cols();
  if (lv.rank() != 2 || ids.size() != rows) {
    throw ShapeError("gather_log_prob: " + std::to_string(ids.size()) + " ids for " +
                     shape_str(lv.shape));
  }
  Tensor out = Tensor::zeros({rows});
  for (std::size_t t = 0; t < rows; ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= cols) {
      throw IndexError("gather_log_prob: id " + std::to_string(ids[t]) + " at position " +
                       std::to_string(t) + " outside [0, " + std::to_string(cols) + ")");
    }
    out.data[t] = lv.data[t * cols + ids[t]];
  }
  const auto lid = logp.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return logp.graph()->record(std::move(out), {lid},
                              [lid, cols, idv = std::move(idv)](Graph& gr, std::size_t self) {
                                const auto gy = gr.grad_of(self);
                                auto& gl = gr.grad_buffer(lid);
                                for (std::size_t t = 0; t < idv.size(); ++t)
                                  gl[t * cols + idv[t]] += gy[t];
                              });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data) s += v;
  const auto xid = x.id();
  return x.graph()->record(Tensor::scalar(s), {xid}, [xid](Graph& gr, std::size_t self) {
    const double gy = gr.grad_of(self)[0];
    auto& gx = gr.grad_buffer(xid);
    for (auto& v : gx) v += gy;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Var mean_over_mask(Var x, std::span<const double> mask) {
  const Tensor& xv = x.value();
  if (mask.size() != xv.numel()) {
    throw ShapeError("mean_over_mask: mask of " + std::to_string(mask.size()) + " for " +
                     shape_str(xv.shape));
  }
  double count = 0.0, s = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0.0) {
      count += 1.0;
      s += xv.data[i];
    }
  }
  if (count == 0.0) throw ShapeError("mean_over_mask: mask selects nothing");
  std::vector<double> m(mask.begin(), mask.end());
  const auto xid = x.id();
  return x.graph()->record(Tensor::scalar(s / count), {xid},
                           [xid, count, m = std::move(m)](Graph& gr, std::size_t self) {
                             const double gy = gr.grad_of(self)[0] / count;
                             auto& gx = gr.grad_buffer(xid);
                             for (std::size_t i = 0; i < gx.size(); ++i)
                               if (m[i] != 0.0) gx[i] += gy;
                           });
}

Var detach(Var x) { return x.graph()->record(x.value(), {}, {}); }

}  // namespace xopd
