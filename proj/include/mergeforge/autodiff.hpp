// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode automatic differentiation over BasicTensor<T>.
//
// A Tape records every operation of one forward pass in creation order, which
// is already a topological order of the graph. backward() walks it once in
// reverse. Leaves are either constants (never differentiated) or Parameters;
// only trainable Parameters receive gradient buffers. A tape is used by one
// thread and thrown away after backward.
//
// Broadcasting is limited to a row vector over the last axis, which is all
// that column scaling (c ⊙ x) and norm gains need.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mergeforge/error.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

template <typename T>
struct Parameter {
  BasicTensor<T> value;
  bool trainable = true;
  // Stays empty until a backward pass reaches this parameter.
  BasicTensor<T> grad;

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() {
    if (has_grad()) grad.fill(T{0});
  }
};

enum class OpKind {
  kConstant,
  kParameter,
  kMatmul,
  kLinear,
  kAdd,
  kSub,
  kMul,
  kScale,
  kSoftmax,
  kLogSoftmax,
  kRmsNorm,
  kSilu,
  kGather,
  kSum,
  kMean,
  kSumAxis,
  kMeanAxis,
  kReshape,
  kTranspose,
  kAttention,
  kPick,
  kAbs,
  kCosine,
};

const char* op_name(OpKind op);

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const BasicTensor<T>& value() const { return tape_->node(id_).value; }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->node(id_).requires_grad; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    OpKind op = OpKind::kConstant;
    std::vector<std::size_t> inputs;
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(BasicTensor<T> value) {
    Node node;
    node.op = OpKind::kConstant;
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> parameter(Parameter<T>& param) {
    Node node;
    node.op = OpKind::kParameter;
    node.value = param.value;
    node.requires_grad = param.trainable;
    node.param = &param;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Records an operation. The output requires grad iff any input does; the
  // backward closure is dropped otherwise.
  Var<T> push(OpKind op, std::initializer_list<Var<T>> inputs, BasicTensor<T> value, BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op_name(op));
    }
    Node node;
    node.op = op;
    node.value = std::move(value);
    for (const Var<T>& in : inputs) {
      if (&in.tape() != this) throw Error("operands belong to different tapes");
      node.inputs.push_back(in.id());
      node.requires_grad = node.requires_grad || in.requires_grad();
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of an input, allocated on first use. Null for inputs
  // that do not require grad, so callers skip work for frozen branches.
  BasicTensor<T>* grad_target(std::size_t id) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return nullptr;
    if (node.grad.empty()) node.grad = BasicTensor<T>(node.value.shape(), T{0});
    return &node.grad;
  }

  // Reverse sweep from a single-element root. Intermediate gradients are
  // recomputed on each call; parameter gradients accumulate additively.
  void backward(Var<T> root) {
    if (&root.tape() != this) throw Error("backward root belongs to a different tape");
    if (root.value().size() != 1) {
      throw ShapeError("backward requires a scalar root, got shape " + shape_str(root.shape()));
    }
    for (Node& node : nodes_) node.grad = BasicTensor<T>();
    if (!root.requires_grad()) return;
    nodes_[root.id()].grad = BasicTensor<T>(root.shape(), T{1});
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.requires_grad || node.grad.empty()) continue;
      if (node.param != nullptr) {
        Parameter<T>& p = *node.param;
        if (!p.has_grad()) p.grad = BasicTensor<T>(p.value.shape(), T{0});
        for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += node.grad[k];
      } else if (node.backward) {
        node.backward(*this, i);
      }
    }
  }

 private:
  std::vector<Node> nodes_;
};

namespace ad {

namespace detail {

template <typename T>
Shape with_last(const Shape& shape, std::size_t last) {
  Shape out = shape;
  out.back() = last;
  return out;
}

template <typename T>
void accumulate(BasicTensor<T>* target, const std::vector<double>& contrib) {
  if (target == nullptr) return;
  for (std::size_t i = 0; i < contrib.size(); ++i) (*target)[i] += static_cast<T>(contrib[i]);
}

}  // namespace detail

// a[m×k] · b[k×n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  BasicTensor<T> out = ops::matmul(av, bv);
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(OpKind::kMatmul, {a, b}, std::move(out), [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    const auto& A = t.node(ia).value;
    const auto& B = t.node(ib).value;
    if (auto* ga = t.grad_target(ia)) {
      std::vector<double> acc(m * k, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += double(dy[i * n + j]) * double(B[p * n + j]);
          acc[i * k + p] = s;
        }
      detail::accumulate(ga, acc);
    }
    if (auto* gb = t.grad_target(ib)) {
      std::vector<double> acc(k * n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double a_ip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) acc[p * n + j] += a_ip * double(dy[i * n + j]);
        }
      detail::accumulate(gb, acc);
    }
  });
}

// Dense layer without bias: x[..., in] · wᵀ with w[out×in].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (wv.rank() != 2 || xv.last_dim() != wv.dim(1)) {
    throw ShapeError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                     shape_str(wv.shape()));
  }
  const std::size_t rows = xv.rows(), in = wv.dim(1), out_dim = wv.dim(0);
  BasicTensor<T> out(detail::with_last<T>(xv.shape(), out_dim));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &xv[r * in];
    for (std::size_t o = 0; o < out_dim; ++o) {
      const T* wr = &wv[o * in];
      double s = 0.0;
      for (std::size_t j = 0; j < in; ++j) s += double(xr[j]) * double(wr[j]);
      out[r * out_dim + o] = static_cast<T>(s);
    }
  }
  const std::size_t ix = x.id(), iw = w.id();
  return x.tape().push(OpKind::kLinear, {x, w}, std::move(out), [ix, iw, rows, in, out_dim](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    const auto& X = t.node(ix).value;
    const auto& W = t.node(iw).value;
    if (auto* gx = t.grad_target(ix)) {
      std::vector<double> acc(rows * in, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double g = dy[r * out_dim + o];
          if (g == 0.0) continue;
          for (std::size_t j = 0; j < in; ++j) acc[r * in + j] += g * double(W[o * in + j]);
        }
      detail::accumulate(gx, acc);
    }
    if (auto* gw = t.grad_target(iw)) {
      std::vector<double> acc(out_dim * in, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double g = dy[r * out_dim + o];
          if (g == 0.0) continue;
          for (std::size_t j = 0; j < in; ++j) acc[o * in + j] += g * double(X[r * in + j]);
        }
      detail::accumulate(gw, acc);
    }
  });
}

enum class Binary { kAdd, kSub, kMul };

// Pointwise a ∘ b. b must have a's shape, or be a row vector of length
// a.last_dim() that is broadcast over every row of a.
template <typename T>
Var<T> elementwise(Var<T> a, Var<T> b, Binary kind) {
  const auto& av = a.value();
  const auto& bv = b.value();
  bool broadcast = false;
  if (av.shape() != bv.shape()) {
    if (bv.rank() == 1 && bv.dim(0) == av.last_dim()) {
      broadcast = true;
    } else {
      throw ShapeError("elementwise: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                       " are not compatible");
    }
  }
  const std::size_t n = av.size(), cols = bv.size();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[i];
    const T y = broadcast ? bv[i % cols] : bv[i];
    switch (kind) {
      case Binary::kAdd: out[i] = x + y; break;
      case Binary::kSub: out[i] = x - y; break;
      case Binary::kMul: out[i] = x * y; break;
    }
  }
  const OpKind op = kind == Binary::kAdd ? OpKind::kAdd : kind == Binary::kSub ? OpKind::kSub : OpKind::kMul;
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(op, {a, b}, std::move(out), [ia, ib, kind, broadcast, n, cols](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    const auto& A = t.node(ia).value;
    const auto& B = t.node(ib).value;
    if (auto* ga = t.grad_target(ia)) {
      for (std::size_t i = 0; i < n; ++i) {
        const T y = broadcast ? B[i % cols] : B[i];
        (*ga)[i] += kind == Binary::kMul ? dy[i] * y : dy[i];
      }
    }
    if (auto* gb = t.grad_target(ib)) {
      std::vector<double> acc(cols, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double g = kind == Binary::kMul ? double(dy[i]) * double(A[i])
                         : kind == Binary::kSub ? -double(dy[i])
                                                : double(dy[i]);
        acc[broadcast ? i % cols : i] += g;
      }
      detail::accumulate(gb, acc);
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, double s) {
  BasicTensor<T> out = a.value();
  for (T& v : out.storage()) v = static_cast<T>(double(v) * s);
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::kScale, {a}, std::move(out), [ia, s](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    if (auto* ga = t.grad_target(ia)) {
      for (std::size_t i = 0; i < dy.size(); ++i) (*ga)[i] += static_cast<T>(double(dy[i]) * s);
    }
  });
}

// Softmax over the last axis, computed with max subtraction.
template <typename T>
Var<T> softmax(Var<T> a) {
  const auto& av = a.value();
  const std::size_t rows = av.rows(), cols = av.last_dim();
  BasicTensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = &av[r * cols];
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(double(x[j]) - mx);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = static_cast<T>(std::exp(double(x[j]) - mx) / z);
  }
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::kSoftmax, {a}, std::move(out), [ia, rows, cols](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    const auto& y = t.node(self).value;
    if (auto* ga = t.grad_target(ia)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += double(dy[r * cols + j]) * double(y[r * cols + j]);
        for (std::size_t j = 0; j < cols; ++j) {
          const std::size_t k = r * cols + j;
          (*ga)[k] += static_cast<T>(double(y[k]) * (double(dy[k]) - dot));
        }
      }
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> a) {
  const auto& av = a.value();
  const std::size_t rows = av.rows(), cols = av.last_dim();
  BasicTensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = &av[r * cols];
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(double(x[j]) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = static_cast<T>(double(x[j]) - lse);
  }
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::kLogSoftmax, {a}, std::move(out), [ia, rows, cols](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    const auto& y = t.node(self).value;
    if (auto* ga = t.grad_target(ia)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) total += double(dy[r * cols + j]);
        for (std::size_t j = 0; j < cols; ++j) {
          const std::size_t k = r * cols + j;
          (*ga)[k] += static_cast<T>(double(dy[k]) - std::exp(double(y[k])) * total);
        }
      }
    }
  });
}

// x / sqrt(mean(x²) + eps) ⊙ gain, per row of the last axis.
template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, double eps) {
  if (eps < 0.0) throw ShapeError("rms_norm: eps must be non-negative");
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const std::size_t rows = xv.rows(), d = xv.last_dim();
  if (gv.rank() != 1 || gv.dim(0) != d) {
    throw ShapeError("rms_norm: gain " + shape_str(gv.shape()) + " does not match input " + shape_str(xv.shape()));
  }
  BasicTensor<T> out(xv.shape());
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += double(xv[r * d + j]) * double(xv[r * d + j]);
    inv_rms[r] = 1.0 / std::sqrt(ms / double(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<T>(double(xv[r * d + j]) * inv_rms[r] * double(gv[j]));
  }
  const std::size_t ix = x.id(), ig = gain.id();
  return x.tape().push(OpKind::kRmsNorm, {x, gain}, std::move(out),
                       [ix, ig, rows, d, inv_rms = std::move(inv_rms)](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    const auto& X = t.node(ix).value;
    const auto& G = t.node(ig).value;
    auto* gx = t.grad_target(ix);
    auto* gg = t.grad_target(ig);
    std::vector<double> gacc(d, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double ir = inv_rms[r];
      double proj = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double gdy = double(G[j]) * double(dy[r * d + j]);
        proj += gdy * double(X[r * d + j]);
        gacc[j] += double(dy[r * d + j]) * double(X[r * d + j]) * ir;
      }
      if (gx != nullptr) {
        const double c = proj * ir * ir * ir / double(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double gdy = double(G[j]) * double(dy[r * d + j]);
          (*gx)[r * d + j] += static_cast<T>(gdy * ir - double(X[r * d + j]) * c);
        }
      }
    }
    detail::accumulate(gg, gacc);
  });
}

template <typename T>
Var<T> silu(Var<T> x) {
  BasicTensor<T> out = x.value();
  for (T& v : out.storage()) v = static_cast<T>(double(v) / (1.0 + std::exp(-double(v))));
  const std::size_t ix = x.id();
  return x.tape().push(OpKind::kSilu, {x}, std::move(out), [ix](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    const auto& X = t.node(ix).value;
    if (auto* gx = t.grad_target(ix)) {
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-double(X[i])));
        (*gx)[i] += static_cast<T>(double(dy[i]) * s * (1.0 + double(X[i]) * (1.0 - s)));
      }
    }
  });
}

// Row lookup table[ids[i], :]. Backward scatter-adds into the table gradient.
template <typename T>
Var<T> gather_rows(Var<T> table, const std::vector<std::int64_t>& ids) {
  const auto& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + shape_str(tv.shape()));
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  BasicTensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " out of range [0, " + std::to_string(vocab) + ")");
    }
    std::copy_n(&tv[static_cast<std::size_t>(ids[i]) * d], d, &out[i * d]);
  }
  const std::size_t it = table.id();
  return table.tape().push(OpKind::kGather, {table}, std::move(out), [it, ids, d](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    if (auto* gt = t.grad_target(it)) {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const std::size_t row = static_cast<std::size_t>(ids[i]);
        for (std::size_t j = 0; j < d; ++j) (*gt)[row * d + j] += dy[i * d + j];
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const std::size_t ix = x.id();
  return x.tape().push(OpKind::kSum, {x}, BasicTensor<T>::scalar(static_cast<T>(ops::sum(x.value()))),
                       [ix](Tape<T>& t, std::size_t self) {
    const T g = t.node(self).grad[0];
    if (auto* gx = t.grad_target(ix)) {
      for (T& v : gx->storage()) v += g;
    }
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const double n = static_cast<double>(x.value().size());
  const std::size_t ix = x.id();
  return x.tape().push(OpKind::kMean, {x}, BasicTensor<T>::scalar(static_cast<T>(ops::sum(x.value()) / n)),
                       [ix, n](Tape<T>& t, std::size_t self) {
    const double g = double(t.node(self).grad[0]) / n;
    if (auto* gx = t.grad_target(ix)) {
      for (T& v : gx->storage()) v += static_cast<T>(g);
    }
  });
}

namespace detail {

template <typename T>
Var<T> reduce_axis(Var<T> x, std::size_t axis, bool average) {
  const auto& xv = x.value();
  if (axis >= xv.rank()) {
    throw ShapeError("reduce: axis " + std::to_string(axis) + " invalid for shape " + shape_str(xv.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  const std::size_t extent = xv.dim(axis);
  Shape out_shape;
  for (std::size_t i = 0; i < xv.rank(); ++i)
    if (i != axis) out_shape.push_back(xv.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  const double div = average ? double(extent) : 1.0;
  BasicTensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      double s = 0.0;
      for (std::size_t e = 0; e < extent; ++e) s += double(xv[(o * extent + e) * inner + in]);
      out[o * inner + in] = static_cast<T>(s / div);
    }
  const std::size_t ix = x.id();
  return x.tape().push(average ? OpKind::kMeanAxis : OpKind::kSumAxis, {x}, std::move(out),
                       [ix, outer, inner, extent, div](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    if (auto* gx = t.grad_target(ix)) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const T g = static_cast<T>(double(dy[o * inner + in]) / div);
          for (std::size_t e = 0; e < extent; ++e) (*gx)[(o * extent + e) * inner + in] += g;
        }
    }
  });
}

}  // namespace detail

template <typename T>
Var<T> sum(Var<T> x, std::size_t axis) { return detail::reduce_axis(x, axis, false); }
template <typename T>
Var<T> mean(Var<T> x, std::size_t axis) { return detail::reduce_axis(x, axis, true); }

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  BasicTensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.tape().push(OpKind::kReshape, {x}, std::move(out), [ix](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    if (auto* gx = t.grad_target(ix)) {
      for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> x) {
  BasicTensor<T> out = ops::transpose(x.value());
  const std::size_t ix = x.id();
  const std::size_t m = x.value().dim(0), n = x.value().dim(1);
  return x.tape().push(OpKind::kTranspose, {x}, std::move(out), [ix, m, n](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    if (auto* gx = t.grad_target(ix)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += dy[j * m + i];
    }
  });
}

// Multi-head causal self-attention over q, k, v of shape [batch*seq, dim].
// Per head: softmax(Q Kᵀ / sqrt(dim/heads)) V with position t attending to
// positions <= t of its own sequence. Heads are concatenated along dim.
template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t batch, std::size_t seq, std::size_t heads) {
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  if (Q.rank() != 2 || Q.shape() != K.shape() || Q.shape() != V.shape() || Q.dim(0) != batch * seq) {
    throw ShapeError("causal_attention: q/k/v must share shape [batch*seq, dim]");
  }
  const std::size_t dim = Q.dim(1);
  if (heads == 0 || dim % heads != 0) throw ShapeError("causal_attention: dim not divisible by heads");
  const std::size_t hd = dim / heads;
  const double scale = 1.0 / std::sqrt(double(hd));

  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  BasicTensor<T> out(Q.shape());
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col = h * hd;
      for (std::size_t ti = 0; ti < seq; ++ti) {
        const std::size_t rq = b * seq + ti;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t u = 0; u <= ti; ++u) {
          const std::size_t rk = b * seq + u;
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += double(Q[rq * dim + col + e]) * double(K[rk * dim + col + e]);
          scores[u] = s * scale;
          mx = std::max(mx, scores[u]);
        }
        double z = 0.0;
        for (std::size_t u = 0; u <= ti; ++u) z += std::exp(scores[u] - mx);
        double* p = &probs[((b * heads + h) * seq + ti) * seq];
        for (std::size_t u = 0; u <= ti; ++u) p[u] = std::exp(scores[u] - mx) / z;
        for (std::size_t e = 0; e < hd; ++e) {
          double s = 0.0;
          for (std::size_t u = 0; u <= ti; ++u) s += p[u] * double(V[(b * seq + u) * dim + col + e]);
          out[rq * dim + col + e] = static_cast<T>(s);
        }
      }
    }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().push(OpKind::kAttention, {q, k, v}, std::move(out),
                       [iq, ik, iv, batch, seq, heads, dim, hd, scale, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    const auto& Qv = t.node(iq).value;
    const auto& Kv = t.node(ik).value;
    const auto& Vv = t.node(iv).value;
    const std::size_t n = batch * seq * dim;
    std::vector<double> dq(n, 0.0), dk(n, 0.0), dv(n, 0.0);
    std::vector<double> dp(seq);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t col = h * hd;
        for (std::size_t ti = 0; ti < seq; ++ti) {
          const std::size_t rq = b * seq + ti;
          const double* p = &probs[((b * heads + h) * seq + ti) * seq];
          double weighted = 0.0;
          for (std::size_t u = 0; u <= ti; ++u) {
            const std::size_t rk = b * seq + u;
            double s = 0.0;
            for (std::size_t e = 0; e < hd; ++e) {
              const double g = dy[rq * dim + col + e];
              s += g * double(Vv[rk * dim + col + e]);
              dv[rk * dim + col + e] += p[u] * g;
            }
            dp[u] = s;
            weighted += p[u] * s;
          }
          for (std::size_t u = 0; u <= ti; ++u) {
            const std::size_t rk = b * seq + u;
            const double ds = p[u] * (dp[u] - weighted) * scale;
            if (ds == 0.0) continue;
            for (std::size_t e = 0; e < hd; ++e) {
              dq[rq * dim + col + e] += ds * double(Kv[rk * dim + col + e]);
              dk[rk * dim + col + e] += ds * double(Qv[rq * dim + col + e]);
            }
          }
        }
      }
    detail::accumulate(t.grad_target(iq), dq);
    detail::accumulate(t.grad_target(ik), dk);
    detail::accumulate(t.grad_target(iv), dv);
  });
}

// Selects x[r, targets[r]] for every row r of x viewed as [rows, last_dim].
// Rows whose target is negative are skipped; the result holds one entry per
// selected row.
template <typename T>
Var<T> pick(Var<T> x, const std::vector<std::int64_t>& targets) {
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.last_dim();
  if (targets.size() != rows) {
    throw ShapeError("pick: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  }
  std::vector<std::size_t> flat;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= cols) {
      throw ShapeError("pick: target " + std::to_string(targets[r]) + " out of range [0, " + std::to_string(cols) + ")");
    }
    flat.push_back(r * cols + static_cast<std::size_t>(targets[r]));
  }
  if (flat.empty()) throw ShapeError("pick: no rows selected");
  BasicTensor<T> out({flat.size()});
  for (std::size_t i = 0; i < flat.size(); ++i) out[i] = xv[flat[i]];
  const std::size_t ix = x.id();
  return x.tape().push(OpKind::kPick, {x}, std::move(out), [ix, flat = std::move(flat)](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    if (auto* gx = t.grad_target(ix)) {
      for (std::size_t i = 0; i < flat.size(); ++i) (*gx)[flat[i]] += dy[i];
    }
  });
}

// |x|, with subgradient 0 at 0.
template <typename T>
Var<T> abs(Var<T> x) {
  BasicTensor<T> out = x.value();
  for (T& v : out.storage()) v = std::abs(v);
  const std::size_t ix = x.id();
  return x.tape().push(OpKind::kAbs, {x}, std::move(out), [ix](Tape<T>& t, std::size_t self) {
    const auto& dy = t.node(self).grad;
    const auto& X = t.node(ix).value;
    if (auto* gx = t.grad_target(ix)) {
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const T s = X[i] > T{0} ? T{1} : X[i] < T{0} ? T{-1} : T{0};
        (*gx)[i] += dy[i] * s;
      }
    }
  });
}

// Cosine similarity of two equal-length vectors. Zero when either has zero
// norm, in which case no gradient flows.
template <typename T>
Var<T> cosine(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.size() != bv.size()) {
    throw ShapeError("cosine: lengths " + std::to_string(av.size()) + " and " + std::to_string(bv.size()) + " differ");
  }
  const double ab = ops::dot(av.data(), bv.data());
  const double na = std::sqrt(ops::dot(av.data(), av.data()));
  const double nb = std::sqrt(ops::dot(bv.data(), bv.data()));
  const bool degenerate = na == 0.0 || nb == 0.0;
  const double cos = degenerate ? 0.0 : ab / (na * nb);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(OpKind::kCosine, {a, b}, BasicTensor<T>::scalar(static_cast<T>(cos)),
                       [ia, ib, degenerate, na, nb, cos](Tape<T>& t, std::size_t self) {
    if (degenerate) return;
    const double g = t.node(self).grad[0];
    const auto& A = t.node(ia).value;
    const auto& B = t.node(ib).value;
    // d cos / d a = b / (|a||b|) - cos · a / |a|²
    if (auto* ga = t.grad_target(ia)) {
      for (std::size_t i = 0; i < A.size(); ++i)
        (*ga)[i] += static_cast<T>(g * (double(B[i]) / (na * nb) - cos * double(A[i]) / (na * na)));
    }
    if (auto* gb = t.grad_target(ib)) {
      for (std::size_t i = 0; i < B.size(); ++i)
        (*gb)[i] += static_cast<T>(g * (double(A[i]) / (na * nb) - cos * double(B[i]) / (nb * nb)));
    }
  });
}

}  // namespace ad

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return ad::elementwise(a, b, ad::Binary::kAdd); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return ad::elementwise(a, b, ad::Binary::kSub); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return ad::elementwise(a, b, ad::Binary::kMul); }

}  // namespace mergeforge
