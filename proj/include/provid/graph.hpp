#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "provid/tensor.hpp"

namespace provid {

/// Index of a node in its owning Graph. Valid only for that graph.
struct NodeId {
  std::size_t idx{static_cast<std::size_t>(-1)};
  bool valid() const { return idx != static_cast<std::size_t>(-1); }
  friend bool operator==(const NodeId&, const NodeId&) = default;
};

enum class Op : std::uint8_t {
  Leaf,            // input, constant or parameter; value bound directly
  Add, Sub, Mul, Div,
  Affine,          // a*x + b elementwise
  MatMul,          // x[B,N], w[M,N] -> x w^T [B,M]
  MatMulTN,        // a[B,M], x[B,N] -> a^T x [M,N]
  Transpose2d,
  ChannelScale,    // x[B,C,...] * v[C] broadcast over batch and inner axes
  ChannelBias,     // x[B,C,...] + v[C]
  ReduceToChannel, // sum over every axis except axis 1 -> [C]
  BroadcastCVec,   // v[C] -> given shape with dims[1] == C
  Conv3d,          // x[B,Ci,T,H,W], k[Co,Ci,kt,kh,kw], same zero padding
  Conv3dKernelGrad,// x, cot -> kernel-shaped correlation
  KernelFlipSwap,  // swap Cin/Cout and mirror spatial taps
  AvgPool3d, Upsample3d,
  LeakyRelu, LreluMask,
  ClampMin, StepMask, SignMask,
  Sqrt, Log, Sigmoid,
  SumAll,          // -> [1]
  BroadcastAll,    // [1] -> shape
  SumSamples,      // [B,...] -> [B]
  BroadcastSamples,// [B] -> shape with dims[0] == B
  BatchMean,       // [B,...] -> [1,...]
  BroadcastBatch,  // [1,...] -> [B,...]
  ChannelMean,     // [B,C,rest] -> [B,1,rest]
  BroadcastChannel,// [B,1,rest] -> [B,C,rest]
  ConcatChannel, SliceChannel,
  Reshape,
  Sort,            // ascending, stable
  Unsort,          // scatter c by the stable argsort permutation of x
  ApplySortPerm,   // gather c by the stable argsort permutation of x
};

template <class T>
struct Node {
  Op op{Op::Leaf};
  std::vector<NodeId> in;
  double a{0.0}, b{0.0};             // scalar attributes (affine coefs, slope, bound)
  Shape3d factor{1, 1, 1};           // pool/upsample factor
  std::vector<std::size_t> attr_dims;// reshape/broadcast target or kernel shape
  std::size_t c0{0}, c1{0};          // slice range or broadcast extent
  std::vector<std::size_t> shape;    // output shape, fixed at construction
  std::optional<Tensor<T>> value;    // leaf binding or cached output
  bool trainable{false};
  std::string name;
};

namespace detail {

inline std::size_t numel_of(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

inline std::size_t inner_of(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < dims.size(); ++i) n *= dims[i];
  return n;
}

}  // namespace detail

/// Result of a reverse-mode differentiation request: one gradient node per
/// requested variable, plus a flag telling whether the variable was reachable
/// from the differentiated output (unreachable variables get a zero node).
struct GradResult {
  std::vector<NodeId> grads;
  std::vector<bool> reachable;
};

/// Append-only differentiable computation graph. Nodes are created in
/// topological order (inputs always precede outputs), outputs are cached on
/// first evaluation, and backward passes are themselves expressed as graph
/// construction, so gradients of gradients are ordinary nodes.
template <class T>
class Graph {
 public:
  // ---- leaves ------------------------------------------------------------

  NodeId input(std::vector<std::size_t> dims, std::string name = "") {
    Node<T> n;
    n.op = Op::Leaf;
    n.shape = std::move(dims);
    n.name = std::move(name);
    return push(std::move(n));
  }

  NodeId constant(Tensor<T> v) {
    Node<T> n;
    n.op = Op::Leaf;
    n.shape = v.dims();
    n.value = std::move(v);
    return push(std::move(n));
  }

  /// Trainable leaf, deduplicated by name: a second request for the same name
  /// returns the existing node so that repeated network applications share
  /// parameters.
  NodeId param(const std::string& name, const Tensor<T>& v) {
    auto it = param_index_.find(name);
    if (it != param_index_.end()) {
      const Node<T>& existing = nodes_[it->second];
      if (existing.shape != v.dims()) {
        throw ShapeError("param " + name + ": shape mismatch with existing node");
      }
      return NodeId{it->second};
    }
    Node<T> n;
    n.op = Op::Leaf;
    n.shape = v.dims();
    n.value = v;
    n.trainable = true;
    n.name = name;
    NodeId id = push(std::move(n));
    param_index_[name] = id.idx;
    return id;
  }

  void bind(NodeId id, Tensor<T> v) {
    Node<T>& n = at(id);
    if (n.op != Op::Leaf) throw ValueError("bind: node is not a leaf");
    if (n.shape != v.dims()) {
      throw ShapeError("bind: expected shape " + Tensor<T>::shape_str(n.shape) + ", got " +
                       Tensor<T>::shape_str(v.dims()));
    }
    n.value = std::move(v);
    invalidate();
  }

  bool is_bound(NodeId id) const { return at(id).value.has_value(); }

  // ---- elementwise and structural ops -------------------------------------

  NodeId add(NodeId x, NodeId y) { return binary_same(Op::Add, x, y); }
  NodeId sub(NodeId x, NodeId y) { return binary_same(Op::Sub, x, y); }
  NodeId mul(NodeId x, NodeId y) { return binary_same(Op::Mul, x, y); }
  NodeId div(NodeId x, NodeId y) { return binary_same(Op::Div, x, y); }

  NodeId affine(NodeId x, double a, double b) {
    Node<T> n = unary(Op::Affine, x);
    n.a = a;
    n.b = b;
    return push(std::move(n));
  }

  NodeId matmul(NodeId x, NodeId w) {
    require_rank(x, 2, "matmul input");
    require_rank(w, 2, "matmul weight");
    if (shape(x)[1] != shape(w)[1]) {
      throw ShapeError("matmul: inner extents differ (" + std::to_string(shape(x)[1]) + " vs " +
                       std::to_string(shape(w)[1]) + ")");
    }
    Node<T> n;
    n.op = Op::MatMul;
    n.in = {x, w};
    n.shape = {shape(x)[0], shape(w)[0]};
    return push(std::move(n));
  }

  NodeId matmul_tn(NodeId a, NodeId x) {
    require_rank(a, 2, "matmul_tn lhs");
    require_rank(x, 2, "matmul_tn rhs");
    if (shape(a)[0] != shape(x)[0]) {
      throw ShapeError("matmul_tn: batch extents differ");
    }
    Node<T> n;
    n.op = Op::MatMulTN;
    n.in = {a, x};
    n.shape = {shape(a)[1], shape(x)[1]};
    return push(std::move(n));
  }

  NodeId transpose2d(NodeId w) {
    require_rank(w, 2, "transpose2d");
    Node<T> n;
    n.op = Op::Transpose2d;
    n.in = {w};
    n.shape = {shape(w)[1], shape(w)[0]};
    return push(std::move(n));
  }

  NodeId channel_scale(NodeId x, NodeId v) { return channel_vec(Op::ChannelScale, x, v); }
  NodeId channel_bias(NodeId x, NodeId v) { return channel_vec(Op::ChannelBias, x, v); }

  NodeId reduce_to_channel(NodeId x) {
    require_min_rank(x, 2, "reduce_to_channel");
    Node<T> n;
    n.op = Op::ReduceToChannel;
    n.in = {x};
    n.shape = {shape(x)[1]};
    return push(std::move(n));
  }

  NodeId broadcast_cvec(NodeId v, std::vector<std::size_t> dims) {
    require_rank(v, 1, "broadcast_cvec");
    if (dims.size() < 2 || dims[1] != shape(v)[0]) {
      throw ShapeError("broadcast_cvec: target dims[1] must equal vector length");
    }
    Node<T> n;
    n.op = Op::BroadcastCVec;
    n.in = {v};
    n.shape = dims;
    n.attr_dims = std::move(dims);
    return push(std::move(n));
  }

  NodeId conv3d(NodeId x, NodeId k) {
    require_rank(x, 5, "conv3d input");
    require_rank(k, 5, "conv3d kernel");
    const auto& xs = shape(x);
    const auto& ks = shape(k);
    if (ks[1] != xs[1]) {
      throw ShapeError("conv3d: kernel expects " + std::to_string(ks[1]) +
                       " input channels, tensor has " + std::to_string(xs[1]));
    }
    if (ks[2] % 2 == 0 || ks[3] % 2 == 0 || ks[4] % 2 == 0) {
      throw ShapeError("conv3d: kernel extents must be odd");
    }
    Node<T> n;
    n.op = Op::Conv3d;
    n.in = {x, k};
    n.shape = {xs[0], ks[0], xs[2], xs[3], xs[4]};
    return push(std::move(n));
  }

  NodeId conv3d_kernel_grad(NodeId x, NodeId cot, std::vector<std::size_t> kernel_dims) {
    require_rank(x, 5, "conv3d_kernel_grad input");
    require_rank(cot, 5, "conv3d_kernel_grad cotangent");
    if (kernel_dims.size() != 5 || kernel_dims[0] != shape(cot)[1] ||
        kernel_dims[1] != shape(x)[1]) {
      throw ShapeError("conv3d_kernel_grad: inconsistent kernel shape");
    }
    Node<T> n;
    n.op = Op::Conv3dKernelGrad;
    n.in = {x, cot};
    n.shape = kernel_dims;
    n.attr_dims = std::move(kernel_dims);
    return push(std::move(n));
  }

  NodeId kernel_flip_swap(NodeId k) {
    require_rank(k, 5, "kernel_flip_swap");
    const auto& ks = shape(k);
    Node<T> n;
    n.op = Op::KernelFlipSwap;
    n.in = {k};
    n.shape = {ks[1], ks[0], ks[2], ks[3], ks[4]};
    return push(std::move(n));
  }

  NodeId avg_pool3d(NodeId x, Shape3d f) {
    require_rank(x, 5, "avg_pool3d");
    const auto& xs = shape(x);
    detail::require_factor(f.t, "T");
    detail::require_factor(f.h, "H");
    detail::require_factor(f.w, "W");
    if (xs[2] % f.t || xs[3] % f.h || xs[4] % f.w) {
      throw ShapeError("avg_pool3d: extents " + Tensor<T>::shape_str(xs) +
                       " not divisible by factor " + f.str());
    }
    Node<T> n;
    n.op = Op::AvgPool3d;
    n.in = {x};
    n.factor = f;
    n.shape = {xs[0], xs[1], xs[2] / f.t, xs[3] / f.h, xs[4] / f.w};
    return push(std::move(n));
  }

  NodeId upsample3d(NodeId x, Shape3d f) {
    require_rank(x, 5, "upsample3d");
    const auto& xs = shape(x);
    detail::require_factor(f.t, "T");
    detail::require_factor(f.h, "H");
    detail::require_factor(f.w, "W");
    Node<T> n;
    n.op = Op::Upsample3d;
    n.in = {x};
    n.factor = f;
    n.shape = {xs[0], xs[1], xs[2] * f.t, xs[3] * f.h, xs[4] * f.w};
    return push(std::move(n));
  }

  NodeId leaky_relu(NodeId x, double slope) {
    Node<T> n = unary(Op::LeakyRelu, x);
    n.a = slope;
    return push(std::move(n));
  }

  NodeId lrelu_mask(NodeId x, double slope) {
    Node<T> n = unary(Op::LreluMask, x);
    n.a = slope;
    return push(std::move(n));
  }

  NodeId clamp_min(NodeId x, double bound) {
    Node<T> n = unary(Op::ClampMin, x);
    n.a = bound;
    return push(std::move(n));
  }

  NodeId step_mask(NodeId x, double bound) {
    Node<T> n = unary(Op::StepMask, x);
    n.a = bound;
    return push(std::move(n));
  }

  NodeId sign_mask(NodeId x) { return push(unary(Op::SignMask, x)); }
  NodeId sqrt_op(NodeId x) { return push(unary(Op::Sqrt, x)); }
  NodeId log_op(NodeId x) { return push(unary(Op::Log, x)); }
  NodeId sigmoid(NodeId x) { return push(unary(Op::Sigmoid, x)); }

  NodeId sum_all(NodeId x) {
    Node<T> n;
    n.op = Op::SumAll;
    n.in = {x};
    n.shape = {1};
    return push(std::move(n));
  }

  NodeId broadcast_all(NodeId s, std::vector<std::size_t> dims) {
    if (numel(s) != 1) throw ShapeError("broadcast_all: source must be scalar");
    Node<T> n;
    n.op = Op::BroadcastAll;
    n.in = {s};
    n.shape = dims;
    n.attr_dims = std::move(dims);
    return push(std::move(n));
  }

  NodeId sum_samples(NodeId x) {
    require_min_rank(x, 1, "sum_samples");
    Node<T> n;
    n.op = Op::SumSamples;
    n.in = {x};
    n.shape = {shape(x)[0]};
    return push(std::move(n));
  }

  NodeId broadcast_samples(NodeId v, std::vector<std::size_t> dims) {
    require_rank(v, 1, "broadcast_samples");
    if (dims.empty() || dims[0] != shape(v)[0]) {
      throw ShapeError("broadcast_samples: target dims[0] must equal vector length");
    }
    Node<T> n;
    n.op = Op::BroadcastSamples;
    n.in = {v};
    n.shape = dims;
    n.attr_dims = std::move(dims);
    return push(std::move(n));
  }

  NodeId batch_mean(NodeId x) {
    require_min_rank(x, 1, "batch_mean");
    Node<T> n;
    n.op = Op::BatchMean;
    n.in = {x};
    n.shape = shape(x);
    n.shape[0] = 1;
    return push(std::move(n));
  }

  NodeId broadcast_batch(NodeId x, std::size_t batch) {
    require_min_rank(x, 1, "broadcast_batch");
    if (shape(x)[0] != 1) throw ShapeError("broadcast_batch: dims[0] must be 1");
    Node<T> n;
    n.op = Op::BroadcastBatch;
    n.in = {x};
    n.shape = shape(x);
    n.shape[0] = batch;
    n.c0 = batch;
    return push(std::move(n));
  }

  NodeId channel_mean(NodeId x) {
    require_min_rank(x, 2, "channel_mean");
    Node<T> n;
    n.op = Op::ChannelMean;
    n.in = {x};
    n.shape = shape(x);
    n.shape[1] = 1;
    return push(std::move(n));
  }

  NodeId broadcast_channel(NodeId x, std::size_t channels) {
    require_min_rank(x, 2, "broadcast_channel");
    if (shape(x)[1] != 1) throw ShapeError("broadcast_channel: dims[1] must be 1");
    Node<T> n;
    n.op = Op::BroadcastChannel;
    n.in = {x};
    n.shape = shape(x);
    n.shape[1] = channels;
    n.c0 = channels;
    return push(std::move(n));
  }

  NodeId concat_channel(NodeId x, NodeId y) {
    require_min_rank(x, 2, "concat_channel");
    const auto& xs = shape(x);
    const auto& ys = shape(y);
    if (xs.size() != ys.size()) throw ShapeError("concat_channel: rank mismatch");
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (i != 1 && xs[i] != ys[i]) {
        throw ShapeError("concat_channel: extent mismatch on axis " + std::to_string(i));
      }
    }
    Node<T> n;
    n.op = Op::ConcatChannel;
    n.in = {x, y};
    n.shape = xs;
    n.shape[1] = xs[1] + ys[1];
    return push(std::move(n));
  }

  NodeId slice_channel(NodeId x, std::size_t from, std::size_t to) {
    require_min_rank(x, 2, "slice_channel");
    const auto& xs = shape(x);
    if (!(from < to && to <= xs[1])) {
      throw ShapeError("slice_channel: bad range [" + std::to_string(from) + "," +
                       std::to_string(to) + ") for " + std::to_string(xs[1]) + " channels");
    }
    Node<T> n;
    n.op = Op::SliceChannel;
    n.in = {x};
    n.shape = xs;
    n.shape[1] = to - from;
    n.c0 = from;
    n.c1 = to;
    return push(std::move(n));
  }

  NodeId reshape(NodeId x, std::vector<std::size_t> dims) {
    if (detail::numel_of(dims) != numel(x)) {
      throw ShapeError("reshape: element count mismatch");
    }
    Node<T> n;
    n.op = Op::Reshape;
    n.in = {x};
    n.shape = dims;
    n.attr_dims = std::move(dims);
    return push(std::move(n));
  }

  NodeId sort(NodeId x) {
    require_rank(x, 1, "sort");
    return push(unary(Op::Sort, x));
  }

  NodeId unsort(NodeId c, NodeId x) { return sort_pair(Op::Unsort, c, x); }
  NodeId apply_sort_perm(NodeId c, NodeId x) { return sort_pair(Op::ApplySortPerm, c, x); }

  // ---- composites ----------------------------------------------------------

  NodeId neg(NodeId x) { return affine(x, -1.0, 0.0); }
  NodeId square(NodeId x) { return mul(x, x); }
  NodeId abs_val(NodeId x) { return mul(x, sign_mask(x)); }

  NodeId mean_all(NodeId x) {
    return affine(sum_all(x), 1.0 / static_cast<double>(numel(x)), 0.0);
  }

  /// Per-batch mean of a [B] vector of per-sample values.
  NodeId mean_samples(NodeId v) {
    require_rank(v, 1, "mean_samples");
    return mean_all(v);
  }

  /// (1-alpha)*low + alpha*high. The endpoints short-circuit so that the
  /// blended output is bit-identical to the surviving branch.
  NodeId blend(NodeId low, NodeId high, double alpha) {
    if (shape(low) != shape(high)) throw ShapeError("blend: shape mismatch");
    if (alpha <= 0.0) return low;
    if (alpha >= 1.0) return high;
    return add(affine(low, 1.0 - alpha, 0.0), affine(high, alpha, 0.0));
  }

  NodeId zeros_like(NodeId x) { return constant(Tensor<T>(shape(x))); }

  // ---- execution -----------------------------------------------------------

  /// Evaluates one node, caching every intermediate output along the way.
  const Tensor<T>& forward(NodeId out) {
    ensure_evaluated(out);
    return *at(out).value;
  }

  std::vector<Tensor<T>> forward(const std::vector<NodeId>& outs) {
    std::vector<Tensor<T>> r;
    r.reserve(outs.size());
    for (NodeId id : outs) r.push_back(forward(id));
    return r;
  }

  /// Reverse-mode differentiation of a one-element output with respect to a
  /// set of nodes (leaves or interior). Returns new graph nodes computing the
  /// gradients; the nodes are themselves differentiable. Variables the output
  /// does not depend on receive a zero node and a cleared reachable flag.
  GradResult grad(NodeId out, const std::vector<NodeId>& wrt) {
    if (numel(out) != 1) {
      throw ShapeError("grad: output must have a single element, has " +
                       std::to_string(numel(out)));
    }
    const std::size_t frontier = nodes_.size();
    std::vector<NodeId> cot(frontier);
    cot[out.idx] = constant(Tensor<T>(at(out).shape, T(1)));

    for (std::size_t idx = out.idx + 1; idx-- > 0;) {
      if (!cot[idx].valid()) continue;
      accumulate_vjps(NodeId{idx}, cot[idx], cot);
    }

    GradResult res;
    for (NodeId w : wrt) {
      check(w);
      if (w.idx < frontier && cot[w.idx].valid()) {
        res.grads.push_back(cot[w.idx]);
        res.reachable.push_back(true);
      } else {
        res.grads.push_back(constant(Tensor<T>(at(w).shape)));
        res.reachable.push_back(false);
      }
    }
    return res;
  }

  /// L2 norm of the gradient of sum(y) with respect to wrt, as a
  /// differentiable scalar node.
  NodeId gradient_norm(NodeId y, NodeId wrt) {
    NodeId s = sum_all(y);
    GradResult gr = grad(s, {wrt});
    NodeId g = gr.grads[0];
    return sqrt_op(sum_all(mul(g, g)));
  }

  // ---- introspection -------------------------------------------------------

  std::size_t node_count() const { return nodes_.size(); }
  const Node<T>& node(NodeId id) const { return at(id); }
  const std::vector<std::size_t>& shape(NodeId id) const { return at(id).shape; }
  std::size_t numel(NodeId id) const { return detail::numel_of(at(id).shape); }

  std::vector<NodeId> trainable_params() const {
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].trainable) out.push_back(NodeId{i});
    }
    return out;
  }

  NodeId find_param(const std::string& name) const {
    auto it = param_index_.find(name);
    if (it == param_index_.end()) return NodeId{};
    return NodeId{it->second};
  }

  /// Replaces the value of a leaf and drops every cached interior output.
  void set_leaf_value(NodeId id, Tensor<T> v) { bind(id, std::move(v)); }

  void invalidate() {
    for (Node<T>& n : nodes_) {
      if (n.op != Op::Leaf) n.value.reset();
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Node<T>& nd : nodes_) {
      if (nd.trainable) n += detail::numel_of(nd.shape);
    }
    return n;
  }

 private:
  Node<T>& at(NodeId id) {
    check(id);
    return nodes_[id.idx];
  }
  const Node<T>& at(NodeId id) const {
    check(id);
    return nodes_[id.idx];
  }
  void check(NodeId id) const {
    if (!id.valid() || id.idx >= nodes_.size()) {
      throw ValueError("NodeId does not belong to this graph");
    }
  }

  NodeId push(Node<T> n) {
    nodes_.push_back(std::move(n));
    return NodeId{nodes_.size() - 1};
  }

  Node<T> unary(Op op, NodeId x) {
    Node<T> n;
    n.op = op;
    n.in = {x};
    n.shape = shape(x);
    return n;
  }

  NodeId binary_same(Op op, NodeId x, NodeId y) {
    if (shape(x) != shape(y)) {
      throw ShapeError("elementwise op: shape mismatch " + Tensor<T>::shape_str(shape(x)) +
                       " vs " + Tensor<T>::shape_str(shape(y)));
    }
    Node<T> n;
    n.op = op;
    n.in = {x, y};
    n.shape = shape(x);
    return push(std::move(n));
  }

  NodeId channel_vec(Op op, NodeId x, NodeId v) {
    require_min_rank(x, 2, "channel op");
    require_rank(v, 1, "channel vector");
    if (shape(v)[0] != shape(x)[1]) {
      throw ShapeError("channel op: vector length " + std::to_string(shape(v)[0]) +
                       " vs " + std::to_string(shape(x)[1]) + " channels");
    }
    Node<T> n;
    n.op = op;
    n.in = {x, v};
    n.shape = shape(x);
    return push(std::move(n));
  }

  NodeId sort_pair(Op op, NodeId c, NodeId x) {
    require_rank(c, 1, "sort cotangent");
    require_rank(x, 1, "sort key");
    if (shape(c) != shape(x)) throw ShapeError("sort pair: length mismatch");
    Node<T> n;
    n.op = op;
    n.in = {c, x};
    n.shape = shape(c);
    return push(std::move(n));
  }

  void require_rank(NodeId id, std::size_t r, const char* what) const {
    if (shape(id).size() != r) {
      throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                       std::to_string(shape(id).size()));
    }
  }
  void require_min_rank(NodeId id, std::size_t r, const char* what) const {
    if (shape(id).size() < r) {
      throw ShapeError(std::string(what) + ": expected rank >= " + std::to_string(r));
    }
  }

  // ---- evaluation ----------------------------------------------------------

  void ensure_evaluated(NodeId out) {
    check(out);
    std::vector<char> needed(nodes_.size(), 0);
    std::vector<std::size_t> stack{out.idx};
    while (!stack.empty()) {
      const std::size_t idx = stack.back();
      stack.pop_back();
      if (needed[idx] || nodes_[idx].value.has_value()) continue;
      if (nodes_[idx].op == Op::Leaf) {
        throw ValueError("forward: unbound leaf" +
                         (nodes_[idx].name.empty() ? std::string(" #") + std::to_string(idx)
                                                   : " '" + nodes_[idx].name + "'"));
      }
      needed[idx] = 1;
      for (NodeId in : nodes_[idx].in) stack.push_back(in.idx);
    }
    for (std::size_t idx = 0; idx < needed.size(); ++idx) {
      if (!needed[idx]) continue;
      Tensor<T> v = eval(nodes_[idx]);
      if (v.dims() != nodes_[idx].shape) {
        throw ShapeError("internal: node " + std::to_string(idx) + " produced shape " +
                         Tensor<T>::shape_str(v.dims()) + ", contract says " +
                         Tensor<T>::shape_str(nodes_[idx].shape));
      }
      nodes_[idx].value = std::move(v);
    }
  }

  const Tensor<T>& val(NodeId id) const { return *nodes_[id.idx].value; }

  Tensor<T> eval(const Node<T>& n) const {
    switch (n.op) {
      case Op::Leaf:
        return *n.value;
      case Op::Add: {
        Tensor<T> out = val(n.in[0]);
        const Tensor<T>& y = val(n.in[1]);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += y[i];
        return out;
      }
      case Op::Sub: {
        Tensor<T> out = val(n.in[0]);
        const Tensor<T>& y = val(n.in[1]);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= y[i];
        return out;
      }
      case Op::Mul: {
        Tensor<T> out = val(n.in[0]);
        const Tensor<T>& y = val(n.in[1]);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= y[i];
        return out;
      }
      case Op::Div: {
        Tensor<T> out = val(n.in[0]);
        const Tensor<T>& y = val(n.in[1]);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= y[i];
        return out;
      }
      case Op::Affine: {
        Tensor<T> out = val(n.in[0]);
        const T a = static_cast<T>(n.a), b = static_cast<T>(n.b);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * out[i] + b;
        return out;
      }
      case Op::MatMul: {
        const Tensor<T>& x = val(n.in[0]);
        const Tensor<T>& w = val(n.in[1]);
        const std::size_t B = x.dim(0), N = x.dim(1), M = w.dim(0);
        Tensor<T> out({B, M});
        for (std::size_t r = 0; r < B; ++r)
          for (std::size_t m = 0; m < M; ++m) {
            T acc = 0;
            for (std::size_t k = 0; k < N; ++k) acc += x[r * N + k] * w[m * N + k];
            out[r * M + m] = acc;
          }
        return out;
      }
      case Op::MatMulTN: {
        const Tensor<T>& a = val(n.in[0]);
        const Tensor<T>& x = val(n.in[1]);
        const std::size_t B = a.dim(0), M = a.dim(1), N = x.dim(1);
        Tensor<T> out({M, N});
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t m = 0; m < M; ++m) {
            const T av = a[b * M + m];
            for (std::size_t k = 0; k < N; ++k) out[m * N + k] += av * x[b * N + k];
          }
        return out;
      }
      case Op::Transpose2d: {
        const Tensor<T>& w = val(n.in[0]);
        const std::size_t M = w.dim(0), N = w.dim(1);
        Tensor<T> out({N, M});
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t k = 0; k < N; ++k) out[k * M + m] = w[m * N + k];
        return out;
      }
      case Op::ChannelScale:
      case Op::ChannelBias: {
        const Tensor<T>& x = val(n.in[0]);
        const Tensor<T>& v = val(n.in[1]);
        const std::size_t B = x.dim(0), C = x.dim(1), inner = detail::inner_of(x.dims());
        Tensor<T> out = x;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            T* row = out.data() + (b * C + c) * inner;
            if (n.op == Op::ChannelScale) {
              for (std::size_t i = 0; i < inner; ++i) row[i] *= v[c];
            } else {
              for (std::size_t i = 0; i < inner; ++i) row[i] += v[c];
            }
          }
        return out;
      }
      case Op::ReduceToChannel: {
        const Tensor<T>& x = val(n.in[0]);
        const std::size_t B = x.dim(0), C = x.dim(1), inner = detail::inner_of(x.dims());
        Tensor<T> out({C});
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            const T* row = x.data() + (b * C + c) * inner;
            T acc = 0;
            for (std::size_t i = 0; i < inner; ++i) acc += row[i];
            out[c] += acc;
          }
        return out;
      }
      case Op::BroadcastCVec: {
        const Tensor<T>& v = val(n.in[0]);
        Tensor<T> out(n.attr_dims);
        const std::size_t B = out.dim(0), C = out.dim(1), inner = detail::inner_of(out.dims());
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            T* row = out.data() + (b * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) row[i] = v[c];
          }
        return out;
      }
      case Op::Conv3d:
        return provid::conv3d(val(n.in[0]), val(n.in[1]));
      case Op::Conv3dKernelGrad:
        return eval_conv3d_kernel_grad(val(n.in[0]), val(n.in[1]), n.attr_dims);
      case Op::KernelFlipSwap: {
        const Tensor<T>& k = val(n.in[0]);
        const std::size_t Co = k.dim(0), Ci = k.dim(1), kt = k.dim(2), kh = k.dim(3), kw = k.dim(4);
        Tensor<T> out({Ci, Co, kt, kh, kw});
        for (std::size_t o = 0; o < Co; ++o)
          for (std::size_t i = 0; i < Ci; ++i)
            for (std::size_t a = 0; a < kt; ++a)
              for (std::size_t b = 0; b < kh; ++b)
                for (std::size_t c = 0; c < kw; ++c)
                  out[(((i * Co + o) * kt + a) * kh + b) * kw + c] =
                      k[(((o * Ci + i) * kt + (kt - 1 - a)) * kh + (kh - 1 - b)) * kw +
                        (kw - 1 - c)];
        return out;
      }
      case Op::AvgPool3d:
        return provid::avg_pool3d(val(n.in[0]), n.factor);
      case Op::Upsample3d:
        return provid::upsample_nearest3d(val(n.in[0]), n.factor);
      case Op::LeakyRelu: {
        Tensor<T> out = val(n.in[0]);
        const T s = static_cast<T>(n.a);
        for (std::size_t i = 0; i < out.numel(); ++i) {
          if (out[i] < T(0)) out[i] *= s;
        }
        return out;
      }
      case Op::LreluMask: {
        Tensor<T> out = val(n.in[0]);
        const T s = static_cast<T>(n.a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] >= T(0) ? T(1) : s;
        return out;
      }
      case Op::ClampMin: {
        Tensor<T> out = val(n.in[0]);
        const T c = static_cast<T>(n.a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], c);
        return out;
      }
      case Op::StepMask: {
        Tensor<T> out = val(n.in[0]);
        const T c = static_cast<T>(n.a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] >= c ? T(1) : T(0);
        return out;
      }
      case Op::SignMask: {
        Tensor<T> out = val(n.in[0]);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] >= T(0) ? T(1) : T(-1);
        return out;
      }
      case Op::Sqrt: {
        Tensor<T> out = val(n.in[0]);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
        return out;
      }
      case Op::Log: {
        Tensor<T> out = val(n.in[0]);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
        return out;
      }
      case Op::Sigmoid: {
        Tensor<T> out = val(n.in[0]);
        for (std::size_t i = 0; i < out.numel(); ++i) {
          const T x = out[i];
          out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                             : std::exp(x) / (T(1) + std::exp(x));
        }
        return out;
      }
      case Op::SumAll: {
        const Tensor<T>& x = val(n.in[0]);
        T acc = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
        return Tensor<T>::from_values({1}, {acc});
      }
      case Op::BroadcastAll: {
        return Tensor<T>(n.attr_dims, val(n.in[0])[0]);
      }
      case Op::SumSamples: {
        const Tensor<T>& x = val(n.in[0]);
        const std::size_t B = x.dim(0), inner = x.numel() / B;
        Tensor<T> out({B});
        for (std::size_t b = 0; b < B; ++b) {
          const T* row = x.data() + b * inner;
          T acc = 0;
          for (std::size_t i = 0; i < inner; ++i) acc += row[i];
          out[b] = acc;
        }
        return out;
      }
      case Op::BroadcastSamples: {
        const Tensor<T>& v = val(n.in[0]);
        Tensor<T> out(n.attr_dims);
        const std::size_t B = out.dim(0), inner = out.numel() / B;
        for (std::size_t b = 0; b < B; ++b) {
          T* row = out.data() + b * inner;
          for (std::size_t i = 0; i < inner; ++i) row[i] = v[b];
        }
        return out;
      }
      case Op::BatchMean: {
        const Tensor<T>& x = val(n.in[0]);
        const std::size_t B = x.dim(0), inner = x.numel() / B;
        Tensor<T> out(n.shape);
        for (std::size_t b = 0; b < B; ++b) {
          const T* row = x.data() + b * inner;
          for (std::size_t i = 0; i < inner; ++i) out[i] += row[i];
        }
        const T inv = T(1) / static_cast<T>(B);
        for (std::size_t i = 0; i < inner; ++i) out[i] *= inv;
        return out;
      }
      case Op::BroadcastBatch: {
        const Tensor<T>& x = val(n.in[0]);
        Tensor<T> out(n.shape);
        const std::size_t B = n.c0, inner = x.numel();
        for (std::size_t b = 0; b < B; ++b) {
          T* row = out.data() + b * inner;
          for (std::size_t i = 0; i < inner; ++i) row[i] = x[i];
        }
        return out;
      }
      case Op::ChannelMean: {
        const Tensor<T>& x = val(n.in[0]);
        const std::size_t B = x.dim(0), C = x.dim(1), inner = detail::inner_of(x.dims());
        Tensor<T> out(n.shape);
        const T inv = T(1) / static_cast<T>(C);
        for (std::size_t b = 0; b < B; ++b) {
          T* orow = out.data() + b * inner;
          for (std::size_t c = 0; c < C; ++c) {
            const T* row = x.data() + (b * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) orow[i] += row[i];
          }
          for (std::size_t i = 0; i < inner; ++i) orow[i] *= inv;
        }
        return out;
      }
      case Op::BroadcastChannel: {
        const Tensor<T>& x = val(n.in[0]);
        const std::size_t B = x.dim(0), C = n.c0, inner = detail::inner_of(x.dims());
        Tensor<T> out(n.shape);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            T* row = out.data() + (b * C + c) * inner;
            const T* src = x.data() + b * inner;
            for (std::size_t i = 0; i < inner; ++i) row[i] = src[i];
          }
        return out;
      }
      case Op::ConcatChannel: {
        const Tensor<T>& x = val(n.in[0]);
        const Tensor<T>& y = val(n.in[1]);
        const std::size_t B = x.dim(0), Cx = x.dim(1), Cy = y.dim(1),
                          inner = detail::inner_of(x.dims());
        Tensor<T> out(n.shape);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < Cx; ++c)
            std::copy_n(x.data() + (b * Cx + c) * inner, inner,
                        out.data() + (b * (Cx + Cy) + c) * inner);
          for (std::size_t c = 0; c < Cy; ++c)
            std::copy_n(y.data() + (b * Cy + c) * inner, inner,
                        out.data() + (b * (Cx + Cy) + Cx + c) * inner);
        }
        return out;
      }
      case Op::SliceChannel: {
        const Tensor<T>& x = val(n.in[0]);
        const std::size_t B = x.dim(0), C = x.dim(1), inner = detail::inner_of(x.dims());
        Tensor<T> out(n.shape);
        const std::size_t Cs = n.c1 - n.c0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < Cs; ++c)
            std::copy_n(x.data() + (b * C + n.c0 + c) * inner, inner,
                        out.data() + (b * Cs + c) * inner);
        return out;
      }
      case Op::Reshape:
        return val(n.in[0]).reshaped(n.attr_dims);
      case Op::Sort:
        return provid::sort_values(val(n.in[0]));
      case Op::Unsort: {
        const Tensor<T>& c = val(n.in[0]);
        const Tensor<T>& x = val(n.in[1]);
        const std::vector<std::size_t> perm = argsort_stable(x);
        Tensor<T> out({c.numel()});
        for (std::size_t i = 0; i < perm.size(); ++i) out[perm[i]] = c[i];
        return out;
      }
      case Op::ApplySortPerm: {
        const Tensor<T>& c = val(n.in[0]);
        const Tensor<T>& x = val(n.in[1]);
        const std::vector<std::size_t> perm = argsort_stable(x);
        Tensor<T> out({c.numel()});
        for (std::size_t i = 0; i < perm.size(); ++i) out[i] = c[perm[i]];
        return out;
      }
    }
    throw ValueError("eval: unknown op");
  }

  static Tensor<T> eval_conv3d_kernel_grad(const Tensor<T>& x, const Tensor<T>& g,
                                           const std::vector<std::size_t>& kd) {
    const std::size_t B = x.dim(0), Ci = x.dim(1), Ti = x.dim(2), H = x.dim(3), W = x.dim(4);
    const std::size_t Co = kd[0], kt = kd[2], kh = kd[3], kw = kd[4];
    const std::size_t ct = kt / 2, ch = kh / 2, cw = kw / 2;
    Tensor<T> out(kd);
    const T* X = x.data();
    const T* G = g.data();
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t i = 0; i < Ci; ++i)
        for (std::size_t dt = 0; dt < kt; ++dt)
          for (std::size_t dh = 0; dh < kh; ++dh)
            for (std::size_t dw = 0; dw < kw; ++dw) {
              T acc = 0;
              for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < Ti; ++t) {
                  const std::ptrdiff_t ti =
                      static_cast<std::ptrdiff_t>(t + dt) - static_cast<std::ptrdiff_t>(ct);
                  if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(Ti)) continue;
                  for (std::size_t hh = 0; hh < H; ++hh) {
                    const std::ptrdiff_t hi =
                        static_cast<std::ptrdiff_t>(hh + dh) - static_cast<std::ptrdiff_t>(ch);
                    if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t ww = 0; ww < W; ++ww) {
                      const std::ptrdiff_t wi =
                          static_cast<std::ptrdiff_t>(ww + dw) - static_cast<std::ptrdiff_t>(cw);
                      if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(W)) continue;
                      acc += X[(((b * Ci + i) * Ti + ti) * H + hi) * W + wi] *
                             G[(((b * Co + o) * Ti + t) * H + hh) * W + ww];
                    }
                  }
                }
              out[(((o * Ci + i) * kt + dt) * kh + dh) * kw + dw] = acc;
            }
    return out;
  }

  // ---- backward construction ------------------------------------------------

  void add_contribution(std::vector<NodeId>& cot, NodeId target, NodeId contrib) {
    if (target.idx >= cot.size()) return;  // node created during this grad pass
    if (cot[target.idx].valid()) {
      cot[target.idx] = add(cot[target.idx], contrib);
    } else {
      cot[target.idx] = contrib;
    }
  }

  void accumulate_vjps(NodeId id, NodeId ct, std::vector<NodeId>& cot) {
    const Node<T> n = nodes_[id.idx];  // copy: builders below may reallocate nodes_
    switch (n.op) {
      case Op::Leaf:
        return;
      case Op::Add:
        add_contribution(cot, n.in[0], ct);
        add_contribution(cot, n.in[1], ct);
        return;
      case Op::Sub:
        add_contribution(cot, n.in[0], ct);
        add_contribution(cot, n.in[1], neg(ct));
        return;
      case Op::Mul:
        add_contribution(cot, n.in[0], mul(ct, n.in[1]));
        add_contribution(cot, n.in[1], mul(ct, n.in[0]));
        return;
      case Op::Div: {
        add_contribution(cot, n.in[0], div(ct, n.in[1]));
        add_contribution(cot, n.in[1], neg(div(mul(ct, id), n.in[1])));
        return;
      }
      case Op::Affine:
        add_contribution(cot, n.in[0], affine(ct, n.a, 0.0));
        return;
      case Op::MatMul:
        add_contribution(cot, n.in[0], matmul(ct, transpose2d(n.in[1])));
        add_contribution(cot, n.in[1], matmul_tn(ct, n.in[0]));
        return;
      case Op::MatMulTN:
        add_contribution(cot, n.in[0], matmul(n.in[1], ct));
        add_contribution(cot, n.in[1], matmul(n.in[0], transpose2d(ct)));
        return;
      case Op::Transpose2d:
        add_contribution(cot, n.in[0], transpose2d(ct));
        return;
      case Op::ChannelScale:
        add_contribution(cot, n.in[0], channel_scale(ct, n.in[1]));
        add_contribution(cot, n.in[1], reduce_to_channel(mul(ct, n.in[0])));
        return;
      case Op::ChannelBias:
        add_contribution(cot, n.in[0], ct);
        add_contribution(cot, n.in[1], reduce_to_channel(ct));
        return;
      case Op::ReduceToChannel:
        add_contribution(cot, n.in[0], broadcast_cvec(ct, nodes_[n.in[0].idx].shape));
        return;
      case Op::BroadcastCVec:
        add_contribution(cot, n.in[0], reduce_to_channel(ct));
        return;
      case Op::Conv3d:
        add_contribution(cot, n.in[0], conv3d(ct, kernel_flip_swap(n.in[1])));
        add_contribution(cot, n.in[1],
                         conv3d_kernel_grad(n.in[0], ct, nodes_[n.in[1].idx].shape));
        return;
      case Op::Conv3dKernelGrad:
        add_contribution(cot, n.in[0], conv3d(n.in[1], kernel_flip_swap(ct)));
        add_contribution(cot, n.in[1], conv3d(n.in[0], ct));
        return;
      case Op::KernelFlipSwap:
        add_contribution(cot, n.in[0], kernel_flip_swap(ct));
        return;
      case Op::AvgPool3d:
        add_contribution(cot, n.in[0],
                         affine(upsample3d(ct, n.factor),
                                1.0 / static_cast<double>(n.factor.volume()), 0.0));
        return;
      case Op::Upsample3d:
        add_contribution(cot, n.in[0],
                         affine(avg_pool3d(ct, n.factor),
                                static_cast<double>(n.factor.volume()), 0.0));
        return;
      case Op::LeakyRelu:
        add_contribution(cot, n.in[0], mul(ct, lrelu_mask(n.in[0], n.a)));
        return;
      case Op::LreluMask:
      case Op::StepMask:
      case Op::SignMask:
        return;  // piecewise constant
      case Op::ClampMin:
        add_contribution(cot, n.in[0], mul(ct, step_mask(n.in[0], n.a)));
        return;
      case Op::Sqrt:
        add_contribution(cot, n.in[0], affine(div(ct, id), 0.5, 0.0));
        return;
      case Op::Log:
        add_contribution(cot, n.in[0], div(ct, n.in[0]));
        return;
      case Op::Sigmoid:
        add_contribution(cot, n.in[0], mul(ct, mul(id, affine(id, -1.0, 1.0))));
        return;
      case Op::SumAll:
        add_contribution(cot, n.in[0], broadcast_all(ct, nodes_[n.in[0].idx].shape));
        return;
      case Op::BroadcastAll:
        add_contribution(cot, n.in[0], sum_all(ct));
        return;
      case Op::SumSamples:
        add_contribution(cot, n.in[0], broadcast_samples(ct, nodes_[n.in[0].idx].shape));
        return;
      case Op::BroadcastSamples:
        add_contribution(cot, n.in[0], sum_samples(ct));
        return;
      case Op::BatchMean: {
        const std::size_t B = nodes_[n.in[0].idx].shape[0];
        add_contribution(cot, n.in[0],
                         affine(broadcast_batch(ct, B), 1.0 / static_cast<double>(B), 0.0));
        return;
      }
      case Op::BroadcastBatch:
        add_contribution(cot, n.in[0],
                         affine(batch_mean(ct), static_cast<double>(n.c0), 0.0));
        return;
      case Op::ChannelMean: {
        const std::size_t C = nodes_[n.in[0].idx].shape[1];
        add_contribution(cot, n.in[0],
                         affine(broadcast_channel(ct, C), 1.0 / static_cast<double>(C), 0.0));
        return;
      }
      case Op::BroadcastChannel:
        add_contribution(cot, n.in[0],
                         affine(channel_mean(ct), static_cast<double>(n.c0), 0.0));
        return;
      case Op::ConcatChannel: {
        const std::size_t C1 = nodes_[n.in[0].idx].shape[1];
        const std::size_t C2 = nodes_[n.in[1].idx].shape[1];
        add_contribution(cot, n.in[0], slice_channel(ct, 0, C1));
        add_contribution(cot, n.in[1], slice_channel(ct, C1, C1 + C2));
        return;
      }
      case Op::SliceChannel: {
        const std::vector<std::size_t>& xs = nodes_[n.in[0].idx].shape;
        NodeId padded = ct;
        if (n.c0 > 0) {
          std::vector<std::size_t> zdims = xs;
          zdims[1] = n.c0;
          padded = concat_channel(constant(Tensor<T>(zdims)), padded);
        }
        if (n.c1 < xs[1]) {
          std::vector<std::size_t> zdims = xs;
          zdims[1] = xs[1] - n.c1;
          padded = concat_channel(padded, constant(Tensor<T>(zdims)));
        }
        add_contribution(cot, n.in[0], padded);
        return;
      }
      case Op::Reshape:
        add_contribution(cot, n.in[0], reshape(ct, nodes_[n.in[0].idx].shape));
        return;
      case Op::Sort:
        add_contribution(cot, n.in[0], unsort(ct, n.in[0]));
        return;
      case Op::Unsort:
        add_contribution(cot, n.in[0], apply_sort_perm(ct, n.in[1]));
        return;
      case Op::ApplySortPerm:
        add_contribution(cot, n.in[0], unsort(ct, n.in[1]));
        return;
    }
  }

  std::vector<Node<T>> nodes_;
  std::map<std::string, std::size_t> param_index_;
};

}  // namespace provid
