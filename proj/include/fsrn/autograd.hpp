#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fsrn/tensor.hpp"

namespace fsrn {

/// A trainable tensor with its accumulated gradient and optimizer state.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor momentum;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), momentum(value.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

/// Define-by-run reverse-mode tape. Every op appends one node; `backward`
/// walks the tape in reverse. Nodes that do not depend on any trainable leaf
/// never allocate gradients.
class Graph {
 public:
  struct Var {
    int id = -1;
    [[nodiscard]] bool valid() const { return id >= 0; }
  };
  using BackwardFn = std::function<void(Graph&, Var self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Non-differentiable input.
  Var constant(Tensor t);
  /// Differentiable free variable; gradient readable through grad().
  Var variable(Tensor t);
  /// Leaf bound to a parameter; backward() adds into `p.grad`.
  Var leaf(Parameter& p);

  [[nodiscard]] const Tensor& value(Var v) const { return nodes_[v.id].value; }
  [[nodiscard]] bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  /// Gradient of the last backward() root w.r.t. `v`; zero-shaped if unused.
  [[nodiscard]] const Tensor& grad(Var v) const { return nodes_[v.id].grad; }

  /// Gradient buffer for an op input, allocated on first use. Null when the
  /// input does not require a gradient.
  Tensor* grad_buffer(Var v);

  Var emplace(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var emplace(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

  /// Seeds d(root)/d(root) = 1 and propagates. `root` must be a scalar.
  void backward(Var root);

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Piecewise ops (relu, clamps, nearest-neighbour picks) fold their branch
  /// choices in here. Equal signatures mean the same smooth piece was used.
  void note_branches(std::uint64_t word) { signature_ = (signature_ ^ word) * 0x100000001b3ULL; }
  [[nodiscard]] std::uint64_t branch_signature() const { return signature_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn fn;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
};

namespace ops {

using Var = Graph::Var;

/// 2-D convolution over a batch. `weight` is (Cout, Cin, k, k), `bias` is
/// (1, Cout, 1, 1). Square kernels, symmetric zero padding.
Var conv2d(Graph& g, Var x, Var weight, Var bias, int stride, int pad);
Var relu(Graph& g, Var x);
Var add(Graph& g, Var a, Var b);
/// Nearest-neighbour 2x spatial upsampling.
Var upsample2x(Graph& g, Var x);
/// Channel-wise product broadcast over space: x (Nx,C,H,W) * s (Ns,C,1,1),
/// with Nx and Ns equal or one of them 1.
Var channel_scale(Graph& g, Var x, Var s);
/// Spatial global average pooling: (N,C,H,W) -> (N,C,1,1).
Var global_avg_pool(Graph& g, Var x);
/// Sample `i` of a batch as a (1,C,H,W) tensor.
Var take(Graph& g, Var x, int i);
/// Stacks (1,C,H,W) tensors of equal shape along the batch axis.
Var concat(Graph& g, const std::vector<Var>& xs);
/// Elementwise mean of tensors with equal shape.
Var mean(Graph& g, const std::vector<Var>& xs);
/// x + c for a constant tensor c of the same shape.
Var add_constant(Graph& g, Var x, const Tensor& c);
/// Sum_i w_i * s_i over scalars.
Var weighted_sum(Graph& g, const std::vector<Var>& scalars, const std::vector<double>& weights);

}  // namespace ops
}  // namespace fsrn
