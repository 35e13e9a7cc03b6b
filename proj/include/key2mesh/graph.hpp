#pragma once
// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph records nodes in insertion order, which is also a valid
// topological order: every op appends one node whose inputs already exist.
// backward() walks the tape once in reverse. Second-order terms (the
// critic's gradient penalty) are handled by input_gradient(), which
// re-expresses d(sum output)/d(input) as ordinary first-order nodes.

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "key2mesh/rng.hpp"
#include "key2mesh/tensor.hpp"

namespace k2m {

enum class Mode { Train, Eval };

/// Named trainable tensor. `grad` is accumulated by Graph::backward.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

enum class OpKind {
  Leaf,
  Affine,
  MatmulNT,
  Prelu,
  PreluGrad,
  Add,
  Sub,
  Scale,
  AddScalar,
  Square,
  BatchNorm,
  Dropout,
  L1Loss,
  Sum,
  Mean,
  RowNorm,
  SliceCols,
  Custom,
};

const char* op_kind_name(OpKind kind);

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Backward closure: reads the node's output gradient and accumulates into
/// the gradient slots of its inputs.
using BackwardFn = std::function<void(Graph& g, std::size_t self)>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Differentiable leaf not bound to a Parameter (tests, input gradients).
  Var leaf(Tensor value);
  /// Leaf bound to `p`, read in place: `p.value` must not change while
  /// this graph is in use. Non-trainable parameters enter as constants.
  Var param(Parameter& p);

  Var record(OpKind kind, const std::vector<Var>& inputs, Tensor value, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_[v.id()].val(); }
  /// Gradient after backward(); zeros when the node received none.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  /// Reverse sweep from a single-element output. Bound trainable
  /// parameters have their gradients added into Parameter::grad.
  void backward(Var output);

  // Accessors used by op implementations.
  std::size_t size() const { return nodes_.size(); }
  OpKind kind_of(std::size_t id) const { return nodes_[id].kind; }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_[id].inputs; }
  const Tensor& value_of(std::size_t id) const { return nodes_[id].val(); }
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }
  /// Zero-initialised gradient buffer of `id`, or nullptr if it needs none.
  Tensor* grad_slot(std::size_t id);
  Var var(std::size_t id) { return Var(this, id); }

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    const Tensor* bound = nullptr;  // parameter storage, read in place
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;

    const Tensor& val() const { return bound ? *bound : value; }
  };

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

struct RunningStats {
  Tensor mean;
  Tensor var;
};

namespace ops {

/// y = x W + b, x: [B x n], W: [n x m], b: [m].
Var affine(Var x, Var w, Var b);
/// y = g W^T, g: [B x m], W: [n x m].
Var matmul_nt(Var g, Var w);
/// max(x,0) + a min(x,0); `a` holds 1 slope or one per column.
Var prelu(Var x, Var a);
/// gy * (x > 0 ? 1 : a). Carries gradient to gy and a, none to x.
Var prelu_grad(Var gy, Var x, Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);
Var square(Var x);
/// Batch normalisation over rows. Train mode uses population batch
/// statistics and updates `running` (unbiased variance); eval mode reads it.
Var batch_norm(Var x, Var gamma, Var beta, RunningStats& running, Mode mode,
               double momentum = 0.1, double eps = 1e-5);
/// Inverted dropout; identity in eval mode or when p == 0.
Var dropout(Var x, double p, Mode mode, Rng& rng);
/// Mean of |pred - target| over unmasked elements, 0 when all are masked.
/// A mask with fewer elements than pred covers consecutive groups of
/// pred.size() / mask.size() elements.
Var l1_loss(Var pred, const Tensor& target, const Tensor* mask = nullptr);
Var sum(Var x);
Var mean(Var x);
/// Euclidean norm of each row: [B x n] -> [B x 1].
Var row_norm(Var x);
Var slice_cols(Var x, std::size_t begin, std::size_t end);

/// Gradient of sum(output) with respect to `input`, as a differentiable
/// node. Only Affine, Prelu and Add may lie between input and output.
Var input_gradient(Var output, Var input);

}  // namespace ops
}  // namespace k2m
