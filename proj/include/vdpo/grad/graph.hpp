#pragma once

// Define-by-run reverse-mode differentiation over dense double tensors.
//
// A Graph records operations symbolically; forward() evaluates every
// ancestor of a root given bindings for the input nodes, and backward()
// propagates adjoints from a scalar root. Detach nodes pass their value
// through and block adjoints. A graph is single-owner; build a fresh one
// per evaluation.

#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "vdpo/grad/tensor.hpp"

namespace vdpo::grad {

enum class OpKind {
  kInput,
  kConstant,
  kMatMul,
  kAdd,
  kSub,
  kRelu,
  kGatherRows,
  kLogSoftmax,
  kSum,
  kScale,
  kDetach,
  kSigmoid,
  kLog,
  kLogSigmoid,
  kConcatCols,
  kTileRows,
  kMeanRows,
  kPick,
};

const char* op_name(OpKind kind);

struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;

  bool valid() const { return id != kNone; }
  bool operator==(const Var&) const = default;
};

// Input values for one forward pass. Tensors are held by reference and
// must outlive the forward and backward calls that use them.
class Bindings {
 public:
  void bind(Var input, const Tensor& value) { map_.insert_or_assign(input.id, std::cref(value)); }
  const Tensor* find(Var input) const;

 private:
  std::unordered_map<std::size_t, std::reference_wrapper<const Tensor>> map_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var input(std::string name, bool differentiable = true);
  Var constant(Tensor value, std::string name = {});

  // [m x k] * [k x n]
  Var matmul(Var a, Var b);
  // Same shape, or `b` a row ([n] or [1 x n]) broadcast over the rows of
  // `a`, or `b` a single element.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var relu(Var x);
  Var gather_rows(Var table, std::vector<std::size_t> rows);
  Var log_softmax(Var x);
  Var sum(Var x);
  Var scale(Var x, double k);
  Var detach(Var x);
  Var sigmoid(Var x);
  Var log(Var x);
  Var log_sigmoid(Var x);
  Var concat_cols(std::vector<Var> parts);
  Var tile_rows(Var row, std::size_t count);
  Var mean_rows(Var x);
  // out[t] = x[t, cols[t]] for a [T x V] input.
  Var pick(Var x, std::vector<std::size_t> cols);

  const Tensor& forward(Var root, const Bindings& bindings);
  void backward(Var root);

  bool evaluated(Var v) const;
  const Tensor& value(Var v) const;
  // Adjoint of `v` after backward(); zero when `v` does not reach the root
  // through differentiable paths.
  const Tensor& grad(Var v) const;

  OpKind kind(Var v) const;
  const std::string& name(Var v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    std::vector<std::size_t> parents;
    std::string name;
    bool differentiable = false;  // inputs only
    bool needs_grad = false;
    double scalar = 0.0;
    std::vector<std::size_t> indices;
    std::size_t count = 0;
    Tensor constant;
    const Tensor* bound = nullptr;
    Tensor value;
    Tensor adjoint;
    bool has_value = false;
    bool has_adjoint = false;
  };

  Var push(Node node);
  const Node& node_at(Var v) const;
  std::string describe(std::size_t id) const;
  void evaluate(std::size_t id, const Bindings& bindings);
  void propagate(std::size_t id);
  Tensor& adjoint_of(std::size_t id);

  std::vector<Node> nodes_;
  bool forward_done_ = false;
  bool backward_done_ = false;
};

}  // namespace vdpo::grad
