#include "vdpo/grad/graph.hpp"

#include <algorithm>
#include <cmath>

#include "vdpo/error.hpp"

namespace vdpo::grad {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_log_sigmoid(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

bool is_row_of(const Tensor& b, const Tensor& a) {
  if (a.rank() != 2) return false;
  if (b.rank() == 1) return b.shape()[0] == a.shape()[1];
  if (b.rank() == 2) return b.shape()[0] == 1 && b.shape()[1] == a.shape()[1];
  return false;
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kRelu: return "relu";
    case OpKind::kGatherRows: return "embedding-gather";
    case OpKind::kLogSoftmax: return "log-softmax-lastdim";
    case OpKind::kSum: return "sum";
    case OpKind::kScale: return "scalar-mul";
    case OpKind::kDetach: return "detach";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLog: return "log";
    case OpKind::kLogSigmoid: return "log-sigmoid";
    case OpKind::kConcatCols: return "concat-cols";
    case OpKind::kTileRows: return "tile-rows";
    case OpKind::kMeanRows: return "mean-rows";
    case OpKind::kPick: return "pick";
  }
  return "unknown";
}

const Tensor* Bindings::find(Var input) const {
  auto it = map_.find(input.id);
  return it == map_.end() ? nullptr : &it->second.get();
}

Var Graph::push(Node node) {
  for (auto p : node.parents) {
    if (p >= nodes_.size()) {
      throw invalid_argument("graph operand refers to an unknown node");
    }
  }
  forward_done_ = false;
  backward_done_ = false;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

const Graph::Node& Graph::node_at(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) {
    throw invalid_argument("unknown graph node");
  }
  return nodes_[v.id];
}

std::string Graph::describe(std::size_t id) const {
  const auto& n = nodes_[id];
  std::string s = "node #" + std::to_string(id) + " (" + op_name(n.kind);
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + ")";
}

Var Graph::input(std::string name, bool differentiable) {
  Node n;
  n.kind = OpKind::kInput;
  n.name = std::move(name);
  n.differentiable = differentiable;
  n.needs_grad = differentiable;
  return push(std::move(n));
}

Var Graph::constant(Tensor value, std::string name) {
  Node n;
  n.kind = OpKind::kConstant;
  n.name = std::move(name);
  n.constant = std::move(value);
  return push(std::move(n));
}


Var Graph::matmul(Var a, Var b) {
  Node n;
  n.kind = OpKind::kMatMul;
  n.parents = {a.id, b.id};
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  Node n;
  n.kind = OpKind::kAdd;
  n.parents = {a.id, b.id};
  return push(std::move(n));
}

Var Graph::sub(Var a, Var b) {
  Node n;
  n.kind = OpKind::kSub;
  n.parents = {a.id, b.id};
  return push(std::move(n));
}

Var Graph::relu(Var x) {
  Node n;
  n.kind = OpKind::kRelu;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::gather_rows(Var table, std::vector<std::size_t> rows) {
  Node n;
  n.kind = OpKind::kGatherRows;
  n.parents = {table.id};
  n.indices = std::move(rows);
  return push(std::move(n));
}

Var Graph::log_softmax(Var x) {
  Node n;
  n.kind = OpKind::kLogSoftmax;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::sum(Var x) {
  Node n;
  n.kind = OpKind::kSum;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::scale(Var x, double k) {
  Node n;
  n.kind = OpKind::kScale;
  n.parents = {x.id};
  n.scalar = k;
  return push(std::move(n));
}

Var Graph::detach(Var x) {
  Node n;
  n.kind = OpKind::kDetach;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::sigmoid(Var x) {
  Node n;
  n.kind = OpKind::kSigmoid;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::log(Var x) {
  Node n;
  n.kind = OpKind::kLog;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::log_sigmoid(Var x) {
  Node n;
  n.kind = OpKind::kLogSigmoid;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::concat_cols(std::vector<Var> parts) {
  if (parts.empty()) throw invalid_argument("concat_cols needs at least one part");
  Node n;
  n.kind = OpKind::kConcatCols;
  for (auto p : parts) n.parents.push_back(p.id);
  return push(std::move(n));
}

Var Graph::tile_rows(Var row, std::size_t count) {
  Node n;
  n.kind = OpKind::kTileRows;
  n.parents = {row.id};
  n.count = count;
  return push(std::move(n));
}

Var Graph::mean_rows(Var x) {
  Node n;
  n.kind = OpKind::kMeanRows;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::pick(Var x, std::vector<std::size_t> cols) {
  Node n;
  n.kind = OpKind::kPick;
  n.parents = {x.id};
  n.indices = std::move(cols);
  return push(std::move(n));
}

bool Graph::evaluated(Var v) const { return node_at(v).has_value; }

const Tensor& Graph::value(Var v) const {
  const auto& n = node_at(v);
  if (!n.has_value) {
    throw Error(ErrorKind::kState, describe(v.id) + " has not been evaluated");
  }
  if (n.kind == OpKind::kInput) return *n.bound;
  if (n.kind == OpKind::kConstant) return n.constant;
  return n.value;
}

const Tensor& Graph::grad(Var v) const {
  const auto& n = node_at(v);
  if (!backward_done_) {
    throw Error(ErrorKind::kState, "grad() requested before backward()");
  }
  if (!n.has_adjoint) {
    throw Error(ErrorKind::kState, describe(v.id) + " carries no gradient");
  }
  return n.adjoint;
}

OpKind Graph::kind(Var v) const { return node_at(v).kind; }

const std::string& Graph::name(Var v) const { return node_at(v).name; }

const Tensor& Graph::forward(Var root, const Bindings& bindings) {
  node_at(root);
  std::vector<char> needed(root.id + 1, 0);
  needed[root.id] = 1;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    if (!needed[i]) continue;
    for (auto p : nodes_[i].parents) needed[p] = 1;
  }
  for (auto& n : nodes_) {
    n.has_value = false;
    n.has_adjoint = false;
  }
  backward_done_ = false;
  for (std::size_t i = 0; i <= root.id; ++i) {
    if (needed[i]) evaluate(i, bindings);
  }
  forward_done_ = true;
  return value(root);
}

void Graph::evaluate(std::size_t id, const Bindings& bindings) {
  Node& n = nodes_[id];
  auto shape_error = [&](const std::string& msg) {
    return Error(ErrorKind::kShape, describe(id) + ": " + msg);
  };
  auto in = [&](std::size_t k) -> const Tensor& { return value(Var{n.parents[k]}); };

  n.needs_grad = false;
  if (n.kind == OpKind::kInput) {
    n.needs_grad = n.differentiable;
  } else if (n.kind != OpKind::kConstant && n.kind != OpKind::kDetach) {
    for (auto p : n.parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
  }

  switch (n.kind) {
    case OpKind::kInput: {
      const Tensor* t = bindings.find(Var{id});
      if (t == nullptr) throw shape_error("input is not bound");
      n.bound = t;
      break;
    }
    case OpKind::kConstant:
      break;
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw shape_error("cannot multiply " + shape_string(a.shape()) + " by " +
                          shape_string(b.shape()));
      }
      const std::size_t m = a.shape()[0], k = a.shape()[1], c = b.shape()[1];
      Tensor out(Shape{m, c});
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < c; ++j) out[i * c + j] += av * b[p * c + j];
        }
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::kAdd:
    case OpKind::kSub: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const double sign = n.kind == OpKind::kAdd ? 1.0 : -1.0;
      Tensor out = a;
      if (b.shape() == a.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * b[i];
      } else if (is_row_of(b, a)) {
        const std::size_t cols = a.cols();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * b[i % cols];
      } else if (b.size() == 1 && b.rank() == 0) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * b[0];
      } else {
        throw shape_error("incompatible operands " + shape_string(a.shape()) + " and " +
                          shape_string(b.shape()));
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::kRelu: {
      Tensor out = in(0);
      for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
      n.value = std::move(out);
      break;
    }
    case OpKind::kGatherRows: {
      const Tensor& t = in(0);
      if (t.rank() != 2) throw shape_error("table must be a matrix");
      const std::size_t rows = t.shape()[0], cols = t.shape()[1];
      Tensor out(Shape{n.indices.size(), cols});
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        const auto src = n.indices[r];
        if (src >= rows) {
          throw shape_error("row index " + std::to_string(src) + " out of range " +
                            std::to_string(rows));
        }
        std::copy_n(t.values().begin() + static_cast<std::ptrdiff_t>(src * cols), cols,
                    out.values().begin() + static_cast<std::ptrdiff_t>(r * cols));
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::kLogSoftmax: {
      const Tensor& x = in(0);
      if (x.rank() == 0 || x.cols() == 0) throw shape_error("log-softmax needs a last dimension");
      Tensor out = x;
      const std::size_t cols = x.cols();
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = out.values().subspan(r * cols, cols);
        const double m = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double v : row) s += std::exp(v - m);
        const double lse = m + std::log(s);
        for (auto& v : row) v -= lse;
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::kSum: {
      double s = 0.0;
      for (double v : in(0).values()) s += v;
      n.value = Tensor::scalar(s);
      break;
    }
    case OpKind::kScale: {
      Tensor out = in(0);
      for (auto& v : out.values()) v *= n.scalar;
      n.value = std::move(out);
      break;
    }
    case OpKind::kDetach:
      n.value = in(0);
      break;
    case OpKind::kSigmoid: {
      Tensor out = in(0);
      for (auto& v : out.values()) v = stable_sigmoid(v);
      n.value = std::move(out);
      break;
    }
    case OpKind::kLog: {
      Tensor out = in(0);
      for (auto& v : out.values()) v = std::log(v);
      n.value = std::move(out);
      break;
    }
    case OpKind::kLogSigmoid: {
      Tensor out = in(0);
      for (auto& v : out.values()) v = stable_log_sigmoid(v);
      n.value = std::move(out);
      break;
    }
    case OpKind::kConcatCols: {
      std::size_t rows = 0, total = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const Tensor& p = in(k);
        if (p.rank() != 2) throw shape_error("concat parts must be matrices");
        if (k == 0) rows = p.shape()[0];
        if (p.shape()[0] != rows) throw shape_error("concat parts disagree on row count");
        total += p.shape()[1];
      }
      Tensor out(Shape{rows, total});
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const Tensor& p = in(k);
        const std::size_t c = p.shape()[1];
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < c; ++j) out[r * total + offset + j] = p[r * c + j];
        }
        offset += c;
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::kTileRows: {
      const Tensor& x = in(0);
      const bool row = (x.rank() == 1) || (x.rank() == 2 && x.shape()[0] == 1);
      if (!row) throw shape_error("tile expects a single row, got " + shape_string(x.shape()));
      const std::size_t cols = x.cols();
      Tensor out(Shape{n.count, cols});
      for (std::size_t r = 0; r < n.count; ++r) {
        std::copy(x.values().begin(), x.values().end(),
                  out.values().begin() + static_cast<std::ptrdiff_t>(r * cols));
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::kMeanRows: {
      const Tensor& x = in(0);
      if (x.rank() != 2 || x.shape()[0] == 0) throw shape_error("mean needs a non-empty matrix");
      const std::size_t rows = x.shape()[0], cols = x.shape()[1];
      Tensor out(Shape{1, cols});
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) out[j] += x[r * cols + j];
      }
      for (auto& v : out.values()) v /= static_cast<double>(rows);
      n.value = std::move(out);
      break;
    }
    case OpKind::kPick: {
      const Tensor& x = in(0);
      if (x.rank() != 2 || x.shape()[0] != n.indices.size()) {
        throw shape_error("pick expects [" + std::to_string(n.indices.size()) +
                          " x V], got " + shape_string(x.shape()));
      }
      const std::size_t cols = x.shape()[1];
      Tensor out(Shape{n.indices.size()});
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        if (n.indices[r] >= cols) {
          throw shape_error("column index " + std::to_string(n.indices[r]) + " out of range");
        }
        out[r] = x[r * cols + n.indices[r]];
      }
      n.value = std::move(out);
      break;
    }
  }
  n.has_value = true;
  if (!value(Var{id}).all_finite()) {
    throw Error(ErrorKind::kNumeric, describe(id) + ": non-finite value");
  }
}

Tensor& Graph::adjoint_of(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_adjoint) {
    n.adjoint = Tensor(value(Var{id}).shape(), 0.0);
    n.has_adjoint = true;
  }
  return n.adjoint;
}

void Graph::backward(Var root) {
  node_at(root);
  if (!forward_done_ || !nodes_[root.id].has_value) {
    throw Error(ErrorKind::kState, "backward() called before forward()");
  }
  if (value(root).size() != 1) {
    throw Error(ErrorKind::kShape, "backward() needs a scalar root, got " +
                                       shape_string(value(root).shape()));
  }
  for (auto& n : nodes_) n.has_adjoint = false;
  // Every evaluated node on a differentiable path gets an adjoint, even if
  // it stays zero, so grad() is defined for all bound differentiable inputs.
  for (std::size_t i = 0; i <= root.id; ++i) {
    if (nodes_[i].has_value && nodes_[i].needs_grad) adjoint_of(i);
  }
  if (nodes_[root.id].needs_grad) {
    adjoint_of(root.id)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      if (nodes_[i].has_value && nodes_[i].needs_grad) propagate(i);
    }
  }
  backward_done_ = true;
}

void Graph::propagate(std::size_t id) {
  Node& n = nodes_[id];
  const Tensor& dout = n.adjoint;
  auto needs = [&](std::size_t k) { return nodes_[n.parents[k]].needs_grad; };
  auto pin = [&](std::size_t k) -> const Tensor& { return value(Var{n.parents[k]}); };
  auto pgrad = [&](std::size_t k) -> Tensor& { return adjoint_of(n.parents[k]); };

  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kConstant:
    case OpKind::kDetach:
      break;
    case OpKind::kMatMul: {
      const Tensor& a = pin(0);
      const Tensor& b = pin(1);
      const std::size_t m = a.shape()[0], k = a.shape()[1], c = b.shape()[1];
      if (needs(0)) {
        Tensor& da = pgrad(0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += dout[i * c + j] * b[p * c + j];
            da[i * k + p] += s;
          }
        }
      }
      if (needs(1)) {
        Tensor& db = pgrad(1);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j) db[p * c + j] += av * dout[i * c + j];
          }
        }
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kSub: {
      const double sign = n.kind == OpKind::kAdd ? 1.0 : -1.0;
      if (needs(0)) {
        Tensor& da = pgrad(0);
        for (std::size_t i = 0; i < dout.size(); ++i) da[i] += dout[i];
      }
      if (needs(1)) {
        Tensor& db = pgrad(1);
        if (db.size() == dout.size()) {
          for (std::size_t i = 0; i < dout.size(); ++i) db[i] += sign * dout[i];
        } else {
          const std::size_t cols = db.size();
          for (std::size_t i = 0; i < dout.size(); ++i) db[i % cols] += sign * dout[i];
        }
      }
      break;
    }
    case OpKind::kRelu: {
      if (!needs(0)) break;
      const Tensor& x = pin(0);
      Tensor& dx = pgrad(0);
      for (std::size_t i = 0; i < dout.size(); ++i) {
        if (x[i] > 0.0) dx[i] += dout[i];
      }
      break;
    }
    case OpKind::kGatherRows: {
      if (!needs(0)) break;
      Tensor& dt = pgrad(0);
      const std::size_t cols = dt.cols();
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        for (std::size_t j = 0; j < cols; ++j) {
          dt[n.indices[r] * cols + j] += dout[r * cols + j];
        }
      }
      break;
    }
    case OpKind::kLogSoftmax: {
      if (!needs(0)) break;
      Tensor& dx = pgrad(0);
      const std::size_t cols = n.value.cols();
      for (std::size_t r = 0; r < n.value.rows(); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += dout[r * cols + j];
        for (std::size_t j = 0; j < cols; ++j) {
          const std::size_t i = r * cols + j;
          dx[i] += dout[i] - std::exp(n.value[i]) * s;
        }
      }
      break;
    }
    case OpKind::kSum: {
      if (!needs(0)) break;
      Tensor& dx = pgrad(0);
      for (auto& v : dx.values()) v += dout[0];
      break;
    }
    case OpKind::kScale: {
      if (!needs(0)) break;
      Tensor& dx = pgrad(0);
      for (std::size_t i = 0; i < dout.size(); ++i) dx[i] += n.scalar * dout[i];
      break;
    }
    case OpKind::kSigmoid: {
      if (!needs(0)) break;
      Tensor& dx = pgrad(0);
      for (std::size_t i = 0; i < dout.size(); ++i) {
        const double s = n.value[i];
        dx[i] += dout[i] * s * (1.0 - s);
      }
      break;
    }
    case OpKind::kLog: {
      if (!needs(0)) break;
      const Tensor& x = pin(0);
      Tensor& dx = pgrad(0);
      for (std::size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i] / x[i];
      break;
    }
    case OpKind::kLogSigmoid: {
      if (!needs(0)) break;
      const Tensor& x = pin(0);
      Tensor& dx = pgrad(0);
      for (std::size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i] * stable_sigmoid(-x[i]);
      break;
    }
    case OpKind::kConcatCols: {
      const std::size_t total = n.value.cols();
      const std::size_t rows = n.value.rows();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const std::size_t c = pin(k).shape()[1];
        if (needs(k)) {
          Tensor& dp = pgrad(k);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < c; ++j) dp[r * c + j] += dout[r * total + offset + j];
          }
        }
        offset += c;
      }
      break;
    }
    case OpKind::kTileRows: {
      if (!needs(0)) break;
      Tensor& dx = pgrad(0);
      const std::size_t cols = dx.size();
      for (std::size_t i = 0; i < dout.size(); ++i) dx[i % cols] += dout[i];
      break;
    }
    case OpKind::kMeanRows: {
      if (!needs(0)) break;
      Tensor& dx = pgrad(0);
      const std::size_t cols = dx.cols();
      const double inv = 1.0 / static_cast<double>(dx.rows());
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[i % cols] * inv;
      break;
    }
    case OpKind::kPick: {
      if (!needs(0)) break;
      Tensor& dx = pgrad(0);
      const std::size_t cols = dx.cols();
      for (std::size_t r = 0; r < n.indices.size(); ++r) dx[r * cols + n.indices[r]] += dout[r];
      break;
    }
  }
}

}  // namespace vdpo::grad
