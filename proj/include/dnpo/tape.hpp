#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dnpo/mat.hpp"

namespace dnpo {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;
  const Mat& value() const;
  double scalar() const;  // value of a 1x1 node
  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Thrown when an operation produces a non-finite value; carries the name of
// the offending operation.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& op, const std::string& detail)
      : std::runtime_error("non-finite value in op '" + op + "': " + detail), op_(op) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

// Reverse-mode automatic differentiation over dense double matrices.
//
// Nodes are recorded in evaluation order; backward() walks them in reverse,
// which is always a valid topological order. Creation order is part of the
// contract: for a fixed graph-building sequence the floating-point result is
// bitwise reproducible.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf without derivative tracking (inputs, frozen parameters, draws).
  Var constant(Mat v);
  // Leaf with derivative tracking (trainable parameters).
  Var leaf(Mat v);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var scale(Var a, double c);
  Var matmul(Var a, Var b);
  Var add_row_broadcast(Var a, Var row);  // a: m x n, row: 1 x n
  Var transpose(Var a);
  Var slice_rows(Var a, int begin, int count);
  Var slice_cols(Var a, int begin, int count);
  Var concat_cols(std::span<const Var> parts);
  Var exp(Var a);
  Var gelu(Var a);  // exact erf form
  Var rms_norm_rows(Var a);
  Var clamp(Var a, double lo, double hi);
  Var causal_softmax_rows(Var scores);   // square input; row t attends to columns <= t
  Var log_softmax_rows(Var a);
  Var gather_rows(Var a, std::vector<int> cols);  // out(i,0) = a(i, cols[i])
  Var embedding_rows(Var table, std::vector<int> ids);
  Var sum(Var a);
  Var mean(Var a);
  Var neg_log_sigmoid(Var a);  // log(1 + exp(-x)), elementwise, overflow-safe
  // Value-preserving marker that blocks derivative flow through `a`.
  Var stop_gradient(Var a);

  // Accumulates d(loss)/d(node) for every tracked node. `loss` must be 1x1.
  // Call once per tape.
  void backward(Var loss);

  const Mat& value(Var v) const;
  // Gradient of the last backward() target w.r.t. `v`. Zero matrix if the
  // node is not on any differentiable path.
  const Mat& grad(Var v) const;

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    const char* op = "";
    std::function<void(Tape&, int)> backward;
  };

  Var push(Mat value, bool requires_grad, const char* op,
           std::function<void(Tape&, int)> bw);
  Node& node(Var v);
  const Node& node(Var v) const;
  Mat& grad_buf(int id);

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// Stable scalar form of log(1 + exp(-x)).
double neg_log_sigmoid(double x);

}  // namespace dnpo
