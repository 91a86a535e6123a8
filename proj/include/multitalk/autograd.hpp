#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major-agnostic
// Eigen matrices. Every value is a 2-D matrix; scalars are 1x1.

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace multitalk::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  // Set when a backward pass delivered a gradient since the last zero_grad.
  bool touched = false;
};

// Named parameters in insertion order. References stay valid across add().
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;

  void zero_grad();

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

class Graph;

class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using Backward = std::function<void(const Matrix& out_grad)>;

  Var constant(Matrix value);
  // A trainable parameter receives gradient into Parameter::grad on backward().
  // A frozen parameter still propagates gradient to its consumers but its own
  // gradient is discarded.
  Var param(Parameter& p, bool trainable = true);

  Var push(Matrix value, bool requires_grad, Backward backward);

  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  const Matrix& value(int id) const { return nodes_[id].value; }
  void accumulate(const Var& v, const Matrix& g);

  // Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to the leaves.
  void backward(const Var& root);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };
  std::deque<Node> nodes_;
};

// Element-wise and linear-algebra ops.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// a (R x C) + bias (1 x C) broadcast over rows.
Var add_row(const Var& a, const Var& bias);
Var transpose(const Var& a);
Var gelu(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Row softmax of (x + mask) where mask is a constant additive matrix (0 or -inf).
Var softmax_rows(const Var& x, const Matrix* mask = nullptr);

// Shape ops.
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
// Groups q consecutive rows into one: (T x C) -> (ceil(T/q) x qC); the final
// group is zero-padded.
Var stack_rows(const Var& a, int q);
// Inverse of stack_rows without the truncation: (R x qC) -> (Rq x C).
Var unstack_rows(const Var& a, int q);
Var gather_rows(const Var& table, const std::vector<int>& indices);

// Gradient plumbing.
Var detach(const Var& a);
// Forward value `replacement`, backward identity into `a`.
Var straight_through(const Var& a, const Matrix& replacement);

// Reductions to 1x1.
Var mean_abs(const Var& a);
Var mean_square(const Var& a);

}  // namespace multitalk::ad
