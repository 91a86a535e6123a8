#include "multitalk/autograd.hpp"

#include "multitalk/error.hpp"

#include <cmath>
#include <limits>

namespace multitalk::ad {

Parameter& ParameterStore::add(const std::string& name, Matrix init) {
  if (index_.count(name) != 0) {
    throw ContractError("duplicate parameter name '" + name + "'");
  }
  index_[name] = params_.size();
  Parameter& p = params_.emplace_back();
  p.name = name;
  p.grad = Matrix::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  return p;
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return params_[it->second];
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return params_[it->second];
}

bool ParameterStore::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

std::size_t ParameterStore::element_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) {
    p.grad.setZero();
    p.touched = false;
  }
}

const Matrix& Var::value() const { return graph_->value(id_); }

Var Graph::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Graph::param(Parameter& p, bool trainable) {
  Var v = push(p.value, true, nullptr);
  if (trainable) nodes_[v.id()].param = &p;
  return v;
}

Var Graph::push(Matrix value, bool requires_grad, Backward backward) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward = std::move(backward);
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Graph::accumulate(const Var& v, const Matrix& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Graph::backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw ShapeError("backward() requires a 1x1 root");
  }
  accumulate(root, Matrix::Ones(1, 1));
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.backward) n.backward(n.grad);
    if (n.param != nullptr) {
      n.param->grad += n.grad;
      n.param->touched = true;
    }
  }
}

namespace {

Graph& graph_of(const Var& a) { return *a.graph(); }

bool any_grad(const Var& a) { return a.graph()->requires_grad(a); }
bool any_grad(const Var& a, const Var& b) {
  return a.graph()->requires_grad(a) || b.graph()->requires_grad(b);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimension mismatch " +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
  }
  Graph& g = graph_of(a);
  return g.push(a.value() * b.value(), any_grad(a, b), [&g, a, b](const Matrix& og) {
    if (g.requires_grad(a)) g.accumulate(a, og * b.value().transpose());
    if (g.requires_grad(b)) g.accumulate(b, a.value().transpose() * og);
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Graph& g = graph_of(a);
  return g.push(a.value() + b.value(), any_grad(a, b), [&g, a, b](const Matrix& og) {
    g.accumulate(a, og);
    g.accumulate(b, og);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Graph& g = graph_of(a);
  return g.push(a.value() - b.value(), any_grad(a, b), [&g, a, b](const Matrix& og) {
    g.accumulate(a, og);
    if (g.requires_grad(b)) g.accumulate(b, -og);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Graph& g = graph_of(a);
  return g.push(a.value().cwiseProduct(b.value()), any_grad(a, b),
                [&g, a, b](const Matrix& og) {
                  if (g.requires_grad(a)) g.accumulate(a, og.cwiseProduct(b.value()));
                  if (g.requires_grad(b)) g.accumulate(b, og.cwiseProduct(a.value()));
                });
}

Var scale(const Var& a, double s) {
  Graph& g = graph_of(a);
  return g.push(a.value() * s, any_grad(a),
                [&g, a, s](const Matrix& og) { g.accumulate(a, og * s); });
}

Var add_row(const Var& a, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ShapeError("add_row: bias must be 1x" + std::to_string(a.cols()));
  }
  Graph& g = graph_of(a);
  Matrix out = a.value();
  out.rowwise() += bias.value().row(0);
  return g.push(std::move(out), any_grad(a, bias), [&g, a, bias](const Matrix& og) {
    g.accumulate(a, og);
    if (g.requires_grad(bias)) g.accumulate(bias, og.colwise().sum());
  });
}

Var transpose(const Var& a) {
  Graph& g = graph_of(a);
  return g.push(a.value().transpose(), any_grad(a),
                [&g, a](const Matrix& og) { g.accumulate(a, og.transpose()); });
}

Var gelu(const Var& a) {
  Graph& g = graph_of(a);
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    const double t = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
    out.data()[i] = 0.5 * v * (1.0 + t);
  }
  return g.push(std::move(out), any_grad(a), [&g, a](const Matrix& og) {
    const Matrix& x = a.value();
    Matrix dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double u = kGeluC * (v + 0.044715 * v * v * v);
      const double t = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
      dx.data()[i] = og.data()[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
    g.accumulate(a, dx);
  });
}

Var relu(const Var& a) {
  Graph& g = graph_of(a);
  return g.push(a.value().cwiseMax(0.0), any_grad(a), [&g, a](const Matrix& og) {
    g.accumulate(a, (a.value().array() > 0.0).cast<double>().matrix().cwiseProduct(og));
  });
}

Var tanh(const Var& a) {
  Graph& g = graph_of(a);
  Matrix out = a.value().array().tanh().matrix();
  return g.push(out, any_grad(a), [&g, a, out](const Matrix& og) {
    g.accumulate(a, og.cwiseProduct((1.0 - out.array().square()).matrix()));
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  if (gamma.cols() != cols || beta.cols() != cols || gamma.rows() != 1 ||
      beta.rows() != 1) {
    throw ShapeError("layer_norm: gamma/beta must be 1x" + std::to_string(cols));
  }
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.value().row(r).mean();
    const double var = (x.value().row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mean) * inv_std(r);
  }
  Matrix out = xhat;
  for (Eigen::Index r = 0; r < rows; ++r) {
    out.row(r) = xhat.row(r).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  }
  Graph& g = graph_of(x);
  const bool rg = any_grad(x) || any_grad(gamma) || any_grad(beta);
  return g.push(std::move(out), rg,
                [&g, x, gamma, beta, xhat, inv_std](const Matrix& og) {
                  const Eigen::Index n = xhat.cols();
                  if (g.requires_grad(gamma)) {
                    g.accumulate(gamma, og.cwiseProduct(xhat).colwise().sum());
                  }
                  if (g.requires_grad(beta)) g.accumulate(beta, og.colwise().sum());
                  if (g.requires_grad(x)) {
                    Matrix dx(xhat.rows(), n);
                    for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                      RowVector dxhat = og.row(r).cwiseProduct(gamma.value().row(0));
                      const double m1 = dxhat.mean();
                      const double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
                      dx.row(r) = (dxhat.array() - m1 - xhat.row(r).array() * m2) *
                                  inv_std(r);
                    }
                    g.accumulate(x, dx);
                  }
                });
}

Var softmax_rows(const Var& x, const Matrix* mask) {
  Matrix z = x.value();
  if (mask != nullptr) {
    if (mask->rows() != z.rows() || mask->cols() != z.cols()) {
      throw ShapeError("softmax_rows: mask shape mismatch");
    }
    z += *mask;
  }
  Matrix y(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    if (!std::isfinite(m)) throw NonFiniteError("softmax_rows: row fully masked");
    y.row(r) = (z.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  Graph& g = graph_of(x);
  return g.push(y, any_grad(x), [&g, x, y](const Matrix& og) {
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = og.row(r).dot(y.row(r));
      dx.row(r) = y.row(r).array() * (og.row(r).array() - dot);
    }
    g.accumulate(x, dx);
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows out of range");
  }
  Graph& g = graph_of(a);
  return g.push(a.value().middleRows(start, count), any_grad(a),
                [&g, a, start, count](const Matrix& og) {
                  Matrix d = Matrix::Zero(a.rows(), a.cols());
                  d.middleRows(start, count) = og;
                  g.accumulate(a, d);
                });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols out of range");
  }
  Graph& g = graph_of(a);
  return g.push(a.value().middleCols(start, count), any_grad(a),
                [&g, a, start, count](const Matrix& og) {
                  Matrix d = Matrix::Zero(a.rows(), a.cols());
                  d.middleCols(start, count) = og;
                  g.accumulate(a, d);
                });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
    rg = rg || any_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  Graph& g = graph_of(parts.front());
  return g.push(std::move(out), rg, [&g, parts](const Matrix& og) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (g.requires_grad(p)) g.accumulate(p, og.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || any_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  Graph& g = graph_of(parts.front());
  return g.push(std::move(out), rg, [&g, parts](const Matrix& og) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (g.requires_grad(p)) g.accumulate(p, og.middleCols(at, p.cols()));
      at += p.cols();
    }
  });
}

Var stack_rows(const Var& a, int q) {
  if (q < 1) throw ShapeError("stack_rows: q must be >= 1");
  const Eigen::Index t = a.rows();
  const Eigen::Index c = a.cols();
  const Eigen::Index groups = (t + q - 1) / q;
  Matrix out = Matrix::Zero(groups, q * c);
  for (Eigen::Index r = 0; r < t; ++r) {
    out.block(r / q, (r % q) * c, 1, c) = a.value().row(r);
  }
  Graph& g = graph_of(a);
  return g.push(std::move(out), any_grad(a), [&g, a, q](const Matrix& og) {
    const Eigen::Index c = a.cols();
    Matrix d(a.rows(), c);
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      d.row(r) = og.block(r / q, (r % q) * c, 1, c);
    }
    g.accumulate(a, d);
  });
}

Var unstack_rows(const Var& a, int q) {
  if (q < 1 || a.cols() % q != 0) {
    throw ShapeError("unstack_rows: column count not divisible by q");
  }
  const Eigen::Index c = a.cols() / q;
  Matrix out(a.rows() * q, c);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    out.row(r) = a.value().block(r / q, (r % q) * c, 1, c);
  }
  Graph& g = graph_of(a);
  return g.push(std::move(out), any_grad(a), [&g, a, q, c](const Matrix& og) {
    Matrix d(a.rows(), a.cols());
    for (Eigen::Index r = 0; r < og.rows(); ++r) {
      d.block(r / q, (r % q) * c, 1, c) = og.row(r);
    }
    g.accumulate(a, d);
  });
}

Var gather_rows(const Var& table, const std::vector<int>& indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), table.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= table.rows()) {
      throw ShapeError("gather_rows: index out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(indices[i]);
  }
  Graph& g = graph_of(table);
  return g.push(std::move(out), any_grad(table), [&g, table, indices](const Matrix& og) {
    Matrix d = Matrix::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      d.row(indices[i]) += og.row(static_cast<Eigen::Index>(i));
    }
    g.accumulate(table, d);
  });
}

Var detach(const Var& a) { return graph_of(a).constant(a.value()); }

Var straight_through(const Var& a, const Matrix& replacement) {
  if (replacement.rows() != a.rows() || replacement.cols() != a.cols()) {
    throw ShapeError("straight_through: shape mismatch");
  }
  Graph& g = graph_of(a);
  return g.push(replacement, any_grad(a),
                [&g, a](const Matrix& og) { g.accumulate(a, og); });
}

Var mean_abs(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  Matrix out(1, 1);
  out(0, 0) = a.value().cwiseAbs().sum() / n;
  Graph& g = graph_of(a);
  return g.push(std::move(out), any_grad(a), [&g, a, n](const Matrix& og) {
    Matrix d = a.value().unaryExpr([](double v) {
      return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
    });
    g.accumulate(a, d * (og(0, 0) / n));
  });
}

Var mean_square(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  Matrix out(1, 1);
  out(0, 0) = a.value().squaredNorm() / n;
  Graph& g = graph_of(a);
  return g.push(std::move(out), any_grad(a), [&g, a, n](const Matrix& og) {
    g.accumulate(a, a.value() * (2.0 * og(0, 0) / n));
  });
}

}  // namespace multitalk::ad
