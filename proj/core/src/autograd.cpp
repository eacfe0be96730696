#include "xmal/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "xmal/error.hpp"

namespace xmal::ad {

namespace {
thread_local bool g_grad_enabled = true;

Node* raw(const Var& v) { return v.node().get(); }

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::kShape, std::string(op) + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

void check_scalar(const Var& s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) {
    fail(ErrorKind::kShape, std::string(op) + ": expected a 1x1 operand");
  }
}
}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::scalar(double value, bool requires_grad) {
  return Var(Matrix::Constant(1, 1, value), requires_grad);
}

void Var::zero_grad() {
  if (node_) node_->grad.resize(0, 0);
}

double Var::item() const {
  check_scalar(*this, "item");
  return node_->value(0, 0);
}

std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  if (root == nullptr || !root->requires_grad) return order;
  std::unordered_set<Node*> visited;
  // (node, next parent index) frames for an iterative post-order walk.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void Var::backward() const {
  check_scalar(*this, "backward");
  if (!node_->requires_grad) return;
  auto order = topological_order(node_.get());
  node_->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() > 0) n->backward(*n);
  }
}

Var make_op(Matrix value, std::span<const Var> inputs, std::function<void(Node&)> backward) {
  Var out;
  out.node_ = std::make_shared<Node>();
  out.node_->value = std::move(value);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(inputs.size());
  for (const auto& in : inputs) out.node_->parents.push_back(in.node());
  out.node_->backward = std::move(backward);
  return out;
}

namespace {
template <typename F>
Var unary(const Var& a, Matrix value, F&& grad_fn) {
  Node* pa = raw(a);
  const Var ins[] = {a};
  return make_op(std::move(value), ins, [pa, grad_fn = std::forward<F>(grad_fn)](Node& self) {
    if (pa->requires_grad) pa->accumulate(grad_fn(self));
  });
}
}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorKind::kShape, "matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + ")");
  }
  Node* pa = raw(a);
  Node* pb = raw(b);
  const Var ins[] = {a, b};
  return make_op(a.value() * b.value(), ins, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
  });
}

Var transpose(const Var& a) {
  return unary(a, a.value().transpose(), [](Node& self) -> Matrix { return self.grad.transpose(); });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Node* pa = raw(a);
  Node* pb = raw(b);
  const Var ins[] = {a, b};
  return make_op(a.value() + b.value(), ins, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Node* pa = raw(a);
  Node* pb = raw(b);
  const Var ins[] = {a, b};
  return make_op(a.value() - b.value(), ins, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Node* pa = raw(a);
  Node* pb = raw(b);
  const Var ins[] = {a, b};
  return make_op(a.value().cwiseProduct(b.value()), ins, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(self.grad.cwiseProduct(pa->value));
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  return unary(a, a.value() * c, [c](Node& self) -> Matrix { return self.grad * c; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, (a.value().array() + c).matrix(), [](Node& self) -> Matrix { return self.grad; });
}

Var scale_by(const Var& a, const Var& s) {
  check_scalar(s, "scale_by");
  Node* pa = raw(a);
  Node* ps = raw(s);
  const Var ins[] = {a, s};
  return make_op(a.value() * s.value()(0, 0), ins, [pa, ps](Node& self) {
    const double sv = ps->value(0, 0);
    if (pa->requires_grad) pa->accumulate(self.grad * sv);
    if (ps->requires_grad) {
      ps->accumulate(Matrix::Constant(1, 1, self.grad.cwiseProduct(pa->value).sum()));
    }
  });
}

Var divide_by(const Var& a, const Var& s) {
  check_scalar(s, "divide_by");
  Node* pa = raw(a);
  Node* ps = raw(s);
  const Var ins[] = {a, s};
  return make_op(a.value() / s.value()(0, 0), ins, [pa, ps](Node& self) {
    const double sv = ps->value(0, 0);
    if (pa->requires_grad) pa->accumulate(self.grad / sv);
    if (ps->requires_grad) {
      ps->accumulate(
          Matrix::Constant(1, 1, -self.grad.cwiseProduct(pa->value).sum() / (sv * sv)));
    }
  });
}

Var add_bias(const Var& a, const Var& b) {
  if (b.cols() != 1 || b.rows() != a.rows()) fail(ErrorKind::kShape, "add_bias: bias must be rows x 1");
  Node* pa = raw(a);
  Node* pb = raw(b);
  const Var ins[] = {a, b};
  Matrix value = a.value().colwise() + b.value().col(0);
  return make_op(std::move(value), ins, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(self.grad.rowwise().sum());
  });
}

Var mul_rows(const Var& a, const Var& g) {
  if (g.cols() != 1 || g.rows() != a.rows()) fail(ErrorKind::kShape, "mul_rows: gain must be rows x 1");
  Node* pa = raw(a);
  Node* pg = raw(g);
  const Var ins[] = {a, g};
  Matrix value = (a.value().array().colwise() * g.value().col(0).array()).matrix();
  return make_op(std::move(value), ins, [pa, pg](Node& self) {
    if (pa->requires_grad) {
      pa->accumulate((self.grad.array().colwise() * pg->value.col(0).array()).matrix());
    }
    if (pg->requires_grad) pg->accumulate(self.grad.cwiseProduct(pa->value).rowwise().sum());
  });
}

Var tanh(const Var& a) {
  Matrix y = a.value().array().tanh().matrix();
  return unary(a, y, [](Node& self) -> Matrix {
    return self.grad.cwiseProduct((1.0 - self.value.array().square()).matrix());
  });
}

Var relu(const Var& a) {
  Node* pa = raw(a);
  return unary(a, a.value().cwiseMax(0.0), [pa](Node& self) -> Matrix {
    return (pa->value.array() > 0.0).select(self.grad, 0.0);
  });
}

Var exp(const Var& a) {
  return unary(a, a.value().array().exp().matrix(),
               [](Node& self) -> Matrix { return self.grad.cwiseProduct(self.value); });
}

Var log(const Var& a) {
  Node* pa = raw(a);
  return unary(a, a.value().array().log().matrix(),
               [pa](Node& self) -> Matrix { return self.grad.cwiseQuotient(pa->value); });
}

Var sum(const Var& a) {
  const Index r = a.rows();
  const Index c = a.cols();
  return unary(a, Matrix::Constant(1, 1, a.value().sum()),
               [r, c](Node& self) -> Matrix { return Matrix::Constant(r, c, self.grad(0, 0)); });
}

Var mean(const Var& a) {
  const Index r = a.rows();
  const Index c = a.cols();
  const double n = static_cast<double>(r * c);
  return unary(a, Matrix::Constant(1, 1, a.value().sum() / n), [r, c, n](Node& self) -> Matrix {
    return Matrix::Constant(r, c, self.grad(0, 0) / n);
  });
}

Var sum_rows(const Var& a) {
  const Index r = a.rows();
  return unary(a, a.value().colwise().sum(),
               [r](Node& self) -> Matrix { return Matrix::Ones(r, 1) * self.grad; });
}

Var max_cols(const Var& a) {
  const Matrix& v = a.value();
  if (v.cols() == 0) fail(ErrorKind::kShape, "max_cols: no columns");
  std::vector<Index> arg(static_cast<std::size_t>(v.rows()));
  Matrix out(v.rows(), 1);
  for (Index r = 0; r < v.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < v.cols(); ++c) {
      if (v(r, c) > v(r, best)) best = c;
    }
    arg[static_cast<std::size_t>(r)] = best;
    out(r, 0) = v(r, best);
  }
  const Index cols = v.cols();
  return unary(a, std::move(out), [arg = std::move(arg), cols](Node& self) -> Matrix {
    Matrix g = Matrix::Zero(self.grad.rows(), cols);
    for (Index r = 0; r < self.grad.rows(); ++r) g(r, arg[static_cast<std::size_t>(r)]) = self.grad(r, 0);
    return g;
  });
}

Var max_elementwise(std::span<const Var> inputs) {
  if (inputs.empty()) fail(ErrorKind::kShape, "max_elementwise: no inputs");
  const Index r = inputs[0].rows();
  const Index c = inputs[0].cols();
  for (const auto& in : inputs) check_same_shape(inputs[0], in, "max_elementwise");
  Matrix out = inputs[0].value();
  Eigen::MatrixXi arg = Eigen::MatrixXi::Zero(r, c);
  for (std::size_t k = 1; k < inputs.size(); ++k) {
    const Matrix& v = inputs[k].value();
    for (Index j = 0; j < c; ++j) {
      for (Index i = 0; i < r; ++i) {
        if (v(i, j) > out(i, j)) {
          out(i, j) = v(i, j);
          arg(i, j) = static_cast<int>(k);
        }
      }
    }
  }
  std::vector<Node*> parents;
  for (const auto& in : inputs) parents.push_back(raw(in));
  return make_op(std::move(out), inputs, [parents, arg = std::move(arg)](Node& self) {
    for (std::size_t k = 0; k < parents.size(); ++k) {
      if (!parents[k]->requires_grad) continue;
      Matrix g = (arg.array() == static_cast<int>(k)).select(self.grad, 0.0);
      parents[k]->accumulate(g);
    }
  });
}

Var logsumexp(const Var& a) {
  const double m = a.value().maxCoeff();
  const double lse = m + std::log((a.value().array() - m).exp().sum());
  Node* pa = raw(a);
  return unary(a, Matrix::Constant(1, 1, lse), [pa, lse](Node& self) -> Matrix {
    return ((pa->value.array() - lse).exp() * self.grad(0, 0)).matrix();
  });
}

Var diagonal(const Var& a) {
  if (a.rows() != a.cols()) fail(ErrorKind::kShape, "diagonal: matrix must be square");
  const Index n = a.rows();
  return unary(a, a.value().diagonal(), [n](Node& self) -> Matrix {
    Matrix g = Matrix::Zero(n, n);
    g.diagonal() = self.grad.col(0);
    return g;
  });
}

Var softmax_cols(const Var& a) {
  Matrix y = a.value();
  for (Index j = 0; j < y.cols(); ++j) {
    const double m = y.col(j).maxCoeff();
    y.col(j) = (y.col(j).array() - m).exp().matrix();
    y.col(j) /= y.col(j).sum();
  }
  return unary(a, std::move(y), [](Node& self) -> Matrix {
    const Matrix& y = self.value;
    Eigen::RowVectorXd dots = self.grad.cwiseProduct(y).colwise().sum();
    return y.cwiseProduct(self.grad - Matrix::Ones(y.rows(), 1) * dots);
  });
}

Var softmax_rows(const Var& a) {
  Matrix y = a.value();
  for (Index i = 0; i < y.rows(); ++i) {
    const double m = y.row(i).maxCoeff();
    y.row(i) = (y.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  return unary(a, std::move(y), [](Node& self) -> Matrix {
    const Matrix& y = self.value;
    Vector dots = self.grad.cwiseProduct(y).rowwise().sum();
    return y.cwiseProduct(self.grad - dots * Matrix::Ones(1, y.cols()));
  });
}

Var log_softmax_cols(const Var& a) {
  Matrix y = a.value();
  for (Index j = 0; j < y.cols(); ++j) {
    const double m = y.col(j).maxCoeff();
    const double lse = m + std::log((y.col(j).array() - m).exp().sum());
    y.col(j).array() -= lse;
  }
  return unary(a, std::move(y), [](Node& self) -> Matrix {
    Matrix p = self.value.array().exp().matrix();
    Eigen::RowVectorXd gsum = self.grad.colwise().sum();
    return self.grad - p.cwiseProduct(Matrix::Ones(p.rows(), 1) * gsum);
  });
}

Var l2_normalize_cols(const Var& a, double eps) {
  const Matrix& x = a.value();
  Eigen::RowVectorXd norms = (x.colwise().squaredNorm().array() + eps).sqrt().matrix();
  Matrix y = x.array().rowwise() / norms.array();
  Node* pa = raw(a);
  return unary(a, std::move(y), [pa, norms](Node& self) -> Matrix {
    const Matrix& x = pa->value;
    Eigen::RowVectorXd dots = x.cwiseProduct(self.grad).colwise().sum();
    Matrix g = self.grad.array().rowwise() / norms.array();
    Eigen::RowVectorXd coef = dots.array() / norms.array().cube();
    g -= (x.array().rowwise() * coef.array()).matrix();
    return g;
  });
}

namespace {
// Column-wise standardization shared by layer norm (columns) and batch norm (rows).
Matrix standardize_cols_value(const Matrix& x, double eps, Eigen::RowVectorXd& inv_std) {
  const double n = static_cast<double>(x.rows());
  Eigen::RowVectorXd mu = x.colwise().sum() / n;
  Matrix centered = x.rowwise() - mu;
  Eigen::RowVectorXd var = centered.colwise().squaredNorm() / n;
  inv_std = (var.array() + eps).rsqrt().matrix();
  return centered.array().rowwise() * inv_std.array();
}

Matrix standardize_cols_grad(const Matrix& y, const Matrix& g, const Eigen::RowVectorXd& inv_std) {
  const double n = static_cast<double>(y.rows());
  Eigen::RowVectorXd gmean = g.colwise().sum() / n;
  Eigen::RowVectorXd gymean = g.cwiseProduct(y).colwise().sum() / n;
  Matrix out = g.rowwise() - gmean;
  out -= (y.array().rowwise() * gymean.array()).matrix();
  return out.array().rowwise() * inv_std.array();
}
}  // namespace

Var standardize_cols(const Var& a, double eps) {
  Eigen::RowVectorXd inv_std;
  Matrix y = standardize_cols_value(a.value(), eps, inv_std);
  return unary(a, std::move(y), [inv_std](Node& self) -> Matrix {
    return standardize_cols_grad(self.value, self.grad, inv_std);
  });
}

Var standardize_rows(const Var& a, double eps) {
  Eigen::RowVectorXd inv_std;
  Matrix yt = standardize_cols_value(a.value().transpose(), eps, inv_std);
  return unary(a, yt.transpose(), [inv_std](Node& self) -> Matrix {
    Matrix gt = standardize_cols_grad(self.value.transpose(), self.grad.transpose(), inv_std);
    return gt.transpose();
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::kShape, "concat_rows: no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) fail(ErrorKind::kShape, "concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<Node*, Index>> spans;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(raw(p), at);
    at += p.rows();
  }
  return make_op(std::move(out), parts, [spans](Node& self) {
    for (auto [node, start] : spans) {
      if (node->requires_grad) node->accumulate(self.grad.middleRows(start, node->value.rows()));
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::kShape, "concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) fail(ErrorKind::kShape, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<Node*, Index>> spans;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(raw(p), at);
    at += p.cols();
  }
  return make_op(std::move(out), parts, [spans](Node& self) {
    for (auto [node, start] : spans) {
      if (node->requires_grad) node->accumulate(self.grad.middleCols(start, node->value.cols()));
    }
  });
}

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) fail(ErrorKind::kShape, "slice_rows: out of range");
  const Index r = a.rows();
  const Index c = a.cols();
  return unary(a, a.value().middleRows(start, count), [r, c, start, count](Node& self) -> Matrix {
    Matrix g = Matrix::Zero(r, c);
    g.middleRows(start, count) = self.grad;
    return g;
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) fail(ErrorKind::kShape, "slice_cols: out of range");
  const Index r = a.rows();
  const Index c = a.cols();
  return unary(a, a.value().middleCols(start, count), [r, c, start, count](Node& self) -> Matrix {
    Matrix g = Matrix::Zero(r, c);
    g.middleCols(start, count) = self.grad;
    return g;
  });
}

Var pick(const Var& a, Index row, Index col) {
  if (row < 0 || col < 0 || row >= a.rows() || col >= a.cols()) fail(ErrorKind::kShape, "pick: out of range");
  const Index r = a.rows();
  const Index c = a.cols();
  return unary(a, Matrix::Constant(1, 1, a.value()(row, col)), [r, c, row, col](Node& self) -> Matrix {
    Matrix g = Matrix::Zero(r, c);
    g(row, col) = self.grad(0, 0);
    return g;
  });
}

Var stack_scalars(std::span<const Var> scalars, Index rows, Index cols) {
  if (static_cast<Index>(scalars.size()) != rows * cols) fail(ErrorKind::kShape, "stack_scalars: count mismatch");
  Matrix out(rows, cols);
  std::vector<Node*> nodes;
  nodes.reserve(scalars.size());
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      const Var& s = scalars[static_cast<std::size_t>(r * cols + c)];
      check_scalar(s, "stack_scalars");
      out(r, c) = s.value()(0, 0);
    }
  }
  for (const auto& s : scalars) nodes.push_back(raw(s));
  return make_op(std::move(out), scalars, [nodes, cols](Node& self) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      const Index r = static_cast<Index>(k) / cols;
      const Index c = static_cast<Index>(k) % cols;
      nodes[k]->accumulate(Matrix::Constant(1, 1, self.grad(r, c)));
    }
  });
}

Var gather_cols(const Var& table, std::span<const int> ids) {
  Matrix out(table.rows(), static_cast<Index>(ids.size()));
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= table.cols()) fail(ErrorKind::kInvalidArgument, "gather_cols: id out of range");
    out.col(static_cast<Index>(t)) = table.value().col(ids[t]);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  const Index r = table.rows();
  const Index c = table.cols();
  return unary(table, std::move(out), [idv = std::move(idv), r, c](Node& self) -> Matrix {
    Matrix g = Matrix::Zero(r, c);
    for (std::size_t t = 0; t < idv.size(); ++t) g.col(idv[t]) += self.grad.col(static_cast<Index>(t));
    return g;
  });
}

Var unfold_cols(const Var& a, int kernel, int left_pad) {
  const Index d = a.rows();
  const Index len = a.cols();
  Matrix out = Matrix::Zero(d * kernel, len);
  for (int o = 0; o < kernel; ++o) {
    for (Index t = 0; t < len; ++t) {
      const Index src = t + o - left_pad;
      if (src >= 0 && src < len) out.block(o * d, t, d, 1) = a.value().col(src);
    }
  }
  return unary(a, std::move(out), [d, len, kernel, left_pad](Node& self) -> Matrix {
    Matrix g = Matrix::Zero(d, len);
    for (int o = 0; o < kernel; ++o) {
      for (Index t = 0; t < len; ++t) {
        const Index src = t + o - left_pad;
        if (src >= 0 && src < len) g.col(src) += self.grad.block(o * d, t, d, 1);
      }
    }
    return g;
  });
}

Var cross_entropy_cols(const Var& logits, std::span<const int> labels) {
  const Index classes = logits.rows();
  const Index batch = logits.cols();
  if (static_cast<Index>(labels.size()) != batch) fail(ErrorKind::kShape, "cross_entropy_cols: label count mismatch");
  Matrix probs(classes, batch);
  double loss = 0.0;
  for (Index b = 0; b < batch; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= classes) fail(ErrorKind::kInvalidArgument, "cross_entropy_cols: label out of range");
    const auto col = logits.value().col(b);
    const double m = col.maxCoeff();
    const double lse = m + std::log((col.array() - m).exp().sum());
    probs.col(b) = (col.array() - lse).exp().matrix();
    loss += lse - col(y);
  }
  loss /= static_cast<double>(batch);
  std::vector<int> ys(labels.begin(), labels.end());
  return unary(logits, Matrix::Constant(1, 1, loss),
               [probs = std::move(probs), ys = std::move(ys), batch](Node& self) -> Matrix {
                 Matrix g = probs;
                 for (Index b = 0; b < batch; ++b) g(ys[static_cast<std::size_t>(b)], b) -= 1.0;
                 return g * (self.grad(0, 0) / static_cast<double>(batch));
               });
}

Var arc_margin_logits(const Var& cosines, std::span<const int> labels, double margin, double scale_factor) {
  const Index classes = cosines.rows();
  const Index batch = cosines.cols();
  if (static_cast<Index>(labels.size()) != batch) fail(ErrorKind::kShape, "arc_margin_logits: label count mismatch");
  const double cos_m = std::cos(margin);
  const double sin_m = std::sin(margin);
  const double threshold = std::cos(std::numbers::pi - margin);
  const double linear_shift = margin * sin_m;
  Matrix out = cosines.value() * scale_factor;
  std::vector<double> dphi(static_cast<std::size_t>(batch));
  std::vector<int> ys(labels.begin(), labels.end());
  for (Index b = 0; b < batch; ++b) {
    const int y = ys[static_cast<std::size_t>(b)];
    if (y < 0 || y >= classes) fail(ErrorKind::kInvalidArgument, "arc_margin_logits: label out of range");
    const double c = std::clamp(cosines.value()(y, b), -1.0, 1.0);
    double phi = 0.0;
    double slope = 1.0;
    if (c > threshold) {
      const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
      phi = c * cos_m - s * sin_m;
      slope = cos_m + c * sin_m / std::max(s, 1e-12);
    } else {
      phi = c - linear_shift;
    }
    out(y, b) = phi * scale_factor;
    dphi[static_cast<std::size_t>(b)] = slope;
  }
  return unary(cosines, std::move(out), [ys = std::move(ys), dphi = std::move(dphi), scale_factor](Node& self) -> Matrix {
    Matrix g = self.grad * scale_factor;
    for (std::size_t b = 0; b < ys.size(); ++b) g(ys[b], static_cast<Index>(b)) *= dphi[b];
    return g;
  });
}

}  // namespace xmal::ad
