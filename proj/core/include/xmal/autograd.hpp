#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// Every tensor in the library is a 2-D Eigen matrix. Feature axes run down the
// rows and tokens / regions / batch samples run across the columns, so a word
// matrix is D x T and a batch of embeddings is D x B.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace xmal::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

/// Graph recording is on by default; a NoGradGuard turns it off for the
/// current thread (inference, frozen feature extraction).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  static Var scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  /// Direct write access for optimizers and parameter loading. Never used on
  /// nodes that are part of a live graph.
  Matrix& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && node_->grad.size() > 0; }
  const Matrix& grad() const { return node_->grad; }
  void zero_grad();

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  /// Seeds d(self)/d(self) = 1 and propagates through the recorded graph.
  /// Requires a 1x1 value.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_op(Matrix value, std::span<const Var> inputs,
                     std::function<void(Node&)> backward);
  std::shared_ptr<Node> node_;
};

/// Builds a result node. `backward` runs with the result node, whose grad is
/// populated; it must only accumulate into inputs that require grad.
Var make_op(Matrix value, std::span<const Var> inputs,
            std::function<void(Node&)> backward);

// ---- elementwise / linear algebra ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
/// a * s for a 1x1 variable s.
Var scale_by(const Var& a, const Var& s);
/// a / s for a 1x1 variable s.
Var divide_by(const Var& a, const Var& s);
/// a + b * 1^T with b a column vector (bias over columns).
Var add_bias(const Var& a, const Var& b);
/// a .* (g * 1^T) with g a column vector (per-row gain).
Var mul_rows(const Var& a, const Var& g);

Var tanh(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }

// ---- reductions ----
Var sum(const Var& a);
Var mean(const Var& a);
/// Column sums, 1 x cols.
Var sum_rows(const Var& a);
/// Row-wise max across columns, rows x 1. Gradient routes to the first argmax.
Var max_cols(const Var& a);
/// Elementwise max over same-shaped inputs. Gradient routes to the first argmax.
Var max_elementwise(std::span<const Var> inputs);
/// log(sum(exp(a))) over all entries, 1x1.
Var logsumexp(const Var& a);
/// Diagonal of a square matrix as an n x 1 column.
Var diagonal(const Var& a);

// ---- normalizations ----
/// Softmax over the rows of each column (every column sums to 1).
Var softmax_cols(const Var& a);
/// Softmax over the columns of each row (every row sums to 1).
Var softmax_rows(const Var& a);
Var log_softmax_cols(const Var& a);
/// Divides every column by sqrt(||col||^2 + eps).
Var l2_normalize_cols(const Var& a, double eps = 1e-12);
/// Zero-mean, unit-variance per column (across rows), no affine.
Var standardize_cols(const Var& a, double eps);
/// Zero-mean, unit-variance per row (across columns), no affine.
Var standardize_rows(const Var& a, double eps);

// ---- structure ----
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var pick(const Var& a, Index row, Index col);
/// Packs 1x1 scalars into a rows x cols matrix; scalars[r * cols + c] -> (r, c).
Var stack_scalars(std::span<const Var> scalars, Index rows, Index cols);
/// Columns of `table` selected by `ids`, table is D x V, result D x ids.size().
Var gather_cols(const Var& table, std::span<const int> ids);
/// Sliding-window unfold along columns for a 1-D convolution of width `kernel`
/// with `left_pad` zero columns before the input and enough after to keep the
/// length. Result is (kernel * rows) x cols; row block o holds the input
/// shifted by (o - left_pad).
Var unfold_cols(const Var& a, int kernel, int left_pad);

// ---- losses ----
/// mean over columns b of -log softmax(logits[:, b])[labels[b]].
Var cross_entropy_cols(const Var& logits, std::span<const int> labels);
/// Additive angular margin logits. `cosines` is classes x batch; the entry of
/// each column's label becomes cos(theta + margin), all entries are scaled by
/// `scale`. Beyond theta = pi - margin the margin term switches to the
/// monotone linear extension cos(theta) - margin * sin(margin).
Var arc_margin_logits(const Var& cosines, std::span<const int> labels,
                      double margin, double scale);

/// Depth-first topological order of the graph rooted at `root` (inputs first).
std::vector<Node*> topological_order(Node* root);

}  // namespace xmal::ad
