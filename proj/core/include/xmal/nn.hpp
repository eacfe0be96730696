#pragma once

#include <string>
#include <vector>

#include "xmal/autograd.hpp"
#include "xmal/rng.hpp"

namespace xmal::nn {

using ad::Matrix;
using ad::Var;
using ad::Vector;

struct NamedParam {
  std::string name;
  Var var;
};
using ParamList = std::vector<NamedParam>;

/// Non-trainable state that still belongs in a checkpoint (running statistics).
struct NamedBuffer {
  std::string name;
  Matrix* value;
};
using BufferList = std::vector<NamedBuffer>;

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for affine layers.
Matrix uniform_init(int rows, int cols, int fan_in, Rng& rng);
Matrix normal_init(int rows, int cols, double stddev, Rng& rng);

inline Var parameter(Matrix value) { return Var(std::move(value), true); }

class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, Rng& rng);

  /// x is in_features x N.
  Var forward(const Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  int in_features() const { return static_cast<int>(weight_.cols()); }
  int out_features() const { return static_cast<int>(weight_.rows()); }
  Var& weight() { return weight_; }
  Var& bias() { return bias_; }

 private:
  Var weight_;
  Var bias_;
};

/// Normalizes each column over its features, then applies a per-feature gain and shift.
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim, double eps = 1e-5);

  /// `standardized`, when given, receives the normalized input before the affine part.
  Var forward(const Var& x, Var* standardized = nullptr) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  Var gamma_;
  Var beta_;
  double eps_ = 1e-5;
};

/// Per-channel normalization over all columns of a channels x N matrix.
/// Training mode uses the batch statistics and updates running averages.
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(int channels, double momentum = 0.1, double eps = 1e-5);

  Var forward(const Var& x, bool training);
  void collect(ParamList& out, const std::string& prefix) const;
  void collect_buffers(BufferList& out, const std::string& prefix);

  const Matrix& running_mean() const { return running_mean_; }
  const Matrix& running_var() const { return running_var_; }

 private:
  Var gamma_;
  Var beta_;
  Matrix running_mean_;
  Matrix running_var_;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

/// Scaled dot-product attention with `heads` heads. Queries are dim x Tq,
/// context is kv_dim x Tk; the result is dim x Tq. No positional terms, so the
/// output is invariant to permutations of the context columns.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int kv_dim, int heads, Rng& rng);

  Var forward(const Var& queries, const Var& context) const;
  void collect(ParamList& out, const std::string& prefix) const;
  int heads() const { return heads_; }

 private:
  Linear query_;
  Linear key_;
  Linear value_;
  Linear output_;
  int heads_ = 1;
};

/// Sum of squared gradient entries over a parameter list, then in-place rescale
/// so the global norm does not exceed `max_norm`. Returns the pre-clip norm.
double clip_grad_norm(const ParamList& params, double max_norm);

void zero_grads(const ParamList& params);

std::size_t parameter_count(const ParamList& params);

}  // namespace xmal::nn
