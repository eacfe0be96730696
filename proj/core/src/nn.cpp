#include "xmal/nn.hpp"

#include <cmath>

#include "xmal/error.hpp"

namespace xmal::nn {

Matrix uniform_init(int rows, int cols, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  }
  return m;
}

Matrix normal_init(int rows, int cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  }
  return m;
}

Linear::Linear(int in_features, int out_features, Rng& rng)
    : weight_(parameter(uniform_init(out_features, in_features, in_features, rng))),
      bias_(parameter(uniform_init(out_features, 1, in_features, rng))) {}

Var Linear::forward(const Var& x) const {
  return ad::add_bias(ad::matmul(weight_, x), bias_);
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight_});
  out.push_back({prefix + ".bias", bias_});
}

LayerNorm::LayerNorm(int dim, double eps)
    : gamma_(parameter(Matrix::Ones(dim, 1))), beta_(parameter(Matrix::Zero(dim, 1))), eps_(eps) {}

Var LayerNorm::forward(const Var& x, Var* standardized) const {
  Var z = ad::standardize_cols(x, eps_);
  if (standardized != nullptr) *standardized = z;
  return ad::add_bias(ad::mul_rows(z, gamma_), beta_);
}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma_});
  out.push_back({prefix + ".beta", beta_});
}

BatchNorm::BatchNorm(int channels, double momentum, double eps)
    : gamma_(parameter(Matrix::Ones(channels, 1))),
      beta_(parameter(Matrix::Zero(channels, 1))),
      running_mean_(Matrix::Zero(channels, 1)),
      running_var_(Matrix::Ones(channels, 1)),
      momentum_(momentum),
      eps_(eps) {}

Var BatchNorm::forward(const Var& x, bool training) {
  if (x.rows() != running_mean_.rows()) fail(ErrorKind::kShape, "BatchNorm: channel count mismatch");
  if (training) {
    const Matrix& v = x.value();
    const double n = static_cast<double>(v.cols());
    Vector mu = v.rowwise().mean();
    Vector var = (v.colwise() - mu).rowwise().squaredNorm() / n;
    // Running variance uses the unbiased estimate, as is customary.
    const double unbias = n > 1 ? n / (n - 1.0) : 1.0;
    running_mean_ = (1.0 - momentum_) * running_mean_ + momentum_ * mu;
    running_var_ = (1.0 - momentum_) * running_var_ + momentum_ * unbias * var;
    return ad::add_bias(ad::mul_rows(ad::standardize_rows(x, eps_), gamma_), beta_);
  }
  Vector inv = (running_var_.col(0).array() + eps_).rsqrt().matrix();
  Var centered = ad::add_bias(x, Var(-running_mean_));
  return ad::add_bias(ad::mul_rows(ad::mul_rows(centered, Var(Matrix(inv))), gamma_), beta_);
}

void BatchNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma_});
  out.push_back({prefix + ".beta", beta_});
}

void BatchNorm::collect_buffers(BufferList& out, const std::string& prefix) {
  out.push_back({prefix + ".running_mean", &running_mean_});
  out.push_back({prefix + ".running_var", &running_var_});
}

MultiHeadAttention::MultiHeadAttention(int dim, int kv_dim, int heads, Rng& rng)
    : query_(dim, dim, rng),
      key_(kv_dim, dim, rng),
      value_(kv_dim, dim, rng),
      output_(dim, dim, rng),
      heads_(heads) {
  if (heads <= 0 || dim % heads != 0) {
    fail(ErrorKind::kInvalidArgument, "MultiHeadAttention: dim must be divisible by heads");
  }
}

Var MultiHeadAttention::forward(const Var& queries, const Var& context) const {
  const Var q = query_.forward(queries);
  const Var k = key_.forward(context);
  const Var v = value_.forward(context);
  const Eigen::Index head_dim = q.rows() / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads_));
  for (int h = 0; h < heads_; ++h) {
    const Var qh = ad::slice_rows(q, h * head_dim, head_dim);
    const Var kh = ad::slice_rows(k, h * head_dim, head_dim);
    const Var vh = ad::slice_rows(v, h * head_dim, head_dim);
    // scores: Tk x Tq; each query column attends over the context rows.
    const Var scores = ad::scale(ad::matmul(ad::transpose(kh), qh), inv_sqrt);
    outs.push_back(ad::matmul(vh, ad::softmax_cols(scores)));
  }
  const Var merged = heads_ == 1 ? outs[0] : ad::concat_rows(outs);
  return output_.forward(merged);
}

void MultiHeadAttention::collect(ParamList& out, const std::string& prefix) const {
  query_.collect(out, prefix + ".query");
  key_.collect(out, prefix + ".key");
  value_.collect(out, prefix + ".value");
  output_.collect(out, prefix + ".output");
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.var.has_grad()) sq += p.var.grad().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      if (p.var.has_grad()) p.var.node()->grad *= factor;
    }
  }
  return norm;
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.var.node()->grad.resize(0, 0);
}

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.var.value().size());
  return n;
}

}  // namespace xmal::nn
