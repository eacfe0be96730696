#include "xmal/projections.hpp"

#include <cmath>

#include "xmal/error.hpp"

namespace xmal {

WordProjection::WordProjection(int text_dim, int shared_dim, Rng& rng) {
  for (int k : kKernels) branches_.emplace_back(k * text_dim, shared_dim, rng);
}

ProjectedCaption WordProjection::forward(const ad::Var& word_matrix) const {
  if (word_matrix.cols() < 2) fail(ErrorKind::kShape, "word projection needs T >= 2 (class token plus one word)");
  return forward_tokens(ad::slice_cols(word_matrix, 1, word_matrix.cols() - 1));
}

ProjectedCaption WordProjection::forward_tokens(const ad::Var& tokens) const {
  if (tokens.cols() < 1) fail(ErrorKind::kShape, "word projection needs at least one word column");
  std::vector<ad::Var> maps;
  maps.reserve(branches_.size());
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    const int k = kKernels[b];
    maps.push_back(branches_[b].forward(ad::unfold_cols(tokens, k, left_pad(k))));
  }
  ProjectedCaption out;
  out.words = ad::l2_normalize_cols(ad::max_elementwise(maps));
  out.caption = ad::max_cols(out.words);
  return out;
}

void WordProjection::collect(nn::ParamList& out, const std::string& prefix) const {
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    branches_[b].collect(out, prefix + ".conv" + std::to_string(kKernels[b]));
  }
}

GlobalImageProjection::GlobalImageProjection(int global_dim, int shared_dim, Rng& rng)
    : linear_(global_dim, shared_dim, rng) {}

ad::Var GlobalImageProjection::forward(const ad::Var& global) const {
  return ad::l2_normalize_cols(ad::tanh(linear_.forward(global)));
}

void GlobalImageProjection::collect(nn::ParamList& out, const std::string& prefix) const {
  linear_.collect(out, prefix + ".linear");
}

IntraModalInteraction::IntraModalInteraction(int channels, Rng& rng)
    : norm_(channels),
      query_(channels, std::max(1, channels / 4), rng),
      key_(channels, std::max(1, channels / 4), rng),
      value_(channels, channels, rng) {}

ad::Var IntraModalInteraction::attend(const ad::Var& normalized, const ad::Var& residual) const {
  const ad::Var q = query_.forward(normalized);
  const ad::Var k = key_.forward(normalized);
  const ad::Var v = value_.forward(normalized);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.rows()));
  // 196 x 196: column j is the distribution of position j over all positions.
  const ad::Var weights = ad::softmax_cols(ad::scale(ad::matmul(ad::transpose(k), q), inv_sqrt));
  return ad::add(residual, ad::matmul(v, weights));
}

std::vector<ad::Var> IntraModalInteraction::forward(const std::vector<ad::Var>& maps, bool training) {
  for (const auto& m : maps) {
    if (m.rows() != norm_.running_mean().rows() || m.cols() != kRegionCount) {
      fail(ErrorKind::kShape, "IMIM expects C_r x 196 regional maps");
    }
  }
  std::vector<ad::Var> out;
  out.reserve(maps.size());
  if (maps.empty()) return out;
  const ad::Var normalized = norm_.forward(ad::concat_cols(maps), training);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const ad::Var ni = ad::slice_cols(normalized, static_cast<ad::Index>(i) * kRegionCount, kRegionCount);
    out.push_back(attend(ni, maps[i]));
  }
  return out;
}

ad::Var IntraModalInteraction::forward_one(const ad::Var& map) {
  return forward(std::vector<ad::Var>{map}, false).front();
}

void IntraModalInteraction::collect(nn::ParamList& out, const std::string& prefix) const {
  norm_.collect(out, prefix + ".norm");
  query_.collect(out, prefix + ".query");
  key_.collect(out, prefix + ".key");
  value_.collect(out, prefix + ".value");
}

void IntraModalInteraction::collect_buffers(nn::BufferList& out, const std::string& prefix) {
  norm_.collect_buffers(out, prefix + ".norm");
}

RegionProjection::RegionProjection(int region_channels, int shared_dim, Rng& rng)
    : linear_(region_channels, shared_dim, rng) {}

ad::Var RegionProjection::forward(const ad::Var& regions) const { return linear_.forward(regions); }

void RegionProjection::collect(nn::ParamList& out, const std::string& prefix) const {
  linear_.collect(out, prefix + ".linear");
}

}  // namespace xmal
