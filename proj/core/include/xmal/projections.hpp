#pragma once

#include <array>
#include <vector>

#include "xmal/encoders.hpp"
#include "xmal/nn.hpp"

namespace xmal {

/// Output of the phrase-level word projection.
struct ProjectedCaption {
  ad::Var words;    // D_s x (T-1), unit-norm columns, class token excluded
  ad::Var caption;  // D_s x 1, max over the word columns
};

/// Phrase-level projection of a contextual word matrix into the shared space.
///
/// The class-token column is dropped, then four parallel 1-D convolutions
/// (kernel widths 2, 3, 4, 5; stride 1; zero padding that keeps the length)
/// each emit D_s channels. The branch maps are reduced by an elementwise max,
/// every column is L2-normalized, and the caption vector is the max over
/// columns.
class WordProjection {
 public:
  static constexpr std::array<int, 4> kKernels = {2, 3, 4, 5};

  WordProjection() = default;
  WordProjection(int text_dim, int shared_dim, Rng& rng);

  /// `word_matrix` is D_t x T with the class token in column 0.
  ProjectedCaption forward(const ad::Var& word_matrix) const;
  /// Same, for an input that has already lost its class-token column.
  ProjectedCaption forward_tokens(const ad::Var& tokens) const;

  void collect(nn::ParamList& out, const std::string& prefix = "word_projection") const;

  /// Left zero-padding used for kernel width k: (k - 1) / 2.
  static int left_pad(int kernel) { return (kernel - 1) / 2; }

 private:
  std::vector<nn::Linear> branches_;  // one per kernel, (k * D_t) -> D_s over unfolded columns
};

/// Global image vector -> shared space: affine, tanh, L2 normalization.
class GlobalImageProjection {
 public:
  GlobalImageProjection() = default;
  GlobalImageProjection(int global_dim, int shared_dim, Rng& rng);

  /// `global` is D_g x N (one column per image); output D_s x N with unit columns.
  ad::Var forward(const ad::Var& global) const;

  void collect(nn::ParamList& out, const std::string& prefix = "global_projection") const;
  nn::Linear& linear() { return linear_; }

 private:
  nn::Linear linear_;
};

/// Intra-modal interaction over regional features: batch-normalized input,
/// single-head self-attention across the 196 positions with queries, keys and
/// values from 1x1 convolutions, plus a residual connection to the raw input.
class IntraModalInteraction {
 public:
  IntraModalInteraction() = default;
  IntraModalInteraction(int channels, Rng& rng);

  /// Each map is C_r x 196. In training mode the normalization uses
  /// statistics over every map in the batch and all positions.
  std::vector<ad::Var> forward(const std::vector<ad::Var>& maps, bool training);
  ad::Var forward_one(const ad::Var& map);  // eval mode

  void collect(nn::ParamList& out, const std::string& prefix = "imim") const;
  void collect_buffers(nn::BufferList& out, const std::string& prefix = "imim");

  nn::Linear& query() { return query_; }
  nn::Linear& key() { return key_; }
  nn::Linear& value() { return value_; }
  nn::BatchNorm& norm() { return norm_; }
  int key_dim() const { return query_.out_features(); }

 private:
  ad::Var attend(const ad::Var& normalized, const ad::Var& residual) const;

  nn::BatchNorm norm_;
  nn::Linear query_;
  nn::Linear key_;
  nn::Linear value_;
};

/// Per-region affine map C_r -> D_s over the flattened 14 x 14 grid.
class RegionProjection {
 public:
  RegionProjection() = default;
  RegionProjection(int region_channels, int shared_dim, Rng& rng);

  /// C_r x 196 -> D_s x 196; column i * 14 + j is region (i, j).
  ad::Var forward(const ad::Var& regions) const;

  void collect(nn::ParamList& out, const std::string& prefix = "region_projection") const;

 private:
  nn::Linear linear_;
};

}  // namespace xmal
