#pragma once

// Face-caption fusion. FCFM combines a fine branch (words attend to regions,
// then two self-attention blocks, max-pool over words) with a coarse branch
// (caption attends to the global image vector); both land in D_s and are
// concatenated before the final affine layer. FLF is the plain linear
// baseline over the two global vectors.

#include <nlohmann/json.hpp>

#include "xmal/nn.hpp"

namespace xmal {

struct FusionConfig {
  int shared_dim = 32;  // D_s
  int fused_dim = 64;   // D_f
  int heads = 4;
  /// Score with concat(fused, v) instead of the fused embedding alone.
  bool match_with_global = false;

  bool operator==(const FusionConfig&) const = default;
};

void to_json(nlohmann::json& j, const FusionConfig& c);
void from_json(const nlohmann::json& j, FusionConfig& c);

class Fcfm {
 public:
  Fcfm() = default;
  Fcfm(const FusionConfig& config, Rng& rng);

  const FusionConfig& config() const { return config_; }

  /// words: D_s x (T-1), regions: D_s x 196 -> D_s x 1.
  ad::Var fine(const ad::Var& words, const ad::Var& regions) const;
  /// global_image, caption: D_s x 1 -> D_s x 1. When `standardized` is given it
  /// receives the layer-norm output before the gain and shift.
  ad::Var coarse(const ad::Var& global_image, const ad::Var& caption, ad::Var* standardized = nullptr) const;
  /// D_f x 1, not normalized; callers normalize for matching.
  ad::Var forward(const ad::Var& words, const ad::Var& regions, const ad::Var& global_image,
                  const ad::Var& caption) const;

  void collect(nn::ParamList& out, const std::string& prefix = "fcfm") const;

 private:
  struct SelfAttentionBlock {
    nn::MultiHeadAttention attention;
    nn::LayerNorm norm;
  };

  FusionConfig config_;
  nn::MultiHeadAttention cross_;
  nn::LayerNorm cross_norm_;
  std::vector<SelfAttentionBlock> refine_;  // two blocks, independent weights
  nn::Linear fine_out_;
  nn::MultiHeadAttention coarse_attention_;
  nn::LayerNorm coarse_norm_;
  nn::Linear output_;
};

/// Feature-level fusion baseline: one affine layer over concat(v, c).
class Flf {
 public:
  Flf() = default;
  Flf(const FusionConfig& config, Rng& rng);

  /// global_image, caption: D_s x N -> D_f x N.
  ad::Var forward(const ad::Var& global_image, const ad::Var& caption) const;
  void collect(nn::ParamList& out, const std::string& prefix = "flf") const;
  nn::Linear& linear() { return linear_; }

 private:
  nn::Linear linear_;
};

}  // namespace xmal
