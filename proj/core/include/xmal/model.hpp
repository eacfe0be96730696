#pragma once

// The trainable stack around the frozen image encoder: text encoder, shared
// space projections, IMIM, temperatures, identity heads and both fusion paths.

#include <cstdint>

#include <nlohmann/json.hpp>

#include "xmal/alignment.hpp"
#include "xmal/checkpoint.hpp"
#include "xmal/encoders.hpp"
#include "xmal/fusion.hpp"
#include "xmal/projections.hpp"

namespace xmal {

struct ModelConfig {
  ImageEncoderConfig image;
  TextEncoderConfig text;
  FusionConfig fusion;
  int num_classes = 1;
  double initial_tau = 0.07;
  /// One learnable temperature for both caption-image and intra-modal terms.
  bool share_tau = true;
  std::uint64_t seed = 7;

  int shared_dim() const { return fusion.shared_dim; }
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Projected image in the shared space.
struct SharedImage {
  ad::Var global;   // D_s x 1, unit norm
  ad::Var regions;  // D_s x 196
};

enum class FusionKind { kFcfm, kFlf };

const char* to_string(FusionKind kind);
FusionKind parse_fusion(const std::string& text);

class TgfrModel {
 public:
  TgfrModel() = default;
  /// Parameters are drawn from streams derived from `config.seed`.
  explicit TgfrModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// Tokens may carry trailing padding; only the prefix before PAD is encoded.
  ProjectedCaption encode_caption(const TokenSequence& tokens) const;
  /// D_g x N global features -> D_s x N unit columns.
  ad::Var project_global(const ad::Var& globals) const;
  /// IMIM then the region projection; training mode uses batch statistics.
  std::vector<ad::Var> project_regions(const std::vector<ad::Var>& maps, bool training);
  /// Eval-mode projection of one encoded image.
  SharedImage project_image(const EncodedImage& image);

  ad::Var fuse(const SharedImage& image, const ProjectedCaption& caption, FusionKind kind) const;
  /// Unit-norm matching embedding; fused alone, or concat(fused, v) when the
  /// fusion config asks for it.
  ad::Vector match_embedding(const SharedImage& image, const ProjectedCaption& caption, FusionKind kind) const;

  ad::Var tau() const { return temperatures_.tau(); }
  ad::Var imcl_tau() const;
  align::Temperatures& temperatures() { return temperatures_; }
  void clamp_temperatures(double lo, double hi);

  const ad::Var& image_head() const { return image_head_; }
  const ad::Var& text_head() const { return text_head_; }
  const ad::Var& fusion_head(FusionKind kind) const { return kind == FusionKind::kFcfm ? fused_head_ : flf_head_; }

  TextEncoder& text_encoder() { return text_encoder_; }
  IntraModalInteraction& imim() { return imim_; }
  Fcfm& fcfm() { return fcfm_; }
  Flf& flf() { return flf_; }

  nn::ParamList text_encoder_params() const;
  /// Projections, IMIM, temperatures and the two identity heads.
  nn::ParamList fcam_params() const;
  nn::ParamList stage1_params() const;
  /// Fusion network plus its identity head.
  nn::ParamList fusion_params(FusionKind kind) const;
  nn::ParamList all_params() const;
  nn::BufferList buffers();

  void save(Checkpoint& ckpt);
  static TgfrModel from_checkpoint(const Checkpoint& ckpt);

 private:
  ModelConfig config_;
  TextEncoder text_encoder_;
  WordProjection word_projection_;
  GlobalImageProjection global_projection_;
  IntraModalInteraction imim_;
  RegionProjection region_projection_;
  align::Temperatures temperatures_;
  ad::Var imcl_log_tau_;
  ad::Var image_head_;  // D_s x K
  ad::Var text_head_;   // D_s x K
  Fcfm fcfm_;
  ad::Var fused_head_;  // D_f x K
  Flf flf_;
  ad::Var flf_head_;  // D_f x K
};

}  // namespace xmal
