#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmal/checkpoint.hpp"
#include "xmal/image.hpp"
#include "xmal/nn.hpp"

namespace xmal {

/// Side of the regional grid; the regional tap is always pooled to 14 x 14.
inline constexpr int kRegionGrid = 14;
inline constexpr int kRegionCount = kRegionGrid * kRegionGrid;

struct ImageEncoderConfig {
  int height = 112;
  int width = 112;
  int global_dim = 64;       // D_g
  int region_channels = 32;  // C_r
  std::array<int, 3> stage_channels = {16, 32, 48};
  std::uint64_t seed = 1;

  bool operator==(const ImageEncoderConfig&) const = default;
};

void to_json(nlohmann::json& j, const ImageEncoderConfig& c);
void from_json(const nlohmann::json& j, ImageEncoderConfig& c);

struct GlobalImageFeature {
  ad::Vector values;  // D_g
};

/// C_r x 196; region (i, j) of the 14 x 14 grid is column i * 14 + j.
struct RegionalFeatureMap {
  ad::Matrix values;
  int channels() const { return static_cast<int>(values.rows()); }
};

struct EncodedImage {
  GlobalImageFeature global;
  RegionalFeatureMap regional;
};

/// Frozen convolutional face encoder standing in for a pretrained FR backbone.
///
/// Three stride-2 3x3 conv blocks bring a 112 x 112 input to the 14 x 14
/// regional tap (adaptively pooled to 14 x 14 for other input sizes), where a
/// 1x1 conv maps to C_r channels. A fourth stride-2 block followed by global
/// average pooling yields the D_g global vector. Weights never receive
/// gradients; `checksum()` lets training verify that.
class ImageEncoder {
 public:
  ImageEncoder() = default;

  /// Deterministic He-initialized weights derived from `config.seed`.
  static ImageEncoder initialize(const ImageEncoderConfig& config);

  bool loaded() const { return loaded_; }
  bool frozen() const { return true; }
  const ImageEncoderConfig& config() const { return config_; }

  EncodedImage encode(const ImageTensor& image) const;

  /// Weight arrays with requires_grad = false, named "image_encoder.*".
  const nn::ParamList& parameters() const { return params_; }
  std::uint64_t checksum() const;

  void save(Checkpoint& ckpt) const;
  /// Throws kConfigMismatch when `expected` is given and differs from the
  /// stored architecture.
  static ImageEncoder from_checkpoint(const Checkpoint& ckpt, const ImageEncoderConfig* expected = nullptr);

 private:
  struct Conv {
    int in = 0;
    int out = 0;
    int kernel = 0;
    int stride = 1;
    int pad = 0;
    ad::Var weight;  // out x (in * k * k)
    ad::Var bias;    // out x 1
  };

  void build(const ImageEncoderConfig& config, bool randomize);

  ImageEncoderConfig config_;
  std::vector<Conv> blocks_;  // three stem blocks, the head block
  Conv tap_;
  nn::ParamList params_;
  bool loaded_ = false;
};

struct TextEncoderConfig {
  int vocab_size = 0;
  int dim = 96;  // D_t
  int layers = 2;
  int heads = 4;
  int ffn_dim = 192;
  int max_tokens = 64;  // T_max
  std::uint64_t seed = 2;

  bool operator==(const TextEncoderConfig&) const = default;
};

void to_json(nlohmann::json& j, const TextEncoderConfig& c);
void from_json(const nlohmann::json& j, TextEncoderConfig& c);

/// Token ids including the leading class token.
struct TokenSequence {
  std::vector<int> ids;
  std::size_t size() const { return ids.size(); }
};

/// Trainable contextual text encoder: learned token and position embeddings
/// followed by pre-norm transformer blocks (self-attention + feed-forward)
/// and a final layer norm. Output is D_t x T.
class TextEncoder {
 public:
  TextEncoder() = default;
  explicit TextEncoder(const TextEncoderConfig& config);

  bool loaded() const { return loaded_; }
  const TextEncoderConfig& config() const { return config_; }

  /// Throws kShape for T < 2 or T > max_tokens, kInvalidArgument for ids outside [0, V).
  ad::Var encode(const TokenSequence& tokens) const;

  void collect(nn::ParamList& out, const std::string& prefix = "text_encoder") const;
  void save(Checkpoint& ckpt) const;
  static TextEncoder from_checkpoint(const Checkpoint& ckpt, const TextEncoderConfig* expected = nullptr);

 private:
  struct Block {
    nn::LayerNorm norm1;
    nn::MultiHeadAttention attention;
    nn::LayerNorm norm2;
    nn::Linear ffn_in;
    nn::Linear ffn_out;
  };

  TextEncoderConfig config_;
  ad::Var token_embedding_;     // D_t x V
  ad::Var position_embedding_;  // D_t x T_max
  std::vector<Block> blocks_;
  nn::LayerNorm final_norm_;
  bool loaded_ = false;
};

/// What a checkpoint file holds for the encoders; absent members were not stored.
struct EncoderHandle {
  std::optional<ImageEncoder> image;
  std::optional<TextEncoder> text;
  bool image_frozen = true;
};

struct EncoderExpectations {
  std::optional<ImageEncoderConfig> image;
  std::optional<TextEncoderConfig> text;
};

EncoderHandle load_encoder_checkpoint(const std::filesystem::path& path, const EncoderExpectations& expected = {});

}  // namespace xmal
