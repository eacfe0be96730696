#include "xmal/encoders.hpp"

#include <cmath>

#include "xmal/error.hpp"
#include "xmal/rng.hpp"

namespace xmal {

void to_json(nlohmann::json& j, const ImageEncoderConfig& c) {
  j = nlohmann::json{{"height", c.height},
                     {"width", c.width},
                     {"global_dim", c.global_dim},
                     {"region_channels", c.region_channels},
                     {"stage_channels", c.stage_channels},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ImageEncoderConfig& c) {
  ImageEncoderConfig d;
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.global_dim = j.value("global_dim", d.global_dim);
  c.region_channels = j.value("region_channels", d.region_channels);
  c.stage_channels = j.value("stage_channels", d.stage_channels);
  c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const TextEncoderConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"dim", c.dim},         {"layers", c.layers},
                     {"heads", c.heads},           {"ffn_dim", c.ffn_dim}, {"max_tokens", c.max_tokens},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TextEncoderConfig& c) {
  TextEncoderConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.dim = j.value("dim", d.dim);
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.max_tokens = j.value("max_tokens", d.max_tokens);
  c.seed = j.value("seed", d.seed);
}

namespace {

struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  ad::Matrix data;  // channels x (height * width), column y * width + x
};

// Share of the channel mean kept after normalization; enough that flat
// images of different colours stay distinguishable.
constexpr double kMeanWeight = 0.25;

FeatureMap from_image(const ImageTensor& image) {
  FeatureMap fm{3, image.height, image.width, ad::Matrix(3, image.height * image.width)};
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) fm.data(c, y * image.width + x) = image.at(y, x, c);
    }
  }
  // Photometric normalization per image and channel, as FR preprocessing
  // does, so the features follow facial structure rather than overall colour.
  for (int c = 0; c < 3; ++c) {
    auto row = fm.data.row(c);
    const double mean = row.mean();
    const double sd = std::sqrt((row.array() - mean).square().mean());
    row = (row.array() - mean) / (sd + 1e-6) + kMeanWeight * (mean - 0.5);
  }
  return fm;
}

FeatureMap adaptive_avg_pool(const FeatureMap& in, int out_h, int out_w) {
  if (in.height == out_h && in.width == out_w) return in;
  FeatureMap out{in.channels, out_h, out_w, ad::Matrix::Zero(in.channels, out_h * out_w)};
  for (int oy = 0; oy < out_h; ++oy) {
    const int y0 = (oy * in.height) / out_h;
    const int y1 = ((oy + 1) * in.height + out_h - 1) / out_h;
    for (int ox = 0; ox < out_w; ++ox) {
      const int x0 = (ox * in.width) / out_w;
      const int x1 = ((ox + 1) * in.width + out_w - 1) / out_w;
      ad::Vector acc = ad::Vector::Zero(in.channels);
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) acc += in.data.col(y * in.width + x);
      }
      out.data.col(oy * out_w + ox) = acc / static_cast<double>((y1 - y0) * (x1 - x0));
    }
  }
  return out;
}

}  // namespace

void ImageEncoder::build(const ImageEncoderConfig& config, bool randomize) {
  if (config.height < kMinImageSide || config.width < kMinImageSide) {
    fail(ErrorKind::kInvalidArgument, "image encoder input must be at least 28x28");
  }
  if (config.global_dim <= 0 || config.region_channels <= 0) {
    fail(ErrorKind::kInvalidArgument, "image encoder dimensions must be positive");
  }
  config_ = config;
  blocks_.clear();
  params_.clear();
  Rng rng = make_rng(config.seed, {stream::kInit});
  auto make_conv = [&](int in, int out, int kernel, int stride, int pad) {
    Conv conv{in, out, kernel, stride, pad, {}, {}};
    const int fan_in = in * kernel * kernel;
    ad::Matrix w = randomize ? nn::normal_init(out, fan_in, std::sqrt(2.0 / fan_in), rng)
                             : ad::Matrix::Zero(out, fan_in);
    conv.weight = ad::Var(std::move(w), false);
    conv.bias = ad::Var(ad::Matrix::Zero(out, 1), false);
    return conv;
  };
  const auto& ch = config.stage_channels;
  blocks_.push_back(make_conv(3, ch[0], 3, 2, 1));
  blocks_.push_back(make_conv(ch[0], ch[1], 3, 2, 1));
  blocks_.push_back(make_conv(ch[1], ch[2], 3, 2, 1));
  tap_ = make_conv(ch[2], config.region_channels, 1, 1, 0);
  blocks_.push_back(make_conv(ch[2], config.global_dim, 3, 2, 1));
  const char* names[] = {"stage1", "stage2", "stage3", "head"};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    params_.push_back({std::string("image_encoder.") + names[i] + ".weight", blocks_[i].weight});
    params_.push_back({std::string("image_encoder.") + names[i] + ".bias", blocks_[i].bias});
  }
  params_.push_back({"image_encoder.tap.weight", tap_.weight});
  params_.push_back({"image_encoder.tap.bias", tap_.bias});
  loaded_ = true;
}

ImageEncoder ImageEncoder::initialize(const ImageEncoderConfig& config) {
  ImageEncoder enc;
  enc.build(config, true);
  return enc;
}

namespace {
FeatureMap conv_forward(const ad::Matrix& weight, const ad::Matrix& bias, int kernel, int stride, int pad,
                        const FeatureMap& in, bool relu) {
  const int out_h = (in.height + 2 * pad - kernel) / stride + 1;
  const int out_w = (in.width + 2 * pad - kernel) / stride + 1;
  ad::Matrix cols = ad::Matrix::Zero(in.channels * kernel * kernel, out_h * out_w);
  for (int c = 0; c < in.channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const int row = (c * kernel + ky) * kernel + kx;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= in.height) continue;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= in.width) continue;
            cols(row, oy * out_w + ox) = in.data(c, iy * in.width + ix);
          }
        }
      }
    }
  }
  FeatureMap out{static_cast<int>(weight.rows()), out_h, out_w, weight * cols};
  out.data.colwise() += bias.col(0);
  if (relu) out.data = out.data.cwiseMax(0.0);
  return out;
}
}  // namespace

EncodedImage ImageEncoder::encode(const ImageTensor& image) const {
  if (!loaded_) fail(ErrorKind::kUnloaded, "image encoder weights are not loaded");
  if (image.height != config_.height || image.width != config_.width) {
    fail(ErrorKind::kShape, "image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                ", encoder expects " + std::to_string(config_.height) + "x" +
                                std::to_string(config_.width));
  }
  validate_image(image);
  FeatureMap fm = from_image(image);
  for (int i = 0; i < 3; ++i) {
    const Conv& b = blocks_[static_cast<std::size_t>(i)];
    fm = conv_forward(b.weight.value(), b.bias.value(), b.kernel, b.stride, b.pad, fm, true);
  }
  const FeatureMap grid = adaptive_avg_pool(fm, kRegionGrid, kRegionGrid);
  EncodedImage out;
  out.regional.values = conv_forward(tap_.weight.value(), tap_.bias.value(), 1, 1, 0, grid, false).data;
  const Conv& head = blocks_[3];
  const FeatureMap top = conv_forward(head.weight.value(), head.bias.value(), head.kernel, head.stride, head.pad, fm, true);
  out.global.values = top.data.rowwise().mean();
  return out;
}

std::uint64_t ImageEncoder::checksum() const { return xmal::checksum(params_); }

void ImageEncoder::save(Checkpoint& ckpt) const {
  if (!loaded_) fail(ErrorKind::kUnloaded, "cannot save an unloaded image encoder");
  ckpt.config["image_encoder"] = config_;
  ckpt.config["frozen"]["image_encoder"] = true;
  ckpt.store(params_);
}

ImageEncoder ImageEncoder::from_checkpoint(const Checkpoint& ckpt, const ImageEncoderConfig* expected) {
  if (!ckpt.config.contains("image_encoder")) fail(ErrorKind::kConfigMismatch, "checkpoint holds no image encoder");
  ImageEncoderConfig stored;
  try {
    stored = ckpt.config.at("image_encoder").get<ImageEncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptFile, std::string("image encoder config unreadable: ") + e.what());
  }
  if (expected != nullptr && !(*expected == stored)) {
    fail(ErrorKind::kConfigMismatch, "image encoder architecture mismatch: checkpoint has " +
                                         nlohmann::json(stored).dump() + ", expected " +
                                         nlohmann::json(*expected).dump());
  }
  ImageEncoder enc;
  enc.build(stored, false);
  ckpt.restore(enc.params_);
  return enc;
}

TextEncoder::TextEncoder(const TextEncoderConfig& config) : config_(config) {
  if (config.vocab_size <= 3) fail(ErrorKind::kInvalidArgument, "text encoder needs a vocabulary beyond the reserved ids");
  if (config.max_tokens < 2) fail(ErrorKind::kInvalidArgument, "text encoder max_tokens must be >= 2");
  Rng rng = make_rng(config.seed, {stream::kInit});
  token_embedding_ = nn::parameter(nn::normal_init(config.dim, config.vocab_size, 0.1, rng));
  position_embedding_ = nn::parameter(nn::normal_init(config.dim, config.max_tokens, 0.1, rng));
  for (int l = 0; l < config.layers; ++l) {
    blocks_.push_back(Block{nn::LayerNorm(config.dim), nn::MultiHeadAttention(config.dim, config.dim, config.heads, rng),
                            nn::LayerNorm(config.dim), nn::Linear(config.dim, config.ffn_dim, rng),
                            nn::Linear(config.ffn_dim, config.dim, rng)});
  }
  final_norm_ = nn::LayerNorm(config.dim);
  loaded_ = true;
}

ad::Var TextEncoder::encode(const TokenSequence& tokens) const {
  if (!loaded_) fail(ErrorKind::kUnloaded, "text encoder is not initialized");
  const int t = static_cast<int>(tokens.size());
  if (t < 2) fail(ErrorKind::kShape, "token sequence needs the class token plus at least one token");
  if (t > config_.max_tokens) {
    fail(ErrorKind::kShape, "token sequence of length " + std::to_string(t) + " exceeds max_tokens " +
                                std::to_string(config_.max_tokens));
  }
  for (int id : tokens.ids) {
    if (id < 0 || id >= config_.vocab_size) {
      fail(ErrorKind::kInvalidArgument, "token id " + std::to_string(id) + " outside vocabulary of size " +
                                            std::to_string(config_.vocab_size));
    }
  }
  ad::Var x = ad::add(ad::gather_cols(token_embedding_, tokens.ids), ad::slice_cols(position_embedding_, 0, t));
  for (const Block& b : blocks_) {
    const ad::Var h = b.norm1.forward(x);
    x = ad::add(x, b.attention.forward(h, h));
    const ad::Var h2 = b.norm2.forward(x);
    x = ad::add(x, b.ffn_out.forward(ad::relu(b.ffn_in.forward(h2))));
  }
  return final_norm_.forward(x);
}

void TextEncoder::collect(nn::ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".token_embedding", token_embedding_});
  out.push_back({prefix + ".position_embedding", position_embedding_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string p = prefix + ".block" + std::to_string(l);
    blocks_[l].norm1.collect(out, p + ".norm1");
    blocks_[l].attention.collect(out, p + ".attention");
    blocks_[l].norm2.collect(out, p + ".norm2");
    blocks_[l].ffn_in.collect(out, p + ".ffn_in");
    blocks_[l].ffn_out.collect(out, p + ".ffn_out");
  }
  final_norm_.collect(out, prefix + ".final_norm");
}

void TextEncoder::save(Checkpoint& ckpt) const {
  ckpt.config["text_encoder"] = config_;
  nn::ParamList params;
  collect(params);
  ckpt.store(params);
}

TextEncoder TextEncoder::from_checkpoint(const Checkpoint& ckpt, const TextEncoderConfig* expected) {
  if (!ckpt.config.contains("text_encoder")) fail(ErrorKind::kConfigMismatch, "checkpoint holds no text encoder");
  TextEncoderConfig stored;
  try {
    stored = ckpt.config.at("text_encoder").get<TextEncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptFile, std::string("text encoder config unreadable: ") + e.what());
  }
  if (expected != nullptr && !(*expected == stored)) {
    fail(ErrorKind::kConfigMismatch, "text encoder architecture mismatch: checkpoint has " +
                                         nlohmann::json(stored).dump() + ", expected " +
                                         nlohmann::json(*expected).dump());
  }
  TextEncoder enc(stored);
  nn::ParamList params;
  enc.collect(params);
  ckpt.restore(params);
  return enc;
}

EncoderHandle load_encoder_checkpoint(const std::filesystem::path& path, const EncoderExpectations& expected) {
  const Checkpoint ckpt = load_checkpoint(path);
  EncoderHandle handle;
  if (ckpt.config.contains("image_encoder")) {
    handle.image = ImageEncoder::from_checkpoint(ckpt, expected.image ? &*expected.image : nullptr);
  } else if (expected.image) {
    fail(ErrorKind::kConfigMismatch, "checkpoint " + path.string() + " holds no image encoder");
  }
  if (ckpt.config.contains("text_encoder")) {
    handle.text = TextEncoder::from_checkpoint(ckpt, expected.text ? &*expected.text : nullptr);
  } else if (expected.text) {
    fail(ErrorKind::kConfigMismatch, "checkpoint " + path.string() + " holds no text encoder");
  }
  if (ckpt.config.contains("frozen") && ckpt.config["frozen"].contains("image_encoder")) {
    handle.image_frozen = ckpt.config["frozen"]["image_encoder"].get<bool>();
  }
  return handle;
}

}  // namespace xmal
