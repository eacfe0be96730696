#include "xmal/model.hpp"

#include <cmath>

#include "xmal/data.hpp"
#include "xmal/error.hpp"

namespace xmal {

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image", c.image},
                     {"text", c.text},
                     {"fusion", c.fusion},
                     {"num_classes", c.num_classes},
                     {"initial_tau", c.initial_tau},
                     {"share_tau", c.share_tau},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.image = j.value("image", d.image);
  c.text = j.value("text", d.text);
  c.fusion = j.value("fusion", d.fusion);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.initial_tau = j.value("initial_tau", d.initial_tau);
  c.share_tau = j.value("share_tau", d.share_tau);
  c.seed = j.value("seed", d.seed);
}

const char* to_string(FusionKind kind) { return kind == FusionKind::kFcfm ? "fcfm" : "flf"; }

FusionKind parse_fusion(const std::string& text) {
  if (text == "fcfm" || text == "tgfr") return FusionKind::kFcfm;
  if (text == "flf") return FusionKind::kFlf;
  fail(ErrorKind::kInvalidArgument, "unknown fusion '" + text + "' (expected fcfm or flf)");
}

namespace {

ad::Var class_head(int dim, int classes, Rng& rng) {
  return nn::parameter(nn::normal_init(dim, classes, 1.0 / std::sqrt(static_cast<double>(dim)), rng));
}

}  // namespace

TgfrModel::TgfrModel(const ModelConfig& config) : config_(config) {
  if (config.num_classes < 1) fail(ErrorKind::kInvalidArgument, "model needs at least one identity class");
  const int ds = config.shared_dim();
  const int df = config.fusion.fused_dim;
  const int k = config.num_classes;
  // Separate streams per component keep each initialization independent of the others.
  auto rng_for = [&](std::uint64_t component) { return make_rng(config.seed, {stream::kInit, component}); };

  config_.text.seed = derive_seed(config.seed, {stream::kInit, 0});
  text_encoder_ = TextEncoder(config_.text);
  Rng r1 = rng_for(1);
  word_projection_ = WordProjection(config.text.dim, ds, r1);
  Rng r2 = rng_for(2);
  global_projection_ = GlobalImageProjection(config.image.global_dim, ds, r2);
  Rng r3 = rng_for(3);
  imim_ = IntraModalInteraction(config.image.region_channels, r3);
  Rng r4 = rng_for(4);
  region_projection_ = RegionProjection(config.image.region_channels, ds, r4);
  temperatures_ = align::Temperatures::defaults(config.initial_tau);
  if (!config.share_tau) imcl_log_tau_ = ad::Var::scalar(std::log(config.initial_tau), true);
  Rng r5 = rng_for(5);
  image_head_ = class_head(ds, k, r5);
  text_head_ = class_head(ds, k, r5);
  Rng r6 = rng_for(6);
  fcfm_ = Fcfm(config.fusion, r6);
  fused_head_ = class_head(df, k, r6);
  Rng r7 = rng_for(7);
  flf_ = Flf(config.fusion, r7);
  flf_head_ = class_head(df, k, r7);
}

ProjectedCaption TgfrModel::encode_caption(const TokenSequence& tokens) const {
  return word_projection_.forward(text_encoder_.encode(trim_padding(tokens)));
}

ad::Var TgfrModel::project_global(const ad::Var& globals) const { return global_projection_.forward(globals); }

std::vector<ad::Var> TgfrModel::project_regions(const std::vector<ad::Var>& maps, bool training) {
  std::vector<ad::Var> out = imim_.forward(maps, training);
  for (auto& m : out) m = region_projection_.forward(m);
  return out;
}

SharedImage TgfrModel::project_image(const EncodedImage& image) {
  SharedImage out;
  out.global = project_global(ad::Var(ad::Matrix(image.global.values)));
  out.regions = project_regions({ad::Var(image.regional.values)}, false).front();
  return out;
}

ad::Var TgfrModel::fuse(const SharedImage& image, const ProjectedCaption& caption, FusionKind kind) const {
  if (kind == FusionKind::kFcfm) return fcfm_.forward(caption.words, image.regions, image.global, caption.caption);
  return flf_.forward(image.global, caption.caption);
}

ad::Vector TgfrModel::match_embedding(const SharedImage& image, const ProjectedCaption& caption,
                                      FusionKind kind) const {
  ad::Vector fused = fuse(image, caption, kind).value().col(0);
  fused.normalize();
  if (!config_.fusion.match_with_global) return fused;
  ad::Vector v = image.global.value().col(0);
  ad::Vector joined(fused.size() + v.size());
  joined << fused, v;
  return joined.normalized();
}

ad::Var TgfrModel::imcl_tau() const {
  return config_.share_tau ? temperatures_.tau() : ad::exp(imcl_log_tau_);
}

void TgfrModel::clamp_temperatures(double lo, double hi) {
  temperatures_.clamp(lo, hi);
  if (!config_.share_tau) {
    auto& v = imcl_log_tau_.mutable_value()(0, 0);
    v = std::clamp(v, std::log(lo), std::log(hi));
  }
}

nn::ParamList TgfrModel::text_encoder_params() const {
  nn::ParamList out;
  text_encoder_.collect(out);
  return out;
}

nn::ParamList TgfrModel::fcam_params() const {
  nn::ParamList out;
  word_projection_.collect(out);
  global_projection_.collect(out);
  imim_.collect(out);
  region_projection_.collect(out);
  out.push_back({"temperature.log_tau", temperatures_.log_tau});
  if (!config_.share_tau) out.push_back({"temperature.imcl_log_tau", imcl_log_tau_});
  out.push_back({"identity.image_head", image_head_});
  out.push_back({"identity.text_head", text_head_});
  return out;
}

nn::ParamList TgfrModel::stage1_params() const {
  nn::ParamList out = text_encoder_params();
  for (auto& p : fcam_params()) out.push_back(p);
  return out;
}

nn::ParamList TgfrModel::fusion_params(FusionKind kind) const {
  nn::ParamList out;
  if (kind == FusionKind::kFcfm) {
    fcfm_.collect(out);
    out.push_back({"fcfm.identity_head", fused_head_});
  } else {
    flf_.collect(out);
    out.push_back({"flf.identity_head", flf_head_});
  }
  return out;
}

nn::ParamList TgfrModel::all_params() const {
  nn::ParamList out = stage1_params();
  for (auto& p : fusion_params(FusionKind::kFcfm)) out.push_back(p);
  for (auto& p : fusion_params(FusionKind::kFlf)) out.push_back(p);
  return out;
}

nn::BufferList TgfrModel::buffers() {
  nn::BufferList out;
  imim_.collect_buffers(out);
  return out;
}

void TgfrModel::save(Checkpoint& ckpt) {
  ckpt.config["model"] = config_;
  ckpt.store(all_params());
  ckpt.store(buffers());
}

TgfrModel TgfrModel::from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.config.contains("model")) fail(ErrorKind::kConfigMismatch, "checkpoint holds no model");
  ModelConfig config;
  try {
    config = ckpt.config.at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptFile, std::string("model config unreadable: ") + e.what());
  }
  TgfrModel model(config);
  ckpt.restore(model.all_params());
  ckpt.restore(model.buffers());
  return model;
}

}  // namespace xmal
