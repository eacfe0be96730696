#include "xmal/fusion.hpp"

#include "xmal/error.hpp"

namespace xmal {

void to_json(nlohmann::json& j, const FusionConfig& c) {
  j = nlohmann::json{{"shared_dim", c.shared_dim},
                     {"fused_dim", c.fused_dim},
                     {"heads", c.heads},
                     {"match_with_global", c.match_with_global}};
}

void from_json(const nlohmann::json& j, FusionConfig& c) {
  FusionConfig d;
  c.shared_dim = j.value("shared_dim", d.shared_dim);
  c.fused_dim = j.value("fused_dim", d.fused_dim);
  c.heads = j.value("heads", d.heads);
  c.match_with_global = j.value("match_with_global", d.match_with_global);
}

namespace {

void check_config(const FusionConfig& c) {
  if (c.shared_dim < 1 || c.fused_dim < 1 || c.heads < 1) {
    fail(ErrorKind::kInvalidArgument, "fusion dims and head count must be positive");
  }
  if (c.shared_dim % c.heads != 0) fail(ErrorKind::kInvalidArgument, "shared_dim must be divisible by heads");
}

void check_column(const ad::Var& x, int dim, const char* what) {
  if (x.rows() != dim || x.cols() != 1) {
    fail(ErrorKind::kShape, std::string(what) + " must be a " + std::to_string(dim) + " x 1 column");
  }
}

}  // namespace

Fcfm::Fcfm(const FusionConfig& config, Rng& rng) : config_(config) {
  check_config(config);
  const int d = config.shared_dim;
  cross_ = nn::MultiHeadAttention(d, d, config.heads, rng);
  cross_norm_ = nn::LayerNorm(d);
  for (int i = 0; i < 2; ++i) refine_.push_back({nn::MultiHeadAttention(d, d, config.heads, rng), nn::LayerNorm(d)});
  fine_out_ = nn::Linear(d, d, rng);
  coarse_attention_ = nn::MultiHeadAttention(d, d, config.heads, rng);
  coarse_norm_ = nn::LayerNorm(d);
  output_ = nn::Linear(2 * d, config.fused_dim, rng);
}

ad::Var Fcfm::fine(const ad::Var& words, const ad::Var& regions) const {
  if (words.rows() != config_.shared_dim || regions.rows() != config_.shared_dim) {
    fail(ErrorKind::kShape, "fine branch inputs must live in the shared space");
  }
  if (words.cols() < 1 || regions.cols() < 1) fail(ErrorKind::kShape, "fine branch needs words and regions");
  ad::Var h = cross_norm_.forward(ad::add(words, cross_.forward(words, regions)));
  for (const auto& block : refine_) h = block.norm.forward(ad::add(h, block.attention.forward(h, h)));
  return fine_out_.forward(ad::max_cols(h));
}

ad::Var Fcfm::coarse(const ad::Var& global_image, const ad::Var& caption, ad::Var* standardized) const {
  check_column(global_image, config_.shared_dim, "global image embedding");
  check_column(caption, config_.shared_dim, "caption embedding");
  // With a single key the attention weight is 1, so the residual is what
  // keeps the caption in the output.
  return coarse_norm_.forward(ad::add(caption, coarse_attention_.forward(caption, global_image)), standardized);
}

ad::Var Fcfm::forward(const ad::Var& words, const ad::Var& regions, const ad::Var& global_image,
                      const ad::Var& caption) const {
  const ad::Var parts[] = {fine(words, regions), coarse(global_image, caption)};
  return output_.forward(ad::concat_rows(parts));
}

void Fcfm::collect(nn::ParamList& out, const std::string& prefix) const {
  cross_.collect(out, prefix + ".cross");
  cross_norm_.collect(out, prefix + ".cross_norm");
  for (std::size_t i = 0; i < refine_.size(); ++i) {
    const std::string p = prefix + ".refine" + std::to_string(i + 1);
    refine_[i].attention.collect(out, p + ".attention");
    refine_[i].norm.collect(out, p + ".norm");
  }
  fine_out_.collect(out, prefix + ".fine_out");
  coarse_attention_.collect(out, prefix + ".coarse");
  coarse_norm_.collect(out, prefix + ".coarse_norm");
  output_.collect(out, prefix + ".output");
}

Flf::Flf(const FusionConfig& config, Rng& rng) {
  check_config(config);
  linear_ = nn::Linear(2 * config.shared_dim, config.fused_dim, rng);
}

ad::Var Flf::forward(const ad::Var& global_image, const ad::Var& caption) const {
  if (global_image.rows() != caption.rows() || global_image.cols() != caption.cols()) {
    fail(ErrorKind::kShape, "FLF inputs must have equal shapes");
  }
  const ad::Var parts[] = {global_image, caption};
  return linear_.forward(ad::concat_rows(parts));
}

void Flf::collect(nn::ParamList& out, const std::string& prefix) const { linear_.collect(out, prefix + ".linear"); }

}  // namespace xmal
