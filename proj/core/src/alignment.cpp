#include "xmal/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "xmal/error.hpp"

namespace xmal::align {

namespace {

void require_positive(double v, const char* what) {
  if (!(v > 0.0)) fail(ErrorKind::kInvalidArgument, std::string(what) + " must be positive");
}

std::vector<int> iota_labels(ad::Index n) {
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::iota(labels.begin(), labels.end(), 0);
  return labels;
}

// Cosine matrix between the columns of a (rows) and b (cols).
ad::Var cosine_matrix(const ad::Var& a, const ad::Var& b) {
  return ad::matmul(ad::transpose(ad::l2_normalize_cols(a)), ad::l2_normalize_cols(b));
}

}  // namespace

Temperatures Temperatures::defaults(double initial_tau) {
  require_positive(initial_tau, "initial temperature");
  Temperatures t;
  t.log_tau = ad::Var::scalar(std::log(initial_tau), true);
  return t;
}

double Temperatures::tau_value() const { return std::exp(log_tau.item()); }

void Temperatures::clamp(double lo, double hi) {
  auto& v = log_tau.mutable_value()(0, 0);
  v = std::clamp(v, std::log(lo), std::log(hi));
}

void LossWeights::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || wrcl < 0) {
    fail(ErrorKind::kInvalidArgument, "loss weights must be non-negative");
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3}, {"wrcl", w.wrcl}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights d;
  w.lambda1 = j.value("lambda1", d.lambda1);
  w.lambda2 = j.value("lambda2", d.lambda2);
  w.lambda3 = j.value("lambda3", d.lambda3);
  w.wrcl = j.value("wrcl", d.wrcl);
}

void to_json(nlohmann::json& j, const IdentityLossOptions& o) {
  j = nlohmann::json{{"scale", o.scale}, {"margin", o.margin}};
}

void from_json(const nlohmann::json& j, IdentityLossOptions& o) {
  IdentityLossOptions d;
  o.scale = j.value("scale", d.scale);
  o.margin = j.value("margin", d.margin);
}

ContrastiveTerms cicl(const ad::Var& images, const ad::Var& captions, const ad::Var& tau) {
  require_positive(tau.item(), "CICL temperature");
  if (images.cols() != captions.cols() || images.cols() < 1) {
    fail(ErrorKind::kShape, "CICL needs equally sized, non-empty image and caption batches");
  }
  const ad::Var logits = ad::divide_by(cosine_matrix(images, captions), tau);
  const auto labels = iota_labels(images.cols());
  ContrastiveTerms out;
  // Column i of logits^T is image i against all captions.
  out.forward = ad::cross_entropy_cols(ad::transpose(logits), labels);
  out.backward = ad::cross_entropy_cols(logits, labels);
  out.total = ad::add(out.forward, out.backward);
  return out;
}

ad::Var normalize_similarities(const ad::Var& words, const ad::Var& regions) {
  if (words.rows() != regions.rows()) fail(ErrorKind::kShape, "words and regions must share the embedding dimension");
  return ad::softmax_cols(ad::matmul(ad::transpose(words), regions));
}

ad::Var region_attention(const ad::Var& normalized_similarities, double tau1) {
  require_positive(tau1, "tau1");
  return ad::softmax_rows(ad::scale(normalized_similarities, 1.0 / tau1));
}

ad::Var attend_regions(const ad::Var& normalized_similarities, const ad::Var& regions, double tau1) {
  if (normalized_similarities.cols() != regions.cols()) fail(ErrorKind::kShape, "attention and region counts differ");
  return ad::matmul(regions, ad::transpose(region_attention(normalized_similarities, tau1)));
}

ad::Var matching_score(const ad::Var& attended, const ad::Var& words, double tau2) {
  require_positive(tau2, "tau2");
  if (attended.rows() != words.rows() || attended.cols() != words.cols()) {
    fail(ErrorKind::kShape, "attended regions and words must have equal shapes");
  }
  const ad::Var cosines = ad::sum_rows(ad::mul(ad::l2_normalize_cols(attended), ad::l2_normalize_cols(words)));
  return ad::scale(ad::logsumexp(ad::scale(cosines, 1.0 / tau2)), tau2);
}

ad::Var pair_matching_score(const ad::Var& words, const ad::Var& regions, double tau1, double tau2) {
  return matching_score(attend_regions(normalize_similarities(words, regions), regions, tau1), words, tau2);
}

ad::Var matching_score_matrix(std::span<const ad::Var> words, std::span<const ad::Var> regions, double tau1,
                              double tau2) {
  if (words.size() != regions.size() || words.empty()) {
    fail(ErrorKind::kShape, "WRCL needs equally sized, non-empty word and region batches");
  }
  const auto n = static_cast<ad::Index>(words.size());
  std::vector<ad::Var> scores;
  scores.reserve(words.size() * words.size());
  for (std::size_t i = 0; i < regions.size(); ++i) {
    for (std::size_t k = 0; k < words.size(); ++k) {
      scores.push_back(pair_matching_score(words[k], regions[i], tau1, tau2));
    }
  }
  return ad::stack_scalars(scores, n, n);
}

ContrastiveTerms wrcl(std::span<const ad::Var> words, std::span<const ad::Var> regions, double tau1, double tau2,
                      double tau3) {
  require_positive(tau1, "tau1");
  require_positive(tau2, "tau2");
  require_positive(tau3, "tau3");
  const ad::Var logits = ad::scale(matching_score_matrix(words, regions, tau1, tau2), 1.0 / tau3);
  const auto labels = iota_labels(logits.rows());
  ContrastiveTerms out;
  out.forward = ad::cross_entropy_cols(ad::transpose(logits), labels);
  out.backward = ad::cross_entropy_cols(logits, labels);
  out.total = ad::add(out.forward, out.backward);
  return out;
}

ad::Var info_nce(const ad::Var& queries, const ad::Var& keys, const ad::Var& tau) {
  require_positive(tau.item(), "InfoNCE temperature");
  if (queries.cols() != keys.cols() || queries.cols() < 1) fail(ErrorKind::kShape, "InfoNCE needs paired views");
  const ad::Var logits = ad::divide_by(cosine_matrix(queries, keys), tau);
  return ad::cross_entropy_cols(ad::transpose(logits), iota_labels(queries.cols()));
}

ad::Var imcl(const ad::Var& image_view1, const ad::Var& image_view2, const ad::Var& caption_view1,
             const ad::Var& caption_view2, const ad::Var& tau) {
  const ad::Var visual = info_nce(image_view1, image_view2, tau);
  const ad::Var textual = info_nce(caption_view1, caption_view2, tau);
  return ad::scale(ad::add(visual, textual), 0.5);
}

ad::Var identity_loss(const ad::Var& embeddings, std::span<const int> labels, const ad::Var& class_weights,
                      const IdentityLossOptions& options) {
  if (embeddings.rows() != class_weights.rows()) fail(ErrorKind::kShape, "embedding and class-weight dims differ");
  if (static_cast<ad::Index>(labels.size()) != embeddings.cols()) fail(ErrorKind::kShape, "one label per embedding");
  for (int y : labels) {
    if (y < 0 || y >= class_weights.cols()) {
      fail(ErrorKind::kInvalidArgument, "label " + std::to_string(y) + " outside [0, " +
                                            std::to_string(class_weights.cols()) + ")");
    }
  }
  const ad::Var cosines = cosine_matrix(class_weights, embeddings);  // K x B
  return ad::cross_entropy_cols(ad::arc_margin_logits(cosines, labels, options.margin, options.scale), labels);
}

void to_json(nlohmann::json& j, const LossReport& r) {
  j = nlohmann::json{{"cicl", r.cicl}, {"wrcl", r.wrcl},   {"imcl", r.imcl}, {"idl", r.idl},
                     {"total", r.total}, {"f2c", r.f2c},   {"c2f", r.c2f},   {"r_given_w", r.r_given_w},
                     {"w_given_r", r.w_given_r}};
}

ad::Var total_fcam_loss(const LossComponents& c, const LossWeights& weights, LossReport* report) {
  weights.validate();
  const ad::Var terms[] = {ad::scale(c.wrcl.total, weights.wrcl), ad::scale(c.idl, weights.lambda1),
                           ad::scale(c.cicl.total, weights.lambda2), ad::scale(c.imcl, weights.lambda3)};
  ad::Var total = ad::add(ad::add(terms[0], terms[1]), ad::add(terms[2], terms[3]));
  if (report != nullptr) {
    report->cicl = c.cicl.total.item();
    report->wrcl = c.wrcl.total.item();
    report->imcl = c.imcl.item();
    report->idl = c.idl.item();
    report->total = total.item();
    report->f2c = c.cicl.forward.item();
    report->c2f = c.cicl.backward.item();
    report->r_given_w = c.wrcl.forward.item();
    report->w_given_r = c.wrcl.backward.item();
  }
  return total;
}

}  // namespace xmal::align
