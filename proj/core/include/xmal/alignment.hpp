#pragma once

// Face-caption alignment objectives: global caption-image contrast, word-region
// contrast, intra-modal contrast, the angular-margin identity loss and their
// weighted sum. Batches are column-stacked: a D x B matrix holds one sample per
// column.

#include <span>

#include <nlohmann/json.hpp>

#include "xmal/autograd.hpp"

namespace xmal::align {

struct Temperatures {
  ad::Var log_tau;               // learnable; tau = exp(log_tau) stays positive
  double word_attention = 0.25;  // tau1
  double word_match = 0.2;       // tau2
  double pair_posterior = 0.1;   // tau3

  static Temperatures defaults(double initial_tau = 0.07);
  ad::Var tau() const { return ad::exp(log_tau); }
  double tau_value() const;
  /// Keeps the learnable temperature within [lo, hi].
  void clamp(double lo, double hi);
};

struct LossWeights {
  double lambda1 = 100.0;  // identity
  double lambda2 = 2.0;    // caption-image
  double lambda3 = 1.0;    // intra-modal
  /// Weight on the word-region term; 1 reproduces the unweighted objective,
  /// 0 drops it for ablations.
  double wrcl = 1.0;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// A bidirectional contrastive term and its two directions.
struct ContrastiveTerms {
  ad::Var total;
  ad::Var forward;   // face->caption, or regions|words
  ad::Var backward;  // caption->face, or words|regions
};

/// Caption-image contrastive loss. `images` and `captions` are D x B; row i of
/// the cosine matrix holds image i against every caption. Each direction is
/// the batch mean of -log softmax at the matching pair; the result is their sum.
ContrastiveTerms cicl(const ad::Var& images, const ad::Var& captions, const ad::Var& tau);

/// S = W^T R, then a softmax over the word axis for every region:
/// (T-1) x 196 with columns summing to one.
ad::Var normalize_similarities(const ad::Var& words, const ad::Var& regions);

/// Per-word attention over regions, softmax(sbar[i, :] / tau1): (T-1) x 196.
ad::Var region_attention(const ad::Var& normalized_similarities, double tau1);

/// Attention-weighted region features, D x (T-1); column i = sum_j alpha_ij r_j.
ad::Var attend_regions(const ad::Var& normalized_similarities, const ad::Var& regions, double tau1);

/// Smooth maximum of per-word cosine matches:
/// tau2 * log sum_i exp(cos(attended_i, word_i) / tau2).
ad::Var matching_score(const ad::Var& attended, const ad::Var& words, double tau2);

/// Full image-caption matching score from raw word and region matrices.
ad::Var pair_matching_score(const ad::Var& words, const ad::Var& regions, double tau1, double tau2);

/// B x B matrix of matching scores; entry (i, k) pairs image i with caption k.
ad::Var matching_score_matrix(std::span<const ad::Var> words, std::span<const ad::Var> regions, double tau1,
                              double tau2);

/// Word-region contrastive loss over a batch of (words_k, regions_k) pairs.
/// forward = regions|words (softmax over captions for each image), backward =
/// words|regions (softmax over images for each caption); batch mean each.
ContrastiveTerms wrcl(std::span<const ad::Var> words, std::span<const ad::Var> regions, double tau1, double tau2,
                      double tau3);

/// One-directional InfoNCE: mean_i -log softmax_k(cos(query_i, key_k) / tau)[i].
ad::Var info_nce(const ad::Var& queries, const ad::Var& keys, const ad::Var& tau);

/// Intra-modal contrastive loss: half the sum of the visual and textual InfoNCE
/// terms between two views of each subject.
ad::Var imcl(const ad::Var& image_view1, const ad::Var& image_view2, const ad::Var& caption_view1,
             const ad::Var& caption_view2, const ad::Var& tau);

struct IdentityLossOptions {
  double scale = 30.0;
  double margin = 0.5;

  bool operator==(const IdentityLossOptions&) const = default;
};

void to_json(nlohmann::json& j, const IdentityLossOptions& o);
void from_json(const nlohmann::json& j, IdentityLossOptions& o);

/// Additive angular margin cross-entropy. `embeddings` is D x B, `class_weights`
/// D x K; both are L2-normalized internally. Labels must lie in [0, K).
ad::Var identity_loss(const ad::Var& embeddings, std::span<const int> labels, const ad::Var& class_weights,
                      const IdentityLossOptions& options);

/// Per-batch values of every term, in plain numbers for logging.
struct LossReport {
  double cicl = 0.0;
  double wrcl = 0.0;
  double imcl = 0.0;
  double idl = 0.0;
  double total = 0.0;
  double f2c = 0.0;
  double c2f = 0.0;
  double r_given_w = 0.0;
  double w_given_r = 0.0;
};

void to_json(nlohmann::json& j, const LossReport& r);

struct LossComponents {
  ContrastiveTerms cicl;
  ContrastiveTerms wrcl;
  ad::Var imcl;
  ad::Var idl;
};

/// total = wrcl_weight * WRCL + lambda1 * IDL + lambda2 * CICL + lambda3 * IMCL.
/// Fills `report` when given.
ad::Var total_fcam_loss(const LossComponents& components, const LossWeights& weights, LossReport* report = nullptr);

}  // namespace xmal::align
