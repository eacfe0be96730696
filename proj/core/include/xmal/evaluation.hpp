#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmal/autograd.hpp"
#include "xmal/data.hpp"
#include "xmal/image.hpp"

namespace xmal {

using EmbeddingTable = std::map<std::string, ad::Vector>;

double cosine_similarity(const ad::Vector& a, const ad::Vector& b);

/// Cosine score per pair, in protocol order. Throws kInvalidArgument when an
/// id has no embedding.
std::vector<double> score_pairs(const PairProtocol& protocol, const EmbeddingTable& embeddings);

struct RocPoint {
  double threshold = 0.0;  // accept when score >= threshold
  double far = 0.0;
  double tar = 0.0;
};

inline const std::vector<double> kDefaultFarTargets = {1e-3, 1e-4, 1e-5};

struct VerificationReport {
  std::vector<RocPoint> roc;  // ordered by increasing FAR
  /// Keyed by FAR target; nullopt when there are too few impostor pairs to
  /// measure that FAR (fewer than 1 / target).
  std::map<double, std::optional<double>> tar_at_far;
  double eer = 0.0;
  std::optional<double> rank1;
  std::size_t genuine = 0;
  std::size_t impostor = 0;
};

void to_json(nlohmann::json& j, const VerificationReport& r);

/// Threshold sweep over the unique scores. TAR at a FAR target is the largest
/// TAR among thresholds whose FAR does not exceed the target (step-function
/// ROC, never interpolated upward). EER is min over thresholds of
/// max(FAR, FRR), located by bisection on FAR - FRR.
/// Throws kInvalidArgument unless both classes are present.
VerificationReport compute_roc(std::span<const double> scores, const std::vector<bool>& genuine,
                               const std::vector<double>& far_targets = kDefaultFarTargets);

/// ROC as "threshold,far,tar" rows with a header line.
void write_roc_csv(const VerificationReport& report, const std::filesystem::path& path);

struct LabeledEmbedding {
  std::string subject;
  ad::Vector embedding;
};

/// Fraction of probes whose most similar gallery entry (cosine; ties go to the
/// earlier entry) has the probe's subject. The gallery must hold exactly one
/// entry per subject and be non-empty.
double rank1_identify(std::span<const LabeledEmbedding> gallery, std::span<const LabeledEmbedding> probes);

/// 1 very bad, 2 bad, 3 poor, 4 normal.
enum class QualityLevel { kVeryBad = 1, kBad = 2, kPoor = 3, kNormal = 4 };

QualityLevel quality_level(int score);
const char* label(QualityLevel level);

struct DegradationRecipe {
  int downsample = 1;
  double blur_sigma = 0.0;
  double noise_sigma = 0.0;
};

DegradationRecipe degradation_recipe(QualityLevel level);

/// Downsample by the recipe factor and resize back, blur, add Gaussian noise,
/// clamp to [0, 1]. Level 4 returns the input unchanged.
ImageTensor degrade(const ImageTensor& image, QualityLevel level, std::uint64_t seed);

}  // namespace xmal
