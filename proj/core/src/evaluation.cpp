#include "xmal/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include "xmal/error.hpp"
#include "xmal/rng.hpp"

namespace xmal {

double cosine_similarity(const ad::Vector& a, const ad::Vector& b) {
  if (a.size() != b.size()) fail(ErrorKind::kShape, "cosine needs equal-length vectors");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

std::vector<double> score_pairs(const PairProtocol& protocol, const EmbeddingTable& embeddings) {
  auto lookup = [&](const std::string& id) -> const ad::Vector& {
    auto it = embeddings.find(id);
    if (it == embeddings.end()) fail(ErrorKind::kInvalidArgument, "no embedding for record '" + id + "'");
    return it->second;
  };
  std::vector<double> scores;
  scores.reserve(protocol.size());
  for (const auto& p : protocol) scores.push_back(cosine_similarity(lookup(p.probe_id), lookup(p.reference_id)));
  return scores;
}

void to_json(nlohmann::json& j, const VerificationReport& r) {
  nlohmann::json tar = nlohmann::json::object();
  for (const auto& [far, value] : r.tar_at_far) {
    char key[32];
    std::snprintf(key, sizeof key, "%g", far);
    tar[key] = value ? nlohmann::json(*value) : nlohmann::json("unsupported");
  }
  j = nlohmann::json{{"eer", r.eer}, {"tar_at_far", tar}, {"genuine", r.genuine}, {"impostor", r.impostor}};
  j["rank1"] = r.rank1 ? nlohmann::json(*r.rank1) : nlohmann::json(nullptr);
}

namespace {

// Accept counts for threshold t, from scores sorted ascending.
std::size_t count_at_least(const std::vector<double>& sorted, double t) {
  return static_cast<std::size_t>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), t));
}

}  // namespace

VerificationReport compute_roc(std::span<const double> scores, const std::vector<bool>& genuine,
                               const std::vector<double>& far_targets) {
  if (scores.size() != genuine.size()) fail(ErrorKind::kShape, "one genuine flag per score");
  std::vector<double> gen;
  std::vector<double> imp;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) fail(ErrorKind::kInvalidArgument, "scores must be finite");
    (genuine[i] ? gen : imp).push_back(scores[i]);
  }
  if (gen.empty() || imp.empty()) fail(ErrorKind::kInvalidArgument, "ROC needs genuine and impostor pairs");
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());
  const double ng = static_cast<double>(gen.size());
  const double ni = static_cast<double>(imp.size());

  // Candidate thresholds, descending: +inf (reject all) then every unique score.
  std::vector<double> thresholds(scores.begin(), scores.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.insert(thresholds.begin(), std::numeric_limits<double>::infinity());

  VerificationReport report;
  report.genuine = gen.size();
  report.impostor = imp.size();
  auto far_at = [&](double t) { return static_cast<double>(count_at_least(imp, t)) / ni; };
  auto tar_at = [&](double t) { return static_cast<double>(count_at_least(gen, t)) / ng; };
  for (double t : thresholds) report.roc.push_back({t, far_at(t), tar_at(t)});

  for (double target : far_targets) {
    if (!(target > 0.0 && target <= 1.0)) fail(ErrorKind::kInvalidArgument, "FAR targets must lie in (0, 1]");
    if (ni * target < 1.0 - 1e-9) {
      report.tar_at_far[target] = std::nullopt;
      continue;
    }
    double best = 0.0;
    for (const auto& p : report.roc) {
      if (p.far <= target) best = std::max(best, p.tar);
    }
    report.tar_at_far[target] = best;
  }

  // Walking the thresholds downwards FAR rises and FRR falls, so FAR >= FRR
  // holds on a suffix. Bisect for its first index; max(FAR, FRR) is
  // smallest either there or one step before.
  auto frr_at = [&](double t) { return 1.0 - tar_at(t); };
  std::size_t lo = 0;                      // +inf: FAR 0, FRR 1
  std::size_t hi = thresholds.size() - 1;  // lowest score: FAR 1, FRR 0
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (far_at(thresholds[mid]) < frr_at(thresholds[mid])) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  report.eer = std::min(std::max(far_at(thresholds[lo]), frr_at(thresholds[lo])),
                        std::max(far_at(thresholds[hi]), frr_at(thresholds[hi])));
  return report;
}

void write_roc_csv(const VerificationReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.precision(17);
  out << "threshold,far,tar\n";
  for (const auto& p : report.roc) out << p.threshold << ',' << p.far << ',' << p.tar << '\n';
}

double rank1_identify(std::span<const LabeledEmbedding> gallery, std::span<const LabeledEmbedding> probes) {
  if (gallery.empty()) fail(ErrorKind::kInvalidArgument, "gallery is empty");
  std::set<std::string> subjects;
  for (const auto& g : gallery) {
    if (!subjects.insert(g.subject).second) {
      fail(ErrorKind::kInvalidArgument, "gallery holds subject '" + g.subject + "' more than once");
    }
  }
  if (probes.empty()) return 0.0;
  std::vector<ad::Vector> unit;
  unit.reserve(gallery.size());
  for (const auto& g : gallery) {
    const double n = g.embedding.norm();
    unit.push_back(n > 0 ? ad::Vector(g.embedding / n) : g.embedding);
  }
  std::size_t hits = 0;
  for (const auto& p : probes) {
    const double n = p.embedding.norm();
    const ad::Vector q = n > 0 ? ad::Vector(p.embedding / n) : p.embedding;
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < unit.size(); ++k) {
      if (unit[k].size() != q.size()) fail(ErrorKind::kShape, "gallery and probe dims differ");
      const double s = unit[k].dot(q);
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    hits += gallery[best].subject == p.subject ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

QualityLevel quality_level(int score) {
  if (score < 1 || score > 4) fail(ErrorKind::kInvalidArgument, "quality level must be 1..4");
  return static_cast<QualityLevel>(score);
}

const char* label(QualityLevel level) {
  switch (level) {
    case QualityLevel::kVeryBad: return "very bad";
    case QualityLevel::kBad: return "bad";
    case QualityLevel::kPoor: return "poor";
    case QualityLevel::kNormal: return "normal";
  }
  return "normal";
}

DegradationRecipe degradation_recipe(QualityLevel level) {
  switch (level) {
    case QualityLevel::kPoor: return {2, 0.5, 0.02};
    case QualityLevel::kBad: return {4, 1.0, 0.05};
    case QualityLevel::kVeryBad: return {8, 2.0, 0.10};
    case QualityLevel::kNormal: break;
  }
  return {};
}

ImageTensor degrade(const ImageTensor& image, QualityLevel level, std::uint64_t seed) {
  if (level == QualityLevel::kNormal) return image;
  validate_image(image);
  const DegradationRecipe recipe = degradation_recipe(level);
  ImageTensor out =
      resize_bilinear(box_downsample(image, recipe.downsample), image.height, image.width);
  out = gaussian_blur(out, recipe.blur_sigma);
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, recipe.noise_sigma);
  for (double& v : out.pixels) v += noise(rng);
  return clamp01(std::move(out));
}

}  // namespace xmal
