#pragma once

// End-to-end use of trained artifacts: embedding extraction for each
// matching method, verification / identification runs and the quality study.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmal/data.hpp"
#include "xmal/evaluation.hpp"
#include "xmal/training.hpp"

namespace xmal {

enum class Method { kImageOnly, kFlf, kTgfr };

const char* to_string(Method method);
Method parse_method(const std::string& text);

/// Which sides of a pair carry a caption. With kProbeOnly the probe's caption
/// is fused with both images, so the reference embedding depends on the pair.
enum class CaptionMode { kBoth, kProbeOnly };

const char* to_string(CaptionMode mode);
CaptionMode parse_caption_mode(const std::string& text);

/// A loaded checkpoint: either a training bundle or a bare image encoder.
struct ModelSource {
  ImageEncoder encoder;
  std::optional<TgfrModel> model;
  Vocabulary vocab;
  int max_tokens = kDefaultMaxTokens;
  std::vector<std::string> fusions_trained;

  bool has_fusion(FusionKind kind) const;
};

ModelSource load_model_source(const std::filesystem::path& path);
ModelSource model_source(const LoadedBundle& bundle, std::vector<std::string> fusions_trained);

struct EvalOptions {
  CaptionMode captions = CaptionMode::kBoth;
  int probe_level = 4;  // quality level applied to probe images; references stay normal
  std::vector<double> far_targets = kDefaultFarTargets;
  std::size_t caption_index = 0;  // which caption of a record is used (clamped to the last)
  std::uint64_t seed = 7;
  int workers = 1;
};

/// Caches frozen features per (record, level) so repeated methods and pairs
/// share the expensive encoder passes.
class Embedder {
 public:
  Embedder(ModelSource& source, const Dataset& dataset, std::uint64_t seed, int workers);

  /// Batch-encodes records on the worker pool ahead of use.
  void prepare(const std::vector<const FaceCaptionRecord*>& records, int level);

  /// Raw global feature from the frozen encoder.
  ad::Vector global(const FaceCaptionRecord& record, int level);
  /// Projected caption embedding: the max-pool of the unit word embeddings, not renormalized.
  ad::Vector caption(const FaceCaptionRecord& record, std::size_t index);
  /// Matching embedding of `image_record`'s image fused with a caption of `caption_record`.
  ad::Vector fused(const FaceCaptionRecord& image_record, int level, const FaceCaptionRecord& caption_record,
                   std::size_t index, FusionKind kind);

  ad::Vector embed(Method method, const FaceCaptionRecord& image_record, int level,
                   const FaceCaptionRecord& caption_record, std::size_t index);

 private:
  const EncodedImage& encoded(const FaceCaptionRecord& record, int level);
  const SharedImage& shared(const FaceCaptionRecord& record, int level);
  const ProjectedCaption& projected(const FaceCaptionRecord& record, std::size_t index);
  TgfrModel& model();

  ModelSource& source_;
  const Dataset& dataset_;
  std::uint64_t seed_;
  int workers_;
  std::map<std::pair<std::string, int>, EncodedImage> encoded_;
  std::map<std::pair<std::string, int>, SharedImage> shared_;
  std::map<std::pair<std::string, std::size_t>, ProjectedCaption> captions_;
};

/// Throws kConfigMismatch when `source` cannot produce embeddings for `method`.
void require_method(const ModelSource& source, Method method);

/// Scores every protocol pair; rank1 is filled when the dataset has gallery and probe splits.
VerificationReport verify(ModelSource& source, const Dataset& dataset, const PairProtocol& protocol, Method method,
                          const EvalOptions& options);

/// Rank-1 over the gallery split (one record per subject) with probe-split queries.
double identify(ModelSource& source, const Dataset& dataset, Method method, const EvalOptions& options);

struct QualityCell {
  int level = 4;
  Method method = Method::kImageOnly;
  VerificationReport report;
  double rank1 = 0.0;
};

struct QualityStudy {
  std::vector<QualityCell> cells;  // level-major, levels 4..1

  const QualityCell& at(int level, Method method) const;
};

void to_json(nlohmann::json& j, const QualityStudy& study);

/// Runs every (level, method) pair; each method needs a source able to serve it.
QualityStudy quality_study(const std::map<Method, ModelSource*>& sources, const Dataset& dataset,
                           const PairProtocol& protocol, const EvalOptions& options);

// ---- extraction ----

enum class ExtractWhat { kGlobal, kCaption, kFused };

ExtractWhat parse_extract(const std::string& text);

struct EmbeddingMatrix {
  std::vector<std::string> ids;
  ad::Matrix values;  // one row per id
};

EmbeddingMatrix extract(ModelSource& source, const Dataset& dataset, ExtractWhat what, FusionKind fusion,
                        const EvalOptions& options);

/// Binary layout: u64 count, u64 dim, then count*dim little-endian f64 row-major.
/// Ids go one per line to `ids_path`.
void write_matrix(const EmbeddingMatrix& m, const std::filesystem::path& path, const std::filesystem::path& ids_path);
EmbeddingMatrix read_matrix(const std::filesystem::path& path, const std::filesystem::path& ids_path);

// ---- image encoder cache ----

/// $XMAL_CACHE_DIR, or ~/.cache/xmal when unset.
std::filesystem::path cache_dir();

/// Loads the encoder for `config` from the cache, initializing and storing it on a miss.
ImageEncoder cached_image_encoder(const ImageEncoderConfig& config);

}  // namespace xmal
