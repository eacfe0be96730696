#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmal/alignment.hpp"
#include "xmal/checkpoint.hpp"
#include "xmal/data.hpp"
#include "xmal/encoders.hpp"
#include "xmal/model.hpp"

namespace xmal {

struct Stage1Config {
  int epochs = 20;
  int batch = 16;
  double text_lr = 5e-4;
  double text_weight_decay = 0.01;
  double projection_lr = 1e-3;
  double clip_norm = 5.0;
  double tau_min = 0.01;
  double tau_max = 1.0;
  double tau1 = 0.25;
  double tau2 = 0.2;
  double tau3 = 0.1;
  double token_dropout = 0.1;
  align::LossWeights weights;
  align::IdentityLossOptions identity;

  bool operator==(const Stage1Config&) const = default;
};

struct Stage2Config {
  int epochs = 36;
  int batch = 16;
  /// "sgd" (momentum SGD) or "adam". Small datasets give the default SGD
  /// schedule too few steps to converge; Adam at lr 1e-3 does.
  std::string optimizer = "sgd";
  double lr = 0.1;
  double momentum = 0.9;  // SGD only
  double weight_decay = 1e-4;
  std::vector<int> milestones = {6, 24};
  align::IdentityLossOptions identity;
  /// Train on copies of each training image at every quality level, so the
  /// fusion sees degraded faces next to informative captions.
  bool degrade_augment = true;

  bool operator==(const Stage2Config&) const = default;
};

struct TrainConfig {
  Stage1Config stage1;
  Stage2Config stage2;
  ImageEncoderConfig image;
  TextEncoderConfig text;  // vocab_size is filled from the vocabulary
  FusionConfig fusion;
  double initial_tau = 0.07;
  bool share_tau = true;
  int max_tokens = kDefaultMaxTokens;  // tokenization length
  std::uint64_t seed = 7;
  bool deterministic = true;
  int workers = 1;
  std::string device = "cpu";

  /// Throws kInvalidArgument on any out-of-range field.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Strict: unknown keys and wrong types raise kMalformed.
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Hash of everything that shapes the training trajectory (runtime-only
/// fields such as the worker count are excluded).
std::uint64_t config_hash(const TrainConfig& config);
std::string hex(std::uint64_t value);

/// Training records plus the subject -> class mapping.
struct TrainingSet {
  std::vector<const FaceCaptionRecord*> records;  // split == train, id order
  std::vector<std::string> subjects;              // class index -> subject id
  std::map<std::string, int> labels;              // subject id -> class index
  /// Per subject, its training record ids in id order.
  std::map<std::string, std::vector<std::string>> by_subject;
};

/// Throws kInvalidArgument when the dataset has no training records.
TrainingSet make_training_set(const Dataset& dataset);

// ---- views ----

/// Horizontal flip with probability 1/2, square crop covering 80-100% of the
/// area resized back, additive brightness shift in [-0.2, 0.2].
ImageTensor augment_image(const ImageTensor& image, std::uint64_t seed);

/// Drops each word token with probability p (the class token stays, at least
/// one word survives) and re-pads to the original length.
TokenSequence token_dropout(const TokenSequence& tokens, double p, std::uint64_t seed);

/// How the two views of a record are formed, before any pixels are touched.
struct ViewPlan {
  std::string image_record[2];   // records supplying the two image views
  bool augmented = false;        // both image views are augmentations of the record's image
  std::uint64_t augment_seed[2] = {0, 0};
  std::size_t caption[2] = {0, 0};  // indices into record.captions
  bool dropout = false;             // caption view 2 is token dropout of view 1
  std::uint64_t dropout_seed = 0;
};

/// `subject_records` are the training records of the record's subject
/// (including the record itself).
ViewPlan plan_views(const FaceCaptionRecord& record, std::span<const std::string> subject_records, Rng& rng);

struct Views {
  ImageTensor image[2];
  TokenSequence caption[2];
  std::string caption_text[2];
};

using ImageLoader = std::function<ImageTensor(const std::string& record_id)>;

Views make_views(const FaceCaptionRecord& record, std::span<const std::string> subject_records,
                 const ImageLoader& load, const Vocabulary& vocab, int max_tokens, double dropout_p, Rng& rng);

// ---- frozen features ----

using FeatureTable = std::map<std::string, EncodedImage>;

/// Deterministic per-record seed for degradation, independent of record order.
std::uint64_t record_seed(std::uint64_t root, std::uint64_t tag, const std::string& record_id);

/// Encodes every record's image (degraded to `level` when below normal) on up
/// to `workers` threads. The result does not depend on the worker count.
FeatureTable encode_records(const ImageEncoder& encoder, const Dataset& dataset,
                            std::span<const FaceCaptionRecord* const> records, int level, std::uint64_t seed,
                            int workers);

// ---- training ----

struct TrainOptions {
  std::filesystem::path out_dir;
  /// Continue from this checkpoint (written by the same stage and config).
  std::optional<std::filesystem::path> resume;
  /// Stop once this many epochs are complete (0 runs the configured count).
  int stop_after_epoch = 0;
  /// Extra sink for the JSON-lines log.
  std::ostream* log = nullptr;
};

struct EpochSummary {
  int epoch = 0;
  align::LossReport mean;  // stage 2 fills idl and total only
  double lr = 0.0;
};

struct TrainResult {
  TgfrModel model;
  ImageEncoder image_encoder;
  Checkpoint bundle;
  std::filesystem::path checkpoint_path;
  std::vector<EpochSummary> epochs;  // epochs run by this call
};

/// Stage 1: text encoder, projections, IMIM, temperatures and identity heads
/// under the weighted alignment objective; the image encoder stays frozen.
/// Writes <out_dir>/stage1.xmal after every epoch and appends to
/// <out_dir>/stage1_log.jsonl.
TrainResult train_stage1(const TrainConfig& config, const Dataset& dataset, const Vocabulary& vocab,
                         const ImageEncoder& encoder, const TrainOptions& options);

/// Stage 2: only the chosen fusion network and its identity head train.
/// Writes <out_dir>/stage2_<fusion>.xmal and <out_dir>/stage2_<fusion>_log.jsonl.
/// Throws kFrozenViolation if any other parameter changed.
TrainResult train_stage2(const TrainConfig& config, const Dataset& dataset, const Checkpoint& stage1,
                         FusionKind fusion, const TrainOptions& options);

/// Everything needed to use a trained bundle.
struct LoadedBundle {
  TgfrModel model;
  ImageEncoder image_encoder;
  Vocabulary vocab;
  TrainConfig config;
  int stage = 0;
  int epoch = 0;
  std::optional<FusionKind> fusion;  // set for stage-2 bundles
};

LoadedBundle load_bundle(const Checkpoint& ckpt);

/// Checksums of named parameter groups stored in a bundle.
std::map<std::string, std::uint64_t> group_checksums(TgfrModel& model, const ImageEncoder& encoder);

}  // namespace xmal
