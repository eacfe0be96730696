#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xmal/encoders.hpp"
#include "xmal/image.hpp"
#include "xmal/rng.hpp"

namespace xmal {

enum class Split { kTrain, kGallery, kProbe };

const char* to_string(Split split);
Split parse_split(std::string_view text);

struct FaceCaptionRecord {
  std::string record_id;
  std::string subject_id;
  std::filesystem::path image_path;  // as written in the manifest, relative to its directory
  Split split = Split::kTrain;
  std::vector<std::string> captions;

  bool operator==(const FaceCaptionRecord&) const = default;
};

/// A loaded manifest: records sorted by id plus the directory image paths resolve against.
struct Dataset {
  std::filesystem::path root;
  std::vector<FaceCaptionRecord> records;

  std::filesystem::path image_file(const FaceCaptionRecord& r) const { return root / r.image_path; }
  const FaceCaptionRecord& find(const std::string& record_id) const;
  std::vector<const FaceCaptionRecord*> with_split(Split split) const;
  std::vector<std::string> all_captions() const;
};

/// One line per record:
/// record_id \t subject_id \t image_path \t split \t caption1 || caption2 ...
void write_manifest(const std::vector<FaceCaptionRecord>& records, const std::filesystem::path& path);

/// Validates every line and image reference; returns records sorted by id.
/// Errors: kMissingFile (manifest or image, naming the record), kMalformed
/// (with the line number), kDuplicate (repeated record id).
Dataset load_manifest(const std::filesystem::path& path);

class Vocabulary {
 public:
  static constexpr int kClsId = 0;
  static constexpr int kPadId = 1;
  static constexpr int kUnkId = 2;
  static constexpr int kReserved = 3;

  Vocabulary() = default;
  /// `words` are the non-reserved tokens in id order (first word gets id 3).
  explicit Vocabulary(std::vector<std::string> words);

  int size() const { return kReserved + static_cast<int>(words_.size()); }
  int id(std::string_view token) const;  // kUnkId when absent
  const std::string& token(int id) const;
  const std::vector<std::string>& words() const { return words_; }

  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Lowercases and splits on anything that is not a letter or digit.
std::vector<std::string> split_words(std::string_view caption);

/// Frequency-ordered ids (most frequent first), ties broken lexicographically.
Vocabulary build_vocab(const std::vector<std::string>& captions);

/// One token per line; line n (0-based) holds the token with id n + 3.
void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocab(const std::filesystem::path& path);

inline constexpr int kDefaultMaxTokens = 24;

/// [CLS, w1, w2, ...] truncated to `max_tokens` and padded with PAD to exactly
/// `max_tokens` entries. Unknown words map to the UNK id.
TokenSequence tokenize(std::string_view caption, const Vocabulary& vocab, int max_tokens = kDefaultMaxTokens);

/// The prefix before the first PAD; this is what the text encoder consumes.
TokenSequence trim_padding(const TokenSequence& tokens);

// ---- synthetic generator ----

struct AttributeVector {
  int hue = 0;               // 0..7
  int shape = 0;             // 0..3
  int marking_position = 0;  // 0..4, meaningful only when a marking is present
  int marking_present = 0;   // 0..1
  int background = 0;        // 0..2

  bool operator==(const AttributeVector&) const = default;
};

inline constexpr std::array<int, 5> kAttributeCardinalities = {8, 4, 5, 2, 3};
/// Distinct identities: hue x shape x background x (5 marked positions + unmarked).
inline constexpr int kIdentityCapacity = 8 * 4 * 3 * (5 + 1);

bool valid(const AttributeVector& a);
/// Position is forced to 0 when no marking is present, so equal identities compare equal.
AttributeVector canonical(AttributeVector a);

/// Procedural face render with per-image jitter drawn from `rng`.
ImageTensor render_face(const AttributeVector& attributes, int height, int width, Rng& rng);

/// A caption naming a random subset of at least two attributes, with synonym
/// and filler variation. Never contains digits.
std::string describe(const AttributeVector& attributes, Rng& rng);

/// Words a caption may use for the hue bucket `hue`.
const std::vector<std::string>& hue_words(int hue);

struct GeneratorConfig {
  int subjects = 50;
  int images_per_subject = 4;
  int captions_per_image = 2;
  std::uint64_t seed = 7;
  int height = 112;
  int width = 112;
};

struct GeneratedDataset {
  Dataset dataset;
  Vocabulary vocab;
  std::vector<AttributeVector> attributes;  // per subject, in subject order
};

/// Writes images/, manifest.tsv, vocab.txt, protocol.tsv and attributes.json
/// under `out_dir`. Per subject: image 0 is the gallery entry, the next
/// min(n - 1, max(1, n / 4)) images are probes, the rest train.
/// Errors: kExhausted when subjects exceed the identity capacity.
GeneratedDataset generate_synthetic(const GeneratorConfig& config, const std::filesystem::path& out_dir);

// ---- verification protocol ----

struct ProtocolPair {
  std::string probe_id;
  std::string reference_id;
  bool genuine = false;

  bool operator==(const ProtocolPair&) const = default;
};

using PairProtocol = std::vector<ProtocolPair>;

/// Every probe against every gallery record.
PairProtocol make_protocol(const Dataset& dataset);

/// `probe_id \t ref_id \t G|I` per line.
void write_protocol(const PairProtocol& protocol, const std::filesystem::path& path);
PairProtocol load_protocol(const std::filesystem::path& path);

/// Every id exists, flags agree with subject ids, no self-pairs.
void validate_protocol(const PairProtocol& protocol, const Dataset& dataset);

}  // namespace xmal
