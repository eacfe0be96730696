#include "xmal/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <set>
#include <tuple>

#include "xmal/error.hpp"

namespace xmal {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Method method) {
  switch (method) {
    case Method::kImageOnly: return "image-only";
    case Method::kFlf: return "flf";
    case Method::kTgfr: return "tgfr";
  }
  return "tgfr";
}

Method parse_method(const std::string& text) {
  if (text == "image-only") return Method::kImageOnly;
  if (text == "flf") return Method::kFlf;
  if (text == "tgfr") return Method::kTgfr;
  fail(ErrorKind::kInvalidArgument, "unknown method '" + text + "' (expected image-only, flf or tgfr)");
}

const char* to_string(CaptionMode mode) { return mode == CaptionMode::kBoth ? "both" : "probe-only"; }

CaptionMode parse_caption_mode(const std::string& text) {
  if (text == "both") return CaptionMode::kBoth;
  if (text == "probe-only") return CaptionMode::kProbeOnly;
  fail(ErrorKind::kInvalidArgument, "unknown caption mode '" + text + "' (expected both or probe-only)");
}

bool ModelSource::has_fusion(FusionKind kind) const {
  return model.has_value() &&
         std::find(fusions_trained.begin(), fusions_trained.end(), to_string(kind)) != fusions_trained.end();
}

ModelSource model_source(const LoadedBundle& bundle, std::vector<std::string> fusions_trained) {
  ModelSource s;
  s.encoder = bundle.image_encoder;
  s.model = bundle.model;
  s.vocab = bundle.vocab;
  s.max_tokens = bundle.config.max_tokens;
  s.fusions_trained = std::move(fusions_trained);
  return s;
}

ModelSource load_model_source(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.config.contains("format")) {
    return model_source(load_bundle(ck), ck.config.value("fusions_trained", std::vector<std::string>{}));
  }
  ModelSource s;
  s.encoder = ImageEncoder::from_checkpoint(ck);
  return s;
}

// ---- embedder ----

Embedder::Embedder(ModelSource& source, const Dataset& dataset, std::uint64_t seed, int workers)
    : source_(source), dataset_(dataset), seed_(derive_seed(seed, {stream::kDegrade})), workers_(workers) {}

void Embedder::prepare(const std::vector<const FaceCaptionRecord*>& records, int level) {
  std::vector<const FaceCaptionRecord*> missing;
  std::set<std::string> seen;
  for (const auto* r : records) {
    if (!encoded_.count({r->record_id, level}) && seen.insert(r->record_id).second) missing.push_back(r);
  }
  if (missing.empty()) return;
  FeatureTable table = encode_records(source_.encoder, dataset_, missing, level, seed_, workers_);
  for (auto& [id, e] : table) encoded_.emplace(std::make_pair(id, level), std::move(e));
}

const EncodedImage& Embedder::encoded(const FaceCaptionRecord& record, int level) {
  auto key = std::make_pair(record.record_id, level);
  auto it = encoded_.find(key);
  if (it == encoded_.end()) {
    prepare({&record}, level);
    it = encoded_.find(key);
  }
  return it->second;
}

TgfrModel& Embedder::model() {
  if (!source_.model) {
    fail(ErrorKind::kConfigMismatch, "checkpoint holds only an image encoder; captions and fusion need a trained bundle");
  }
  return *source_.model;
}

const SharedImage& Embedder::shared(const FaceCaptionRecord& record, int level) {
  auto key = std::make_pair(record.record_id, level);
  auto it = shared_.find(key);
  if (it == shared_.end()) {
    ad::NoGradGuard guard;
    it = shared_.emplace(key, model().project_image(encoded(record, level))).first;
  }
  return it->second;
}

const ProjectedCaption& Embedder::projected(const FaceCaptionRecord& record, std::size_t index) {
  if (record.captions.empty()) fail(ErrorKind::kInvalidArgument, "record " + record.record_id + " has no captions");
  index = std::min(index, record.captions.size() - 1);
  auto key = std::make_pair(record.record_id, index);
  auto it = captions_.find(key);
  if (it == captions_.end()) {
    ad::NoGradGuard guard;
    TgfrModel& m = model();
    it = captions_.emplace(key, m.encode_caption(tokenize(record.captions[index], source_.vocab, source_.max_tokens)))
             .first;
  }
  return it->second;
}

ad::Vector Embedder::global(const FaceCaptionRecord& record, int level) { return encoded(record, level).global.values; }

ad::Vector Embedder::caption(const FaceCaptionRecord& record, std::size_t index) {
  return projected(record, index).caption.value().col(0);
}

ad::Vector Embedder::fused(const FaceCaptionRecord& image_record, int level, const FaceCaptionRecord& caption_record,
                           std::size_t index, FusionKind kind) {
  if (!source_.has_fusion(kind)) {
    fail(ErrorKind::kConfigMismatch, std::string("checkpoint has no trained ") + to_string(kind) + " fusion");
  }
  const SharedImage& img = shared(image_record, level);
  const ProjectedCaption& cap = projected(caption_record, index);
  ad::NoGradGuard guard;
  return model().match_embedding(img, cap, kind);
}

ad::Vector Embedder::embed(Method method, const FaceCaptionRecord& image_record, int level,
                           const FaceCaptionRecord& caption_record, std::size_t index) {
  switch (method) {
    case Method::kImageOnly: return global(image_record, level);
    case Method::kFlf: return fused(image_record, level, caption_record, index, FusionKind::kFlf);
    case Method::kTgfr: return fused(image_record, level, caption_record, index, FusionKind::kFcfm);
  }
  return global(image_record, level);
}

void require_method(const ModelSource& source, Method method) {
  if (method == Method::kImageOnly) return;
  const FusionKind kind = method == Method::kFlf ? FusionKind::kFlf : FusionKind::kFcfm;
  if (!source.has_fusion(kind)) {
    fail(ErrorKind::kConfigMismatch,
         std::string("method ") + to_string(method) + " needs a checkpoint with a trained " + to_string(kind) +
             " fusion");
  }
}

// ---- evaluation runs ----

namespace {

struct PairRunner {
  Embedder& embedder;
  const Dataset& dataset;
  Method method;
  const EvalOptions& options;
  std::map<std::tuple<std::string, int, std::string>, ad::Vector> cache;

  const ad::Vector& get(const FaceCaptionRecord& image, int level, const FaceCaptionRecord& caption) {
    const auto key = std::make_tuple(image.record_id, level, method == Method::kImageOnly ? "" : caption.record_id);
    auto it = cache.find(key);
    if (it == cache.end()) {
      it = cache.emplace(key, embedder.embed(method, image, level, caption, options.caption_index)).first;
    }
    return it->second;
  }

  const ad::Vector& probe(const FaceCaptionRecord& p) { return get(p, options.probe_level, p); }

  const ad::Vector& reference(const FaceCaptionRecord& r, const FaceCaptionRecord& p) {
    return get(r, 4, options.captions == CaptionMode::kBoth ? r : p);
  }
};

double run_identify(PairRunner& run, const Dataset& dataset) {
  const auto gallery = dataset.with_split(Split::kGallery);
  const auto probes = dataset.with_split(Split::kProbe);
  if (gallery.empty()) fail(ErrorKind::kInvalidArgument, "gallery is empty");
  run.embedder.prepare(gallery, 4);
  run.embedder.prepare(probes, run.options.probe_level);
  if (run.options.captions == CaptionMode::kBoth || run.method == Method::kImageOnly) {
    std::vector<LabeledEmbedding> g, p;
    for (const auto* r : gallery) g.push_back({r->subject_id, run.reference(*r, *r)});
    for (const auto* r : probes) p.push_back({r->subject_id, run.probe(*r)});
    return rank1_identify(g, p);
  }
  if (probes.empty()) return 0.0;
  double hits = 0.0;
  for (const auto* q : probes) {
    std::vector<LabeledEmbedding> g;
    for (const auto* r : gallery) g.push_back({r->subject_id, run.reference(*r, *q)});
    const std::vector<LabeledEmbedding> one{{q->subject_id, run.probe(*q)}};
    hits += rank1_identify(g, one);
  }
  return hits / static_cast<double>(probes.size());
}

VerificationReport run_verify(PairRunner& run, const Dataset& dataset, const PairProtocol& protocol) {
  validate_protocol(protocol, dataset);
  std::vector<const FaceCaptionRecord*> probes, refs;
  for (const auto& pair : protocol) {
    probes.push_back(&dataset.find(pair.probe_id));
    refs.push_back(&dataset.find(pair.reference_id));
  }
  run.embedder.prepare(probes, run.options.probe_level);
  run.embedder.prepare(refs, 4);
  std::vector<double> scores;
  std::vector<bool> genuine;
  for (std::size_t i = 0; i < protocol.size(); ++i) {
    scores.push_back(cosine_similarity(run.probe(*probes[i]), run.reference(*refs[i], *probes[i])));
    genuine.push_back(protocol[i].genuine);
  }
  VerificationReport report = compute_roc(scores, genuine, run.options.far_targets);
  if (!dataset.with_split(Split::kGallery).empty() && !dataset.with_split(Split::kProbe).empty()) {
    report.rank1 = run_identify(run, dataset);
  }
  return report;
}

}  // namespace

VerificationReport verify(ModelSource& source, const Dataset& dataset, const PairProtocol& protocol, Method method,
                          const EvalOptions& options) {
  require_method(source, method);
  Embedder embedder(source, dataset, options.seed, options.workers);
  PairRunner run{embedder, dataset, method, options, {}};
  return run_verify(run, dataset, protocol);
}

double identify(ModelSource& source, const Dataset& dataset, Method method, const EvalOptions& options) {
  require_method(source, method);
  Embedder embedder(source, dataset, options.seed, options.workers);
  PairRunner run{embedder, dataset, method, options, {}};
  return run_identify(run, dataset);
}

const QualityCell& QualityStudy::at(int level, Method method) const {
  for (const auto& c : cells) {
    if (c.level == level && c.method == method) return c;
  }
  fail(ErrorKind::kInvalidArgument, std::string("quality study has no cell for level ") + std::to_string(level) +
                                        " and method " + to_string(method));
}

void to_json(json& j, const QualityStudy& study) {
  j = json::array();
  for (const auto& c : study.cells) {
    json cell = c.report;
    cell["level"] = c.level;
    cell["quality"] = label(quality_level(c.level));
    cell["method"] = to_string(c.method);
    cell["rank1"] = c.rank1;
    j.push_back(std::move(cell));
  }
}

QualityStudy quality_study(const std::map<Method, ModelSource*>& sources, const Dataset& dataset,
                           const PairProtocol& protocol, const EvalOptions& options) {
  if (sources.empty()) fail(ErrorKind::kInvalidArgument, "quality study needs at least one method");
  std::map<ModelSource*, std::unique_ptr<Embedder>> embedders;
  for (const auto& [method, source] : sources) {
    if (source == nullptr) fail(ErrorKind::kMissingFile, std::string("no checkpoint for method ") + to_string(method));
    require_method(*source, method);
    if (!embedders.count(source)) {
      embedders.emplace(source, std::make_unique<Embedder>(*source, dataset, options.seed, options.workers));
    }
  }
  QualityStudy study;
  for (int level = 4; level >= 1; --level) {
    EvalOptions o = options;
    o.probe_level = level;
    for (const auto& [method, source] : sources) {
      PairRunner run{*embedders.at(source), dataset, method, o, {}};
      QualityCell cell;
      cell.level = level;
      cell.method = method;
      cell.report = run_verify(run, dataset, protocol);
      cell.rank1 = cell.report.rank1.value_or(0.0);
      study.cells.push_back(std::move(cell));
    }
  }
  return study;
}

// ---- extraction ----

ExtractWhat parse_extract(const std::string& text) {
  if (text == "global") return ExtractWhat::kGlobal;
  if (text == "caption") return ExtractWhat::kCaption;
  if (text == "fused") return ExtractWhat::kFused;
  fail(ErrorKind::kInvalidArgument, "unknown extraction '" + text + "' (expected global, caption or fused)");
}

EmbeddingMatrix extract(ModelSource& source, const Dataset& dataset, ExtractWhat what, FusionKind fusion,
                        const EvalOptions& options) {
  if (what != ExtractWhat::kGlobal && !source.model) {
    fail(ErrorKind::kConfigMismatch, "checkpoint holds only an image encoder; it cannot embed captions");
  }
  if (what == ExtractWhat::kFused) require_method(source, fusion == FusionKind::kFlf ? Method::kFlf : Method::kTgfr);
  Embedder embedder(source, dataset, options.seed, options.workers);
  std::vector<const FaceCaptionRecord*> all;
  for (const auto& r : dataset.records) all.push_back(&r);
  if (what != ExtractWhat::kCaption) embedder.prepare(all, options.probe_level);

  EmbeddingMatrix out;
  std::vector<ad::Vector> rows;
  for (const auto* r : all) {
    out.ids.push_back(r->record_id);
    switch (what) {
      case ExtractWhat::kGlobal: rows.push_back(embedder.global(*r, options.probe_level)); break;
      case ExtractWhat::kCaption: rows.push_back(embedder.caption(*r, options.caption_index)); break;
      case ExtractWhat::kFused:
        rows.push_back(embedder.fused(*r, options.probe_level, *r, options.caption_index, fusion));
        break;
    }
  }
  const ad::Index dim = rows.empty() ? 0 : rows.front().size();
  out.values.resize(static_cast<ad::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) out.values.row(static_cast<ad::Index>(i)) = rows[i].transpose();
  return out;
}

namespace {

static_assert(std::endian::native == std::endian::little, "matrix files are written little-endian");

}  // namespace

void write_matrix(const EmbeddingMatrix& m, const fs::path& path, const fs::path& ids_path) {
  if (static_cast<std::size_t>(m.values.rows()) != m.ids.size()) fail(ErrorKind::kShape, "one id per matrix row");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  const std::uint64_t header[2] = {static_cast<std::uint64_t>(m.values.rows()),
                                   static_cast<std::uint64_t>(m.values.cols())};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = m.values;
  out.write(reinterpret_cast<const char*>(rows.data()), static_cast<std::streamsize>(rows.size() * sizeof(double)));
  if (!out) fail(ErrorKind::kIo, "failed writing " + path.string());
  std::ofstream ids(ids_path);
  if (!ids) fail(ErrorKind::kIo, "cannot write " + ids_path.string());
  for (const auto& id : m.ids) ids << id << '\n';
}

EmbeddingMatrix read_matrix(const fs::path& path, const fs::path& ids_path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, "matrix file not found: " + path.string());
  std::uint64_t header[2] = {0, 0};
  in.read(reinterpret_cast<char*>(header), sizeof header);
  if (!in) fail(ErrorKind::kCorruptFile, "truncated matrix header in " + path.string());
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows(header[0], header[1]);
  in.read(reinterpret_cast<char*>(rows.data()), static_cast<std::streamsize>(rows.size() * sizeof(double)));
  if (!in) fail(ErrorKind::kCorruptFile, "truncated matrix body in " + path.string());
  EmbeddingMatrix m;
  m.values = rows;
  std::ifstream ids(ids_path);
  if (!ids) fail(ErrorKind::kMissingFile, "id file not found: " + ids_path.string());
  for (std::string line; std::getline(ids, line);) m.ids.push_back(line);
  if (m.ids.size() != header[0]) fail(ErrorKind::kCorruptFile, "id count does not match matrix rows");
  return m;
}

// ---- cache ----

fs::path cache_dir() {
  if (const char* dir = std::getenv("XMAL_CACHE_DIR"); dir != nullptr && *dir != '\0') return dir;
  if (const char* home = std::getenv("HOME"); home != nullptr && *home != '\0') return fs::path(home) / ".cache" / "xmal";
  return fs::temp_directory_path() / "xmal-cache";
}

ImageEncoder cached_image_encoder(const ImageEncoderConfig& config) {
  const std::string key = json(config).dump();
  const fs::path path = cache_dir() / ("image_encoder_" + hex(fnv1a(key.data(), key.size())) + ".xmal");
  if (fs::exists(path)) return ImageEncoder::from_checkpoint(load_checkpoint(path), &config);
  ImageEncoder encoder = ImageEncoder::initialize(config);
  fs::create_directories(path.parent_path());
  Checkpoint ck;
  encoder.save(ck);
  // Write then rename so a concurrent reader never sees a partial file.
  const fs::path tmp = path.string() + ".tmp";
  save_checkpoint(ck, tmp);
  fs::rename(tmp, path);
  return encoder;
}

}  // namespace xmal
