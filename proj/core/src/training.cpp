#include "xmal/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>
#include <variant>

#include "xmal/error.hpp"
#include "xmal/evaluation.hpp"
#include "xmal/optim.hpp"

namespace xmal {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config ----

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::kMalformed, where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      fail(ErrorKind::kMalformed, "unknown config key '" + where + "." + key + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json stage1_json(const Stage1Config& s) {
  return {{"epochs", s.epochs},
          {"batch", s.batch},
          {"text_lr", s.text_lr},
          {"text_weight_decay", s.text_weight_decay},
          {"projection_lr", s.projection_lr},
          {"clip_norm", s.clip_norm},
          {"tau_min", s.tau_min},
          {"tau_max", s.tau_max},
          {"tau1", s.tau1},
          {"tau2", s.tau2},
          {"tau3", s.tau3},
          {"token_dropout", s.token_dropout},
          {"weights", s.weights},
          {"identity", s.identity}};
}

json stage2_json(const Stage2Config& s) {
  return {{"epochs", s.epochs},
          {"batch", s.batch},
          {"optimizer", s.optimizer},
          {"lr", s.lr},
          {"momentum", s.momentum},
          {"weight_decay", s.weight_decay},
          {"milestones", s.milestones},
          {"identity", s.identity},
          {"degrade_augment", s.degrade_augment}};
}

json text_json(const TextEncoderConfig& t) {
  return {{"dim", t.dim}, {"layers", t.layers}, {"heads", t.heads}, {"ffn_dim", t.ffn_dim}, {"max_tokens", t.max_tokens}};
}

void parse_config(const json& j, TrainConfig& c) {
  check_keys(j, {"stage1", "stage2", "image", "text", "fusion", "initial_tau", "share_tau", "max_tokens", "seed",
                 "deterministic", "workers", "device"},
             "config");
  if (j.contains("stage1")) {
    const json& s = j.at("stage1");
    check_keys(s, {"epochs", "batch", "text_lr", "text_weight_decay", "projection_lr", "clip_norm", "tau_min",
                   "tau_max", "tau1", "tau2", "tau3", "token_dropout", "weights", "identity"},
               "stage1");
    auto& o = c.stage1;
    read(s, "epochs", o.epochs);
    read(s, "batch", o.batch);
    read(s, "text_lr", o.text_lr);
    read(s, "text_weight_decay", o.text_weight_decay);
    read(s, "projection_lr", o.projection_lr);
    read(s, "clip_norm", o.clip_norm);
    read(s, "tau_min", o.tau_min);
    read(s, "tau_max", o.tau_max);
    read(s, "tau1", o.tau1);
    read(s, "tau2", o.tau2);
    read(s, "tau3", o.tau3);
    read(s, "token_dropout", o.token_dropout);
    if (s.contains("weights")) {
      check_keys(s.at("weights"), {"lambda1", "lambda2", "lambda3", "wrcl"}, "stage1.weights");
      o.weights = s.at("weights").get<align::LossWeights>();
    }
    if (s.contains("identity")) {
      check_keys(s.at("identity"), {"scale", "margin"}, "stage1.identity");
      o.identity = s.at("identity").get<align::IdentityLossOptions>();
    }
  }
  if (j.contains("stage2")) {
    const json& s = j.at("stage2");
    check_keys(s, {"epochs", "batch", "optimizer", "lr", "momentum", "weight_decay", "milestones", "identity",
                   "degrade_augment"},
               "stage2");
    auto& o = c.stage2;
    read(s, "epochs", o.epochs);
    read(s, "batch", o.batch);
    read(s, "optimizer", o.optimizer);
    read(s, "lr", o.lr);
    read(s, "momentum", o.momentum);
    read(s, "weight_decay", o.weight_decay);
    read(s, "milestones", o.milestones);
    read(s, "degrade_augment", o.degrade_augment);
    if (s.contains("identity")) {
      check_keys(s.at("identity"), {"scale", "margin"}, "stage2.identity");
      o.identity = s.at("identity").get<align::IdentityLossOptions>();
    }
  }
  if (j.contains("image")) {
    check_keys(j.at("image"), {"height", "width", "global_dim", "region_channels", "stage_channels", "seed"}, "image");
    c.image = j.at("image").get<ImageEncoderConfig>();
  }
  if (j.contains("text")) {
    const json& t = j.at("text");
    check_keys(t, {"dim", "layers", "heads", "ffn_dim", "max_tokens"}, "text");
    read(t, "dim", c.text.dim);
    read(t, "layers", c.text.layers);
    read(t, "heads", c.text.heads);
    read(t, "ffn_dim", c.text.ffn_dim);
    read(t, "max_tokens", c.text.max_tokens);
  }
  if (j.contains("fusion")) {
    check_keys(j.at("fusion"), {"shared_dim", "fused_dim", "heads", "match_with_global"}, "fusion");
    c.fusion = j.at("fusion").get<FusionConfig>();
  }
  read(j, "initial_tau", c.initial_tau);
  read(j, "share_tau", c.share_tau);
  read(j, "max_tokens", c.max_tokens);
  read(j, "seed", c.seed);
  read(j, "deterministic", c.deterministic);
  read(j, "workers", c.workers);
  read(j, "device", c.device);
}

}  // namespace

void to_json(json& j, const TrainConfig& c) {
  j = json{{"stage1", stage1_json(c.stage1)},
           {"stage2", stage2_json(c.stage2)},
           {"image", c.image},
           {"text", text_json(c.text)},
           {"fusion", c.fusion},
           {"initial_tau", c.initial_tau},
           {"share_tau", c.share_tau},
           {"max_tokens", c.max_tokens},
           {"seed", c.seed},
           {"deterministic", c.deterministic},
           {"workers", c.workers},
           {"device", c.device}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig out;
  try {
    parse_config(j, out);
  } catch (const json::exception& e) {
    fail(ErrorKind::kMalformed, std::string("config schema violation: ") + e.what());
  }
  c = std::move(out);
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kMissingFile, "config not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kMalformed, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  TrainConfig c = j.get<TrainConfig>();
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) fail(ErrorKind::kInvalidArgument, "config: " + msg);
  };
  need(stage1.epochs >= 1 && stage2.epochs >= 1, "epochs must be >= 1");
  need(stage1.batch >= 1 && stage2.batch >= 1, "batch must be >= 1");
  need(stage1.text_lr > 0 && stage1.projection_lr > 0 && stage2.lr > 0, "learning rates must be positive");
  need(stage1.text_weight_decay >= 0 && stage2.weight_decay >= 0, "weight decay must be non-negative");
  need(stage2.momentum >= 0 && stage2.momentum < 1, "momentum must lie in [0, 1)");
  need(stage2.optimizer == "sgd" || stage2.optimizer == "adam", "stage2.optimizer must be \"sgd\" or \"adam\"");
  need(stage1.clip_norm > 0, "clip_norm must be positive");
  need(stage1.tau_min > 0 && stage1.tau_min <= stage1.tau_max, "need 0 < tau_min <= tau_max");
  need(initial_tau >= stage1.tau_min && initial_tau <= stage1.tau_max, "initial_tau must lie in [tau_min, tau_max]");
  need(stage1.tau1 > 0 && stage1.tau2 > 0 && stage1.tau3 > 0, "tau1, tau2, tau3 must be positive");
  need(stage1.token_dropout >= 0 && stage1.token_dropout < 1, "token_dropout must lie in [0, 1)");
  stage1.weights.validate();
  for (std::size_t i = 0; i < stage2.milestones.size(); ++i) {
    need(stage2.milestones[i] >= 1 && stage2.milestones[i] < stage2.epochs, "stage-2 milestones must be < epochs");
    need(i == 0 || stage2.milestones[i] > stage2.milestones[i - 1], "stage-2 milestones must increase");
  }
  need(stage1.identity.scale > 0 && stage2.identity.scale > 0, "identity scale must be positive");
  need(stage1.identity.margin >= 0 && stage2.identity.margin >= 0, "identity margin must be non-negative");
  need(max_tokens >= 2 && max_tokens <= text.max_tokens, "max_tokens must lie in [2, text.max_tokens]");
  need(workers >= 1, "workers must be >= 1");
  need(device == "cpu", "only the cpu device is available");
}

std::uint64_t config_hash(const TrainConfig& config) {
  json j = config;
  j.erase("workers");
  j.erase("deterministic");
  j.erase("device");
  const std::string text = j.dump();
  return fnv1a(text.data(), text.size());
}

std::string hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

TrainingSet make_training_set(const Dataset& dataset) {
  TrainingSet ts;
  std::set<std::string> subjects;
  for (const auto& r : dataset.records) {
    if (r.split != Split::kTrain) continue;
    ts.records.push_back(&r);
    subjects.insert(r.subject_id);
    ts.by_subject[r.subject_id].push_back(r.record_id);
  }
  if (ts.records.empty()) fail(ErrorKind::kInvalidArgument, "empty dataset: no training records");
  ts.subjects.assign(subjects.begin(), subjects.end());
  for (std::size_t i = 0; i < ts.subjects.size(); ++i) ts.labels[ts.subjects[i]] = static_cast<int>(i);
  return ts;
}

// ---- views ----

ImageTensor augment_image(const ImageTensor& image, std::uint64_t seed) {
  Rng rng(seed);
  std::bernoulli_distribution flip(0.5);
  std::uniform_real_distribution<double> area(0.8, 1.0);
  std::uniform_real_distribution<double> shift(-0.2, 0.2);
  ImageTensor out = flip(rng) ? flip_horizontal(image) : image;
  const double side = std::sqrt(area(rng));
  const int h = std::clamp(static_cast<int>(std::lround(side * image.height)), 1, image.height);
  const int w = std::clamp(static_cast<int>(std::lround(side * image.width)), 1, image.width);
  std::uniform_int_distribution<int> top(0, image.height - h);
  std::uniform_int_distribution<int> left(0, image.width - w);
  const int t = top(rng);
  const int l = left(rng);
  out = resize_bilinear(crop(out, t, l, h, w), image.height, image.width);
  const double delta = shift(rng);
  for (double& v : out.pixels) v += delta;
  return clamp01(std::move(out));
}

TokenSequence token_dropout(const TokenSequence& tokens, double p, std::uint64_t seed) {
  const TokenSequence content = trim_padding(tokens);
  Rng rng(seed);
  std::bernoulli_distribution drop(p);
  TokenSequence out;
  if (content.ids.empty()) return tokens;
  out.ids.push_back(content.ids.front());
  for (std::size_t i = 1; i < content.ids.size(); ++i) {
    if (!drop(rng)) out.ids.push_back(content.ids[i]);
  }
  if (out.ids.size() == 1 && content.ids.size() > 1) {
    std::uniform_int_distribution<std::size_t> any(1, content.ids.size() - 1);
    out.ids.push_back(content.ids[any(rng)]);
  }
  out.ids.resize(std::max(out.ids.size(), tokens.ids.size()), Vocabulary::kPadId);
  return out;
}

ViewPlan plan_views(const FaceCaptionRecord& record, std::span<const std::string> subject_records, Rng& rng) {
  if (record.captions.empty()) fail(ErrorKind::kInvalidArgument, "record " + record.record_id + " has no captions");
  ViewPlan plan;
  std::vector<std::string> others;
  for (const auto& id : subject_records) {
    if (id != record.record_id) others.push_back(id);
  }
  plan.image_record[0] = record.record_id;
  if (others.empty()) {
    plan.image_record[1] = record.record_id;
    plan.augmented = true;
    plan.augment_seed[0] = rng();
    plan.augment_seed[1] = rng();
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
    plan.image_record[1] = others[pick(rng)];
  }
  const std::size_t n = record.captions.size();
  if (n >= 2) {
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    std::uniform_int_distribution<std::size_t> second(0, n - 2);
    plan.caption[0] = first(rng);
    plan.caption[1] = second(rng);
    if (plan.caption[1] >= plan.caption[0]) ++plan.caption[1];
  } else {
    plan.dropout = true;
    plan.dropout_seed = rng();
  }
  return plan;
}

Views make_views(const FaceCaptionRecord& record, std::span<const std::string> subject_records,
                 const ImageLoader& load, const Vocabulary& vocab, int max_tokens, double dropout_p, Rng& rng) {
  const ViewPlan plan = plan_views(record, subject_records, rng);
  Views v;
  if (plan.augmented) {
    const ImageTensor base = load(record.record_id);
    for (int k = 0; k < 2; ++k) v.image[k] = augment_image(base, plan.augment_seed[k]);
  } else {
    for (int k = 0; k < 2; ++k) v.image[k] = load(plan.image_record[k]);
  }
  v.caption_text[0] = record.captions[plan.caption[0]];
  v.caption[0] = tokenize(v.caption_text[0], vocab, max_tokens);
  if (plan.dropout) {
    v.caption_text[1] = v.caption_text[0];
    v.caption[1] = token_dropout(v.caption[0], dropout_p, plan.dropout_seed);
  } else {
    v.caption_text[1] = record.captions[plan.caption[1]];
    v.caption[1] = tokenize(v.caption_text[1], vocab, max_tokens);
  }
  return v;
}

// ---- frozen features ----

std::uint64_t record_seed(std::uint64_t root, std::uint64_t tag, const std::string& record_id) {
  return derive_seed(root, {tag, fnv1a(record_id.data(), record_id.size())});
}

FeatureTable encode_records(const ImageEncoder& encoder, const Dataset& dataset,
                            std::span<const FaceCaptionRecord* const> records, int level, std::uint64_t seed,
                            int workers) {
  const QualityLevel q = quality_level(level);
  std::vector<EncodedImage> encoded(records.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& r = *records[i];
      ImageTensor img = read_ppm(dataset.image_file(r));
      img = degrade(img, q, record_seed(seed, static_cast<std::uint64_t>(level), r.record_id));
      encoded[i] = encoder.encode(img);
    }
  };
  const std::size_t n = records.size();
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), std::max<std::size_t>(n, 1));
  if (threads <= 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = std::min(n, t * chunk);
      const std::size_t e = std::min(n, b + chunk);
      pool.emplace_back([&, b, e, t] {
        try {
          work(b, e);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& err : errors) {
      if (err) std::rethrow_exception(err);
    }
  }
  FeatureTable out;
  for (std::size_t i = 0; i < n; ++i) out.emplace(records[i]->record_id, std::move(encoded[i]));
  return out;
}

// ---- bundles ----

namespace {

constexpr const char* kBundleFormat = "xmal-bundle";

ModelConfig model_config(const TrainConfig& c, int vocab_size, int classes) {
  ModelConfig m;
  m.image = c.image;
  m.text = c.text;
  m.text.vocab_size = vocab_size;
  m.fusion = c.fusion;
  m.num_classes = classes;
  m.initial_tau = c.initial_tau;
  m.share_tau = c.share_tau;
  m.seed = c.seed;
  return m;
}

nn::ParamList without(const nn::ParamList& all, const nn::ParamList& excluded) {
  std::set<std::string> names;
  for (const auto& p : excluded) names.insert(p.name);
  nn::ParamList out;
  for (const auto& p : all) {
    if (!names.count(p.name)) out.push_back(p);
  }
  return out;
}

json checksums_json(TgfrModel& model, const ImageEncoder& encoder) {
  json j = json::object();
  for (const auto& [name, sum] : group_checksums(model, encoder)) j[name] = hex(sum);
  return j;
}

Checkpoint make_bundle(int stage, int epoch, const TrainConfig& config, TgfrModel& model, const ImageEncoder& encoder,
                       const Vocabulary& vocab, const std::vector<std::string>& subjects,
                       const std::vector<std::string>& fusions_trained) {
  Checkpoint ck;
  encoder.save(ck);
  model.save(ck);
  ck.config["format"] = kBundleFormat;
  ck.config["stage"] = stage;
  ck.config["epoch"] = epoch;
  ck.config["train_config"] = config;
  ck.config["config_hash"] = hex(config_hash(config));
  ck.config["vocab"] = vocab.words();
  ck.config["subjects"] = subjects;
  ck.config["fusions_trained"] = fusions_trained;
  ck.config["checksums"] = checksums_json(model, encoder);
  return ck;
}

void require_bundle(const Checkpoint& ck) {
  if (ck.config.value("format", std::string()) != kBundleFormat) {
    fail(ErrorKind::kConfigMismatch, "checkpoint is not a training bundle");
  }
}

void check_resume(const Checkpoint& ck, int stage, const TrainConfig& config) {
  require_bundle(ck);
  if (ck.config.at("stage").get<int>() != stage) {
    fail(ErrorKind::kConfigMismatch, "resume checkpoint belongs to stage " + ck.config.at("stage").dump());
  }
  const std::string want = hex(config_hash(config));
  const std::string have = ck.config.at("config_hash").get<std::string>();
  if (want != have) {
    fail(ErrorKind::kConfigMismatch, "config hash " + want + " does not match checkpoint hash " + have);
  }
}

class JsonLog {
 public:
  JsonLog(const fs::path& path, bool append, std::ostream* extra)
      : file_(path, append ? std::ios::app : std::ios::trunc), extra_(extra) {
    if (!file_) fail(ErrorKind::kIo, "cannot write log " + path.string());
  }
  void write(const json& line) {
    const std::string text = line.dump();
    file_ << text << '\n';
    file_.flush();
    if (extra_ != nullptr) *extra_ << text << '\n';
  }

 private:
  std::ofstream file_;
  std::ostream* extra_;
};

void accumulate(align::LossReport& sum, const align::LossReport& r) {
  sum.cicl += r.cicl;
  sum.wrcl += r.wrcl;
  sum.imcl += r.imcl;
  sum.idl += r.idl;
  sum.total += r.total;
  sum.f2c += r.f2c;
  sum.c2f += r.c2f;
  sum.r_given_w += r.r_given_w;
  sum.w_given_r += r.w_given_r;
}

align::LossReport divided(align::LossReport r, double n) {
  r.cicl /= n;
  r.wrcl /= n;
  r.imcl /= n;
  r.idl /= n;
  r.total /= n;
  r.f2c /= n;
  r.c2f /= n;
  r.r_given_w /= n;
  r.w_given_r /= n;
  return r;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

ad::Matrix stack_columns(const std::vector<const ad::Vector*>& cols) {
  ad::Matrix m(cols.front()->size(), static_cast<ad::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) m.col(static_cast<ad::Index>(i)) = *cols[i];
  return m;
}

// Evaluates a loss term inside the graph only when its weight is non-zero, so
// switched-off terms are reported but send no gradient anywhere.
template <typename F>
auto weighted_term(double weight, F&& f) {
  if (weight != 0.0) return f();
  ad::NoGradGuard guard;
  return f();
}

}  // namespace

std::map<std::string, std::uint64_t> group_checksums(TgfrModel& model, const ImageEncoder& encoder) {
  return {{"image_encoder", encoder.checksum()},
          {"text_encoder", checksum(model.text_encoder_params())},
          {"fcam", checksum(model.fcam_params())},
          {"fcfm", checksum(model.fusion_params(FusionKind::kFcfm))},
          {"flf", checksum(model.fusion_params(FusionKind::kFlf))}};
}

LoadedBundle load_bundle(const Checkpoint& ck) {
  require_bundle(ck);
  LoadedBundle b;
  try {
    b.model = TgfrModel::from_checkpoint(ck);
    b.image_encoder = ImageEncoder::from_checkpoint(ck);
    b.vocab = Vocabulary(ck.config.at("vocab").get<std::vector<std::string>>());
    b.config = ck.config.at("train_config").get<TrainConfig>();
    b.stage = ck.config.at("stage").get<int>();
    b.epoch = ck.config.at("epoch").get<int>();
    if (ck.config.contains("fusion")) b.fusion = parse_fusion(ck.config.at("fusion").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorKind::kCorruptFile, std::string("bundle metadata unreadable: ") + e.what());
  }
  const std::string stored = ck.config.at("checksums").value("image_encoder", std::string());
  if (stored != hex(b.image_encoder.checksum())) {
    fail(ErrorKind::kFrozenViolation, "image encoder checksum does not match the recorded frozen checksum");
  }
  return b;
}

// ---- stage 1 ----

TrainResult train_stage1(const TrainConfig& config, const Dataset& dataset, const Vocabulary& vocab,
                         const ImageEncoder& encoder, const TrainOptions& options) {
  config.validate();
  if (!encoder.loaded()) fail(ErrorKind::kUnloaded, "stage 1 needs a loaded image encoder");
  if (!(encoder.config() == config.image)) {
    fail(ErrorKind::kConfigMismatch, "image encoder does not match the configured architecture");
  }
  const TrainingSet ts = make_training_set(dataset);
  const Stage1Config& s1 = config.stage1;
  fs::create_directories(options.out_dir);

  TrainResult result;
  result.image_encoder = encoder;
  result.model = TgfrModel(model_config(config, vocab.size(), static_cast<int>(ts.subjects.size())));
  TgfrModel& model = result.model;
  const std::uint64_t encoder_sum = encoder.checksum();

  optim::Adam text_opt(model.text_encoder_params(),
                       {.lr = s1.text_lr, .weight_decay = s1.text_weight_decay, .decoupled = true});
  optim::Adam fcam_opt(model.fcam_params(), {.lr = s1.projection_lr});
  int start_epoch = 1;
  if (options.resume) {
    const Checkpoint ck = load_checkpoint(*options.resume);
    check_resume(ck, 1, config);
    if (ck.config.at("vocab").get<std::vector<std::string>>() != vocab.words() ||
        ck.config.at("subjects").get<std::vector<std::string>>() != ts.subjects) {
      fail(ErrorKind::kConfigMismatch, "resume checkpoint was trained on a different dataset");
    }
    if (ck.config.at("checksums").value("image_encoder", std::string()) != hex(encoder_sum)) {
      fail(ErrorKind::kFrozenViolation, "image encoder differs from the one frozen in the resume checkpoint");
    }
    ck.restore(model.all_params());
    ck.restore(model.buffers());
    text_opt.load_state(ck.restore_optimizer("optim.text"));
    fcam_opt.load_state(ck.restore_optimizer("optim.fcam"));
    start_epoch = ck.config.at("epoch").get<int>() + 1;
  }

  const FeatureTable features = encode_records(encoder, dataset, ts.records, 4, config.seed, config.workers);
  auto features_of = [&](const ViewPlan& plan, int k) -> EncodedImage {
    if (!plan.augmented) return features.at(plan.image_record[k]);
    const ImageTensor img = read_ppm(dataset.image_file(dataset.find(plan.image_record[k])));
    return encoder.encode(augment_image(img, plan.augment_seed[k]));
  };

  JsonLog log(options.out_dir / "stage1_log.jsonl", options.resume.has_value(), options.log);
  const nn::ParamList stage1_params = model.stage1_params();
  const std::size_t n = ts.records.size();
  const std::size_t batch = static_cast<std::size_t>(s1.batch);
  const int last_epoch = options.stop_after_epoch > 0 ? std::min(options.stop_after_epoch, s1.epochs) : s1.epochs;
  result.checkpoint_path = options.out_dir / "stage1.xmal";

  for (int epoch = start_epoch; epoch <= last_epoch; ++epoch) {
    const auto order = shuffled(n, make_rng(config.seed, {stream::kShuffle, static_cast<std::uint64_t>(epoch)}));
    align::LossReport sum;
    int steps = 0;
    for (std::size_t begin = 0; begin < n; begin += batch, ++steps) {
      const std::size_t end = std::min(n, begin + batch);
      std::vector<ad::Vector> g1, g2;
      std::vector<ad::Var> maps;
      std::vector<ad::Var> words, captions, captions2;
      std::vector<int> labels;
      for (std::size_t i = begin; i < end; ++i) {
        const FaceCaptionRecord& rec = *ts.records[order[i]];
        Rng rng = make_rng(config.seed, {stream::kViews, static_cast<std::uint64_t>(epoch),
                                         static_cast<std::uint64_t>(steps), i - begin});
        const ViewPlan plan = plan_views(rec, ts.by_subject.at(rec.subject_id), rng);
        const EncodedImage e1 = features_of(plan, 0);
        const EncodedImage e2 = features_of(plan, 1);
        g1.push_back(e1.global.values);
        g2.push_back(e2.global.values);
        maps.emplace_back(e1.regional.values);
        const TokenSequence t1 = tokenize(rec.captions[plan.caption[0]], vocab, config.max_tokens);
        const TokenSequence t2 = plan.dropout ? token_dropout(t1, s1.token_dropout, plan.dropout_seed)
                                              : tokenize(rec.captions[plan.caption[1]], vocab, config.max_tokens);
        ProjectedCaption c1 = model.encode_caption(t1);
        words.push_back(c1.words);
        captions.push_back(c1.caption);
        captions2.push_back(model.encode_caption(t2).caption);
        labels.push_back(ts.labels.at(rec.subject_id));
      }
      std::vector<const ad::Vector*> p1, p2;
      for (auto& v : g1) p1.push_back(&v);
      for (auto& v : g2) p2.push_back(&v);
      const ad::Var v1 = model.project_global(ad::Var(stack_columns(p1)));
      const ad::Var v2 = model.project_global(ad::Var(stack_columns(p2)));
      const ad::Var c1 = ad::concat_cols(captions);
      const ad::Var c2 = ad::concat_cols(captions2);
      const ad::Var tau = model.tau();
      const auto& w = s1.weights;

      align::LossComponents comp;
      comp.cicl = weighted_term(w.lambda2, [&] { return align::cicl(v1, c1, tau); });
      comp.wrcl = weighted_term(w.wrcl, [&] {
        const std::vector<ad::Var> regions = model.project_regions(maps, true);
        return align::wrcl(words, regions, s1.tau1, s1.tau2, s1.tau3);
      });
      comp.imcl = weighted_term(w.lambda3, [&] { return align::imcl(v1, v2, c1, c2, model.imcl_tau()); });
      comp.idl = weighted_term(w.lambda1, [&] {
        return ad::add(align::identity_loss(v1, labels, model.image_head(), s1.identity),
                       align::identity_loss(c1, labels, model.text_head(), s1.identity));
      });
      align::LossReport report;
      const ad::Var total = align::total_fcam_loss(comp, w, &report);

      nn::zero_grads(stage1_params);
      double grad_norm = 0.0;
      if (total.requires_grad()) {
        total.backward();
        grad_norm = nn::clip_grad_norm(stage1_params, s1.clip_norm);
        text_opt.step();
        fcam_opt.step();
        model.clamp_temperatures(s1.tau_min, s1.tau_max);
      }
      accumulate(sum, report);
      json line = report;
      line["stage"] = 1;
      line["epoch"] = epoch;
      line["step"] = steps;
      line["lr_text"] = text_opt.lr();
      line["lr_projection"] = fcam_opt.lr();
      line["tau"] = model.temperatures().tau_value();
      line["grad_norm"] = grad_norm;
      log.write(line);
    }
    if (encoder.checksum() != encoder_sum) fail(ErrorKind::kFrozenViolation, "image encoder changed during stage 1");

    EpochSummary summary{epoch, divided(sum, steps), text_opt.lr()};
    json line = summary.mean;
    line["stage"] = 1;
    line["epoch"] = epoch;
    line["summary"] = true;
    line["steps"] = steps;
    log.write(line);
    result.epochs.push_back(summary);

    Checkpoint ck = make_bundle(1, epoch, config, model, encoder, vocab, ts.subjects, {});
    ck.store("optim.text", text_opt.state());
    ck.store("optim.fcam", fcam_opt.state());
    save_checkpoint(ck, result.checkpoint_path);
    result.bundle = std::move(ck);
  }
  if (result.bundle.arrays.empty()) {
    // Nothing left to run (resumed at or past the last epoch): hand back the current state.
    Checkpoint ck = make_bundle(1, start_epoch - 1, config, model, encoder, vocab, ts.subjects, {});
    ck.store("optim.text", text_opt.state());
    ck.store("optim.fcam", fcam_opt.state());
    result.bundle = std::move(ck);
  }
  return result;
}

// ---- stage 2 ----

namespace {

struct FrozenImage {
  ad::Matrix global;
  ad::Matrix regions;
};

struct FrozenCaption {
  ad::Matrix words;
  ad::Matrix caption;
};

void check_architecture(const TrainConfig& config, const TrainConfig& stored) {
  if (!(config.image == stored.image) || !(config.fusion == stored.fusion) || config.max_tokens != stored.max_tokens ||
      config.text.dim != stored.text.dim || config.text.layers != stored.text.layers ||
      config.text.heads != stored.text.heads || config.text.ffn_dim != stored.text.ffn_dim ||
      config.text.max_tokens != stored.text.max_tokens || config.share_tau != stored.share_tau) {
    fail(ErrorKind::kConfigMismatch, "stage-2 config describes a different architecture than the stage-1 bundle");
  }
}

}  // namespace

TrainResult train_stage2(const TrainConfig& config, const Dataset& dataset, const Checkpoint& stage1,
                         FusionKind fusion, const TrainOptions& options) {
  config.validate();
  LoadedBundle base = load_bundle(stage1);
  check_architecture(config, base.config);
  const TrainingSet ts = make_training_set(dataset);
  if (stage1.config.at("subjects").get<std::vector<std::string>>() != ts.subjects) {
    fail(ErrorKind::kConfigMismatch, "stage-1 bundle was trained on a different subject set");
  }
  const Stage2Config& s2 = config.stage2;
  fs::create_directories(options.out_dir);

  TrainResult result;
  result.model = std::move(base.model);
  result.image_encoder = std::move(base.image_encoder);
  TgfrModel& model = result.model;
  const ImageEncoder& encoder = result.image_encoder;
  const std::string name = to_string(fusion);
  std::vector<std::string> trained = stage1.config.value("fusions_trained", std::vector<std::string>{});

  const nn::ParamList trainable = model.fusion_params(fusion);
  std::variant<optim::Sgd, optim::Adam> opt =
      s2.optimizer == "adam"
          ? decltype(opt)(optim::Adam(trainable, {.lr = s2.lr, .weight_decay = s2.weight_decay}))
          : decltype(opt)(optim::Sgd(trainable, {.lr = s2.lr, .momentum = s2.momentum, .weight_decay = s2.weight_decay}));
  int start_epoch = 1;
  if (options.resume) {
    const Checkpoint ck = load_checkpoint(*options.resume);
    check_resume(ck, 2, config);
    if (ck.config.value("fusion", std::string()) != name) {
      fail(ErrorKind::kConfigMismatch, "resume checkpoint trained a different fusion");
    }
    ck.restore(model.all_params());
    ck.restore(model.buffers());
    std::visit([&](auto& o) { o.load_state(ck.restore_optimizer("optim.fusion")); }, opt);
    start_epoch = ck.config.at("epoch").get<int>() + 1;
    trained = ck.config.value("fusions_trained", std::vector<std::string>{});
  }
  if (std::find(trained.begin(), trained.end(), name) == trained.end()) trained.push_back(name);

  const nn::ParamList frozen = without(model.all_params(), trainable);
  const std::uint64_t frozen_sum = checksum(frozen);
  const std::uint64_t encoder_sum = encoder.checksum();

  // Stage-1 outputs never change here, so compute them once per record,
  // quality level and caption.
  const std::vector<int> levels = s2.degrade_augment ? std::vector<int>{1, 2, 3, 4} : std::vector<int>{4};
  std::vector<std::vector<FrozenImage>> images(ts.records.size());
  std::vector<std::vector<FrozenCaption>> texts(ts.records.size());
  {
    ad::NoGradGuard guard;
    for (int level : levels) {
      const FeatureTable table = encode_records(encoder, dataset, ts.records, level,
                                                derive_seed(config.seed, {stream::kStage2}), config.workers);
      for (std::size_t i = 0; i < ts.records.size(); ++i) {
        const SharedImage s = model.project_image(table.at(ts.records[i]->record_id));
        images[i].push_back({s.global.value(), s.regions.value()});
      }
    }
    for (std::size_t i = 0; i < ts.records.size(); ++i) {
      for (const auto& text : ts.records[i]->captions) {
        const ProjectedCaption c = model.encode_caption(tokenize(text, base.vocab, config.max_tokens));
        texts[i].push_back({c.words.value(), c.caption.value()});
      }
    }
  }

  JsonLog log(options.out_dir / ("stage2_" + name + "_log.jsonl"), options.resume.has_value(), options.log);
  const std::size_t n = ts.records.size();
  const std::size_t batch = static_cast<std::size_t>(s2.batch);
  const int last_epoch = options.stop_after_epoch > 0 ? std::min(options.stop_after_epoch, s2.epochs) : s2.epochs;
  result.checkpoint_path = options.out_dir / ("stage2_" + name + ".xmal");
  auto save = [&](int epoch) {
    Checkpoint ck = make_bundle(2, epoch, config, model, encoder, base.vocab, ts.subjects, trained);
    ck.config["fusion"] = name;
    ck.store("optim.fusion", std::visit([](const auto& o) { return o.state(); }, opt));
    return ck;
  };

  for (int epoch = start_epoch; epoch <= last_epoch; ++epoch) {
    const double lr = optim::multistep_lr(s2.lr, epoch, s2.milestones);
    std::visit([&](auto& o) { o.set_lr(lr); }, opt);
    const auto order =
        shuffled(n, make_rng(config.seed, {stream::kStage2, stream::kShuffle, static_cast<std::uint64_t>(epoch)}));
    double sum = 0.0;
    int steps = 0;
    for (std::size_t begin = 0; begin < n; begin += batch, ++steps) {
      const std::size_t end = std::min(n, begin + batch);
      std::vector<ad::Var> fused;
      std::vector<int> labels;
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t r = order[i];
        Rng rng = make_rng(config.seed, {stream::kStage2, static_cast<std::uint64_t>(epoch),
                                         static_cast<std::uint64_t>(steps), i - begin});
        std::uniform_int_distribution<std::size_t> level(0, images[r].size() - 1);
        std::uniform_int_distribution<std::size_t> caption(0, texts[r].size() - 1);
        const FrozenImage& img = images[r][level(rng)];
        const FrozenCaption& txt = texts[r][caption(rng)];
        const SharedImage si{ad::Var(img.global), ad::Var(img.regions)};
        const ProjectedCaption pc{ad::Var(txt.words), ad::Var(txt.caption)};
        fused.push_back(model.fuse(si, pc, fusion));
        labels.push_back(ts.labels.at(ts.records[r]->subject_id));
      }
      const ad::Var loss =
          align::identity_loss(ad::concat_cols(fused), labels, model.fusion_head(fusion), s2.identity);
      nn::zero_grads(trainable);
      loss.backward();
      std::visit([](auto& o) { o.step(); }, opt);
      sum += loss.item();
      log.write({{"stage", 2}, {"fusion", name}, {"epoch", epoch}, {"step", steps}, {"idl", loss.item()},
                 {"total", loss.item()}, {"lr", lr}});
    }
    EpochSummary summary;
    summary.epoch = epoch;
    summary.mean.idl = summary.mean.total = sum / steps;
    summary.lr = lr;
    log.write({{"stage", 2}, {"fusion", name}, {"epoch", epoch}, {"summary", true}, {"steps", steps},
               {"idl", summary.mean.idl}, {"total", summary.mean.total}, {"lr", lr}});
    result.epochs.push_back(summary);

    if (checksum(frozen) != frozen_sum || encoder.checksum() != encoder_sum) {
      fail(ErrorKind::kFrozenViolation, "a parameter outside " + name + " changed during stage 2");
    }
    Checkpoint ck = save(epoch);
    save_checkpoint(ck, result.checkpoint_path);
    result.bundle = std::move(ck);
  }
  if (result.bundle.arrays.empty()) result.bundle = save(start_epoch - 1);
  return result;
}

}  // namespace xmal
