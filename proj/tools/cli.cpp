#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmal/data.hpp"
#include "xmal/error.hpp"
#include "xmal/evaluation.hpp"
#include "xmal/pipeline.hpp"
#include "xmal/training.hpp"

namespace xmal::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Raised for flag combinations CLI11 cannot express; maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t file_hash(const fs::path& path, std::uint64_t seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, "cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a(bytes.data(), bytes.size()) ^ (seed * 0x100000001b3ULL);
}

// Order-sensitive digest of the manifest, vocabulary and every image file.
std::uint64_t dataset_checksum(const Dataset& d, const fs::path& dir) {
  std::uint64_t h = file_hash(dir / "manifest.tsv", 0);
  h = file_hash(dir / "vocab.txt", h);
  for (const auto& r : d.records) h = file_hash(d.image_file(r), h);
  return h;
}

Vocabulary vocab_for(const Dataset& d, const fs::path& manifest) {
  const fs::path file = manifest.parent_path() / "vocab.txt";
  if (fs::exists(file)) return load_vocab(file);
  return build_vocab(d.all_captions());
}

fs::path protocol_for(const std::string& flag, const fs::path& manifest) {
  return flag.empty() ? manifest.parent_path() / "protocol.tsv" : fs::path(flag);
}

void warn_unsupported(const VerificationReport& r, std::ostream& err, const std::string& what) {
  for (const auto& [far, tar] : r.tar_at_far) {
    if (!tar) {
      err << "warning: " << what << "TAR@FAR=" << far << " unsupported with " << r.impostor << " impostor pairs\n";
    }
  }
}

struct GenFlags {
  GeneratorConfig config;
  std::string out;
};

struct TrainFlags {
  int stage = 1;
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
  std::string from_stage1;
  std::string fusion = "fcfm";
  std::string encoder;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool deterministic = false;
  int stop_after = 0;
  bool verbose = false;
};

struct EvalFlags {
  std::string mode = "verify";
  std::vector<std::string> methods;
  std::string checkpoint;
  std::string flf_checkpoint;
  std::string data;
  std::string protocol;
  std::string captions = "both";
  std::vector<double> fars;
  int level = 4;
  std::string out;
  std::uint64_t seed = 7;
  int workers = 1;
  bool deterministic = false;
};

struct ExtractFlags {
  std::string what;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string ids;
  std::string fusion = "fcfm";
  int level = 4;
  std::uint64_t seed = 7;
  int workers = 1;
  bool deterministic = false;
};

struct InitFlags {
  std::string out;
  std::string config;
  std::optional<std::uint64_t> seed;
};

void cmd_gen_data(const GenFlags& f, std::ostream& out) {
  const GeneratedDataset g = generate_synthetic(f.config, f.out);
  std::size_t captions = 0;
  for (const auto& r : g.dataset.records) captions += r.captions.size();
  out << "records " << g.dataset.records.size() << "\n"
      << "subjects " << g.attributes.size() << "\n"
      << "captions " << captions << "\n"
      << "vocab_size " << g.vocab.size() << "\n"
      << "checksum " << hex(dataset_checksum(g.dataset, f.out)) << "\n";
}

void cmd_train(const TrainFlags& f, std::ostream& out) {
  if (f.stage == 2 && f.from_stage1.empty()) throw UsageError("stage 2 requires --from-stage1");
  if (f.stage == 1 && !f.from_stage1.empty()) throw UsageError("--from-stage1 only applies to stage 2");
  TrainConfig config = f.config.empty() ? TrainConfig{} : load_train_config(f.config);
  if (f.seed) config.seed = *f.seed;
  if (f.workers) config.workers = *f.workers;
  if (f.deterministic) config.deterministic = true;
  config.validate();

  const Dataset dataset = load_manifest(f.data);
  TrainOptions options;
  options.out_dir = f.out;
  if (!f.resume.empty()) options.resume = fs::path(f.resume);
  options.stop_after_epoch = f.stop_after;
  if (f.verbose) options.log = &out;

  TrainResult result;
  if (f.stage == 1) {
    const ImageEncoder encoder = f.encoder.empty()
                                     ? cached_image_encoder(config.image)
                                     : ImageEncoder::from_checkpoint(load_checkpoint(f.encoder), &config.image);
    result = train_stage1(config, dataset, vocab_for(dataset, f.data), encoder, options);
  } else {
    result = train_stage2(config, dataset, load_checkpoint(f.from_stage1), parse_fusion(f.fusion), options);
  }
  for (const auto& e : result.epochs) {
    json line = e.mean;
    line["epoch"] = e.epoch;
    line["lr"] = e.lr;
    out << "epoch " << line.dump() << "\n";
  }
  out << "checkpoint " << result.checkpoint_path.string() << "\n";
}

void cmd_eval(const EvalFlags& f, std::ostream& out, std::ostream& err) {
  const Dataset dataset = load_manifest(f.data);
  EvalOptions options;
  options.captions = parse_caption_mode(f.captions);
  options.probe_level = f.level;
  if (!f.fars.empty()) options.far_targets = f.fars;
  options.seed = f.seed;
  options.workers = f.workers;
  quality_level(f.level);

  ModelSource main = load_model_source(f.checkpoint);
  std::optional<ModelSource> flf;
  if (!f.flf_checkpoint.empty()) flf = load_model_source(f.flf_checkpoint);
  auto source_for = [&](Method m) -> ModelSource* { return m == Method::kFlf && flf ? &*flf : &main; };

  std::vector<Method> methods;
  for (const auto& m : f.methods) methods.push_back(parse_method(m));

  if (f.mode == "identify") {
    if (methods.size() != 1) throw UsageError("identify takes exactly one --method");
    const double rank1 = identify(*source_for(methods[0]), dataset, methods[0], options);
    json j{{"mode", "identify"}, {"method", to_string(methods[0])}, {"level", f.level}, {"rank1", rank1}};
    out << j.dump(2) << "\n";
    if (!f.out.empty()) {
      fs::create_directories(f.out);
      std::ofstream(fs::path(f.out) / "identify.json") << j.dump(2) << "\n";
    }
    return;
  }

  const PairProtocol protocol = load_protocol(protocol_for(f.protocol, f.data));
  if (f.mode == "verify") {
    if (methods.size() != 1) throw UsageError("verify takes exactly one --method");
    const VerificationReport report = verify(*source_for(methods[0]), dataset, protocol, methods[0], options);
    warn_unsupported(report, err, "");
    json j = report;
    j["mode"] = "verify";
    j["method"] = to_string(methods[0]);
    j["level"] = f.level;
    j["captions"] = to_string(options.captions);
    out << j.dump(2) << "\n";
    if (!f.out.empty()) {
      fs::create_directories(f.out);
      std::ofstream(fs::path(f.out) / "report.json") << j.dump(2) << "\n";
      write_roc_csv(report, fs::path(f.out) / "roc.csv");
    }
    return;
  }

  // quality-study
  if (methods.empty()) methods = {Method::kImageOnly, Method::kFlf, Method::kTgfr};
  std::map<Method, ModelSource*> sources;
  for (Method m : methods) sources[m] = source_for(m);
  const QualityStudy study = quality_study(sources, dataset, protocol, options);
  for (const auto& c : study.cells) {
    warn_unsupported(c.report, err, std::string(to_string(c.method)) + " level " + std::to_string(c.level) + ": ");
  }
  const json j{{"mode", "quality-study"}, {"captions", to_string(options.captions)}, {"cells", study}};
  out << j.dump(2) << "\n";
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    std::ofstream(fs::path(f.out) / "quality_study.json") << j.dump(2) << "\n";
  }
}

void cmd_extract(const ExtractFlags& f, std::ostream& out) {
  if (!fs::exists(f.checkpoint)) fail(ErrorKind::kMissingFile, "checkpoint not found: " + f.checkpoint);
  const Dataset dataset = load_manifest(f.data);
  ModelSource source = load_model_source(f.checkpoint);
  EvalOptions options;
  options.probe_level = f.level;
  options.seed = f.seed;
  options.workers = f.workers;
  quality_level(f.level);
  const EmbeddingMatrix m = extract(source, dataset, parse_extract(f.what), parse_fusion(f.fusion), options);
  const fs::path ids = f.ids.empty() ? fs::path(f.out + ".ids") : fs::path(f.ids);
  if (fs::path(f.out).has_parent_path()) fs::create_directories(fs::path(f.out).parent_path());
  write_matrix(m, f.out, ids);
  out << "rows " << m.values.rows() << "\n"
      << "dim " << m.values.cols() << "\n"
      << "matrix " << f.out << "\n"
      << "ids " << ids.string() << "\n";
}

void cmd_init_encoder(const InitFlags& f, std::ostream& out) {
  ImageEncoderConfig config = f.config.empty() ? ImageEncoderConfig{} : load_train_config(f.config).image;
  if (f.seed) config.seed = *f.seed;
  const ImageEncoder encoder = ImageEncoder::initialize(config);
  Checkpoint ck;
  encoder.save(ck);
  if (fs::path(f.out).has_parent_path()) fs::create_directories(fs::path(f.out).parent_path());
  save_checkpoint(ck, f.out);
  out << "checksum " << hex(encoder.checksum()) << "\n";
}

void status(std::ostream& out, const std::string& command, int code, const std::string& kind = "") {
  out << "status=" << (code == 0 ? "ok" : code == 2 ? "usage-error" : "error") << " code=" << code;
  if (!command.empty()) out << " command=" << command;
  if (!kind.empty()) out << " kind=" << kind;
  out << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-guided face recognition: data generation, training, extraction and evaluation", "xmal"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic face-caption dataset");
  gen_cmd->add_option("--subjects", gen.config.subjects, "Number of identities")->capture_default_str();
  gen_cmd->add_option("--images-per-subject", gen.config.images_per_subject, "Images per identity")
      ->capture_default_str();
  gen_cmd->add_option("--captions", gen.config.captions_per_image, "Captions per image")->capture_default_str();
  gen_cmd->add_option("--size", gen.config.height, "Image side length in pixels")
      ->each([&gen](const std::string&) { gen.config.width = gen.config.height; })
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.config.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainFlags train;
  auto* train_cmd = app.add_subcommand("train", "Run training stage 1 or 2");
  train_cmd->add_option("--stage", train.stage, "Training stage")->required()->check(CLI::IsMember({1, 2}));
  train_cmd->add_option("--config", train.config, "Training config JSON")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", train.data, "Dataset manifest")->required();
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  auto* resume_opt = train_cmd->add_option("--resume", train.resume, "Resume from a checkpoint of the same stage");
  train_cmd->add_option("--from-stage1", train.from_stage1, "Stage-1 bundle (stage 2 only)");
  train_cmd->add_option("--fusion", train.fusion, "Fusion trained in stage 2")
      ->check(CLI::IsMember({"fcfm", "tgfr", "flf"}))
      ->capture_default_str();
  auto* encoder_opt = train_cmd->add_option("--encoder", train.encoder, "Image encoder checkpoint (stage 1)");
  train_cmd->add_option("--seed", train.seed, "Override the config seed");
  train_cmd->add_option("--workers", train.workers, "Feature-encoding threads")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--deterministic", train.deterministic, "Require bitwise-reproducible runs");
  train_cmd->add_option("--stop-after", train.stop_after, "Stop once this many epochs are complete");
  train_cmd->add_flag("--verbose", train.verbose, "Echo every log line");
  encoder_opt->excludes(resume_opt);

  EvalFlags eval;
  auto* eval_cmd = app.add_subcommand("eval", "Verification, identification or the quality study");
  eval_cmd->add_option("--mode", eval.mode, "Evaluation mode")
      ->check(CLI::IsMember({"verify", "identify", "quality-study"}))
      ->capture_default_str();
  eval_cmd->add_option("--method", eval.methods, "image-only, flf or tgfr (repeatable for quality-study)")
      ->check(CLI::IsMember({"image-only", "flf", "tgfr"}));
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Trained bundle or image encoder checkpoint")->required();
  eval_cmd->add_option("--flf-checkpoint", eval.flf_checkpoint, "Separate bundle for the flf method");
  eval_cmd->add_option("--data", eval.data, "Dataset manifest")->required();
  eval_cmd->add_option("--protocol", eval.protocol, "Pair protocol (default: protocol.tsv beside the manifest)");
  eval_cmd->add_option("--captions", eval.captions, "both or probe-only")
      ->check(CLI::IsMember({"both", "probe-only"}))
      ->capture_default_str();
  eval_cmd->add_option("--far", eval.fars, "FAR targets (repeatable)");
  eval_cmd->add_option("--level", eval.level, "Probe quality level 1-4")->check(CLI::Range(1, 4))->capture_default_str();
  eval_cmd->add_option("--out", eval.out, "Directory for report files");
  eval_cmd->add_option("--seed", eval.seed, "Degradation seed")->capture_default_str();
  eval_cmd->add_option("--workers", eval.workers, "Feature-encoding threads")->check(CLI::PositiveNumber);
  eval_cmd->add_flag("--deterministic", eval.deterministic, "Require bitwise-reproducible runs");

  ExtractFlags ext;
  auto* ext_cmd = app.add_subcommand("extract", "Write embeddings as a binary matrix file");
  ext_cmd->add_option("--what", ext.what, "global, caption or fused")
      ->required()
      ->check(CLI::IsMember({"global", "caption", "fused"}));
  ext_cmd->add_option("--checkpoint", ext.checkpoint, "Trained bundle or image encoder checkpoint")->required();
  ext_cmd->add_option("--data", ext.data, "Dataset manifest")->required();
  ext_cmd->add_option("--out", ext.out, "Matrix file")->required();
  ext_cmd->add_option("--ids", ext.ids, "Id index file (default: <out>.ids)");
  ext_cmd->add_option("--fusion", ext.fusion, "Fusion for --what fused")
      ->check(CLI::IsMember({"fcfm", "tgfr", "flf"}))
      ->capture_default_str();
  ext_cmd->add_option("--level", ext.level, "Image quality level 1-4")->check(CLI::Range(1, 4))->capture_default_str();
  ext_cmd->add_option("--seed", ext.seed, "Degradation seed")->capture_default_str();
  ext_cmd->add_option("--workers", ext.workers, "Feature-encoding threads")->check(CLI::PositiveNumber);
  ext_cmd->add_flag("--deterministic", ext.deterministic, "Require bitwise-reproducible runs");

  InitFlags init;
  auto* init_cmd = app.add_subcommand("init-encoder", "Write a frozen image encoder checkpoint");
  init_cmd->add_option("--out", init.out, "Checkpoint path")->required();
  init_cmd->add_option("--config", init.config, "Training config JSON (its image section is used)")
      ->check(CLI::ExistingFile);
  init_cmd->add_option("--seed", init.seed, "Override the encoder seed");

  std::string command;
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    status(out, "", 2);
    return 2;
  }
  command = app.get_subcommands().front()->get_name();

  try {
    if (command == "gen-data") cmd_gen_data(gen, out);
    if (command == "train") cmd_train(train, out);
    if (command == "eval") {
      if (eval.mode != "quality-study" && eval.methods.empty()) eval.methods = {"tgfr"};
      cmd_eval(eval, out, err);
    }
    if (command == "extract") cmd_extract(ext, out);
    if (command == "init-encoder") cmd_init_encoder(init, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    status(out, command, 2);
    return 2;
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    status(out, command, 1, to_string(e.kind()));
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    status(out, command, 1);
    return 1;
  }
  status(out, command, 0);
  return 0;
}

}  // namespace xmal::cli
