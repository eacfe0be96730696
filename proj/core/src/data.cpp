#include "xmal/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xmal/error.hpp"

namespace xmal {

namespace fs = std::filesystem;

const char* to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kGallery: return "gallery";
    case Split::kProbe: return "probe";
  }
  return "train";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "gallery") return Split::kGallery;
  if (text == "probe") return Split::kProbe;
  fail(ErrorKind::kMalformed, "unknown split '" + std::string(text) + "'");
}

const FaceCaptionRecord& Dataset::find(const std::string& record_id) const {
  auto it = std::lower_bound(records.begin(), records.end(), record_id,
                             [](const FaceCaptionRecord& r, const std::string& id) { return r.record_id < id; });
  if (it == records.end() || it->record_id != record_id) {
    fail(ErrorKind::kInvalidArgument, "unknown record '" + record_id + "'");
  }
  return *it;
}

std::vector<const FaceCaptionRecord*> Dataset::with_split(Split split) const {
  std::vector<const FaceCaptionRecord*> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

std::vector<std::string> Dataset::all_captions() const {
  std::vector<std::string> out;
  for (const auto& r : records) out.insert(out.end(), r.captions.begin(), r.captions.end());
  return out;
}

namespace {

constexpr std::string_view kCaptionSeparator = "||";

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_on(std::string_view s, std::string_view sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(s.substr(start));
      return out;
    }
    out.emplace_back(s.substr(start, pos - start));
    start = pos + sep.size();
  }
}

void check_field(const std::string& value, const std::string& what) {
  if (value.empty()) fail(ErrorKind::kInvalidArgument, what + " is empty");
  if (value.find_first_of("\t\n\r") != std::string::npos) {
    fail(ErrorKind::kInvalidArgument, what + " contains a tab or newline");
  }
}

std::ofstream open_for_write(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  return out;
}

std::ifstream open_for_read(const fs::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, std::string(what) + " not found: " + path.string());
  return in;
}

}  // namespace

void write_manifest(const std::vector<FaceCaptionRecord>& records, const fs::path& path) {
  std::ostringstream text;
  for (const auto& r : records) {
    check_field(r.record_id, "record id");
    check_field(r.subject_id, "subject id of " + r.record_id);
    check_field(r.image_path.generic_string(), "image path of " + r.record_id);
    if (r.captions.empty()) fail(ErrorKind::kInvalidArgument, "record " + r.record_id + " has no captions");
    text << r.record_id << '\t' << r.subject_id << '\t' << r.image_path.generic_string() << '\t' << to_string(r.split)
         << '\t';
    for (std::size_t i = 0; i < r.captions.size(); ++i) {
      const std::string& c = r.captions[i];
      check_field(trim(c), "caption of " + r.record_id);
      if (c.find(kCaptionSeparator) != std::string::npos || trim(c) != c) {
        fail(ErrorKind::kInvalidArgument, "caption of " + r.record_id + " cannot be stored verbatim");
      }
      text << (i ? " || " : "") << c;
    }
    text << '\n';
  }
  auto out = open_for_write(path);
  out << text.str();
}

Dataset load_manifest(const fs::path& path) {
  auto in = open_for_read(path, "manifest");
  Dataset ds;
  ds.root = path.parent_path();
  std::string line;
  int line_no = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto fields = split_on(line, "\t");
    const std::string where = "manifest line " + std::to_string(line_no);
    if (fields.size() != 5) fail(ErrorKind::kMalformed, where + ": expected 5 tab-separated fields");
    FaceCaptionRecord r;
    r.record_id = trim(fields[0]);
    r.subject_id = trim(fields[1]);
    r.image_path = trim(fields[2]);
    if (r.record_id.empty() || r.subject_id.empty() || r.image_path.empty()) {
      fail(ErrorKind::kMalformed, where + ": empty id or image path");
    }
    try {
      r.split = parse_split(trim(fields[3]));
    } catch (const Error& e) {
      fail(ErrorKind::kMalformed, where + ": " + e.what());
    }
    for (const auto& c : split_on(fields[4], kCaptionSeparator)) {
      std::string t = trim(c);
      if (t.empty()) fail(ErrorKind::kMalformed, where + ": empty caption");
      r.captions.push_back(std::move(t));
    }
    if (!seen.insert(r.record_id).second) {
      fail(ErrorKind::kDuplicate, where + ": duplicate record id '" + r.record_id + "'");
    }
    if (!fs::exists(ds.root / r.image_path)) {
      fail(ErrorKind::kMissingFile, "record " + r.record_id + ": image not found: " + (ds.root / r.image_path).string());
    }
    ds.records.push_back(std::move(r));
  }
  std::sort(ds.records.begin(), ds.records.end(),
            [](const FaceCaptionRecord& a, const FaceCaptionRecord& b) { return a.record_id < b.record_id; });
  return ds;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i].empty()) fail(ErrorKind::kInvalidArgument, "empty vocabulary token");
    if (!index_.emplace(words_[i], kReserved + static_cast<int>(i)).second) {
      fail(ErrorKind::kDuplicate, "duplicate vocabulary token '" + words_[i] + "'");
    }
  }
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  static const std::string reserved[kReserved] = {"[CLS]", "[PAD]", "[UNK]"};
  if (id < 0 || id >= size()) fail(ErrorKind::kInvalidArgument, "token id out of range");
  return id < kReserved ? reserved[id] : words_[static_cast<std::size_t>(id - kReserved)];
}

std::vector<std::string> split_words(std::string_view caption) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : caption) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary build_vocab(const std::vector<std::string>& captions) {
  std::map<std::string, long> counts;
  for (const auto& c : captions) {
    for (auto& w : split_words(c)) ++counts[w];
  }
  std::vector<std::pair<std::string, long>> order(counts.begin(), counts.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(order.size());
  for (auto& [w, n] : order) words.push_back(w);
  return Vocabulary(std::move(words));
}

void save_vocab(const Vocabulary& vocab, const fs::path& path) {
  std::ostringstream text;
  for (const auto& w : vocab.words()) text << w << '\n';
  auto out = open_for_write(path);
  out << text.str();
}

Vocabulary load_vocab(const fs::path& path) {
  auto in = open_for_read(path, "vocabulary");
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) fail(ErrorKind::kMalformed, "vocabulary line " + std::to_string(words.size() + 1) + " is empty");
    words.push_back(line);
  }
  return Vocabulary(std::move(words));
}

TokenSequence tokenize(std::string_view caption, const Vocabulary& vocab, int max_tokens) {
  if (max_tokens < 2) fail(ErrorKind::kInvalidArgument, "max_tokens must be at least 2");
  TokenSequence seq;
  seq.ids.reserve(static_cast<std::size_t>(max_tokens));
  seq.ids.push_back(Vocabulary::kClsId);
  for (const auto& w : split_words(caption)) {
    if (static_cast<int>(seq.ids.size()) == max_tokens) break;
    seq.ids.push_back(vocab.id(w));
  }
  seq.ids.resize(static_cast<std::size_t>(max_tokens), Vocabulary::kPadId);
  return seq;
}

TokenSequence trim_padding(const TokenSequence& tokens) {
  TokenSequence out;
  for (int id : tokens.ids) {
    if (id == Vocabulary::kPadId) break;
    out.ids.push_back(id);
  }
  return out;
}

// ---- synthetic generator ----

bool valid(const AttributeVector& a) {
  return a.hue >= 0 && a.hue < 8 && a.shape >= 0 && a.shape < 4 && a.marking_position >= 0 &&
         a.marking_position < 5 && a.marking_present >= 0 && a.marking_present < 2 && a.background >= 0 &&
         a.background < 3;
}

AttributeVector canonical(AttributeVector a) {
  if (a.marking_present == 0) a.marking_position = 0;
  return a;
}

namespace {

using Words = std::vector<std::string>;

constexpr double kHueDegrees[8] = {0, 30, 55, 120, 175, 220, 275, 320};

const std::vector<Words>& hue_vocab() {
  static const std::vector<Words> v = {
      {"red", "crimson", "scarlet"},     {"orange", "amber", "tangerine"}, {"yellow", "golden", "lemon"},
      {"green", "emerald", "leafy"},     {"teal", "cyan", "turquoise"},    {"blue", "azure", "cobalt"},
      {"purple", "violet", "lilac"},     {"pink", "magenta", "rose"}};
  return v;
}

const std::vector<Words>& shape_vocab() {
  static const std::vector<Words> v = {
      {"round", "circular", "oval"}, {"square", "boxy", "angular"}, {"triangular", "pointed", "tapered"},
      {"diamond", "rhombic", "lozenge"}};
  return v;
}

const std::vector<Words>& position_vocab() {
  static const std::vector<Words> v = {
      {"forehead", "brow"}, {"left cheek"}, {"right cheek"}, {"chin", "jaw"}, {"nose"}};
  return v;
}

const std::vector<Words>& background_vocab() {
  static const std::vector<Words> v = {{"dark", "black", "shadowy"}, {"light", "white", "pale"},
                                       {"gray", "grey", "ashen"}};
  return v;
}

const Words kMarkWords = {"mark", "spot", "scar", "freckle", "mole"};
const Words kUnmarked = {"with no markings", "with clear unmarked skin", "without any blemish"};
const Words kNouns = {"face", "head", "visage"};
const Words kOpenings = {"", "this is", "a photo of", "here is", "the picture shows", "we see"};
const Words kIntensifiers = {"", "", "vivid", "soft"};

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h_deg, double s, double v) {
  const double h = std::fmod(std::fmod(h_deg, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  return {r + m, g + m, b + m};
}

constexpr Rgb kBackgrounds[3] = {{0.12, 0.12, 0.18}, {0.88, 0.88, 0.82}, {0.50, 0.52, 0.50}};
constexpr double kMarkOffsets[5][2] = {{0.0, -0.6}, {-0.5, 0.15}, {0.5, 0.15}, {0.0, 0.68}, {0.0, 0.12}};

bool inside_shape(int shape, double dx, double dy) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= 1.0;
    case 1: return std::max(std::abs(dx), std::abs(dy)) <= 0.85;
    case 2: return dy >= -0.8 && dy <= 0.9 && std::abs(dx) <= 0.95 * (0.9 - dy) / 1.7;
    default: return std::abs(dx) + std::abs(dy) <= 1.05;
  }
}

}  // namespace

const std::vector<std::string>& hue_words(int hue) {
  if (hue < 0 || hue >= 8) fail(ErrorKind::kInvalidArgument, "hue bucket out of range");
  return hue_vocab()[static_cast<std::size_t>(hue)];
}

ImageTensor render_face(const AttributeVector& a, int height, int width, Rng& rng) {
  if (!valid(a)) fail(ErrorKind::kInvalidArgument, "attribute vector out of range");
  if (height < kMinImageSide || width < kMinImageSide) fail(ErrorKind::kShape, "render size too small");
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double side = std::min(height, width);
  const double cx = width / 2.0 + 0.05 * width * u(rng);
  const double cy = height / 2.0 + 0.05 * height * u(rng);
  const double radius = 0.32 * side * (1.0 + 0.08 * u(rng));
  const double brightness = 1.0 + 0.12 * u(rng);
  const Rgb skin = hsv(kHueDegrees[a.hue] + 6.0 * u(rng), 0.7, 0.85 * brightness);
  const Rgb bg = kBackgrounds[a.background];
  const double gradient = 0.05 * u(rng);
  std::normal_distribution<double> noise(0.0, 0.015);

  ImageTensor img = ImageTensor::filled(height, width, 0.0);
  const double eye_r2 = 0.1 * 0.1;
  const double mark_r2 = 0.14 * 0.14;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dx = (x + 0.5 - cx) / radius;
      const double dy = (y + 0.5 - cy) / radius;
      const double shade = gradient * (2.0 * y / height - 1.0);
      Rgb c{bg.r + shade, bg.g + shade, bg.b + shade};
      if (inside_shape(a.shape, dx, dy)) {
        c = skin;
        const double ex = std::abs(dx) - 0.35;
        const double ey = dy + 0.2;
        if (ex * ex + ey * ey <= eye_r2) c = {0.08, 0.08, 0.08};
        if (std::abs(dx) <= 0.25 && std::abs(dy - 0.42) <= 0.04) c = {0.35, 0.1, 0.1};
        if (a.marking_present) {
          const double mx = dx - kMarkOffsets[a.marking_position][0];
          const double my = dy - kMarkOffsets[a.marking_position][1];
          if (mx * mx + my * my <= mark_r2) c = {0.25, 0.1, 0.05};
        }
      }
      img.at(y, x, 0) = c.r + noise(rng);
      img.at(y, x, 1) = c.g + noise(rng);
      img.at(y, x, 2) = c.b + noise(rng);
    }
  }
  return clamp01(std::move(img));
}

std::string describe(const AttributeVector& a, Rng& rng) {
  if (!valid(a)) fail(ErrorKind::kInvalidArgument, "attribute vector out of range");
  // Slots: 0 hue, 1 shape, 2 marking, 3 background. Name 3 or 4 of them.
  std::discrete_distribution<int> count_dist({0.4, 0.6});
  const int count = 3 + count_dist(rng);
  std::vector<int> slots = {0, 1, 2, 3};
  std::shuffle(slots.begin(), slots.end(), rng);
  slots.resize(static_cast<std::size_t>(count));
  auto named = [&](int s) { return std::find(slots.begin(), slots.end(), s) != slots.end(); };

  std::vector<std::string> head;
  const std::string& opening = pick(kOpenings, rng);
  if (!opening.empty()) head.push_back(opening);
  head.push_back("a");
  if (named(0)) {
    const std::string& intensity = pick(kIntensifiers, rng);
    if (!intensity.empty()) head.push_back(intensity);
    head.push_back(pick(hue_vocab()[static_cast<std::size_t>(a.hue)], rng));
  }
  if (named(1)) head.push_back(pick(shape_vocab()[static_cast<std::size_t>(a.shape)], rng));
  head.push_back(pick(kNouns, rng));

  std::vector<std::string> clauses;
  if (named(2)) {
    if (a.marking_present) {
      const std::string& where = pick(position_vocab()[static_cast<std::size_t>(a.marking_position)], rng);
      std::bernoulli_distribution near(0.5);
      clauses.push_back((near(rng) ? "with a " : "that has a ") + pick(kMarkWords, rng) +
                        (near(rng) ? " on the " : " near the ") + where);
    } else {
      clauses.push_back(pick(kUnmarked, rng));
    }
  }
  if (named(3)) {
    const std::string& shade = pick(background_vocab()[static_cast<std::size_t>(a.background)], rng);
    const Words forms = {"against a " + shade + " background", "on a " + shade + " backdrop",
                         "in front of a " + shade + " wall"};
    clauses.push_back(pick(forms, rng));
  }
  std::shuffle(clauses.begin(), clauses.end(), rng);

  std::string out;
  for (const auto& w : head) out += (out.empty() ? "" : " ") + w;
  for (std::size_t i = 0; i < clauses.size(); ++i) {
    out += (i == 1 ? " and " : " ") + clauses[i];
  }
  std::bernoulli_distribution period(0.5);
  if (period(rng)) out += ".";
  return out;
}

namespace {

std::string padded(int value, int width) {
  std::string s = std::to_string(value);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

GeneratedDataset generate_synthetic(const GeneratorConfig& config, const fs::path& out_dir) {
  if (config.subjects < 1 || config.images_per_subject < 1 || config.captions_per_image < 1) {
    fail(ErrorKind::kInvalidArgument, "subjects, images per subject and captions per image must be positive");
  }
  if (config.subjects > kIdentityCapacity) {
    fail(ErrorKind::kExhausted, "attribute space holds " + std::to_string(kIdentityCapacity) +
                                    " distinct identities, requested " + std::to_string(config.subjects));
  }
  std::vector<AttributeVector> identities;
  for (int h = 0; h < 8; ++h)
    for (int s = 0; s < 4; ++s)
      for (int b = 0; b < 3; ++b)
        for (int m = 0; m < 6; ++m) {
          identities.push_back(m == 5 ? AttributeVector{h, s, 0, 0, b} : AttributeVector{h, s, m, 1, b});
        }
  Rng pick_rng = make_rng(config.seed, {stream::kGenerate, 0});
  std::shuffle(identities.begin(), identities.end(), pick_rng);
  identities.resize(static_cast<std::size_t>(config.subjects));

  fs::create_directories(out_dir / "images");
  const int n = config.images_per_subject;
  const int probes = std::min(n - 1, std::max(1, n / 4));
  std::vector<FaceCaptionRecord> records;
  for (int s = 0; s < config.subjects; ++s) {
    const std::string subject = "s" + padded(s, 4);
    for (int j = 0; j < n; ++j) {
      FaceCaptionRecord r;
      r.record_id = subject + "_" + padded(j, 2);
      r.subject_id = subject;
      r.image_path = fs::path("images") / (r.record_id + ".ppm");
      r.split = j == 0 ? Split::kGallery : (j <= probes ? Split::kProbe : Split::kTrain);
      const auto su = static_cast<std::uint64_t>(s);
      const auto ju = static_cast<std::uint64_t>(j);
      Rng image_rng = make_rng(config.seed, {stream::kGenerate, 1, su, ju});
      write_ppm(render_face(identities[static_cast<std::size_t>(s)], config.height, config.width, image_rng),
                out_dir / r.image_path);
      Rng text_rng = make_rng(config.seed, {stream::kGenerate, 2, su, ju});
      for (int c = 0; c < config.captions_per_image; ++c) {
        r.captions.push_back(describe(identities[static_cast<std::size_t>(s)], text_rng));
      }
      records.push_back(std::move(r));
    }
  }

  write_manifest(records, out_dir / "manifest.tsv");
  GeneratedDataset out;
  out.dataset = load_manifest(out_dir / "manifest.tsv");
  out.vocab = build_vocab(out.dataset.all_captions());
  save_vocab(out.vocab, out_dir / "vocab.txt");
  write_protocol(make_protocol(out.dataset), out_dir / "protocol.tsv");
  nlohmann::json attrs = nlohmann::json::array();
  for (int s = 0; s < config.subjects; ++s) {
    const auto& a = identities[static_cast<std::size_t>(s)];
    attrs.push_back({{"subject", "s" + padded(s, 4)},
                     {"hue", a.hue},
                     {"shape", a.shape},
                     {"marking_position", a.marking_position},
                     {"marking_present", a.marking_present},
                     {"background", a.background}});
  }
  auto f = open_for_write(out_dir / "attributes.json");
  f << attrs.dump(2) << '\n';
  out.attributes = std::move(identities);
  return out;
}

// ---- protocol ----

PairProtocol make_protocol(const Dataset& dataset) {
  PairProtocol out;
  const auto gallery = dataset.with_split(Split::kGallery);
  for (const auto* p : dataset.with_split(Split::kProbe)) {
    for (const auto* g : gallery) out.push_back({p->record_id, g->record_id, p->subject_id == g->subject_id});
  }
  return out;
}

void write_protocol(const PairProtocol& protocol, const fs::path& path) {
  std::ostringstream text;
  for (const auto& p : protocol) {
    check_field(p.probe_id, "probe id");
    check_field(p.reference_id, "reference id");
    text << p.probe_id << '\t' << p.reference_id << '\t' << (p.genuine ? 'G' : 'I') << '\n';
  }
  auto out = open_for_write(path);
  out << text.str();
}

PairProtocol load_protocol(const fs::path& path) {
  auto in = open_for_read(path, "protocol");
  PairProtocol out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto f = split_on(line, "\t");
    const std::string flag = f.size() == 3 ? trim(f[2]) : "";
    if (f.size() != 3 || (flag != "G" && flag != "I") || trim(f[0]).empty() || trim(f[1]).empty()) {
      fail(ErrorKind::kMalformed, "protocol line " + std::to_string(line_no) + ": expected probe, reference, G|I");
    }
    out.push_back({trim(f[0]), trim(f[1]), flag == "G"});
  }
  return out;
}

void validate_protocol(const PairProtocol& protocol, const Dataset& dataset) {
  for (const auto& p : protocol) {
    if (p.probe_id == p.reference_id) fail(ErrorKind::kInvalidArgument, "self-pair " + p.probe_id);
    const auto& a = dataset.find(p.probe_id);
    const auto& b = dataset.find(p.reference_id);
    if ((a.subject_id == b.subject_id) != p.genuine) {
      fail(ErrorKind::kInvalidArgument, "pair " + p.probe_id + " / " + p.reference_id + " has the wrong G/I flag");
    }
  }
}

}  // namespace xmal
