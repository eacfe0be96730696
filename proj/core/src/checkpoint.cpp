#include "xmal/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "xmal/error.hpp"

namespace xmal {

namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail(ErrorKind::kCorruptFile, "checkpoint truncated");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const ad::Matrix& Checkpoint::at(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) fail(ErrorKind::kConfigMismatch, "checkpoint has no array '" + name + "'");
  return it->second;
}

void Checkpoint::store(const nn::ParamList& params) {
  for (const auto& p : params) arrays[p.name] = p.var.value();
}

void Checkpoint::store(const nn::BufferList& buffers) {
  for (const auto& b : buffers) arrays[b.name] = *b.value;
}

void Checkpoint::store(const std::string& prefix, const optim::OptimizerState& state) {
  arrays[prefix + "/step"] = ad::Matrix::Constant(1, 1, static_cast<double>(state.step));
  for (const auto& [name, m] : state.slots) arrays[prefix + "/" + name] = m;
}

void Checkpoint::restore(const nn::ParamList& params) const {
  for (const auto& p : params) {
    const ad::Matrix& m = at(p.name);
    if (m.rows() != p.var.rows() || m.cols() != p.var.cols()) {
      fail(ErrorKind::kConfigMismatch, "shape mismatch for '" + p.name + "': stored " +
                                           std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                                           ", expected " + std::to_string(p.var.rows()) + "x" +
                                           std::to_string(p.var.cols()));
    }
    auto var = p.var;
    var.mutable_value() = m;
  }
}

void Checkpoint::restore(const nn::BufferList& buffers) const {
  for (const auto& b : buffers) {
    const ad::Matrix& m = at(b.name);
    if (m.rows() != b.value->rows() || m.cols() != b.value->cols()) {
      fail(ErrorKind::kConfigMismatch, "shape mismatch for buffer '" + b.name + "'");
    }
    *b.value = m;
  }
}

optim::OptimizerState Checkpoint::restore_optimizer(const std::string& prefix) const {
  optim::OptimizerState s;
  s.step = static_cast<long>(at(prefix + "/step")(0, 0));
  const std::string head = prefix + "/";
  for (const auto& [name, m] : arrays) {
    if (name.rfind(head, 0) == 0 && name != prefix + "/step") s.slots[name.substr(head.size())] = m;
  }
  return s;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string config = ckpt.config.dump();
  put_u64(out, config.size());
  out += config;
  put_u64(out, ckpt.arrays.size());
  for (const auto& [name, m] : ckpt.arrays) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u8(out, 0);
    put_u32(out, 2);
    put_u64(out, static_cast<std::uint64_t>(m.rows()));
    put_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(out, m(r, c));
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.str(4) != std::string(kCheckpointMagic, 4)) fail(ErrorKind::kCorruptFile, "bad checkpoint magic");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kCorruptFile, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::uint64_t config_len = in.u64();
  const std::string config = in.str(config_len);
  try {
    ckpt.config = nlohmann::json::parse(config);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptFile, std::string("checkpoint config block unreadable: ") + e.what());
  }
  const std::uint64_t count = in.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = in.u32();
    std::string name = in.str(name_len);
    const std::uint8_t dtype = in.u8();
    if (dtype != 0) fail(ErrorKind::kCorruptFile, "unknown dtype in array '" + name + "'");
    const std::uint32_t ndim = in.u32();
    if (ndim > 2) fail(ErrorKind::kCorruptFile, "array '" + name + "' has more than 2 dimensions");
    std::uint64_t rows = 1;
    std::uint64_t cols = 1;
    if (ndim == 1) cols = in.u64();
    if (ndim == 2) {
      rows = in.u64();
      cols = in.u64();
    }
    if (rows > (1ULL << 31) || cols > (1ULL << 31)) fail(ErrorKind::kCorruptFile, "array '" + name + "' has absurd dimensions");
    in.need(rows * cols * 8);
    ad::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = in.f64();
    }
    ckpt.arrays.emplace(std::move(name), std::move(m));
  }
  if (!in.done()) fail(ErrorKind::kCorruptFile, "trailing bytes after checkpoint arrays");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot write checkpoint " + path.string());
    const std::string bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::kIo, "short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, "checkpoint not found: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t checksum(const nn::ParamList& params) {
  std::vector<const nn::NamedParam*> sorted;
  for (const auto& p : params) sorted.push_back(&p);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->name < b->name; });
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : sorted) {
    h = fnv1a(p->name.data(), p->name.size(), h);
    const std::int64_t shape[2] = {p->var.rows(), p->var.cols()};
    h = fnv1a(shape, sizeof(shape), h);
    const auto& m = p->var.value();
    h = fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
  }
  return h;
}

}  // namespace xmal
