#pragma once

// Binary checkpoint container.
//
//   bytes 0..3   magic "XMAL"
//   u32          format version
//   u64          config length n, followed by n bytes of JSON text
//   u64          array count
//   per array:   u32 name length, name bytes, u8 dtype (0 = f64),
//                u32 ndim, ndim x u64 dims, row-major data
//
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "xmal/nn.hpp"
#include "xmal/optim.hpp"

namespace xmal {

inline constexpr char kCheckpointMagic[4] = {'X', 'M', 'A', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, ad::Matrix> arrays;

  bool has(const std::string& name) const { return arrays.count(name) != 0; }
  const ad::Matrix& at(const std::string& name) const;

  /// Copies every parameter value in, under its registered name.
  void store(const nn::ParamList& params);
  void store(const nn::BufferList& buffers);
  void store(const std::string& prefix, const optim::OptimizerState& state);

  /// Copies stored values into parameters; shapes must agree.
  void restore(const nn::ParamList& params) const;
  void restore(const nn::BufferList& buffers) const;
  optim::OptimizerState restore_optimizer(const std::string& prefix) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over names, shapes and raw value bytes; order-independent of
/// insertion because the list is walked in name order.
std::uint64_t checksum(const nn::ParamList& params);
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace xmal
