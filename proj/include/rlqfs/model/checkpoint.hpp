#pragma once
// Binary checkpoint container.
//
// Layout (all integers little-endian, reals as IEEE-754 binary64 LE):
//   magic "RLQFSCKP" | u32 format version | str kind | ModelConfig
//   | u64 vocab hash | u64 seed | u64 step
//   | u32 n_meta  { str key, str value }*
//   | u32 n_tensors { str name, u32 rank, u64 dim*, f64 payload* }*
//   | u64 FNV-1a checksum of every preceding byte
// where str = u32 byte length followed by UTF-8 bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rlqfs/model/config.hpp"
#include "rlqfs/ndgrad/optim.hpp"

namespace rlqfs::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string kind;  // "seq2seq" or "passage_encoder"
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::map<std::string, std::string> meta;
  nd::ParamList tensors;

  const nd::Tensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws FormatError carrying the byte offset of the first bad field.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Adds "optimizer.m.<name>" / "optimizer.v.<name>" tensors and the step count.
void append_optimizer_state(Checkpoint& ckpt, const nd::ParamList& params, const nd::Optimizer& opt);
void restore_optimizer_state(const Checkpoint& ckpt, const nd::ParamList& params, nd::Optimizer& opt);
// Model weights named like `params`; DataError when one is missing.
nd::ParamList stored_weights(const Checkpoint& ckpt, const nd::ParamList& params);

// Bit-exact text form of a double for metadata values.
std::string encode_real(double x);
double decode_real(const std::string& s);
const std::string& require_meta(const Checkpoint& ckpt, const std::string& key);

}  // namespace rlqfs::model
