#pragma once
// Run configuration: a flat TOML file with [model], [train], [gen] and
// [data] tables, `--set section.key=value` overrides, and RLQFS_SEED.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rlqfs/decode/decode.hpp"
#include "rlqfs/embed/embed.hpp"
#include "rlqfs/model/config.hpp"
#include "rlqfs/ndgrad/optim.hpp"
#include "rlqfs/train/train.hpp"

namespace rlqfs::cli {

// Scalar TOML value kept as written (strings unquoted and unescaped).
struct TomlValue {
  enum class Kind { String, Integer, Real, Bool } kind = Kind::String;
  std::string text;
  std::size_t line = 0;
};

// "section.key" -> value. Supports tables, comments, basic strings,
// integers, reals and booleans; anything else is a ConfigError with a line
// number.
std::map<std::string, TomlValue> parse_toml(const std::string& text);

enum class Preset { Desk, Paper };

struct RunConfig {
  Preset preset = Preset::Desk;
  std::uint64_t seed = 0;

  model::ModelConfig model;
  decode::GenConfig gen;
  train::LossConfig loss;
  train::LoopConfig loop;
  nd::OptimizerConfig optimizer;
  std::string reward = "rouge_l";

  // train-qfs
  std::size_t max_summary_tokens = 64;
  std::size_t min_freq = 2;
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
  std::string init_checkpoint;       // weights to start from (fresh optimizer)
  std::string resume;                // full training state to continue
  std::string embedder_checkpoint;
  std::string embedder_vocab;

  // train-embedder
  double mlm_weight = 1.0;

  // [data]
  std::string train_path;
  std::string eval_path;
  std::string vocab_path;
  std::filesystem::path output_dir = "runs/default";

  // Keys explicitly set by the file or overrides (for preset pin checks).
  std::vector<std::string> explicit_keys;
};

RunConfig preset_config(Preset p);

// Applies one "section.key" value; ConfigError naming the key when unknown
// or malformed.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

// Which command the config feeds; decides which paths are required.
enum class Purpose { TrainQfs, TrainEmbedder };

// File (optional), then `--set` overrides, then RLQFS_SEED. Validates field
// ranges, preset pins and that referenced paths exist.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                          Purpose purpose);

void validate(const RunConfig& cfg, Purpose purpose);

// Every key apply_setting understands.
const std::vector<std::string>& known_keys();

}  // namespace rlqfs::cli
