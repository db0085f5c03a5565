#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rlqfs/cli/config.hpp"

namespace rlqfs::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// Runs `body`, printing any library error to `err` and mapping it to an
// exit code (config 2, data/format 3, numeric 4, anything else 1).
int run_guarded(std::ostream& err, const std::function<int()>& body);

struct TrainArgs {
  std::optional<std::filesystem::path> config;
  std::vector<std::string> overrides;
};

int cmd_train_qfs(const TrainArgs& args, std::ostream& out);
int cmd_train_embedder(const TrainArgs& args, std::ostream& out);

struct GenerateArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path vocab;
  std::filesystem::path input;
  std::filesystem::path output;
  std::string preset = "desk";
  std::optional<std::size_t> beam;
  std::optional<std::size_t> min_tokens;
  std::optional<std::size_t> max_tokens;
  bool greedy = false;
};
int cmd_generate(const GenerateArgs& args, std::ostream& out);

struct ScoreArgs {
  std::filesystem::path references;
  std::filesystem::path hypotheses;
  std::string metrics = "rouge,bleu,length";
  std::optional<std::filesystem::path> output;
};
int cmd_score(const ScoreArgs& args, std::ostream& out);

struct IngestArgs {
  std::filesystem::path dump;
  std::string test_forum;
  std::filesystem::path output_dir;
};
int cmd_ingest(const IngestArgs& args, std::ostream& out);

struct BenchArgs {
  std::vector<std::size_t> lengths{16, 32, 64, 128, 256, 512};
  std::optional<std::filesystem::path> output;
};
int cmd_bench_complexity(const BenchArgs& args, std::ostream& out);

// Least-squares slope of log(y) on log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

struct SynthArgs {
  std::string kind;  // "qfs" or "clusters"
  std::uint64_t seed = 0;
  std::size_t docs = 8;
  std::size_t queries_per_doc = 4;
  std::size_t clusters = 8;
  std::size_t per_cluster = 50;
  std::size_t test_per_cluster = 10;
  std::filesystem::path output_dir;
};
int cmd_synth(const SynthArgs& args, std::ostream& out);

}  // namespace rlqfs::cli
