#pragma once
// Dual-encoder passage embedder trained on the cluster hypothesis: passages
// answering the same query should embed close together.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rlqfs/corpus/forum.hpp"
#include "rlqfs/corpus/vocab.hpp"
#include "rlqfs/model/checkpoint.hpp"
#include "rlqfs/model/transformer.hpp"
#include "rlqfs/ndgrad/optim.hpp"
#include "rlqfs/rewards/rewards.hpp"

namespace rlqfs::embed {

using model::PassageEncoder;
using nd::Tensor;
using nd::TokenId;

// A positive pair: two passages answering the query `query_id`. Both id
// sequences begin with the representation token.
struct PositivePair {
  std::string query_id;
  std::vector<TokenId> p_ids;
  std::vector<TokenId> q_ids;
};

struct PassagePair {
  std::vector<TokenId> p_ids;
  std::vector<TokenId> q_ids;
  int label = 0;
  std::size_t p_source = 0;  // index of the positive pair p came from
  std::size_t q_source = 0;  // likewise for q
};

// REPR followed by the passage tokens, cut to max_positions.
std::vector<TokenId> passage_ids(std::string_view text, const corpus::Vocabulary& vocab, std::size_t max_positions);
std::vector<PositivePair> tokenize_pairs(const std::vector<corpus::PairRecord>& records,
                                         const corpus::Vocabulary& vocab, std::size_t max_positions);

// sigmoid(e_p . e_q), as a scalar tensor on the tape.
Tensor similarity(const Tensor& e_p, const Tensor& e_q);
double similarity(std::span<const double> e_p, std::span<const double> e_q);
// Binary cross-entropy of a probability y_hat in (0,1) against y.
Tensor pe_loss(const Tensor& y_hat, int y);
// Same loss from the pre-sigmoid dot product (numerically stable form).
Tensor pe_loss_from_logit(const Tensor& dot, int y);

// Each positive (p_i, q_i) is followed by one negative (p_i, q_j) where j is
// drawn uniformly among pairs with a different query id.
std::vector<PassagePair> in_batch_negatives(std::span<const PositivePair> batch, nd::Rng& rng);

struct MlmSample {
  std::vector<TokenId> ids;         // corrupted input
  std::vector<TokenId> targets;     // original id at selected positions, -1 elsewhere
  std::vector<std::uint8_t> mask;   // 1 at selected positions
  std::size_t selected() const;
};

inline constexpr double kMlmSelectProb = 0.15;
inline constexpr double kMlmMaskShare = 0.8;
inline constexpr double kMlmRandomShare = 0.1;

// Selects non-special positions with probability 0.15; a selected token
// becomes MASK (80%), a random non-special token (10%) or stays (10%).
MlmSample mlm_corrupt(std::span<const TokenId> ids, std::size_t vocab_size, nd::Rng& rng);

struct EmbedLossConfig {
  double mlm_weight = 1.0;
  double clip_norm = 1.0;
};

struct EmbedderState {
  EmbedderState(const model::ModelConfig& cfg, const nd::OptimizerConfig& opt, std::uint64_t seed,
                std::uint64_t vocab_hash);

  PassageEncoder encoder;
  nd::Optimizer optimizer;
  nd::Rng rng;
  std::uint64_t seed = 0;
  std::uint64_t vocab_hash = 0;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double best_test_loss = std::numeric_limits<double>::infinity();
};

struct EmbedStepReport {
  std::uint64_t step = 0;
  double pe_loss = 0.0;
  double mlm_loss = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  std::size_t pairs = 0;

  friend bool operator==(const EmbedStepReport&, const EmbedStepReport&) = default;
};

// One update: in-batch negatives, every distinct passage encoded once by the
// shared encoder, mean pe_loss plus mlm_weight times the mean masked-token
// cross-entropy. Throws ContractError for batches smaller than 2 and
// NumericError on a non-finite loss.
EmbedStepReport embedder_train_step(EmbedderState& state, std::span<const PositivePair> batch,
                                    const EmbedLossConfig& cfg);

std::string metrics_json(const EmbedStepReport& r);

struct EmbedLoopConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 2;
  std::size_t max_steps = 0;  // 0 = epochs only
};

// Epoch loop over positive pairs with a seed-derived permutation per epoch
// (resumable like the summarizer loop). `on_epoch` fires after each full
// epoch; either callback returning false stops training.
void run_embedder_training(EmbedderState& state, std::span<const PositivePair> pairs, const EmbedLossConfig& cfg,
                           const EmbedLoopConfig& loop,
                           const std::function<bool(const EmbedStepReport&)>& on_step,
                           const std::function<bool(std::uint64_t epoch)>& on_epoch = {});

struct ClusterSpec {
  std::size_t topic_words = 12;   // private words per cluster
  std::size_t filler_words = 40;  // shared across clusters
  std::size_t min_len = 12;
  std::size_t max_len = 20;
  double topic_share = 0.5;  // probability a position draws a topic word
};

struct ClusterPassage {
  std::size_t cluster = 0;
  std::string text;
};

struct ClusterCorpus {
  std::vector<ClusterPassage> train;
  std::vector<ClusterPassage> test;
  std::size_t n_clusters = 0;
};

// `per_cluster` passages per cluster; the last `test_per_cluster` of each go
// to the held-out split.
// Distinct passages of `pairs`, grouped by query id (first-seen order).
std::vector<ClusterPassage> passages_by_query(const std::vector<corpus::PairRecord>& pairs);

ClusterCorpus make_synthetic_clusters(std::size_t n_clusters, std::size_t per_cluster, std::size_t test_per_cluster,
                                      const ClusterSpec& spec, nd::Rng& rng);

// Every within-cluster pair (i < j), query id "cluster-<k>".
std::vector<corpus::PairRecord> cluster_positive_pairs(std::span<const ClusterPassage> passages);

// Mean token-set Jaccard overlap within and across clusters.
struct OverlapStats {
  double intra = 0.0;
  double inter = 0.0;
};
OverlapStats lexical_overlap(std::span<const ClusterPassage> passages);

struct Separation {
  double intra_cos = 0.0;
  double inter_cos = 0.0;
  double separation() const { return intra_cos - inter_cos; }
};
Separation cluster_separation(const PassageEncoder& enc, std::span<const ClusterPassage> passages,
                              const corpus::Vocabulary& vocab);

// Mean pe_loss over every within-cluster pair and an equal number of
// cross-cluster pairs chosen by `seed`.
double cluster_pair_loss(const PassageEncoder& enc, std::span<const ClusterPassage> passages,
                         const corpus::Vocabulary& vocab, std::uint64_t seed);

// Reward-side adapter: text -> passage embedding.
class PassageTextEmbedder : public rewards::TextEmbedder {
 public:
  PassageTextEmbedder(PassageEncoder encoder, corpus::Vocabulary vocab);
  std::vector<double> embed(std::string_view text) const override;
  std::size_t dim() const override { return encoder_.config().d_model; }

 private:
  PassageEncoder encoder_;
  corpus::Vocabulary vocab_;
};

model::Checkpoint to_checkpoint(const EmbedderState& state);
EmbedderState from_checkpoint(const model::Checkpoint& ckpt, const nd::OptimizerConfig& opt);
void save_embedder_state(const std::filesystem::path& path, const EmbedderState& state);
// Throws DataError when the stored vocabulary hash differs from `vocab_hash`.
EmbedderState load_embedder_state(const std::filesystem::path& path, std::uint64_t vocab_hash,
                                  const nd::OptimizerConfig& opt = {});

}  // namespace rlqfs::embed
