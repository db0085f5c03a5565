#pragma once
// Supervised and self-critical policy-gradient training of the summarizer.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rlqfs/corpus/qfs.hpp"
#include "rlqfs/corpus/vocab.hpp"
#include "rlqfs/decode/decode.hpp"
#include "rlqfs/model/checkpoint.hpp"
#include "rlqfs/ndgrad/optim.hpp"
#include "rlqfs/rewards/rewards.hpp"

namespace rlqfs::train {

using decode::GenConfig;
using decode::Trajectory;
using model::Seq2SeqModel;
using nd::Tensor;
using nd::TokenId;

// A tokenized training/evaluation example.
struct Example {
  std::string id;
  std::vector<TokenId> encoder_ids;  // BOS query SEP document EOS
  std::vector<TokenId> gold_ids;     // summary tokens followed by EOS
  std::string reference;             // tokenizer-normalized summary text
};

// Summaries longer than max_summary_tokens are cut (EOS is kept).
std::vector<Example> prepare_examples(const std::vector<corpus::QfsExample>& raw, const corpus::Vocabulary& vocab,
                                      std::size_t max_positions, std::size_t max_summary_tokens);

struct LossConfig {
  double eta = 1.0;  // 1 = pure MLE, 0 = pure policy gradient
  rewards::RewardSpec reward_spec{{{rewards::RewardComponent::RougeL, 1.0}}};
  double clip_norm = 1.0;  // <= 0 disables clipping

  void validate() const;
  bool uses_reward() const { return eta < 1.0; }
};

// Summed token cross-entropy of teacher-forced logits [n x V] against gold
// (PAD targets ignored).
Tensor mle_loss(const Tensor& pass1_logits, std::span<const TokenId> gold_ids);

// R(sampled) - R(greedy) against `reference`.
double self_critical_advantage(const rewards::RewardSpec& spec, std::string_view reference,
                               std::string_view sampled_text, std::string_view greedy_text,
                               const rewards::TextEmbedder* embedder = nullptr);

// -advantage * sum of step log-probs; the advantage is a constant.
Tensor pg_loss(const Trajectory& traj, double advantage);

Tensor mixed_loss(const Tensor& mle, const Tensor& pg, double eta);

struct TrainState {
  TrainState(const model::ModelConfig& cfg, const nd::OptimizerConfig& opt, std::uint64_t seed,
             std::uint64_t vocab_hash);

  Seq2SeqModel model;
  nd::Optimizer optimizer;
  nd::Rng rng;
  std::uint64_t seed = 0;
  std::uint64_t vocab_hash = 0;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double best_eval = -std::numeric_limits<double>::infinity();
};

struct StepReport {
  std::uint64_t step = 0;
  double mle_loss = 0.0;  // batch means
  double pg_loss = 0.0;
  double total = 0.0;
  double mean_reward = 0.0;
  double mean_baseline_reward = 0.0;
  double mean_advantage = 0.0;
  double mean_traj_len = 0.0;
  double grad_norm = 0.0;

  friend bool operator==(const StepReport&, const StepReport&) = default;
};

// One optimizer update over `batch`. The sampled trajectory comes from
// two_pass_decode over the gold horizon; the baseline is a greedy decode
// with the same horizon. Throws NumericError (with the example id) on a
// non-finite loss, before any parameter changes.
StepReport train_step(TrainState& state, std::span<const Example> batch, const LossConfig& loss,
                      const GenConfig& gen, const rewards::TextEmbedder* embedder = nullptr,
                      const corpus::Vocabulary* vocab = nullptr);

// One JSON object per line: step, mle_loss, pg_loss, total, mean_reward,
// mean_advantage, mean_traj_len (plus grad_norm, mean_baseline_reward).
std::string metrics_json(const StepReport& r);

enum class EvalDecoder { Beam, Greedy };

struct EvalReport {
  double rouge1 = 0.0;  // F x 100
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double mean_length = 0.0;  // words
  std::size_t count = 0;
  std::vector<std::string> generations;
};

EvalReport evaluate(const Seq2SeqModel& model, std::span<const Example> examples, const corpus::Vocabulary& vocab,
                    const GenConfig& gen, EvalDecoder decoder = EvalDecoder::Beam);

// Scores aligned text pairs (F x 100, mean hypothesis length).
EvalReport score_texts(std::span<const std::string> references, std::span<const std::string> hypotheses);

// Fraction of gold tokens that are the argmax of the teacher-forced logits.
double teacher_forced_accuracy(const Seq2SeqModel& model, std::span<const Example> examples);

struct LoopConfig {
  std::size_t batch_size = 8;
  std::size_t epochs = 5;
  std::size_t max_steps = 0;  // 0 = epochs only
  // Linear ramp of sampling_mix_prob from 0 over this many steps (0 = none).
  std::size_t mix_ramp_steps = 0;
};

// sampling_mix_prob in effect at `step`.
double mix_prob_at(const GenConfig& gen, const LoopConfig& loop, std::uint64_t step);

// Runs steps until state.step reaches the budget. Batches follow a
// per-epoch permutation derived from state.seed, so a run resumed from a
// checkpoint visits the same batches as an uninterrupted one.
// `on_step` returning false stops early.
void run_training(TrainState& state, std::span<const Example> examples, const LossConfig& loss,
                  const GenConfig& gen, const LoopConfig& loop, const rewards::TextEmbedder* embedder,
                  const corpus::Vocabulary& vocab, const std::function<bool(const StepReport&)>& on_step);

model::Checkpoint to_checkpoint(const TrainState& state);
TrainState from_checkpoint(const model::Checkpoint& ckpt, const nd::OptimizerConfig& opt);
void save_train_state(const std::filesystem::path& path, const TrainState& state);
// Throws DataError when the stored vocabulary hash differs from `vocab_hash`.
TrainState load_train_state(const std::filesystem::path& path, std::uint64_t vocab_hash,
                            const nd::OptimizerConfig& opt);

}  // namespace rlqfs::train
