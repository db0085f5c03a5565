#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rlqfs/model/transformer.hpp"

namespace rlqfs::decode {

using model::Mask;
using model::Seq2SeqModel;
using nd::Tensor;
using nd::TokenId;

enum class Termination { Eos, MaxLength };

// One generation episode. `step_logprobs` is a rank-1 tensor with one entry
// per generated token; it carries the tape when produced by two_pass_decode.
struct Trajectory {
  std::vector<TokenId> token_ids;
  Tensor step_logprobs;
  Termination terminated_by = Termination::MaxLength;

  std::size_t size() const { return token_ids.size(); }
  // Checks the length/sign/termination invariants; throws ContractError.
  void check() const;
};

struct GenConfig {
  std::size_t beam_size = 4;
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 64;
  double gumbel_temperature = 1.0;
  double sampling_mix_prob = 0.5;
  // Score = sum log p / length^length_penalty.
  double length_penalty = 0.75;
  // Ancestral sampling temperature; 0 means argmax.
  double sample_temperature = 1.0;
  // Never generated.
  std::vector<TokenId> banned_ids{0, 1};

  void validate() const;

  static GenConfig desk() { return {}; }
  static GenConfig paper();
};

// Encoder output plus its padding mask.
struct Source {
  Tensor memory;
  Mask valid;
};

// Runs the encoder off the tape (inference). Training builds Source from
// model.encode directly so gradients reach the encoder.
Source encode_source(const Seq2SeqModel& model, std::span<const TokenId> encoder_ids);

// Argmax decoding. EOS is unavailable while fewer than min_tokens tokens
// would result; ties go to the lower token id.
Trajectory greedy_decode(const Seq2SeqModel& model, const Source& src, const GenConfig& gen);
Trajectory greedy_decode(const Seq2SeqModel& model, std::span<const TokenId> encoder_ids, const GenConfig& gen);

// Free-running ancestral sampling under the same length constraints.
Trajectory sample_decode(const Seq2SeqModel& model, const Source& src, const GenConfig& gen, nd::Rng& rng);
Trajectory sample_decode(const Seq2SeqModel& model, std::span<const TokenId> encoder_ids, const GenConfig& gen,
                         nd::Rng& rng);

struct GumbelSample {
  Tensor weights;  // [V], differentiable w.r.t. the logits
  TokenId token = 0;
};

// softmax((logits + g) / temperature) with g i.i.d. standard Gumbel; `token`
// is argmax(logits + g), an exact draw from softmax(logits).
GumbelSample gumbel_softmax(const Tensor& logits, double temperature, nd::Rng& rng);
// Same with caller-supplied noise (for gradient checks).
GumbelSample gumbel_softmax(const Tensor& logits, double temperature, std::span<const double> noise);

struct TwoPassResult {
  Tensor pass1_logits;  // teacher-forced, [n x V]
  Tensor pass2_logits;  // conditioned on the mixed inputs, [n x V]
  Trajectory trajectory;
  // mixed_inputs[t]: pass-2 input at position t+1 was the Gumbel mixture
  // (rather than the gold embedding).
  std::vector<std::uint8_t> mixed_inputs;
};

// Scheduled-sampling decode over the gold horizon. Pass 1 is teacher forced;
// at each step a token is drawn from the pass-1 distribution via the Gumbel
// trick and its soft embedding (mixture over the embedding table) replaces
// the next gold input with probability sampling_mix_prob. Pass 2 runs over
// those inputs and supplies the sampled tokens' log-probabilities. The tape
// spans both passes.
TwoPassResult two_pass_decode(const Seq2SeqModel& model, const Source& src, std::span<const TokenId> gold_ids,
                              const GenConfig& gen, nd::Rng& rng, model::ForwardCtx ctx = {});

// Length-normalized beam search; finished hypotheses are frozen, ties are
// broken by lower token id and then lower beam index.
std::vector<TokenId> beam_search(const Seq2SeqModel& model, const Source& src, const GenConfig& gen);
std::vector<TokenId> beam_search(const Seq2SeqModel& model, std::span<const TokenId> encoder_ids,
                                 const GenConfig& gen);

// Length-normalized score of `tokens` under the model (as ranked by beam search).
double sequence_score(const Seq2SeqModel& model, const Source& src, std::span<const TokenId> tokens,
                      const GenConfig& gen);

enum class DecodeMode { Sequential, TwoPass };

// Attention-score evaluations the decoder performs to produce n tokens:
// Sequential re-runs the decoder on every prefix, TwoPass runs it twice over
// the full length. Counted by instrumenting the attention kernel.
std::uint64_t count_decode_cost(DecodeMode mode, std::size_t n);
// One decoder pass at length n (the unit TwoPass doubles).
std::uint64_t count_single_pass_cost(std::size_t n);

}  // namespace rlqfs::decode
