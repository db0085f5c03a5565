#pragma once
// Pre-norm transformer encoder-decoder (the summarization policy) and an
// encoder-only network with a masked-token head (the passage embedder).
// Inputs are unbatched: one token sequence per call, tensors are [T x d].

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rlqfs/model/config.hpp"
#include "rlqfs/ndgrad/ops.hpp"
#include "rlqfs/ndgrad/optim.hpp"

namespace rlqfs::model {

using nd::Tensor;
using nd::TokenId;
using Mask = std::vector<std::uint8_t>;

// Dropout source for a forward pass; a null rng or train == false means eval.
struct ForwardCtx {
  bool train = false;
  nd::Rng* rng = nullptr;

  bool dropout_active() const { return train && rng != nullptr; }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayer {
  LayerNormParams ln_attn;
  AttentionParams self_attn;
  LayerNormParams ln_ffn;
  FeedForwardParams ffn;
};

struct DecoderLayer {
  LayerNormParams ln_self;
  AttentionParams self_attn;
  LayerNormParams ln_cross;
  AttentionParams cross_attn;
  LayerNormParams ln_ffn;
  FeedForwardParams ffn;
};

// Returns a copy of `table` with `new_len` rows: the first rows verbatim,
// the rest drawn from N(0, init_std^2).
Tensor extend_positional(const Tensor& table, std::size_t new_len, nd::Rng& rng, double init_std);

class Seq2SeqModel {
 public:
  Seq2SeqModel(const ModelConfig& cfg, nd::Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  const Tensor& token_embedding() const { return tok_emb_; }
  const Tensor& positional_embedding() const { return pos_emb_; }

  // Stable, named parameter list (order is part of the checkpoint format).
  nd::ParamList params() const;

  // [T x d] contextual states. `valid` marks non-pad positions; empty means
  // every position is real.
  Tensor encode(std::span<const TokenId> ids, const Mask& valid = {}, ForwardCtx ctx = {}) const;

  // Teacher-forced decoder pass over token ids -> logits [T x V].
  Tensor decode(std::span<const TokenId> target_in, const Tensor& memory, const Mask& memory_valid = {},
                ForwardCtx ctx = {}) const;
  // Same pass fed with token-embedding rows [T x d] (positions are added
  // here), so mixtures over the embedding table can be used as inputs.
  Tensor decode_embedded(const Tensor& target_embeddings, const Tensor& memory,
                         const Mask& memory_valid = {}, ForwardCtx ctx = {}) const;

  // Grows the positional table to `new_len` rows.
  void extend_positions(std::size_t new_len, nd::Rng& rng);

  // Overwrites parameter values from a name->data list (checkpoint restore).
  void load_params(const nd::ParamList& values);

 private:
  Tensor decoder_stack(Tensor x, const Tensor& memory, const Mask& memory_valid, ForwardCtx ctx) const;

  ModelConfig cfg_;
  Tensor tok_emb_;
  Tensor pos_emb_;
  std::vector<EncoderLayer> enc_;
  LayerNormParams enc_ln_;
  std::vector<DecoderLayer> dec_;
  LayerNormParams dec_ln_;
};

class PassageEncoder {
 public:
  PassageEncoder(const ModelConfig& cfg, TokenId repr_id, nd::Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  TokenId repr_id() const { return repr_id_; }
  nd::ParamList params() const;

  // Final hidden states [T x d]; ids[0] must be the representation token.
  Tensor hidden(std::span<const TokenId> ids, const Mask& valid = {}, ForwardCtx ctx = {}) const;
  // Masked-token prediction logits [T x V] from hidden states.
  Tensor mlm_logits(const Tensor& hidden) const;
  // Hidden state at position 0, shape [d].
  Tensor embed(std::span<const TokenId> ids, ForwardCtx ctx = {}) const;

  void load_params(const nd::ParamList& values);

 private:
  ModelConfig cfg_;
  TokenId repr_id_;
  Tensor tok_emb_;
  Tensor pos_emb_;
  std::vector<EncoderLayer> enc_;
  Tensor mlm_w_, mlm_b_;
  LayerNormParams mlm_ln_;
  Tensor mlm_out_bias_;
};

}  // namespace rlqfs::model
