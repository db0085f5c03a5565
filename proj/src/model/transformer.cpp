#include "rlqfs/model/transformer.hpp"

#include <algorithm>
#include <map>

#include "rlqfs/errors.hpp"

namespace rlqfs::model {

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (vocab_size == 0) fail("vocab_size", "must be positive");
  if (d_model == 0) fail("d_model", "must be positive");
  if (n_heads == 0) fail("n_heads", "must be positive");
  if (d_model % n_heads != 0) fail("n_heads", "must divide d_model");
  if (n_enc_layers == 0) fail("n_enc_layers", "must be positive");
  if (n_dec_layers == 0) fail("n_dec_layers", "must be positive");
  if (ffn_dim == 0) fail("ffn_dim", "must be positive");
  if (max_positions == 0) fail("max_positions", "must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p", "must lie in [0, 1)");
  if (!(init_std > 0.0)) fail("init_std", "must be positive");
}

namespace {

Tensor normal_param(nd::Shape shape, double std, nd::Rng& rng) {
  std::vector<double> data(nd::shape_numel(shape));
  for (auto& v : data) v = rng.normal(0.0, std);
  return Tensor::parameter(std::move(shape), std::move(data));
}

Tensor const_param(nd::Shape shape, double value) {
  const auto n = nd::shape_numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, value));
}

LayerNormParams make_ln(std::size_t d) { return {const_param({d}, 1.0), const_param({d}, 0.0)}; }

AttentionParams make_attn(std::size_t d, double std, nd::Rng& rng) {
  AttentionParams a;
  a.wq = normal_param({d, d}, std, rng);
  a.bq = const_param({d}, 0.0);
  a.wk = normal_param({d, d}, std, rng);
  a.bk = const_param({d}, 0.0);
  a.wv = normal_param({d, d}, std, rng);
  a.bv = const_param({d}, 0.0);
  a.wo = normal_param({d, d}, std, rng);
  a.bo = const_param({d}, 0.0);
  return a;
}

FeedForwardParams make_ffn(std::size_t d, std::size_t f, double std, nd::Rng& rng) {
  return {normal_param({d, f}, std, rng), const_param({f}, 0.0), normal_param({f, d}, std, rng),
          const_param({d}, 0.0)};
}

void push_ln(nd::ParamList& out, const std::string& p, const LayerNormParams& ln) {
  out.push_back({p + ".gamma", ln.gamma});
  out.push_back({p + ".beta", ln.beta});
}

void push_attn(nd::ParamList& out, const std::string& p, const AttentionParams& a) {
  out.push_back({p + ".wq", a.wq});
  out.push_back({p + ".bq", a.bq});
  out.push_back({p + ".wk", a.wk});
  out.push_back({p + ".bk", a.bk});
  out.push_back({p + ".wv", a.wv});
  out.push_back({p + ".bv", a.bv});
  out.push_back({p + ".wo", a.wo});
  out.push_back({p + ".bo", a.bo});
}

void push_ffn(nd::ParamList& out, const std::string& p, const FeedForwardParams& f) {
  out.push_back({p + ".w1", f.w1});
  out.push_back({p + ".b1", f.b1});
  out.push_back({p + ".w2", f.w2});
  out.push_back({p + ".b2", f.b2});
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return nd::add_bias(nd::matmul(x, w), b);
}

Tensor drop(const Tensor& x, double p, ForwardCtx ctx) {
  return ctx.dropout_active() ? nd::dropout(x, p, *ctx.rng, true) : x;
}

Tensor ln(const Tensor& x, const LayerNormParams& p) { return nd::layer_norm(x, p.gamma, p.beta); }

Tensor mha(const Tensor& xq, const Tensor& xkv, const AttentionParams& a, std::size_t heads,
           const nd::AttentionMask& mask) {
  Tensor q = linear(xq, a.wq, a.bq);
  Tensor k = linear(xkv, a.wk, a.bk);
  Tensor v = linear(xkv, a.wv, a.bv);
  return linear(nd::attention(q, k, v, heads, mask), a.wo, a.bo);
}

Tensor ffn(const Tensor& x, const FeedForwardParams& f, double p, ForwardCtx ctx) {
  return linear(drop(nd::gelu(linear(x, f.w1, f.b1)), p, ctx), f.w2, f.b2);
}

Tensor encoder_layers(Tensor x, const std::vector<EncoderLayer>& layers, const Mask& valid,
                      const ModelConfig& cfg, ForwardCtx ctx) {
  nd::AttentionMask mask{std::span<const std::uint8_t>(valid), false};
  for (const auto& layer : layers) {
    Tensor h = ln(x, layer.ln_attn);
    x = nd::add(x, drop(mha(h, h, layer.self_attn, cfg.n_heads, mask), cfg.dropout_p, ctx));
    x = nd::add(x, drop(ffn(ln(x, layer.ln_ffn), layer.ffn, cfg.dropout_p, ctx), cfg.dropout_p, ctx));
  }
  return x;
}

Tensor embed_with_positions(const Tensor& tok_emb, const Tensor& pos_emb, std::span<const TokenId> ids,
                            const ModelConfig& cfg, ForwardCtx ctx) {
  if (ids.empty()) throw ContractError("forward pass on an empty sequence");
  if (ids.size() > cfg.max_positions) {
    throw ContractError("sequence length " + std::to_string(ids.size()) + " exceeds max_positions " +
                        std::to_string(cfg.max_positions) + "; truncate upstream");
  }
  Tensor x = nd::add(nd::embedding(tok_emb, ids), nd::slice_rows(pos_emb, 0, ids.size()));
  return drop(x, cfg.dropout_p, ctx);
}

void check_mask(const Mask& m, std::size_t n, const char* what) {
  if (!m.empty() && m.size() != n) {
    throw DimensionError(std::string(what) + " mask length " + std::to_string(m.size()) +
                         " does not match sequence length " + std::to_string(n));
  }
}

void copy_params(const nd::ParamList& dst, const nd::ParamList& src) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& p : src) by_name[p.name] = &p.tensor;
  for (const auto& p : dst) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("missing parameter '" + p.name + "'", 0);
    if (it->second->shape() != p.tensor.shape()) {
      throw DimensionError("parameter '" + p.name + "' has shape " + nd::shape_str(it->second->shape()) +
                           ", model expects " + nd::shape_str(p.tensor.shape()));
    }
    auto d = const_cast<Tensor&>(p.tensor).data();
    std::copy(it->second->data().begin(), it->second->data().end(), d.begin());
  }
}

}  // namespace

Tensor extend_positional(const Tensor& table, std::size_t new_len, nd::Rng& rng, double init_std) {
  if (table.rank() != 2) throw DimensionError("extend_positional: table must be rank 2");
  const std::size_t len = table.dim(0), d = table.dim(1);
  if (new_len < len) {
    throw ContractError("extend_positional: new length " + std::to_string(new_len) +
                        " is shorter than the existing " + std::to_string(len));
  }
  std::vector<double> data(new_len * d);
  std::copy(table.data().begin(), table.data().end(), data.begin());
  for (std::size_t i = len * d; i < data.size(); ++i) data[i] = rng.normal(0.0, init_std);
  Tensor out = Tensor::from({new_len, d}, std::move(data));
  out.set_requires_grad(table.requires_grad());
  return out;
}

// ---------------------------------------------------------------- Seq2Seq

Seq2SeqModel::Seq2SeqModel(const ModelConfig& cfg, nd::Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model;
  const double s = cfg_.init_std;
  tok_emb_ = normal_param({cfg_.vocab_size, d}, s, rng);
  pos_emb_ = normal_param({cfg_.max_positions, d}, s, rng);
  for (std::size_t i = 0; i < cfg_.n_enc_layers; ++i) {
    EncoderLayer l;
    l.ln_attn = make_ln(d);
    l.self_attn = make_attn(d, s, rng);
    l.ln_ffn = make_ln(d);
    l.ffn = make_ffn(d, cfg_.ffn_dim, s, rng);
    enc_.push_back(std::move(l));
  }
  enc_ln_ = make_ln(d);
  for (std::size_t i = 0; i < cfg_.n_dec_layers; ++i) {
    DecoderLayer l;
    l.ln_self = make_ln(d);
    l.self_attn = make_attn(d, s, rng);
    l.ln_cross = make_ln(d);
    l.cross_attn = make_attn(d, s, rng);
    l.ln_ffn = make_ln(d);
    l.ffn = make_ffn(d, cfg_.ffn_dim, s, rng);
    dec_.push_back(std::move(l));
  }
  dec_ln_ = make_ln(d);
}

nd::ParamList Seq2SeqModel::params() const {
  nd::ParamList out;
  out.push_back({"token_embedding", tok_emb_});
  out.push_back({"positional_embedding", pos_emb_});
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    const std::string p = "encoder." + std::to_string(i);
    push_ln(out, p + ".ln_attn", enc_[i].ln_attn);
    push_attn(out, p + ".self_attn", enc_[i].self_attn);
    push_ln(out, p + ".ln_ffn", enc_[i].ln_ffn);
    push_ffn(out, p + ".ffn", enc_[i].ffn);
  }
  push_ln(out, "encoder.ln_final", enc_ln_);
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i);
    push_ln(out, p + ".ln_self", dec_[i].ln_self);
    push_attn(out, p + ".self_attn", dec_[i].self_attn);
    push_ln(out, p + ".ln_cross", dec_[i].ln_cross);
    push_attn(out, p + ".cross_attn", dec_[i].cross_attn);
    push_ln(out, p + ".ln_ffn", dec_[i].ln_ffn);
    push_ffn(out, p + ".ffn", dec_[i].ffn);
  }
  push_ln(out, "decoder.ln_final", dec_ln_);
  return out;
}

Tensor Seq2SeqModel::encode(std::span<const TokenId> ids, const Mask& valid, ForwardCtx ctx) const {
  check_mask(valid, ids.size(), "encoder");
  Tensor x = embed_with_positions(tok_emb_, pos_emb_, ids, cfg_, ctx);
  return ln(encoder_layers(std::move(x), enc_, valid, cfg_, ctx), enc_ln_);
}

Tensor Seq2SeqModel::decoder_stack(Tensor x, const Tensor& memory, const Mask& memory_valid,
                                   ForwardCtx ctx) const {
  if (memory.rank() != 2 || memory.dim(1) != cfg_.d_model) {
    throw DimensionError("decoder: memory shape " + nd::shape_str(memory.shape()) +
                         " incompatible with d_model " + std::to_string(cfg_.d_model));
  }
  check_mask(memory_valid, memory.dim(0), "memory");
  const nd::AttentionMask self_mask{{}, true};
  const nd::AttentionMask cross_mask{std::span<const std::uint8_t>(memory_valid), false};
  for (const auto& layer : dec_) {
    Tensor h = ln(x, layer.ln_self);
    x = nd::add(x, drop(mha(h, h, layer.self_attn, cfg_.n_heads, self_mask), cfg_.dropout_p, ctx));
    h = ln(x, layer.ln_cross);
    x = nd::add(x, drop(mha(h, memory, layer.cross_attn, cfg_.n_heads, cross_mask), cfg_.dropout_p, ctx));
    x = nd::add(x, drop(ffn(ln(x, layer.ln_ffn), layer.ffn, cfg_.dropout_p, ctx), cfg_.dropout_p, ctx));
  }
  return nd::matmul_nt(ln(x, dec_ln_), tok_emb_);
}

Tensor Seq2SeqModel::decode(std::span<const TokenId> target_in, const Tensor& memory,
                            const Mask& memory_valid, ForwardCtx ctx) const {
  Tensor x = embed_with_positions(tok_emb_, pos_emb_, target_in, cfg_, ctx);
  return decoder_stack(std::move(x), memory, memory_valid, ctx);
}

Tensor Seq2SeqModel::decode_embedded(const Tensor& target_embeddings, const Tensor& memory,
                                     const Mask& memory_valid, ForwardCtx ctx) const {
  if (target_embeddings.rank() != 2 || target_embeddings.dim(1) != cfg_.d_model) {
    throw DimensionError("decoder: input embeddings " + nd::shape_str(target_embeddings.shape()) +
                         " incompatible with d_model " + std::to_string(cfg_.d_model));
  }
  const std::size_t t = target_embeddings.dim(0);
  if (t == 0 || t > cfg_.max_positions) {
    throw ContractError("decoder: target length " + std::to_string(t) + " outside [1, max_positions]");
  }
  Tensor x = drop(nd::add(target_embeddings, nd::slice_rows(pos_emb_, 0, t)), cfg_.dropout_p, ctx);
  return decoder_stack(std::move(x), memory, memory_valid, ctx);
}

void Seq2SeqModel::extend_positions(std::size_t new_len, nd::Rng& rng) {
  Tensor grown = extend_positional(pos_emb_, new_len, rng, cfg_.init_std);
  pos_emb_ = grown;
  cfg_.max_positions = new_len;
}

void Seq2SeqModel::load_params(const nd::ParamList& values) { copy_params(params(), values); }

// ---------------------------------------------------------------- Passage

PassageEncoder::PassageEncoder(const ModelConfig& cfg, TokenId repr_id, nd::Rng& rng)
    : cfg_(cfg), repr_id_(repr_id) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model;
  const double s = cfg_.init_std;
  tok_emb_ = normal_param({cfg_.vocab_size, d}, s, rng);
  pos_emb_ = normal_param({cfg_.max_positions, d}, s, rng);
  for (std::size_t i = 0; i < cfg_.n_enc_layers; ++i) {
    EncoderLayer l;
    l.ln_attn = make_ln(d);
    l.self_attn = make_attn(d, s, rng);
    l.ln_ffn = make_ln(d);
    l.ffn = make_ffn(d, cfg_.ffn_dim, s, rng);
    enc_.push_back(std::move(l));
  }
  mlm_w_ = normal_param({d, d}, s, rng);
  mlm_b_ = const_param({d}, 0.0);
  mlm_ln_ = make_ln(d);
  mlm_out_bias_ = const_param({cfg_.vocab_size}, 0.0);
}

nd::ParamList PassageEncoder::params() const {
  nd::ParamList out;
  out.push_back({"token_embedding", tok_emb_});
  out.push_back({"positional_embedding", pos_emb_});
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    const std::string p = "encoder." + std::to_string(i);
    push_ln(out, p + ".ln_attn", enc_[i].ln_attn);
    push_attn(out, p + ".self_attn", enc_[i].self_attn);
    push_ln(out, p + ".ln_ffn", enc_[i].ln_ffn);
    push_ffn(out, p + ".ffn", enc_[i].ffn);
  }
  out.push_back({"mlm.w", mlm_w_});
  out.push_back({"mlm.b", mlm_b_});
  push_ln(out, "mlm.ln", mlm_ln_);
  out.push_back({"mlm.out_bias", mlm_out_bias_});
  return out;
}

Tensor PassageEncoder::hidden(std::span<const TokenId> ids, const Mask& valid, ForwardCtx ctx) const {
  if (ids.empty() || ids.front() != repr_id_) {
    throw ContractError("passage encoder: sequence must begin with the representation token");
  }
  check_mask(valid, ids.size(), "passage");
  Tensor x = embed_with_positions(tok_emb_, pos_emb_, ids, cfg_, ctx);
  return encoder_layers(std::move(x), enc_, valid, cfg_, ctx);
}

Tensor PassageEncoder::mlm_logits(const Tensor& h) const {
  Tensor t = ln(nd::gelu(linear(h, mlm_w_, mlm_b_)), mlm_ln_);
  return nd::add_bias(nd::matmul_nt(t, tok_emb_), mlm_out_bias_);
}

Tensor PassageEncoder::embed(std::span<const TokenId> ids, ForwardCtx ctx) const {
  Tensor h = hidden(ids, {}, ctx);
  return nd::reshape(nd::slice_rows(h, 0, 1), {cfg_.d_model});
}

void PassageEncoder::load_params(const nd::ParamList& values) { copy_params(params(), values); }

}  // namespace rlqfs::model
