#include "rlqfs/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "rlqfs/errors.hpp"

namespace rlqfs::train {
namespace {

Seq2SeqModel init_model(const model::ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  nd::Rng rng(seed);
  return Seq2SeqModel(cfg, rng);
}

constexpr std::uint64_t kStreamSalt = 0x9e3779b97f4a7c15ULL;

std::vector<TokenId> decoder_inputs(std::span<const TokenId> gold) {
  std::vector<TokenId> in{corpus::kBos};
  in.insert(in.end(), gold.begin(), gold.end() - 1);
  return in;
}

// Greedy baseline and two-pass episodes share this horizon.
GenConfig horizon_config(const GenConfig& gen, std::size_t n) {
  GenConfig g = gen;
  g.max_tokens = n;
  g.min_tokens = std::min(gen.min_tokens, n);
  return g;
}

double f100(const rewards::PRF& p) { return 100.0 * p.f; }

}  // namespace

std::vector<Example> prepare_examples(const std::vector<corpus::QfsExample>& raw, const corpus::Vocabulary& vocab,
                                      std::size_t max_positions, std::size_t max_summary_tokens) {
  if (max_summary_tokens < 1) throw ConfigError("max_summary_tokens must be >= 1");
  std::vector<Example> out;
  out.reserve(raw.size());
  for (const auto& r : raw) {
    Example e;
    e.id = r.id;
    e.encoder_ids = corpus::make_encoder_input(corpus::tokenize(r.query, vocab), corpus::tokenize(r.document, vocab),
                                               max_positions);
    auto words = corpus::split_words(r.summary);
    const std::size_t keep = std::min({words.size(), max_summary_tokens - 1, max_positions - 1});
    words.resize(keep);
    for (const auto& w : words) {
      e.gold_ids.push_back(vocab.id(w));
      if (!e.reference.empty()) e.reference.push_back(' ');
      e.reference += w;
    }
    e.gold_ids.push_back(corpus::kEos);
    out.push_back(std::move(e));
  }
  return out;
}

void LossConfig::validate() const {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("train.eta must lie in [0, 1]");
  if (uses_reward()) reward_spec.validate();
  if (std::isnan(clip_norm)) throw ConfigError("train.clip_norm must be a number");
}

Tensor mle_loss(const Tensor& pass1_logits, std::span<const TokenId> gold_ids) {
  if (pass1_logits.rank() != 2 || pass1_logits.dim(0) != gold_ids.size()) {
    throw ContractError("mle_loss: logits rows (" + std::to_string(pass1_logits.rank() == 2 ? pass1_logits.dim(0) : 0) +
                        ") must equal gold length (" + std::to_string(gold_ids.size()) + ")");
  }
  std::vector<TokenId> targets(gold_ids.begin(), gold_ids.end());
  std::vector<double> keep(targets.size(), 1.0);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] == corpus::kPad) keep[t] = 0.0;
  }
  Tensor picked = nd::pick(nd::log_softmax(pass1_logits), targets);
  return nd::scale(nd::dot(picked, Tensor::vector(std::move(keep))), -1.0);
}

double self_critical_advantage(const rewards::RewardSpec& spec, std::string_view reference,
                               std::string_view sampled_text, std::string_view greedy_text,
                               const rewards::TextEmbedder* embedder) {
  return rewards::composite_reward(spec, reference, sampled_text, embedder) -
         rewards::composite_reward(spec, reference, greedy_text, embedder);
}

Tensor pg_loss(const Trajectory& traj, double advantage) {
  if (traj.token_ids.empty() || !traj.step_logprobs.defined() || traj.step_logprobs.size() == 0) {
    throw ContractError("pg_loss: empty trajectory");
  }
  if (!std::isfinite(advantage)) throw NumericError("pg_loss: non-finite advantage");
  return nd::scale(nd::sum(traj.step_logprobs), -advantage);
}

Tensor mixed_loss(const Tensor& mle, const Tensor& pg, double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ContractError("mixed_loss: eta must lie in [0, 1]");
  return nd::add(nd::scale(mle, eta), nd::scale(pg, 1.0 - eta));
}

TrainState::TrainState(const model::ModelConfig& cfg, const nd::OptimizerConfig& opt, std::uint64_t seed_,
                       std::uint64_t vocab_hash_)
    : model(init_model(cfg, seed_)), optimizer(opt), rng(seed_ ^ kStreamSalt), seed(seed_), vocab_hash(vocab_hash_) {}

StepReport train_step(TrainState& state, std::span<const Example> batch, const LossConfig& loss,
                      const GenConfig& gen, const rewards::TextEmbedder* embedder,
                      const corpus::Vocabulary* vocab) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  loss.validate();
  gen.validate();
  if (loss.uses_reward() && vocab == nullptr) throw ContractError("train_step: reward training needs a vocabulary");

  auto params = state.model.params();
  nd::zero_grads(params);
  const model::ForwardCtx ctx{true, &state.rng};
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  StepReport rep;
  for (const auto& ex : batch) {
    if (ex.gold_ids.empty()) throw ContractError("train_step: example " + ex.id + " has no gold tokens");
    const Tensor memory = state.model.encode(ex.encoder_ids, {}, ctx);
    const decode::Source src{memory, {}};

    Tensor mle, total;
    double pg_value = 0.0;
    if (!loss.uses_reward()) {
      mle = mle_loss(state.model.decode(decoder_inputs(ex.gold_ids), memory, {}, ctx), ex.gold_ids);
      total = mle;
      rep.mean_traj_len += static_cast<double>(ex.gold_ids.size());
    } else {
      const GenConfig hz = horizon_config(gen, ex.gold_ids.size());
      auto tp = decode::two_pass_decode(state.model, src, ex.gold_ids, hz, state.rng, ctx);
      mle = mle_loss(tp.pass1_logits, ex.gold_ids);
      Trajectory greedy;
      {
        nd::NoGradGuard no_grad;
        greedy = decode::greedy_decode(state.model, decode::Source{memory.detach(), {}}, hz);
      }
      const auto sampled_text = corpus::detokenize(tp.trajectory.token_ids, *vocab);
      const auto greedy_text = corpus::detokenize(greedy.token_ids, *vocab);
      const double r_s = rewards::composite_reward(loss.reward_spec, ex.reference, sampled_text, embedder);
      const double r_g = rewards::composite_reward(loss.reward_spec, ex.reference, greedy_text, embedder);
      const double adv = r_s - r_g;
      const Tensor pg = pg_loss(tp.trajectory, adv);
      pg_value = pg.item();
      total = mixed_loss(mle, pg, loss.eta);
      rep.mean_reward += r_s * inv_b;
      rep.mean_baseline_reward += r_g * inv_b;
      rep.mean_advantage += adv * inv_b;
      rep.mean_traj_len += static_cast<double>(tp.trajectory.size());
    }
    const double mle_value = mle.item();
    const double total_value = total.item();
    if (!std::isfinite(total_value)) {
      std::ostringstream os;
      os << "non-finite loss at step " << state.step + 1 << " on example '" << ex.id << "' (mle=" << mle_value
         << ", pg=" << pg_value << ")";
      throw NumericError(os.str());
    }
    nd::backward(nd::scale(total, inv_b));
    rep.mle_loss += mle_value * inv_b;
    rep.pg_loss += pg_value * inv_b;
    rep.total += total_value * inv_b;
  }
  rep.mean_traj_len *= inv_b;

  for (const auto& p : params) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + p.name + " at step " +
                                                std::to_string(state.step + 1));
    }
  }
  rep.grad_norm = loss.clip_norm > 0.0 ? nd::clip_grad_norm(params, loss.clip_norm)
                                       : nd::clip_grad_norm(params, std::numeric_limits<double>::infinity());
  state.optimizer.step(params);
  rep.step = ++state.step;
  return rep;
}

std::string metrics_json(const StepReport& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["mle_loss"] = r.mle_loss;
  j["pg_loss"] = r.pg_loss;
  j["total"] = r.total;
  j["mean_reward"] = r.mean_reward;
  j["mean_advantage"] = r.mean_advantage;
  j["mean_traj_len"] = r.mean_traj_len;
  j["mean_baseline_reward"] = r.mean_baseline_reward;
  j["grad_norm"] = r.grad_norm;
  return j.dump();
}

EvalReport score_texts(std::span<const std::string> references, std::span<const std::string> hypotheses) {
  if (references.size() != hypotheses.size()) throw ContractError("score_texts: unaligned inputs");
  EvalReport r;
  r.count = references.size();
  if (r.count == 0) return r;
  for (std::size_t i = 0; i < r.count; ++i) {
    const auto ref = corpus::split_words(references[i]);
    const auto hyp = corpus::split_words(hypotheses[i]);
    r.rouge1 += f100(rewards::rouge_n(ref, hyp, 1));
    r.rouge2 += f100(rewards::rouge_n(ref, hyp, 2));
    r.rougeL += f100(rewards::rouge_l_scores(ref, hyp));
    r.mean_length += static_cast<double>(corpus::count_words(hypotheses[i]));
  }
  const double n = static_cast<double>(r.count);
  r.rouge1 /= n;
  r.rouge2 /= n;
  r.rougeL /= n;
  r.mean_length /= n;
  return r;
}

EvalReport evaluate(const Seq2SeqModel& model, std::span<const Example> examples, const corpus::Vocabulary& vocab,
                    const GenConfig& gen, EvalDecoder decoder) {
  if (examples.empty()) throw ContractError("evaluate: empty corpus");
  std::vector<std::string> refs, hyps;
  for (const auto& ex : examples) {
    const auto src = decode::encode_source(model, ex.encoder_ids);
    const auto ids = decoder == EvalDecoder::Beam ? decode::beam_search(model, src, gen)
                                                  : decode::greedy_decode(model, src, gen).token_ids;
    refs.push_back(ex.reference);
    hyps.push_back(corpus::detokenize(ids, vocab));
  }
  auto r = score_texts(refs, hyps);
  r.generations = std::move(hyps);
  return r;
}

double teacher_forced_accuracy(const Seq2SeqModel& model, std::span<const Example> examples) {
  nd::NoGradGuard no_grad;
  std::size_t hit = 0, total = 0;
  for (const auto& ex : examples) {
    const Tensor memory = model.encode(ex.encoder_ids);
    const Tensor logits = model.decode(decoder_inputs(ex.gold_ids), memory);
    const std::size_t v = logits.dim(1);
    for (std::size_t t = 0; t < ex.gold_ids.size(); ++t) {
      if (ex.gold_ids[t] == corpus::kPad) continue;
      const auto row = logits.data().subspan(t * v, v);
      const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
      hit += best == ex.gold_ids[t];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

double mix_prob_at(const GenConfig& gen, const LoopConfig& loop, std::uint64_t step) {
  if (loop.mix_ramp_steps == 0) return gen.sampling_mix_prob;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(loop.mix_ramp_steps));
  return gen.sampling_mix_prob * frac;
}

void run_training(TrainState& state, std::span<const Example> examples, const LossConfig& loss,
                  const GenConfig& gen, const LoopConfig& loop, const rewards::TextEmbedder* embedder,
                  const corpus::Vocabulary& vocab, const std::function<bool(const StepReport&)>& on_step) {
  if (examples.empty()) throw ContractError("run_training: empty corpus");
  if (loop.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  const std::size_t per_epoch = (examples.size() + loop.batch_size - 1) / loop.batch_size;
  std::uint64_t budget = static_cast<std::uint64_t>(per_epoch) * loop.epochs;
  if (loop.max_steps > 0) budget = loop.max_steps;

  std::vector<std::size_t> order(examples.size());
  std::uint64_t perm_epoch = std::numeric_limits<std::uint64_t>::max();
  std::vector<Example> batch;
  while (state.step < budget) {
    const std::uint64_t epoch = state.step / per_epoch;
    const std::size_t slot = static_cast<std::size_t>(state.step % per_epoch);
    if (epoch != perm_epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      nd::Rng shuffler(state.seed * 0x100000001b3ULL + epoch + 1);
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[shuffler.uniform_int(i)]);
      }
      perm_epoch = epoch;
    }
    state.epoch = epoch;
    batch.clear();
    const std::size_t end = std::min(order.size(), (slot + 1) * loop.batch_size);
    for (std::size_t i = slot * loop.batch_size; i < end; ++i) batch.push_back(examples[order[i]]);
    GenConfig g = gen;
    g.sampling_mix_prob = mix_prob_at(gen, loop, state.step);
    const auto rep = train_step(state, batch, loss, g, embedder, &vocab);
    state.epoch = state.step / per_epoch;
    if (on_step && !on_step(rep)) break;
  }
}

model::Checkpoint to_checkpoint(const TrainState& state) {
  model::Checkpoint c;
  c.kind = "seq2seq";
  c.config = state.model.config();
  c.vocab_hash = state.vocab_hash;
  c.seed = state.seed;
  c.step = state.step;
  c.meta["epoch"] = std::to_string(state.epoch);
  c.meta["best_eval"] = model::encode_real(state.best_eval);
  c.meta["rng"] = state.rng.save_state();
  c.tensors = state.model.params();
  model::append_optimizer_state(c, state.model.params(), state.optimizer);
  return c;
}

TrainState from_checkpoint(const model::Checkpoint& ckpt, const nd::OptimizerConfig& opt) {
  if (ckpt.kind != "seq2seq") throw DataError("checkpoint holds a '" + ckpt.kind + "', not a seq2seq model");
  TrainState s(ckpt.config, opt, ckpt.seed, ckpt.vocab_hash);
  const auto params = s.model.params();
  s.model.load_params(model::stored_weights(ckpt, params));
  model::restore_optimizer_state(ckpt, params, s.optimizer);
  s.step = ckpt.step;
  s.epoch = std::stoull(model::require_meta(ckpt, "epoch"));
  s.best_eval = model::decode_real(model::require_meta(ckpt, "best_eval"));
  s.rng.load_state(model::require_meta(ckpt, "rng"));
  return s;
}

void save_train_state(const std::filesystem::path& path, const TrainState& state) {
  model::save_checkpoint(path, to_checkpoint(state));
}

TrainState load_train_state(const std::filesystem::path& path, std::uint64_t vocab_hash,
                            const nd::OptimizerConfig& opt) {
  const auto ckpt = model::load_checkpoint(path);
  if (ckpt.vocab_hash != vocab_hash) {
    std::ostringstream os;
    os << "checkpoint " << path.string() << " was trained with vocabulary hash " << std::hex << ckpt.vocab_hash
       << ", current vocabulary is " << vocab_hash;
    throw DataError(os.str());
  }
  return from_checkpoint(ckpt, opt);
}

}  // namespace rlqfs::train
