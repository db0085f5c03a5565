#include "rlqfs/decode/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "rlqfs/corpus/vocab.hpp"
#include "rlqfs/errors.hpp"

namespace rlqfs::decode {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Finite stand-in for -inf inside the tape (softmax rejects non-finite input).
constexpr double kMaskedLogit = -1e9;

bool eos_blocked(const GenConfig& gen, std::size_t step) { return step + 1 < gen.min_tokens; }

// Copy of `row` with disallowed tokens at `step` set to -inf.
std::vector<double> constrained(std::span<const double> row, const GenConfig& gen, std::size_t step) {
  std::vector<double> out(row.begin(), row.end());
  for (auto id : gen.banned_ids) {
    if (id >= 0 && static_cast<std::size_t>(id) < out.size()) out[static_cast<std::size_t>(id)] = kNegInf;
  }
  if (eos_blocked(gen, step) && static_cast<std::size_t>(corpus::kEos) < out.size()) {
    out[static_cast<std::size_t>(corpus::kEos)] = kNegInf;
  }
  return out;
}

void log_normalize(std::vector<double>& row) {
  const double mx = *std::max_element(row.begin(), row.end());
  if (!std::isfinite(mx)) throw NumericError("decode: no admissible token");
  double s = 0.0;
  for (double v : row) s += std::isfinite(v) ? std::exp(v - mx) : 0.0;
  const double lse = mx + std::log(s);
  for (double& v : row) v = std::isfinite(v) ? v - lse : kNegInf;
}

std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

// Log-probabilities over the next token after `prefix` (which starts with BOS).
std::vector<double> next_logprobs(const Seq2SeqModel& model, const Source& src, std::span<const TokenId> prefix,
                                  const GenConfig& gen, std::size_t step) {
  Tensor logits = model.decode(prefix, src.memory, src.valid);
  const std::size_t v = logits.dim(1);
  auto row = constrained(logits.data().subspan((logits.dim(0) - 1) * v, v), gen, step);
  log_normalize(row);
  return row;
}

Trajectory finish(std::vector<TokenId> tokens, std::vector<double> logprobs) {
  Trajectory t;
  t.terminated_by = !tokens.empty() && tokens.back() == corpus::kEos ? Termination::Eos : Termination::MaxLength;
  t.token_ids = std::move(tokens);
  t.step_logprobs = Tensor::vector(std::move(logprobs));
  return t;
}

template <typename Pick>
Trajectory autoregressive(const Seq2SeqModel& model, const Source& src, const GenConfig& gen, Pick pick) {
  gen.validate();
  nd::NoGradGuard no_grad;
  std::vector<TokenId> prefix{corpus::kBos};
  std::vector<TokenId> out;
  std::vector<double> lps;
  const std::size_t limit = std::min(gen.max_tokens, model.config().max_positions);
  for (std::size_t step = 0; step < limit; ++step) {
    const auto lp = next_logprobs(model, src, prefix, gen, step);
    const auto tok = static_cast<TokenId>(pick(lp));
    out.push_back(tok);
    lps.push_back(lp[static_cast<std::size_t>(tok)]);
    if (tok == corpus::kEos) break;
    prefix.push_back(tok);
  }
  return finish(std::move(out), std::move(lps));
}

}  // namespace

void Trajectory::check() const {
  if (!step_logprobs.defined() || step_logprobs.size() != token_ids.size()) {
    throw ContractError("trajectory: one log-probability per token required");
  }
  for (double lp : step_logprobs.data()) {
    if (!(lp <= 0.0)) throw ContractError("trajectory: positive or NaN log-probability");
  }
  const bool ends_eos = !token_ids.empty() && token_ids.back() == corpus::kEos;
  if (ends_eos != (terminated_by == Termination::Eos)) {
    throw ContractError("trajectory: termination flag disagrees with the final token");
  }
}

void GenConfig::validate() const {
  if (beam_size == 0) throw ConfigError("gen.beam_size must be >= 1");
  if (min_tokens == 0 || max_tokens == 0) throw ConfigError("gen.min_tokens and gen.max_tokens must be >= 1");
  if (min_tokens > max_tokens) throw ConfigError("gen.min_tokens must not exceed gen.max_tokens");
  if (!(gumbel_temperature > 0.0)) throw ConfigError("gen.gumbel_temperature must be > 0");
  if (!(sampling_mix_prob >= 0.0 && sampling_mix_prob <= 1.0)) {
    throw ConfigError("gen.sampling_mix_prob must lie in [0, 1]");
  }
  if (!(length_penalty >= 0.0)) throw ConfigError("gen.length_penalty must be >= 0");
  if (!(sample_temperature >= 0.0)) throw ConfigError("gen.sample_temperature must be >= 0");
}

GenConfig GenConfig::paper() {
  GenConfig g;
  g.beam_size = 15;
  g.min_tokens = 64;
  g.max_tokens = 256;
  return g;
}

Source encode_source(const Seq2SeqModel& model, std::span<const TokenId> encoder_ids) {
  nd::NoGradGuard no_grad;
  return {model.encode(encoder_ids), {}};
}

Trajectory greedy_decode(const Seq2SeqModel& model, const Source& src, const GenConfig& gen) {
  return autoregressive(model, src, gen, [](const std::vector<double>& lp) { return argmax_lowest(lp); });
}

Trajectory greedy_decode(const Seq2SeqModel& model, std::span<const TokenId> encoder_ids, const GenConfig& gen) {
  return greedy_decode(model, encode_source(model, encoder_ids), gen);
}

Trajectory sample_decode(const Seq2SeqModel& model, const Source& src, const GenConfig& gen, nd::Rng& rng) {
  const double temp = gen.sample_temperature;
  return autoregressive(model, src, gen, [&rng, temp](const std::vector<double>& lp) -> std::size_t {
    if (temp == 0.0) return argmax_lowest(lp);
    std::vector<double> p(lp.size());
    const double mx = *std::max_element(lp.begin(), lp.end());
    double s = 0.0;
    for (std::size_t j = 0; j < lp.size(); ++j) {
      p[j] = std::isfinite(lp[j]) ? std::exp((lp[j] - mx) / temp) : 0.0;
      s += p[j];
    }
    double u = rng.uniform() * s;
    std::size_t last = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p[j] == 0.0) continue;
      last = j;
      if (u < p[j]) return j;
      u -= p[j];
    }
    return last;
  });
}

Trajectory sample_decode(const Seq2SeqModel& model, std::span<const TokenId> encoder_ids, const GenConfig& gen,
                         nd::Rng& rng) {
  return sample_decode(model, encode_source(model, encoder_ids), gen, rng);
}

GumbelSample gumbel_softmax(const Tensor& logits, double temperature, std::span<const double> noise) {
  if (!(temperature > 0.0)) throw ContractError("gumbel_softmax: temperature must be > 0");
  if (logits.rank() != 1 || noise.size() != logits.size()) {
    throw DimensionError("gumbel_softmax: logits must be rank 1 with matching noise");
  }
  Tensor perturbed = nd::add(logits, Tensor::vector(std::vector<double>(noise.begin(), noise.end())));
  GumbelSample s;
  s.token = static_cast<TokenId>(argmax_lowest(perturbed.data()));
  s.weights = nd::softmax(nd::scale(perturbed, 1.0 / temperature), 0);
  return s;
}

GumbelSample gumbel_softmax(const Tensor& logits, double temperature, nd::Rng& rng) {
  std::vector<double> g(logits.size());
  for (auto& x : g) x = rng.gumbel();
  return gumbel_softmax(logits, temperature, g);
}

TwoPassResult two_pass_decode(const Seq2SeqModel& model, const Source& src, std::span<const TokenId> gold_ids,
                              const GenConfig& gen, nd::Rng& rng, model::ForwardCtx ctx) {
  gen.validate();
  if (gold_ids.empty()) throw ContractError("two_pass_decode: empty gold sequence");
  const std::size_t n = gold_ids.size();
  const std::size_t v = model.config().vocab_size;

  std::vector<TokenId> dec_in{corpus::kBos};
  dec_in.insert(dec_in.end(), gold_ids.begin(), gold_ids.end() - 1);

  TwoPassResult r;
  r.pass1_logits = model.decode(dec_in, src.memory, src.valid, ctx);

  // Length/ban constraints plus Gumbel noise, as constants on the tape.
  std::vector<double> perturb(n * v, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double* row = perturb.data() + t * v;
    for (auto id : gen.banned_ids) {
      if (id >= 0 && static_cast<std::size_t>(id) < v) row[id] = kMaskedLogit;
    }
    if (eos_blocked(gen, t)) row[corpus::kEos] = kMaskedLogit;
  }
  for (auto& x : perturb) x += rng.gumbel();
  Tensor perturbed = nd::add(r.pass1_logits, Tensor::from({n, v}, std::move(perturb)));

  std::vector<TokenId> sampled(n);
  for (std::size_t t = 0; t < n; ++t) {
    sampled[t] = static_cast<TokenId>(argmax_lowest(perturbed.data().subspan(t * v, v)));
  }
  Tensor weights = nd::softmax(nd::scale(perturbed, 1.0 / gen.gumbel_temperature), 1);
  Tensor soft_emb = nd::matmul(weights, model.token_embedding());
  Tensor gold_emb = nd::embedding(model.token_embedding(), dec_in);

  r.mixed_inputs.assign(n > 0 ? n - 1 : 0, 0);
  for (auto& m : r.mixed_inputs) m = rng.bernoulli(gen.sampling_mix_prob) ? 1 : 0;

  // Row 0 is BOS; row t+1 is soft_emb[t] or gold_emb[t+1]. Runs of the same
  // source become one slice.
  std::vector<Tensor> parts{nd::slice_rows(gold_emb, 0, 1)};
  std::size_t t = 0;
  while (t + 1 < n) {
    const bool mixed = r.mixed_inputs[t] != 0;
    std::size_t e = t;
    while (e + 1 < n && (r.mixed_inputs[e] != 0) == mixed) ++e;
    parts.push_back(mixed ? nd::slice_rows(soft_emb, t, e) : nd::slice_rows(gold_emb, t + 1, e + 1));
    t = e;
  }
  Tensor pass2_in = parts.size() == 1 ? parts.front() : nd::concat(parts, 0);
  r.pass2_logits = model.decode_embedded(pass2_in, src.memory, src.valid, ctx);

  std::size_t k = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (sampled[i] == corpus::kEos) {
      k = i + 1;
      break;
    }
  }
  sampled.resize(k);
  Tensor lp = nd::log_softmax(k == n ? r.pass2_logits : nd::slice_rows(r.pass2_logits, 0, k));
  r.trajectory.step_logprobs = nd::pick(lp, sampled);
  r.trajectory.terminated_by = sampled.back() == corpus::kEos ? Termination::Eos : Termination::MaxLength;
  r.trajectory.token_ids = std::move(sampled);
  return r;
}

namespace {

struct Hyp {
  std::vector<TokenId> tokens;
  double logprob = 0.0;
};

struct Finished {
  std::vector<TokenId> tokens;
  double score = 0.0;
};

double normalized(double logprob, std::size_t len, double alpha) {
  return logprob / std::pow(static_cast<double>(std::max<std::size_t>(len, 1)), alpha);
}

bool better(const Finished& a, const Finished& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

}  // namespace

std::vector<TokenId> beam_search(const Seq2SeqModel& model, const Source& src, const GenConfig& gen) {
  gen.validate();
  nd::NoGradGuard no_grad;
  const std::size_t limit = std::min(gen.max_tokens, model.config().max_positions);
  const double alpha = gen.length_penalty;
  std::vector<Hyp> alive{Hyp{}};
  std::vector<Finished> done;

  struct Cand {
    double logprob;
    TokenId token;
    std::size_t beam;
  };

  for (std::size_t step = 0; step < limit && !alive.empty(); ++step) {
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < alive.size(); ++b) {
      std::vector<TokenId> prefix{corpus::kBos};
      prefix.insert(prefix.end(), alive[b].tokens.begin(), alive[b].tokens.end());
      const auto lp = next_logprobs(model, src, prefix, gen, step);
      for (std::size_t j = 0; j < lp.size(); ++j) {
        if (std::isfinite(lp[j])) cands.push_back({alive[b].logprob + lp[j], static_cast<TokenId>(j), b});
      }
    }
    const std::size_t keep = std::min(gen.beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.logprob != b.logprob) return a.logprob > b.logprob;
                        if (a.token != b.token) return a.token < b.token;
                        return a.beam < b.beam;
                      });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hyp h{alive[cands[i].beam].tokens, cands[i].logprob};
      h.tokens.push_back(cands[i].token);
      if (cands[i].token == corpus::kEos || step + 1 == limit) {
        const double s = normalized(h.logprob, h.tokens.size(), alpha);
        done.push_back({std::move(h.tokens), s});
      } else {
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);

    // No alive hypothesis can beat the best finished one: its score is at
    // most logprob / limit^alpha.
    if (!done.empty() && !alive.empty()) {
      const auto best = std::min_element(done.begin(), done.end(), better);
      double bound = kNegInf;
      for (const auto& h : alive) bound = std::max(bound, normalized(h.logprob, limit, alpha));
      if (best->score >= bound) break;
    }
  }
  if (done.empty()) return {};
  return std::min_element(done.begin(), done.end(), better)->tokens;
}

std::vector<TokenId> beam_search(const Seq2SeqModel& model, std::span<const TokenId> encoder_ids,
                                 const GenConfig& gen) {
  return beam_search(model, encode_source(model, encoder_ids), gen);
}

double sequence_score(const Seq2SeqModel& model, const Source& src, std::span<const TokenId> tokens,
                      const GenConfig& gen) {
  nd::NoGradGuard no_grad;
  if (tokens.empty()) return kNegInf;
  std::vector<TokenId> dec_in{corpus::kBos};
  dec_in.insert(dec_in.end(), tokens.begin(), tokens.end() - 1);
  Tensor logits = model.decode(dec_in, src.memory, src.valid);
  const std::size_t v = logits.dim(1);
  double total = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto row = constrained(logits.data().subspan(t * v, v), gen, t);
    log_normalize(row);
    total += row[static_cast<std::size_t>(tokens[t])];
  }
  return normalized(total, tokens.size(), gen.length_penalty);
}

namespace {

model::ModelConfig cost_probe_config(std::size_t n) {
  model::ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 4;
  c.n_heads = 1;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.ffn_dim = 8;
  c.max_positions = std::max<std::size_t>(n, 2);
  return c;
}

}  // namespace

std::uint64_t count_decode_cost(DecodeMode mode, std::size_t n) {
  if (n == 0) throw ContractError("count_decode_cost: n must be >= 1");
  nd::Rng rng(0);
  const Seq2SeqModel probe(cost_probe_config(n), rng);
  const std::vector<TokenId> enc{corpus::kBos};
  const Source src = encode_source(probe, enc);
  GenConfig gen;
  gen.min_tokens = n;
  gen.max_tokens = n;
  nd::NoGradGuard no_grad;
  nd::reset_attention_score_count();
  if (mode == DecodeMode::Sequential) {
    const auto traj = greedy_decode(probe, src, gen);
    if (traj.size() != n) throw ContractError("count_decode_cost: probe stopped early");
  } else {
    const std::vector<TokenId> gold(n, 7);
    (void)two_pass_decode(probe, src, gold, gen, rng);
  }
  return nd::attention_score_count();
}

std::uint64_t count_single_pass_cost(std::size_t n) {
  if (n == 0) throw ContractError("count_single_pass_cost: n must be >= 1");
  nd::Rng rng(0);
  const Seq2SeqModel probe(cost_probe_config(n), rng);
  const std::vector<TokenId> enc{corpus::kBos};
  const Source src = encode_source(probe, enc);
  const std::vector<TokenId> in(n, 7);
  nd::NoGradGuard no_grad;
  nd::reset_attention_score_count();
  (void)probe.decode(in, src.memory, src.valid);
  return nd::attention_score_count();
}

}  // namespace rlqfs::decode
