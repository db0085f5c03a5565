#include "rlqfs/embed/embed.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "json.hpp"
#include "rlqfs/errors.hpp"

namespace rlqfs::embed {
namespace {

constexpr std::uint64_t kStreamSalt = 0x9e3779b97f4a7c15ULL;

PassageEncoder init_encoder(const model::ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  nd::Rng rng(seed);
  return PassageEncoder(cfg, corpus::kRepr, rng);
}

const std::vector<std::string> kSyllables{"ba", "de", "ki", "lo", "mu", "ne", "po", "ra", "si", "tu"};

// Pronounceable synthetic word: prefix plus the base-10 digits of n as syllables.
std::string synth_word(const std::string& prefix, std::size_t n) {
  std::string w = prefix;
  w += kSyllables[(n / 100) % 10];
  w += kSyllables[(n / 10) % 10];
  w += kSyllables[n % 10];
  return w;
}

std::vector<double> embed_text(const PassageEncoder& enc, std::string_view text, const corpus::Vocabulary& vocab) {
  nd::NoGradGuard no_grad;
  const Tensor e = enc.embed(passage_ids(text, vocab, enc.config().max_positions));
  return {e.data().begin(), e.data().end()};
}

}  // namespace

std::vector<TokenId> passage_ids(std::string_view text, const corpus::Vocabulary& vocab, std::size_t max_positions) {
  if (max_positions == 0) throw ContractError("passage_ids: max_positions must be >= 1");
  std::vector<TokenId> ids{corpus::kRepr};
  for (auto id : corpus::tokenize(text, vocab)) {
    if (ids.size() == max_positions) break;
    ids.push_back(id);
  }
  return ids;
}

std::vector<PositivePair> tokenize_pairs(const std::vector<corpus::PairRecord>& records,
                                         const corpus::Vocabulary& vocab, std::size_t max_positions) {
  std::vector<PositivePair> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    out.push_back({r.query_id, passage_ids(r.p_text, vocab, max_positions), passage_ids(r.q_text, vocab, max_positions)});
  }
  return out;
}

Tensor similarity(const Tensor& e_p, const Tensor& e_q) {
  if (e_p.shape() != e_q.shape()) {
    throw ContractError("similarity: embedding shapes " + nd::shape_str(e_p.shape()) + " and " +
                        nd::shape_str(e_q.shape()) + " differ");
  }
  return nd::sigmoid(nd::dot(e_p, e_q));
}

double similarity(std::span<const double> e_p, std::span<const double> e_q) {
  if (e_p.size() != e_q.size()) throw ContractError("similarity: embedding dimensions differ");
  double d = 0.0;
  for (std::size_t i = 0; i < e_p.size(); ++i) d += e_p[i] * e_q[i];
  return d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
}

Tensor pe_loss(const Tensor& y_hat, int y) {
  if (y != 0 && y != 1) throw ContractError("pe_loss: label must be 0 or 1");
  if (y == 1) return nd::scale(nd::log(y_hat), -1.0);
  return nd::scale(nd::log(nd::sub(Tensor::full(y_hat.shape(), 1.0), y_hat)), -1.0);
}

Tensor pe_loss_from_logit(const Tensor& dot, int y) {
  if (y != 0 && y != 1) throw ContractError("pe_loss: label must be 0 or 1");
  return nd::bce_with_logits(dot, static_cast<double>(y));
}

std::vector<PassagePair> in_batch_negatives(std::span<const PositivePair> batch, nd::Rng& rng) {
  if (batch.size() < 2) throw ContractError("in_batch_negatives: need at least 2 pairs, got " + std::to_string(batch.size()));
  std::vector<PassagePair> out;
  out.reserve(2 * batch.size());
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    eligible.clear();
    for (std::size_t j = 0; j < batch.size(); ++j) {
      if (batch[j].query_id != batch[i].query_id) eligible.push_back(j);
    }
    if (eligible.empty()) {
      throw ContractError("in_batch_negatives: every pair in the batch answers query " + batch[i].query_id);
    }
    const std::size_t j = eligible[rng.uniform_int(eligible.size())];
    out.push_back({batch[i].p_ids, batch[i].q_ids, 1, i, i});
    out.push_back({batch[i].p_ids, batch[j].q_ids, 0, i, j});
  }
  return out;
}

std::size_t MlmSample::selected() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

MlmSample mlm_corrupt(std::span<const TokenId> ids, std::size_t vocab_size, nd::Rng& rng) {
  MlmSample s;
  s.ids.assign(ids.begin(), ids.end());
  s.targets.assign(ids.size(), -1);
  s.mask.assign(ids.size(), 0);
  const std::size_t n_regular = vocab_size > corpus::kNumSpecial ? vocab_size - corpus::kNumSpecial : 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (corpus::Vocabulary::is_special(ids[i])) continue;
    if (!rng.bernoulli(kMlmSelectProb)) continue;
    s.mask[i] = 1;
    s.targets[i] = ids[i];
    const double u = rng.uniform();
    if (u < kMlmMaskShare) {
      s.ids[i] = corpus::kMask;
    } else if (u < kMlmMaskShare + kMlmRandomShare && n_regular > 0) {
      s.ids[i] = static_cast<TokenId>(corpus::kNumSpecial + rng.uniform_int(n_regular));
    }
  }
  return s;
}

EmbedderState::EmbedderState(const model::ModelConfig& cfg, const nd::OptimizerConfig& opt, std::uint64_t seed_,
                             std::uint64_t vocab_hash_)
    : encoder(init_encoder(cfg, seed_)), optimizer(opt), rng(seed_ ^ kStreamSalt), seed(seed_),
      vocab_hash(vocab_hash_) {}

EmbedStepReport embedder_train_step(EmbedderState& state, std::span<const PositivePair> batch,
                                    const EmbedLossConfig& cfg) {
  if (!(cfg.mlm_weight >= 0.0)) throw ConfigError("embed.mlm_weight must be >= 0");
  const auto pairs = in_batch_negatives(batch, state.rng);
  auto params = state.encoder.params();
  nd::zero_grads(params);
  const model::ForwardCtx ctx{true, &state.rng};

  std::vector<Tensor> e_p, e_q;
  for (const auto& b : batch) {
    e_p.push_back(state.encoder.embed(b.p_ids, ctx));
    e_q.push_back(state.encoder.embed(b.q_ids, ctx));
  }
  std::vector<Tensor> pair_losses;
  for (const auto& pr : pairs) {
    pair_losses.push_back(pe_loss_from_logit(nd::dot(e_p[pr.p_source], e_q[pr.q_source]), pr.label));
  }
  Tensor pe = nd::mean(nd::concat(pair_losses, 0));

  Tensor total = pe;
  EmbedStepReport rep;
  if (cfg.mlm_weight > 0.0) {
    const std::size_t v = state.encoder.config().vocab_size;
    std::vector<Tensor> sums;
    std::size_t n_masked = 0;
    for (const auto& b : batch) {
      for (const auto* ids : {&b.p_ids, &b.q_ids}) {
        auto m = mlm_corrupt(*ids, v, state.rng);
        const std::size_t k = m.selected();
        if (k == 0) continue;
        const Tensor logits = state.encoder.mlm_logits(state.encoder.hidden(m.ids, {}, ctx));
        sums.push_back(nd::scale(nd::cross_entropy(logits, m.targets, -1), static_cast<double>(k)));
        n_masked += k;
      }
    }
    if (n_masked > 0) {
      Tensor mlm = nd::scale(nd::sum(nd::concat(sums, 0)), 1.0 / static_cast<double>(n_masked));
      rep.mlm_loss = mlm.item();
      total = nd::add(pe, nd::scale(mlm, cfg.mlm_weight));
    }
  }
  rep.pe_loss = pe.item();
  rep.total = total.item();
  rep.pairs = pairs.size();
  if (!std::isfinite(rep.total)) {
    throw NumericError("non-finite embedder loss at step " + std::to_string(state.step + 1) +
                       " (pe=" + std::to_string(rep.pe_loss) + ", mlm=" + std::to_string(rep.mlm_loss) + ")");
  }
  nd::backward(total);
  rep.grad_norm = nd::clip_grad_norm(params, cfg.clip_norm > 0.0 ? cfg.clip_norm
                                                                  : std::numeric_limits<double>::infinity());
  if (!std::isfinite(rep.grad_norm)) throw NumericError("non-finite embedder gradient at step " +
                                                        std::to_string(state.step + 1));
  state.optimizer.step(params);
  rep.step = ++state.step;
  return rep;
}

std::string metrics_json(const EmbedStepReport& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["pe_loss"] = r.pe_loss;
  j["mlm_loss"] = r.mlm_loss;
  j["total"] = r.total;
  j["grad_norm"] = r.grad_norm;
  j["pairs"] = r.pairs;
  return j.dump();
}

void run_embedder_training(EmbedderState& state, std::span<const PositivePair> pairs, const EmbedLossConfig& cfg,
                           const EmbedLoopConfig& loop,
                           const std::function<bool(const EmbedStepReport&)>& on_step,
                           const std::function<bool(std::uint64_t epoch)>& on_epoch) {
  if (loop.batch_size < 2) throw ConfigError("train.batch_size must be >= 2 for in-batch negatives");
  if (pairs.size() < 2) throw DataError("embedder training needs at least 2 positive pairs");
  const std::size_t per_epoch = (pairs.size() + loop.batch_size - 1) / loop.batch_size;
  std::uint64_t budget = static_cast<std::uint64_t>(per_epoch) * loop.epochs;
  if (loop.max_steps > 0) budget = loop.max_steps;
  std::vector<std::size_t> order(pairs.size());
  std::uint64_t perm_epoch = std::numeric_limits<std::uint64_t>::max();
  std::vector<PositivePair> batch;
  while (state.step < budget) {
    const std::uint64_t epoch = state.step / per_epoch;
    const std::size_t slot = static_cast<std::size_t>(state.step % per_epoch);
    if (epoch != perm_epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      nd::Rng shuffler(state.seed * 0x100000001b3ULL + epoch + 1);
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffler.uniform_int(i)]);
      perm_epoch = epoch;
    }
    batch.clear();
    const std::size_t begin = slot * loop.batch_size;
    const std::size_t end = std::min(order.size(), begin + loop.batch_size);
    for (std::size_t i = begin; i < end; ++i) batch.push_back(pairs[order[i]]);
    // A one-pair tail cannot form a negative; borrow from the epoch start.
    for (std::size_t i = 0; batch.size() < 2; ++i) batch.push_back(pairs[order[i]]);
    const auto rep = embedder_train_step(state, batch, cfg);
    state.epoch = state.step / per_epoch;
    if (on_step && !on_step(rep)) return;
    if (state.step % per_epoch == 0 && on_epoch && !on_epoch(state.epoch)) return;
  }
}

std::vector<ClusterPassage> passages_by_query(const std::vector<corpus::PairRecord>& pairs) {
  std::map<std::string, std::size_t> group;
  std::set<std::pair<std::size_t, std::string>> seen;
  std::vector<ClusterPassage> out;
  for (const auto& r : pairs) {
    const auto g = group.emplace(r.query_id, group.size()).first->second;
    for (const auto* t : {&r.p_text, &r.q_text}) {
      if (seen.emplace(g, *t).second) out.push_back({g, *t});
    }
  }
  return out;
}

ClusterCorpus make_synthetic_clusters(std::size_t n_clusters, std::size_t per_cluster, std::size_t test_per_cluster,
                                      const ClusterSpec& spec, nd::Rng& rng) {
  if (n_clusters < 2) throw ContractError("make_synthetic_clusters: need at least 2 clusters");
  if (test_per_cluster > per_cluster) throw ContractError("make_synthetic_clusters: test split exceeds cluster size");
  if (spec.min_len == 0 || spec.min_len > spec.max_len) throw ContractError("make_synthetic_clusters: bad length bounds");
  if (spec.topic_words == 0 || spec.filler_words == 0) throw ContractError("make_synthetic_clusters: empty word pools");
  if (!(spec.topic_share >= 0.0 && spec.topic_share <= 1.0)) {
    throw ContractError("make_synthetic_clusters: topic_share must lie in [0, 1]");
  }
  ClusterCorpus c;
  c.n_clusters = n_clusters;
  for (std::size_t k = 0; k < n_clusters; ++k) {
    for (std::size_t i = 0; i < per_cluster; ++i) {
      const std::size_t len = spec.min_len + rng.uniform_int(spec.max_len - spec.min_len + 1);
      std::string text;
      for (std::size_t w = 0; w < len; ++w) {
        if (!text.empty()) text.push_back(' ');
        if (rng.bernoulli(spec.topic_share)) {
          text += synth_word("zo", k * spec.topic_words + rng.uniform_int(spec.topic_words));
        } else {
          text += synth_word("vi", rng.uniform_int(spec.filler_words));
        }
      }
      auto& split = i + test_per_cluster >= per_cluster ? c.test : c.train;
      split.push_back({k, std::move(text)});
    }
  }
  return c;
}

std::vector<corpus::PairRecord> cluster_positive_pairs(std::span<const ClusterPassage> passages) {
  std::vector<corpus::PairRecord> out;
  for (std::size_t i = 0; i < passages.size(); ++i) {
    for (std::size_t j = i + 1; j < passages.size(); ++j) {
      if (passages[i].cluster != passages[j].cluster) continue;
      out.push_back({"cluster-" + std::to_string(passages[i].cluster), passages[i].text, passages[j].text});
    }
  }
  return out;
}

OverlapStats lexical_overlap(std::span<const ClusterPassage> passages) {
  std::vector<std::set<std::string>> sets;
  for (const auto& p : passages) {
    const auto w = corpus::split_words(p.text);
    sets.emplace_back(w.begin(), w.end());
  }
  double intra = 0, inter = 0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    for (std::size_t j = i + 1; j < sets.size(); ++j) {
      std::size_t common = 0;
      for (const auto& w : sets[i]) common += sets[j].count(w);
      const std::size_t uni = sets[i].size() + sets[j].size() - common;
      const double jac = uni ? static_cast<double>(common) / static_cast<double>(uni) : 1.0;
      if (passages[i].cluster == passages[j].cluster) {
        intra += jac;
        ++n_intra;
      } else {
        inter += jac;
        ++n_inter;
      }
    }
  }
  return {n_intra ? intra / static_cast<double>(n_intra) : 0.0, n_inter ? inter / static_cast<double>(n_inter) : 0.0};
}

Separation cluster_separation(const PassageEncoder& enc, std::span<const ClusterPassage> passages,
                              const corpus::Vocabulary& vocab) {
  std::vector<std::vector<double>> e;
  for (const auto& p : passages) e.push_back(embed_text(enc, p.text, vocab));
  Separation s;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (std::size_t j = i + 1; j < e.size(); ++j) {
      const double c = rewards::cosine(e[i], e[j]);
      if (passages[i].cluster == passages[j].cluster) {
        s.intra_cos += c;
        ++n_intra;
      } else {
        s.inter_cos += c;
        ++n_inter;
      }
    }
  }
  if (n_intra) s.intra_cos /= static_cast<double>(n_intra);
  if (n_inter) s.inter_cos /= static_cast<double>(n_inter);
  return s;
}

double cluster_pair_loss(const PassageEncoder& enc, std::span<const ClusterPassage> passages,
                         const corpus::Vocabulary& vocab, std::uint64_t seed) {
  std::vector<std::vector<double>> e;
  for (const auto& p : passages) e.push_back(embed_text(enc, p.text, vocab));
  std::vector<std::pair<std::size_t, std::size_t>> pos, neg;
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (std::size_t j = i + 1; j < e.size(); ++j) {
      (passages[i].cluster == passages[j].cluster ? pos : neg).emplace_back(i, j);
    }
  }
  nd::Rng rng(seed);
  for (std::size_t i = neg.size(); i > 1; --i) std::swap(neg[i - 1], neg[rng.uniform_int(i)]);
  neg.resize(std::min(neg.size(), pos.size()));
  double total = 0.0;
  auto add = [&](std::size_t i, std::size_t j, int y) {
    double d = 0.0;
    for (std::size_t k = 0; k < e[i].size(); ++k) d += e[i][k] * e[j][k];
    total += std::max(d, 0.0) - y * d + std::log1p(std::exp(-std::abs(d)));
  };
  for (auto [i, j] : pos) add(i, j, 1);
  for (auto [i, j] : neg) add(i, j, 0);
  const std::size_t n = pos.size() + neg.size();
  return n ? total / static_cast<double>(n) : 0.0;
}

PassageTextEmbedder::PassageTextEmbedder(PassageEncoder encoder, corpus::Vocabulary vocab)
    : encoder_(std::move(encoder)), vocab_(std::move(vocab)) {}

std::vector<double> PassageTextEmbedder::embed(std::string_view text) const { return embed_text(encoder_, text, vocab_); }

model::Checkpoint to_checkpoint(const EmbedderState& state) {
  model::Checkpoint c;
  c.kind = "passage_encoder";
  c.config = state.encoder.config();
  c.vocab_hash = state.vocab_hash;
  c.seed = state.seed;
  c.step = state.step;
  c.meta["epoch"] = std::to_string(state.epoch);
  c.meta["best_test_loss"] = model::encode_real(state.best_test_loss);
  c.meta["rng"] = state.rng.save_state();
  c.tensors = state.encoder.params();
  model::append_optimizer_state(c, state.encoder.params(), state.optimizer);
  return c;
}

EmbedderState from_checkpoint(const model::Checkpoint& ckpt, const nd::OptimizerConfig& opt) {
  if (ckpt.kind != "passage_encoder") {
    throw DataError("checkpoint holds a '" + ckpt.kind + "', not a passage encoder");
  }
  EmbedderState s(ckpt.config, opt, ckpt.seed, ckpt.vocab_hash);
  const auto params = s.encoder.params();
  s.encoder.load_params(model::stored_weights(ckpt, params));
  model::restore_optimizer_state(ckpt, params, s.optimizer);
  s.step = ckpt.step;
  s.epoch = std::stoull(model::require_meta(ckpt, "epoch"));
  s.best_test_loss = model::decode_real(model::require_meta(ckpt, "best_test_loss"));
  s.rng.load_state(model::require_meta(ckpt, "rng"));
  return s;
}

void save_embedder_state(const std::filesystem::path& path, const EmbedderState& state) {
  model::save_checkpoint(path, to_checkpoint(state));
}

EmbedderState load_embedder_state(const std::filesystem::path& path, std::uint64_t vocab_hash,
                                  const nd::OptimizerConfig& opt) {
  const auto ckpt = model::load_checkpoint(path);
  if (ckpt.vocab_hash != vocab_hash) {
    throw DataError("embedder checkpoint " + path.string() + " does not match the supplied vocabulary");
  }
  return from_checkpoint(ckpt, opt);
}

}  // namespace rlqfs::embed
