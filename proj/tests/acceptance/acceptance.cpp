// End-to-end acceptance run: one PASS/FAIL line per criterion, exit 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "../unit/test_util.hpp"
#include "rlqfs/corpus/forum.hpp"
#include "rlqfs/decode/decode.hpp"
#include "rlqfs/embed/embed.hpp"
#include "rlqfs/rewards/rewards.hpp"
#include "rlqfs/train/train.hpp"

using namespace rlqfs;
using nd::Tensor;
using nd::TokenId;
using testing::gradcheck;
using testing::random_param;
using testing::weighted_sum;

namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << x;
  return s.str();
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) { return fs::temp_directory_path() / ("rlqfs_acceptance_" + name); }

double slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// ---------------------------------------------------------------- 1

Outcome gradients() {
  constexpr double kTol = 1e-4;
  // Entries whose true gradient is 0 (attention key biases) see only rounding
  // noise, about 1e-10 at h = 1e-5; below this floor the error is absolute.
  constexpr double kFloor = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  auto take = [&](const testing::GradCheck& g) {
    worst = std::max(worst, g.max_rel_err);
    checked += g.checked;
  };

  nd::Rng rng(101);
  Tensor a = random_param({4, 5}, rng), b = random_param({5, 3}, rng), c = random_param({2, 5}, rng);
  Tensor x = random_param({3, 4}, rng), y = random_param({3, 4}, rng), bias = random_param({4}, rng);
  Tensor pos = Tensor::parameter({4}, {0.4, 1.1, 2.5, 0.8});
  Tensor v = random_param({6}, rng), w = random_param({6}, rng);
  Tensor g = random_param({4}, rng), be = random_param({4}, rng);
  Tensor table = random_param({6, 3}, rng);
  Tensor s = Tensor::parameter({}, {0.3});
  take(gradcheck([&] { return weighted_sum(nd::matmul(a, b)); }, {a, b}));
  take(gradcheck([&] { return weighted_sum(nd::matmul_nt(a, c)); }, {a, c}));
  take(gradcheck([&] { return weighted_sum(nd::add(x, y)); }, {x, y}));
  take(gradcheck([&] { return weighted_sum(nd::sub(x, y)); }, {x, y}));
  take(gradcheck([&] { return weighted_sum(nd::mul(x, y)); }, {x, y}));
  take(gradcheck([&] { return weighted_sum(nd::scale(x, 0.7)); }, {x}));
  take(gradcheck([&] { return weighted_sum(nd::add_bias(x, bias)); }, {x, bias}));
  take(gradcheck([&] { return weighted_sum(nd::tanh(x)); }, {x}));
  take(gradcheck([&] { return weighted_sum(nd::gelu(x)); }, {x}));
  take(gradcheck([&] { return weighted_sum(nd::sigmoid(x)); }, {x}));
  take(gradcheck([&] { return weighted_sum(nd::log(pos)); }, {pos}));
  take(gradcheck([&] { return weighted_sum(nd::softmax(x, 0)); }, {x}));
  take(gradcheck([&] { return weighted_sum(nd::softmax(x, 1)); }, {x}));
  take(gradcheck([&] { return weighted_sum(nd::log_softmax(x)); }, {x}));
  take(gradcheck([&] { return weighted_sum(nd::layer_norm(x, g, be)); }, {x, g, be}));
  const std::vector<TokenId> ids{5, 0, 5, 2};
  take(gradcheck([&] { return weighted_sum(nd::embedding(table, ids)); }, {table}));
  take(gradcheck(
      [&] {
        nd::Rng mask(7);
        return weighted_sum(nd::dropout(x, 0.3, mask, true));
      },
      {x}));
  take(gradcheck([&] { return weighted_sum(nd::concat({a, c}, 0)); }, {a, c}));
  take(gradcheck([&] { return weighted_sum(nd::concat({x, y}, 1)); }, {x, y}));
  take(gradcheck([&] { return weighted_sum(nd::slice_rows(a, 1, 3)); }, {a}));
  take(gradcheck([&] { return weighted_sum(nd::reshape(a, {5, 4})); }, {a}));
  take(gradcheck([&] { return nd::sum(nd::mul(x, x)); }, {x}));
  take(gradcheck([&] { return nd::mean(nd::mul(x, x)); }, {x}));
  take(gradcheck([&] { return nd::dot(v, w); }, {v, w}));
  const std::vector<TokenId> pick_idx{3, 0, 1}, targets{2, -1, 3};
  take(gradcheck([&] { return weighted_sum(nd::pick(x, pick_idx)); }, {x}));
  take(gradcheck([&] { return nd::cross_entropy(x, targets, -1); }, {x}));
  take(gradcheck([&] { return nd::bce_with_logits(s, 1.0); }, {s}));
  take(gradcheck([&] { return nd::bce_with_logits(s, 0.0); }, {s}));
  Tensor q = random_param({4, 6}, rng), k = random_param({5, 6}, rng), vv = random_param({5, 6}, rng);
  const std::vector<std::uint8_t> valid{1, 1, 0, 1, 1};
  take(gradcheck([&] { return weighted_sum(nd::attention(q, k, vv, 3, {valid, false})); }, {q, k, vv}));
  Tensor self = random_param({4, 6}, rng);
  take(gradcheck([&] { return weighted_sum(nd::attention(self, self, self, 2, {{}, true})); }, {self}));
  std::vector<double> noise(6);
  for (auto& n : noise) n = rng.gumbel();
  take(gradcheck([&] { return weighted_sum(decode::gumbel_softmax(v, 0.7, noise).weights); }, {v}));
  Tensor e1 = random_param({5}, rng, 0.5), e2 = random_param({5}, rng, 0.5);
  take(gradcheck([&] { return embed::pe_loss(embed::similarity(e1, e2), 1); }, {e1, e2}));
  take(gradcheck([&] { return embed::pe_loss_from_logit(nd::dot(e1, e2), 0); }, {e1, e2}));

  // Whole 2+2-layer model: mixed two-pass loss through both passes at fixed sampling.
  model::ModelConfig cfg;
  cfg.vocab_size = 14;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 2;
  cfg.ffn_dim = 16;
  cfg.max_positions = 16;
  cfg.init_std = 0.4;
  model::Seq2SeqModel m(cfg, rng);
  std::vector<Tensor> params;
  for (const auto& p : m.params()) params.push_back(p.tensor);
  const std::vector<TokenId> src{1, 8, 9, 10, 11, 2}, gold{12, 13, 8, 2};
  decode::GenConfig gen;
  gen.min_tokens = 1;
  gen.sampling_mix_prob = 0.5;
  const auto model_check = gradcheck(
      [&] {
        nd::Rng r(5);
        const decode::Source source{m.encode(src), {}};
        auto tp = decode::two_pass_decode(m, source, gold, gen, r);
        return train::mixed_loss(train::mle_loss(tp.pass1_logits, gold), train::pg_loss(tp.trajectory, 0.6), 0.4);
      },
      params, 1e-5, kFloor);
  take(model_check);
  return {worst <= kTol, "max rel err " + fmt(worst) + " over " + std::to_string(checked) + " entries (model " +
                             std::to_string(model_check.checked) + ")"};
}

// ---------------------------------------------------------------- 2

rewards::Words random_words(nd::Rng& rng, std::size_t max_len, std::size_t alphabet) {
  rewards::Words w(rng.uniform_int(max_len + 1));
  for (auto& s : w) s = std::string(1, static_cast<char>('a' + rng.uniform_int(alphabet)));
  return w;
}

bool is_subsequence(const rewards::Words& sub, const rewards::Words& seq) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < seq.size() && j < sub.size(); ++i)
    if (seq[i] == sub[j]) ++j;
  return j == sub.size();
}

std::size_t brute_lcs(const rewards::Words& ref, const rewards::Words& hyp) {
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << hyp.size()); ++mask) {
    rewards::Words sub;
    for (std::size_t i = 0; i < hyp.size(); ++i)
      if (mask >> i & 1u) sub.push_back(hyp[i]);
    if (sub.size() > best && is_subsequence(sub, ref)) best = sub.size();
  }
  return best;
}

rewards::NgramCounts brute_counts(const rewards::Words& ref, const rewards::Words& hyp, std::size_t n) {
  auto grams = [n](const rewards::Words& w) {
    std::vector<rewards::Words> out;
    for (std::size_t i = 0; i + n <= w.size(); ++i) out.emplace_back(w.begin() + i, w.begin() + i + n);
    return out;
  };
  const auto h = grams(hyp), r = grams(ref);
  rewards::NgramCounts c;
  c.total = h.size();
  c.reference_total = r.size();
  std::vector<rewards::Words> seen;
  for (const auto& gram : h) {
    if (std::find(seen.begin(), seen.end(), gram) != seen.end()) continue;
    seen.push_back(gram);
    const auto in_h = static_cast<std::size_t>(std::count(h.begin(), h.end(), gram));
    const auto in_r = static_cast<std::size_t>(std::count(r.begin(), r.end(), gram));
    c.matches += std::min(in_h, in_r);
  }
  return c;
}

Outcome metric_oracles() {
  nd::Rng rng(202);
  std::size_t rouge_bad = 0, bleu_bad = 0;
  const double b2 = rewards::kRougeBeta * rewards::kRougeBeta;
  for (int t = 0; t < 200; ++t) {
    const auto ref = random_words(rng, 12, 4), hyp = random_words(rng, 12, 4);
    const auto got = rewards::rouge_l_scores(ref, hyp);
    rewards::PRF want;
    if (ref.empty() && hyp.empty()) {
      want = {1.0, 1.0, 1.0};
    } else if (!ref.empty() && !hyp.empty()) {
      const double l = static_cast<double>(brute_lcs(ref, hyp));
      want.recall = l / static_cast<double>(ref.size());
      want.precision = l / static_cast<double>(hyp.size());
      const double d = want.recall + b2 * want.precision;
      want.f = d > 0 ? (1 + b2) * want.recall * want.precision / d : 0.0;
    }
    rouge_bad += got.precision != want.precision || got.recall != want.recall || got.f != want.f;
  }
  for (int t = 0; t < 200; ++t) {
    const auto ref = random_words(rng, 12, 3), hyp = random_words(rng, 12, 3);
    bool ok = true;
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto got = rewards::ngram_counts(ref, hyp, n), want = brute_counts(ref, hyp, n);
      ok &= got.matches == want.matches && got.total == want.total && got.reference_total == want.reference_total;
      // BLEU-n from the counted precisions.
      double want_bleu;
      if (ref.empty() && hyp.empty()) {
        want_bleu = 1.0;
      } else if (hyp.empty()) {
        want_bleu = 0.0;
      } else {
        const double bp = hyp.size() > ref.size()
                              ? 1.0
                              : std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(hyp.size()));
        double log_sum = 0.0;
        for (std::size_t k = 1; k <= n; ++k) {
          const auto ck = brute_counts(ref, hyp, k);
          double p;
          if (ck.total == 0 && ck.reference_total == 0) p = 1.0;
          else if (ck.matches == 0) p = rewards::kBleuEpsilon;
          else p = static_cast<double>(ck.matches) / static_cast<double>(ck.total);
          log_sum += std::log(p);
        }
        want_bleu = std::clamp(bp * std::exp(log_sum / static_cast<double>(n)), 0.0, 1.0);
      }
      ok &= rewards::bleu(ref, hyp, n, rewards::BleuSmoothing::Epsilon) == want_bleu;
    }
    bleu_bad += !ok;
  }
  return {rouge_bad == 0 && bleu_bad == 0,
          "ROUGE-L mismatches " + std::to_string(rouge_bad) + "/200, BLEU-1..4 mismatches " + std::to_string(bleu_bad) + "/200"};
}

// ---------------------------------------------------------------- shared QfS setup

struct QfsData {
  corpus::Vocabulary vocab;
  std::vector<train::Example> examples;
  model::ModelConfig cfg;
};

QfsData qfs_data() {
  nd::Rng rng(7);
  const auto raw = corpus::make_synthetic_qfs(8, 4, rng).examples;
  std::vector<std::string> texts;
  for (const auto& e : raw) {
    texts.push_back(e.query);
    texts.push_back(e.document);
    texts.push_back(e.summary);
  }
  QfsData d{corpus::Vocabulary::build(texts, 1), {}, {}};
  d.cfg.vocab_size = d.vocab.size();
  d.examples = train::prepare_examples(raw, d.vocab, d.cfg.max_positions, 32);
  return d;
}

std::vector<double> flat_grads(const nd::ParamList& ps) {
  std::vector<double> out;
  for (const auto& p : ps) out.insert(out.end(), p.tensor.grad().begin(), p.tensor.grad().end());
  return out;
}

// ---------------------------------------------------------------- 3

Outcome loss_identities(const QfsData& d) {
  train::TrainState st(d.cfg, {}, 3, d.vocab.hash());
  auto ps = st.model.params();
  decode::GenConfig gen;
  gen.min_tokens = 1;
  bool mixed_ok = true, zero_ok = true;
  double tf_diff = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& ex = d.examples[i];
    nd::Rng rng(30 + i);
    const decode::Source src{st.model.encode(ex.encoder_ids), {}};
    auto tp = decode::two_pass_decode(st.model, src, ex.gold_ids, gen, rng);
    const Tensor mle = train::mle_loss(tp.pass1_logits, ex.gold_ids);
    const Tensor pg = train::pg_loss(tp.trajectory, 0.8);

    nd::zero_grads(ps);
    nd::backward(mle);
    const auto g_mle = flat_grads(ps);
    nd::zero_grads(ps);
    const Tensor mixed = train::mixed_loss(mle, pg, 1.0);
    nd::backward(mixed);
    mixed_ok &= mixed.item() == mle.item() && flat_grads(ps) == g_mle;

    nd::zero_grads(ps);
    const Tensor zero = train::pg_loss(tp.trajectory, 0.0);
    nd::backward(zero);
    zero_ok &= zero.item() == 0.0;
    for (double g : flat_grads(ps)) zero_ok &= g == 0.0;

    std::vector<TokenId> dec_in{corpus::kBos};
    dec_in.insert(dec_in.end(), ex.gold_ids.begin(), ex.gold_ids.end() - 1);
    const Tensor logits = st.model.decode(dec_in, src.memory, src.valid);
    decode::Trajectory gold_traj;
    gold_traj.token_ids = ex.gold_ids;
    gold_traj.step_logprobs = nd::pick(nd::log_softmax(logits), ex.gold_ids);
    gold_traj.terminated_by = decode::Termination::Eos;
    tf_diff = std::max(tf_diff, std::abs(train::pg_loss(gold_traj, 1.0).item() - train::mle_loss(logits, ex.gold_ids).item()));
  }
  return {mixed_ok && zero_ok && tf_diff <= 1e-10,
          std::string("mixed(eta=1)==mle ") + (mixed_ok ? "yes" : "no") + ", zero-advantage gradient zero " +
              (zero_ok ? "yes" : "no") + ", |pg(adv 1, gold) - mle| " + fmt(tf_diff)};
}

// ---------------------------------------------------------------- 4

Outcome two_pass(const QfsData& d) {
  nd::Rng init(44);
  model::Seq2SeqModel m(d.cfg, init);
  double diff = 0.0, min_grad = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& ex = d.examples[i];
    const decode::Source src{m.encode(ex.encoder_ids), {}};
    decode::GenConfig gen;
    gen.min_tokens = 1;
    gen.sampling_mix_prob = 0.0;
    nd::Rng rng(40 + i);
    auto r0 = decode::two_pass_decode(m, src, ex.gold_ids, gen, rng);
    for (std::size_t k = 0; k < r0.pass1_logits.size(); ++k)
      diff = std::max(diff, std::abs(r0.pass1_logits.data()[k] - r0.pass2_logits.data()[k]));

    gen.sampling_mix_prob = 1.0;
    gen.min_tokens = ex.gold_ids.size();
    auto r1 = decode::two_pass_decode(m, src, ex.gold_ids, gen, rng);
    nd::backward(nd::sum(r1.trajectory.step_logprobs));
    double norm = 0.0;
    if (r1.pass1_logits.has_grad())
      for (double x : r1.pass1_logits.grad()) norm += x * x;
    min_grad = std::min(min_grad, std::sqrt(norm));
  }
  return {diff <= 1e-9 && min_grad > 1e-8,
          "mix 0 max |pass1 - pass2| " + fmt(diff) + ", min |d logp2 / d pass1 logits| " + fmt(min_grad)};
}

// ---------------------------------------------------------------- 5

Outcome gumbel() {
  const Tensor logits = Tensor::vector({1.0, -0.5, 2.2, 0.0, 0.7, -1.3});
  std::vector<double> p(6);
  double z = 0.0;
  for (std::size_t i = 0; i < 6; ++i) z += p[i] = std::exp(logits.at(i));
  for (auto& x : p) x /= z;
  nd::Rng rng(55);
  const int n = 100000;
  std::vector<double> freq(6, 0.0);
  for (int i = 0; i < n; ++i) freq[static_cast<std::size_t>(decode::gumbel_softmax(logits, 1.0, rng).token)] += 1.0 / n;
  const double tv = testing::total_variation(freq, p);

  Tensor l = random_param({7}, rng);
  std::vector<double> noise(7);
  for (auto& x : noise) x = rng.gumbel();
  double worst = 0.0;
  for (double tau : {0.3, 1.0, 3.0})
    worst = std::max(worst, gradcheck([&] { return weighted_sum(decode::gumbel_softmax(l, tau, noise).weights); }, {l}).max_rel_err);
  return {tv <= 0.02 && worst <= 1e-4, "TV " + fmt(tv) + " over 100k draws, fixed-noise gradient rel err " + fmt(worst)};
}

// ---------------------------------------------------------------- 6, 7

struct SlRun {
  train::TrainState state;
  std::vector<std::string> log;
  double accuracy = 0.0;
  double seconds = 0.0;
};

constexpr double kSlLimit = 600.0;

SlRun supervised(const QfsData& d) {
  SlRun run{train::TrainState(d.cfg, {nd::OptimizerKind::Adam, 1e-3}, 1, d.vocab.hash()), {}, 0.0, 0.0};
  train::LossConfig loss;
  train::LoopConfig loop;
  loop.batch_size = 8;
  loop.epochs = 100000;
  const auto t0 = Clock::now();
  train::run_training(run.state, d.examples, loss, decode::GenConfig::desk(), loop, nullptr, d.vocab,
                      [&](const train::StepReport& r) {
                        run.log.push_back(train::metrics_json(r));
                        if (r.step % 10 != 0) return true;
                        run.accuracy = train::teacher_forced_accuracy(run.state.model, d.examples);
                        return run.accuracy < 0.99 && seconds_since(t0) < kSlLimit;
                      });
  run.seconds = seconds_since(t0);
  return run;
}

Outcome sl_overfit(const SlRun& run) {
  return {run.accuracy >= 0.99 && run.seconds <= kSlLimit,
          "token accuracy " + fmt(run.accuracy) + " after " + std::to_string(run.state.step) + " steps in " +
              fmt(run.seconds, 3) + " s"};
}

struct RlRun {
  std::vector<std::string> log;
  double before = 0.0;
  double after = 0.0;
  double advantage_slope = 0.0;
  double seconds = 0.0;
};

RlRun reinforce(const QfsData& d, const train::TrainState& sl) {
  RlRun run;
  const auto gen = decode::GenConfig::desk();
  run.before = train::evaluate(sl.model, d.examples, d.vocab, gen, train::EvalDecoder::Greedy).rougeL;
  auto st = train::from_checkpoint(train::to_checkpoint(sl), {nd::OptimizerKind::Adam, 1e-5});
  st.step = 0;
  train::LossConfig loss;
  loss.eta = 0.1;
  train::LoopConfig loop;
  loop.batch_size = 8;
  loop.epochs = 100000;
  loop.max_steps = 500;
  std::vector<double> steps, adv;
  const auto t0 = Clock::now();
  train::run_training(st, d.examples, loss, gen, loop, nullptr, d.vocab, [&](const train::StepReport& r) {
    run.log.push_back(train::metrics_json(r));
    steps.push_back(static_cast<double>(r.step));
    adv.push_back(r.mean_advantage);
    return true;
  });
  run.seconds = seconds_since(t0);
  run.after = train::evaluate(st.model, d.examples, d.vocab, gen, train::EvalDecoder::Greedy).rougeL;
  run.advantage_slope = slope(steps, adv);
  return run;
}

Outcome rl_improvement(const RlRun& run) {
  const double gain = run.after - run.before;
  return {gain >= 2.0 && run.advantage_slope > 0.0 && run.seconds <= 1800.0,
          "greedy ROUGE-L F " + fmt(run.before) + " -> " + fmt(run.after) + " (" + (gain >= 0 ? "+" : "") + fmt(gain, 3) +
              ", need +2.0), advantage slope " + fmt(run.advantage_slope) + "/step, " + fmt(run.seconds, 3) + " s"};
}

// ---------------------------------------------------------------- 8

struct EmbedRun {
  std::vector<std::string> log;
  embed::Separation sep;
  double test_loss = 0.0;
  double seconds = 0.0;
};

EmbedRun cluster_embedder() {
  EmbedRun run;
  nd::Rng rng(11);
  const auto cc = embed::make_synthetic_clusters(8, 50, 10, {}, rng);
  std::vector<std::string> texts;
  for (const auto& p : cc.train) texts.push_back(p.text);
  const auto vocab = corpus::Vocabulary::build(texts, 2);
  model::ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.max_positions = 32;
  const auto pairs = embed::tokenize_pairs(embed::cluster_positive_pairs(cc.train), vocab, cfg.max_positions);
  embed::EmbedderState st(cfg, {nd::OptimizerKind::Adam, 1e-3}, 3, vocab.hash());
  embed::EmbedLoopConfig loop;
  loop.batch_size = 16;
  loop.epochs = 100;
  loop.max_steps = 500;
  const auto t0 = Clock::now();
  embed::run_embedder_training(st, pairs, {1.0, 1.0}, loop, [&](const embed::EmbedStepReport& r) {
    run.log.push_back(embed::metrics_json(r));
    return true;
  });
  run.sep = embed::cluster_separation(st.encoder, cc.test, vocab);
  run.test_loss = embed::cluster_pair_loss(st.encoder, cc.test, vocab, 5);
  run.seconds = seconds_since(t0);
  return run;
}

Outcome cluster_hypothesis(const EmbedRun& run) {
  return {run.sep.separation() >= 0.2 && run.test_loss < 0.35 && run.seconds <= 1200.0,
          "held-out intra cos " + fmt(run.sep.intra_cos) + " inter cos " + fmt(run.sep.inter_cos) + " (separation " +
              fmt(run.sep.separation()) + "), test pe_loss " + fmt(run.test_loss) + ", " + fmt(run.seconds, 3) + " s"};
}

// ---------------------------------------------------------------- 9

Outcome complexity() {
  std::vector<double> lx, seq, two;
  bool doubled = true;
  for (std::size_t n : {16, 32, 64, 128, 256, 512}) {
    const auto s = decode::count_decode_cost(decode::DecodeMode::Sequential, n);
    const auto t = decode::count_decode_cost(decode::DecodeMode::TwoPass, n);
    doubled &= t == 2 * decode::count_single_pass_cost(n);
    lx.push_back(std::log(static_cast<double>(n)));
    seq.push_back(std::log(static_cast<double>(s)));
    two.push_back(std::log(static_cast<double>(t)));
  }
  const double a = slope(lx, seq), b = slope(lx, two);
  return {std::abs(a - 3.0) <= 0.3 && std::abs(b - 2.0) <= 0.3 && doubled,
          "slopes sequential " + fmt(a) + " two-pass " + fmt(b) + ", two-pass == 2x single " + (doubled ? "yes" : "no")};
}

// ---------------------------------------------------------------- 10

Outcome ingestion() {
  const auto dump = corpus::load_forum_jsonl(fs::path(RLQFS_TEST_DATA) / "forum_fixture.jsonl");
  const auto split = corpus::split_by_forum(corpus::filter_forum_dump(dump), "explainlikeimfive");
  using Survivors = std::vector<std::pair<std::string, std::vector<std::int64_t>>>;
  auto summarize = [](const corpus::ForumDump& posts) {
    Survivors out;
    for (const auto& p : posts) {
      std::vector<std::int64_t> scores;
      for (const auto& c : p.comments) scores.push_back(c.score);
      out.emplace_back(p.post_id, scores);
    }
    return out;
  };
  const Survivors want_train{{"p1", {3}}, {"p5", {5, 2, 8}}}, want_test{{"p3", {2, 4}}};
  const bool ok = summarize(split.train) == want_train && summarize(split.test) == want_test &&
                  corpus::make_positive_pairs(split.train).size() == 3 &&
                  corpus::make_positive_pairs(split.test).size() == 1;
  return {ok, "train " + std::to_string(split.train.size()) + " posts, test " + std::to_string(split.test.size()) +
                  " posts" + (ok ? ", matches the hand-derived set" : ", differs from the hand-derived set")};
}

// ---------------------------------------------------------------- 11

Outcome persistence(const QfsData& d, const SlRun& sl, const RlRun& rl, const EmbedRun& emb) {
  std::vector<std::string> notes;
  const bool sl_same = supervised(d).log == sl.log;
  const bool rl_same = reinforce(d, sl.state).log == rl.log;
  const bool emb_same = cluster_embedder().log == emb.log;

  const auto p1 = scratch("a.ckpt"), p2 = scratch("b.ckpt");
  train::save_train_state(p1, sl.state);
  train::save_train_state(p2, train::load_train_state(p1, d.vocab.hash(), {nd::OptimizerKind::Adam, 1e-3}));
  const bool bytes_same = read_bytes(p1) == read_bytes(p2) && !read_bytes(p1).empty();

  // Mixed-objective run of 12 steps, uninterrupted versus 7 + resume + 5.
  train::LossConfig loss;
  loss.eta = 0.3;
  train::LoopConfig loop;
  loop.batch_size = 4;
  loop.epochs = 100;
  loop.max_steps = 12;
  const nd::OptimizerConfig opt{nd::OptimizerKind::Adam, 1e-3};
  const auto gen = decode::GenConfig::desk();
  std::vector<train::StepReport> full, split;
  train::TrainState a(d.cfg, opt, 9, d.vocab.hash());
  train::run_training(a, d.examples, loss, gen, loop, nullptr, d.vocab, [&](const auto& r) {
    full.push_back(r);
    return true;
  });
  train::TrainState b(d.cfg, opt, 9, d.vocab.hash());
  auto first = loop;
  first.max_steps = 7;
  train::run_training(b, d.examples, loss, gen, first, nullptr, d.vocab, [&](const auto& r) {
    split.push_back(r);
    return true;
  });
  train::save_train_state(p1, b);
  auto resumed = train::load_train_state(p1, d.vocab.hash(), opt);
  train::run_training(resumed, d.examples, loss, gen, loop, nullptr, d.vocab, [&](const auto& r) {
    split.push_back(r);
    return true;
  });
  fs::remove(p1);
  fs::remove(p2);
  const bool resume_same = full == split && full.size() == 12;

  auto yn = [](bool x) { return x ? "yes" : "no"; };
  std::ostringstream s;
  s << "rerun logs identical: SL " << yn(sl_same) << " RL " << yn(rl_same) << " embedder " << yn(emb_same)
    << "; save-load-save bytes " << yn(bytes_same) << "; resumed curve " << yn(resume_same);
  return {sl_same && rl_same && emb_same && bytes_same && resume_same, s.str()};
}

}  // namespace

// Optional arguments select criteria by number; default is all of them.
int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  int failed = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << std::setw(2) << id << "  " << name << ": " << o.detail
              << "  [" << fmt(seconds_since(t0), 3) << " s]" << std::endl;
  };

  report(1, "gradient correctness", [] {
    const auto t0 = Clock::now();
    auto o = gradients();
    if (seconds_since(t0) > 120.0) o = {false, o.detail + ", over the 2 min budget"};
    return o;
  });
  report(2, "metric oracles", [] {
    const auto t0 = Clock::now();
    auto o = metric_oracles();
    if (seconds_since(t0) > 60.0) o = {false, o.detail + ", over the 1 min budget"};
    return o;
  });
  const QfsData data = qfs_data();
  report(3, "loss identities", [&] { return loss_identities(data); });
  report(4, "two-pass correctness", [&] { return two_pass(data); });
  report(5, "gumbel fidelity", [] { return gumbel(); });

  std::optional<SlRun> sl;
  std::optional<RlRun> rl;
  std::optional<EmbedRun> emb;
  report(6, "supervised overfit", [&] {
    sl = supervised(data);
    return sl_overfit(*sl);
  });
  report(7, "RL improvement", [&]() -> Outcome {
    if (!sl) return {false, "no supervised checkpoint"};
    rl = reinforce(data, sl->state);
    return rl_improvement(*rl);
  });
  report(8, "cluster hypothesis", [&] {
    emb = cluster_embedder();
    return cluster_hypothesis(*emb);
  });
  report(9, "complexity", [] { return complexity(); });
  report(10, "ingestion rules", [] { return ingestion(); });
  report(11, "determinism and persistence", [&]() -> Outcome {
    if (!sl || !rl || !emb) return {false, "criteria 6-8 did not produce runs to compare"};
    return persistence(data, *sl, *rl, *emb);
  });

  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
