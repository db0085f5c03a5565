#include "rlqfs/cli/commands.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "rlqfs/corpus/forum.hpp"
#include "rlqfs/corpus/qfs.hpp"
#include "rlqfs/errors.hpp"

namespace rlqfs::cli {
namespace {

using nlohmann::ordered_json;

std::ofstream open_out(const std::filesystem::path& path, bool append = false) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  return f;
}

void write_json(const std::filesystem::path& path, const ordered_json& j) {
  auto f = open_out(path);
  f << j.dump(2) << "\n";
}

corpus::Vocabulary vocab_for(const RunConfig& cfg, const std::vector<std::string>& texts) {
  if (!cfg.vocab_path.empty()) return corpus::Vocabulary::load(cfg.vocab_path);
  return corpus::Vocabulary::build(texts, cfg.min_freq);
}

ordered_json eval_json(const train::EvalReport& r) {
  ordered_json j;
  j["rouge1"] = r.rouge1;
  j["rouge2"] = r.rouge2;
  j["rougeL"] = r.rougeL;
  j["mean_length"] = r.mean_length;
  j["count"] = r.count;
  return j;
}

std::string fixed(double x, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << x;
  return os.str();
}

struct IdText {
  std::string id;
  std::string text;
};

std::vector<IdText> load_id_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<IdText> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("summary").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::string> qfs_texts(const std::vector<corpus::QfsExample>& xs) {
  std::vector<std::string> t;
  for (const auto& x : xs) {
    t.push_back(x.query);
    t.push_back(x.document);
    t.push_back(x.summary);
  }
  return t;
}

}  // namespace

int run_guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitData;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ContractError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int cmd_train_qfs(const TrainArgs& args, std::ostream& out) {
  const RunConfig cfg = load_run_config(args.config, args.overrides, Purpose::TrainQfs);
  const auto train_raw = corpus::load_qfs_jsonl(cfg.train_path);
  if (train_raw.empty()) throw DataError("data.train: no examples in " + cfg.train_path);
  const auto eval_raw = cfg.eval_path.empty() ? train_raw : corpus::load_qfs_jsonl(cfg.eval_path);
  const auto vocab = vocab_for(cfg, qfs_texts(train_raw));
  const auto& dir = cfg.output_dir;
  std::filesystem::create_directories(dir);
  vocab.save(dir / "vocab.txt");

  auto mcfg = cfg.model;
  mcfg.vocab_size = vocab.size();
  std::optional<train::TrainState> state;
  if (!cfg.resume.empty()) {
    state.emplace(train::load_train_state(cfg.resume, vocab.hash(), cfg.optimizer));
  } else if (!cfg.init_checkpoint.empty()) {
    const auto ckpt = model::load_checkpoint(cfg.init_checkpoint);
    if (ckpt.vocab_hash != vocab.hash()) throw DataError("train.init_checkpoint: vocabulary hash mismatch");
    state.emplace(ckpt.config, cfg.optimizer, cfg.seed, vocab.hash());
    state->model.load_params(model::stored_weights(ckpt, state->model.params()));
  } else {
    state.emplace(mcfg, cfg.optimizer, cfg.seed, vocab.hash());
  }
  const auto examples =
      train::prepare_examples(train_raw, vocab, state->model.config().max_positions, cfg.max_summary_tokens);
  const auto eval_examples =
      train::prepare_examples(eval_raw, vocab, state->model.config().max_positions, cfg.max_summary_tokens);

  std::optional<embed::PassageTextEmbedder> embedder;
  if (cfg.loss.uses_reward() && cfg.loss.reward_spec.needs_embedder()) {
    auto evocab = corpus::Vocabulary::load(cfg.embedder_vocab);
    auto es = embed::load_embedder_state(cfg.embedder_checkpoint, evocab.hash());
    embedder.emplace(std::move(es.encoder), std::move(evocab));
  }

  auto metrics = open_out(dir / "metrics.jsonl", !cfg.resume.empty());
  train::run_training(*state, examples, cfg.loss, cfg.gen, cfg.loop, embedder ? &*embedder : nullptr, vocab,
                      [&](const train::StepReport& r) {
                        metrics << train::metrics_json(r) << "\n";
                        if (cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0) {
                          metrics.flush();
                          train::save_train_state(dir / "checkpoint.bin", *state);
                        }
                        return true;
                      });
  metrics.flush();

  const auto rep = train::evaluate(state->model, eval_examples, vocab, cfg.gen);
  state->best_eval = std::max(state->best_eval, rep.rougeL);
  train::save_train_state(dir / "checkpoint.bin", *state);
  auto j = eval_json(rep);
  j["step"] = state->step;
  j["token_accuracy"] = train::teacher_forced_accuracy(state->model, eval_examples);
  write_json(dir / "eval.json", j);
  {
    auto g = open_out(dir / "eval_generations.jsonl");
    for (std::size_t i = 0; i < eval_examples.size(); ++i) {
      g << ordered_json{{"id", eval_examples[i].id}, {"summary", rep.generations[i]}}.dump() << "\n";
    }
  }
  out << "steps " << state->step << "  examples " << examples.size() << "  eval " << eval_examples.size() << "\n";
  out << "R-1 " << fixed(rep.rouge1) << "  R-2 " << fixed(rep.rouge2) << "  R-L " << fixed(rep.rougeL)
      << "  length " << fixed(rep.mean_length) << "\n";
  out << "artifacts in " << dir.string() << "\n";
  return kExitOk;
}

int cmd_train_embedder(const TrainArgs& args, std::ostream& out) {
  const RunConfig cfg = load_run_config(args.config, args.overrides, Purpose::TrainEmbedder);
  const auto train_pairs = corpus::load_pairs_jsonl(cfg.train_path);
  if (train_pairs.size() < 2) throw DataError("data.train: need at least 2 positive pairs");
  const auto test_pairs = cfg.eval_path.empty() ? std::vector<corpus::PairRecord>{}
                                                : corpus::load_pairs_jsonl(cfg.eval_path);
  std::vector<std::string> texts;
  for (const auto& p : train_pairs) {
    texts.push_back(p.p_text);
    texts.push_back(p.q_text);
  }
  const auto vocab = vocab_for(cfg, texts);
  const auto& dir = cfg.output_dir;
  std::filesystem::create_directories(dir);
  vocab.save(dir / "vocab.txt");

  auto mcfg = cfg.model;
  mcfg.vocab_size = vocab.size();
  std::optional<embed::EmbedderState> state;
  if (!cfg.resume.empty()) {
    state.emplace(embed::load_embedder_state(cfg.resume, vocab.hash(), cfg.optimizer));
  } else if (!cfg.init_checkpoint.empty()) {
    const auto ckpt = model::load_checkpoint(cfg.init_checkpoint);
    if (ckpt.vocab_hash != vocab.hash()) throw DataError("train.init_checkpoint: vocabulary hash mismatch");
    state.emplace(ckpt.config, cfg.optimizer, cfg.seed, vocab.hash());
    state->encoder.load_params(model::stored_weights(ckpt, state->encoder.params()));
  } else {
    state.emplace(mcfg, cfg.optimizer, cfg.seed, vocab.hash());
  }
  const auto pairs = embed::tokenize_pairs(train_pairs, vocab, state->encoder.config().max_positions);
  const auto test_passages = embed::passages_by_query(test_pairs);

  auto metrics = open_out(dir / "metrics.jsonl", !cfg.resume.empty());
  auto epochs = open_out(dir / "epochs.jsonl", !cfg.resume.empty());
  auto test_report = [&](std::uint64_t epoch) {
    ordered_json j;
    j["epoch"] = epoch;
    j["step"] = state->step;
    if (!test_passages.empty()) {
      const double loss = embed::cluster_pair_loss(state->encoder, test_passages, vocab, cfg.seed);
      const auto sep = embed::cluster_separation(state->encoder, test_passages, vocab);
      j["test_pe_loss"] = loss;
      j["intra_cos"] = sep.intra_cos;
      j["inter_cos"] = sep.inter_cos;
      j["separation"] = sep.separation();
      if (loss < state->best_test_loss) {
        state->best_test_loss = loss;
        embed::save_embedder_state(dir / "embedder_best.bin", *state);
      }
    }
    return j;
  };
  embed::run_embedder_training(
      *state, pairs, {cfg.mlm_weight, cfg.loss.clip_norm},
      {cfg.loop.batch_size, cfg.loop.epochs, cfg.loop.max_steps},
      [&](const embed::EmbedStepReport& r) {
        metrics << embed::metrics_json(r) << "\n";
        if (cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0) {
          metrics.flush();
          embed::save_embedder_state(dir / "embedder.bin", *state);
        }
        return true;
      },
      [&](std::uint64_t epoch) {
        const auto j = test_report(epoch);
        epochs << j.dump() << "\n";
        out << j.dump() << "\n";
        return true;
      });
  const auto final_report = test_report(state->epoch);
  embed::save_embedder_state(dir / "embedder.bin", *state);
  write_json(dir / "final.json", final_report);
  out << "steps " << state->step << "  pairs " << pairs.size() << "  test passages " << test_passages.size() << "\n";
  if (final_report.contains("separation")) {
    out << "test pe_loss " << fixed(final_report["test_pe_loss"].get<double>(), 4) << "  separation "
        << fixed(final_report["separation"].get<double>(), 4) << "\n";
  }
  out << "artifacts in " << dir.string() << "\n";
  return kExitOk;
}

int cmd_generate(const GenerateArgs& args, std::ostream& out) {
  const auto vocab = corpus::Vocabulary::load(args.vocab);
  const auto ckpt = model::load_checkpoint(args.checkpoint);
  if (ckpt.kind != "seq2seq") throw DataError("--checkpoint holds a '" + ckpt.kind + "', not a summarizer");
  if (ckpt.vocab_hash != vocab.hash()) {
    throw DataError("refusing to generate: checkpoint vocabulary hash does not match " + args.vocab.string());
  }
  nd::Rng rng(ckpt.seed);
  model::Seq2SeqModel m(ckpt.config, rng);
  m.load_params(model::stored_weights(ckpt, m.params()));

  if (args.preset != "paper" && args.preset != "desk") throw ConfigError("--preset: expected desk or paper");
  auto gen = preset_config(args.preset == "paper" ? Preset::Paper : Preset::Desk).gen;
  if (args.beam) gen.beam_size = *args.beam;
  if (args.min_tokens) gen.min_tokens = *args.min_tokens;
  if (args.max_tokens) gen.max_tokens = *args.max_tokens;
  gen.validate();

  const auto inputs = corpus::load_qfs_jsonl(args.input, false);
  auto f = open_out(args.output);
  for (const auto& x : inputs) {
    const auto ids = corpus::make_encoder_input(corpus::tokenize(x.query, vocab), corpus::tokenize(x.document, vocab),
                                                m.config().max_positions);
    const auto src = decode::encode_source(m, ids);
    const auto toks = args.greedy ? decode::greedy_decode(m, src, gen).token_ids : decode::beam_search(m, src, gen);
    f << ordered_json{{"id", x.id}, {"summary", corpus::detokenize(toks, vocab)}}.dump() << "\n";
  }
  out << "wrote " << inputs.size() << " summaries to " << args.output.string() << "\n";
  return kExitOk;
}

int cmd_score(const ScoreArgs& args, std::ostream& out) {
  std::set<std::string> wanted;
  {
    std::stringstream ss(args.metrics);
    std::string m;
    while (std::getline(ss, m, ',')) {
      if (m != "rouge" && m != "bleu" && m != "length") {
        throw ConfigError("--metrics: unknown metric '" + m + "' (expected rouge, bleu, length)");
      }
      wanted.insert(m);
    }
  }
  const auto refs = load_id_text(args.references);
  const auto hyps = load_id_text(args.hypotheses);
  if (hyps.empty()) throw DataError("--hypotheses: " + args.hypotheses.string() + " has no records");
  if (refs.empty()) throw DataError("--references: " + args.references.string() + " has no records");
  std::map<std::string, std::string> hyp_by_id;
  for (const auto& h : hyps) {
    if (!hyp_by_id.emplace(h.id, h.text).second) throw DataError("--hypotheses: duplicate id " + h.id);
  }
  std::set<std::string> ref_ids;
  std::vector<std::string> missing_hyp, missing_ref;
  for (const auto& r : refs) {
    if (!ref_ids.insert(r.id).second) throw DataError("--references: duplicate id " + r.id);
    if (!hyp_by_id.count(r.id)) missing_hyp.push_back(r.id);
  }
  for (const auto& h : hyps) {
    if (!ref_ids.count(h.id)) missing_ref.push_back(h.id);
  }
  if (!missing_hyp.empty() || !missing_ref.empty()) {
    std::ostringstream os;
    os << "ids do not align;";
    if (!missing_hyp.empty()) {
      os << " missing from hypotheses:";
      for (const auto& id : missing_hyp) os << " " << id;
      os << ";";
    }
    if (!missing_ref.empty()) {
      os << " missing from references:";
      for (const auto& id : missing_ref) os << " " << id;
    }
    throw DataError(os.str());
  }

  std::optional<std::ofstream> report;
  if (args.output) report.emplace(open_out(*args.output));
  double sum_r1 = 0, sum_r2 = 0, sum_rl = 0, sum_bleu = 0, sum_len = 0, sum_ref_len = 0;
  for (const auto& r : refs) {
    const auto& h = hyp_by_id.at(r.id);
    const auto rw = corpus::split_words(r.text);
    const auto hw = corpus::split_words(h);
    ordered_json j;
    j["id"] = r.id;
    if (wanted.count("rouge")) {
      const double r1 = 100.0 * rewards::rouge_n(rw, hw, 1).f;
      const double r2 = 100.0 * rewards::rouge_n(rw, hw, 2).f;
      const double rl = 100.0 * rewards::rouge_l_scores(rw, hw).f;
      j["rouge1"] = r1;
      j["rouge2"] = r2;
      j["rougeL"] = rl;
      sum_r1 += r1;
      sum_r2 += r2;
      sum_rl += rl;
    }
    if (wanted.count("bleu")) {
      const double b = 100.0 * rewards::bleu_mean(r.text, h);
      j["bleu_mean"] = b;
      sum_bleu += b;
    }
    if (wanted.count("length")) {
      const auto len = corpus::count_words(h);
      const auto ref_len = corpus::count_words(r.text);
      j["length"] = len;
      j["reference_length"] = ref_len;
      sum_len += static_cast<double>(len);
      sum_ref_len += static_cast<double>(ref_len);
    }
    if (report) *report << j.dump() << "\n";
  }
  const double n = static_cast<double>(refs.size());
  ordered_json mean;
  out << "examples " << refs.size() << "\n";
  if (wanted.count("rouge")) {
    mean["rouge1"] = sum_r1 / n;
    mean["rouge2"] = sum_r2 / n;
    mean["rougeL"] = sum_rl / n;
    out << "R-1        " << fixed(sum_r1 / n) << "\nR-2        " << fixed(sum_r2 / n) << "\nR-L        "
        << fixed(sum_rl / n) << "\n";
  }
  if (wanted.count("bleu")) {
    mean["bleu_mean"] = sum_bleu / n;
    out << "BLEU-mean  " << fixed(sum_bleu / n) << "\n";
  }
  if (wanted.count("length")) {
    mean["length"] = sum_len / n;
    mean["reference_length"] = sum_ref_len / n;
    out << "length     " << fixed(sum_len / n) << "\nref length " << fixed(sum_ref_len / n) << "\n";
  }
  if (report) *report << ordered_json{{"corpus_mean", mean}}.dump() << "\n";
  return kExitOk;
}

int cmd_ingest(const IngestArgs& args, std::ostream& out) {
  const auto dump = corpus::load_forum_jsonl(args.dump);
  const auto filtered = corpus::filter_forum_dump(dump);
  const auto split = corpus::split_by_forum(filtered, args.test_forum);
  const auto& dir = args.output_dir;
  std::filesystem::create_directories(dir);
  corpus::save_forum_jsonl(dir / "filtered_train.jsonl", split.train);
  corpus::save_forum_jsonl(dir / "filtered_test.jsonl", split.test);
  corpus::save_pairs_jsonl(dir / "train_pairs.jsonl", corpus::make_positive_pairs(split.train));
  corpus::save_pairs_jsonl(dir / "test_pairs.jsonl", corpus::make_positive_pairs(split.test));

  auto stats_json = [](const corpus::ForumStats& s) {
    ordered_json j;
    j["questions"] = s.questions;
    j["avg_answers_per_question"] = s.avg_answers_per_question;
    j["avg_words_per_question"] = s.avg_words_per_question;
    j["avg_words_per_answer"] = s.avg_words_per_answer;
    j["positive_pairs"] = s.positive_pairs;
    j["training_samples"] = s.training_samples;
    return j;
  };
  const auto st_train = corpus::forum_stats(split.train);
  const auto st_test = corpus::forum_stats(split.test);
  ordered_json j;
  j["input_posts"] = dump.size();
  j["surviving_posts"] = filtered.size();
  j["train"] = stats_json(st_train);
  j["test"] = stats_json(st_test);
  j["warnings"] = split.warnings;
  write_json(dir / "stats.json", j);

  out << "posts read " << dump.size() << ", kept " << filtered.size() << "\n";
  out << std::left << std::setw(24) << "" << std::setw(10) << "train" << "test\n";
  auto row = [&](const std::string& name, const std::string& a, const std::string& b) {
    out << std::left << std::setw(24) << name << std::setw(10) << a << b << "\n";
  };
  row("# of Q", std::to_string(st_train.questions), std::to_string(st_test.questions));
  row("Avg. # of A per Q", fixed(st_train.avg_answers_per_question), fixed(st_test.avg_answers_per_question));
  row("Avg. # of words in Q", fixed(st_train.avg_words_per_question), fixed(st_test.avg_words_per_question));
  row("Avg. # of words in A", fixed(st_train.avg_words_per_answer), fixed(st_test.avg_words_per_answer));
  row("positive pairs", std::to_string(st_train.positive_pairs), std::to_string(st_test.positive_pairs));
  for (const auto& w : split.warnings) out << "warning: " << w << "\n";
  return kExitOk;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope: need at least 2 aligned points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0 && y[i] > 0)) throw ContractError("loglog_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw ContractError("loglog_slope: lengths must differ");
  return sxy / sxx;
}

int cmd_bench_complexity(const BenchArgs& args, std::ostream& out) {
  if (args.lengths.size() < 2) throw ConfigError("--lengths: need at least 2 values");
  std::set<std::size_t> distinct(args.lengths.begin(), args.lengths.end());
  if (distinct.size() < 2) throw ConfigError("--lengths: need at least 2 distinct values");
  for (auto n : args.lengths) {
    if (n == 0) throw ConfigError("--lengths: values must be >= 1");
  }
  std::vector<double> xs, seq, two;
  ordered_json rows = ordered_json::array();
  out << std::right << std::setw(8) << "n" << std::setw(16) << "sequential" << std::setw(14) << "two_pass"
      << std::setw(14) << "single_pass" << std::setw(10) << "ratio" << "\n";
  for (auto n : args.lengths) {
    const auto s = decode::count_decode_cost(decode::DecodeMode::Sequential, n);
    const auto t = decode::count_decode_cost(decode::DecodeMode::TwoPass, n);
    const auto one = decode::count_single_pass_cost(n);
    xs.push_back(static_cast<double>(n));
    seq.push_back(static_cast<double>(s));
    two.push_back(static_cast<double>(t));
    out << std::setw(8) << n << std::setw(16) << s << std::setw(14) << t << std::setw(14) << one << std::setw(10)
        << fixed(static_cast<double>(t) / static_cast<double>(one), 3) << "\n";
    rows.push_back({{"n", n}, {"sequential", s}, {"two_pass", t}, {"single_pass", one}});
  }
  const double ss = loglog_slope(xs, seq), ts = loglog_slope(xs, two);
  out << "log-log slope  sequential " << fixed(ss, 3) << "  two_pass " << fixed(ts, 3) << "\n";
  if (args.output) {
    write_json(*args.output, ordered_json{{"rows", rows}, {"slope_sequential", ss}, {"slope_two_pass", ts}});
  }
  return kExitOk;
}

int cmd_synth(const SynthArgs& args, std::ostream& out) {
  nd::Rng rng(args.seed);
  std::filesystem::create_directories(args.output_dir);
  if (args.kind == "qfs") {
    const auto syn = corpus::make_synthetic_qfs(args.docs, args.queries_per_doc, rng);
    corpus::save_qfs_jsonl(args.output_dir / "qfs.jsonl", syn.examples);
    out << "wrote " << syn.examples.size() << " examples (" << fixed(syn.avg_queries_per_document)
        << " queries per document)\n";
    return kExitOk;
  }
  if (args.kind == "clusters") {
    const auto c = embed::make_synthetic_clusters(args.clusters, args.per_cluster, args.test_per_cluster, {}, rng);
    const auto tr = embed::cluster_positive_pairs(c.train);
    const auto te = embed::cluster_positive_pairs(c.test);
    corpus::save_pairs_jsonl(args.output_dir / "train_pairs.jsonl", tr);
    corpus::save_pairs_jsonl(args.output_dir / "test_pairs.jsonl", te);
    out << "wrote " << tr.size() << " train and " << te.size() << " test positive pairs\n";
    return kExitOk;
  }
  throw ConfigError("synth: unknown corpus kind '" + args.kind + "' (expected qfs or clusters)");
}

}  // namespace rlqfs::cli
