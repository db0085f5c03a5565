// rlqfs command-line entry point.

#include <iostream>

#include "CLI11.hpp"
#include "rlqfs/cli/commands.hpp"

using namespace rlqfs::cli;

int main(int argc, char** argv) {
  CLI::App app{"Query-focused summarization with self-critical policy-gradient training", "rlqfs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "rlqfs 0.1.0");

  TrainArgs qfs_args;
  auto* train_qfs = app.add_subcommand("train-qfs", "Train the summarizer (supervised when eta=1, mixed RL otherwise)");
  train_qfs->add_option("-c,--config", qfs_args.config, "TOML run configuration")->check(CLI::ExistingFile);
  train_qfs->add_option("--set", qfs_args.overrides, "Override a setting, e.g. --set train.eta=0.1 (repeatable)");

  TrainArgs emb_args;
  auto* train_emb = app.add_subcommand("train-embedder", "Train the passage embedder with in-batch negatives");
  train_emb->add_option("-c,--config", emb_args.config, "TOML run configuration")->check(CLI::ExistingFile);
  train_emb->add_option("--set", emb_args.overrides, "Override a setting, e.g. --set train.batch_size=16 (repeatable)");

  GenerateArgs gen_args;
  auto* generate = app.add_subcommand("generate", "Write a summary for every input record");
  generate->add_option("--checkpoint", gen_args.checkpoint, "Summarizer checkpoint")->required();
  generate->add_option("--vocab", gen_args.vocab, "Vocabulary file the checkpoint was trained with")->required();
  generate->add_option("--input", gen_args.input, "JSONL records {id, query, document}")->required();
  generate->add_option("--output", gen_args.output, "JSONL output {id, summary}")->required();
  generate->add_option("--preset", gen_args.preset, "Generation defaults: desk or paper")->capture_default_str();
  generate->add_option("--beam", gen_args.beam, "Beam size");
  generate->add_option("--min-tokens", gen_args.min_tokens, "Minimum generated tokens");
  generate->add_option("--max-tokens", gen_args.max_tokens, "Maximum generated tokens");
  generate->add_flag("--greedy", gen_args.greedy, "Greedy decoding instead of beam search");

  ScoreArgs score_args;
  auto* score = app.add_subcommand("score", "Score hypotheses against references");
  score->add_option("--references", score_args.references, "JSONL {id, summary}")->required();
  score->add_option("--hypotheses", score_args.hypotheses, "JSONL {id, summary}")->required();
  score->add_option("--metrics", score_args.metrics, "Comma list of rouge, bleu, length")->capture_default_str();
  score->add_option("--output", score_args.output, "Per-example JSONL report");

  IngestArgs ingest_args;
  auto* ingest = app.add_subcommand("ingest", "Filter a forum dump and build passage-pair corpora");
  ingest->add_option("--dump", ingest_args.dump, "Forum dump JSONL")->required();
  ingest->add_option("--test-forum", ingest_args.test_forum, "Forum whose posts form the test split")->required();
  ingest->add_option("--out-dir", ingest_args.output_dir, "Output directory")->required();

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench-complexity", "Count decoder attention evaluations per decode mode");
  bench->add_option("--lengths", bench_args.lengths, "Sequence lengths (at least two)")
      ->delimiter(',')
      ->capture_default_str();
  bench->add_option("--output", bench_args.output, "JSON report");

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus");
  synth->add_option("kind", synth_args.kind, "qfs or clusters")->required();
  synth->add_option("--out-dir", synth_args.output_dir, "Output directory")->required();
  synth->add_option("--seed", synth_args.seed, "Random seed")->capture_default_str();
  synth->add_option("--docs", synth_args.docs, "Documents (qfs)")->capture_default_str();
  synth->add_option("--queries-per-doc", synth_args.queries_per_doc, "Queries per document (qfs)")
      ->capture_default_str();
  synth->add_option("--clusters", synth_args.clusters, "Clusters (clusters)")->capture_default_str();
  synth->add_option("--per-cluster", synth_args.per_cluster, "Passages per cluster (clusters)")->capture_default_str();
  synth->add_option("--test-per-cluster", synth_args.test_per_cluster, "Held-out passages per cluster (clusters)")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  return run_guarded(std::cerr, [&]() -> int {
    if (*train_qfs) return cmd_train_qfs(qfs_args, std::cout);
    if (*train_emb) return cmd_train_embedder(emb_args, std::cout);
    if (*generate) return cmd_generate(gen_args, std::cout);
    if (*score) return cmd_score(score_args, std::cout);
    if (*ingest) return cmd_ingest(ingest_args, std::cout);
    if (*bench) return cmd_bench_complexity(bench_args, std::cout);
    return cmd_synth(synth_args, std::cout);
  });
}
