// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "unimatch/cli.hpp"

namespace {

template <typename T>
void optional_flag(CLI::App* app, const std::string& name, std::optional<T>& slot, const std::string& help) {
  app->add_option_function<T>(name, [&slot](const T& v) { slot = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace unimatch::cli;
  CLI::App app{"unimatch: few-shot molecular property prediction with hierarchical matching"};
  app.footer(
      "Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error, 4 numerical failure.\n"
      "UNIMATCH_WORKERS sets the worker count when --workers is absent.");
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Meta-train a model on a task directory");
  t->add_option("--config", train.config, "Config file ([section] key = value); defaults built in");
  t->add_option("--data", train.data, "Dataset root with train/ valid/ test/ subdirectories")->required();
  t->add_option("--out", train.out, "Checkpoint path to write")->required();
  t->add_option("--log", train.log, "Epoch log CSV (default: <out>.log.csv)");
  optional_flag(t, "--seed", train.seed, "Override train.seed (default 0)");
  optional_flag(t, "--epochs", train.epochs, "Override train.max_epochs (default 200)");
  t->add_option("--workers", train.workers, "Worker threads (default: UNIMATCH_WORKERS or 1)");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on held-out tasks; CSV to stdout");
  e->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
  e->add_option("--data", eval.data, "Dataset root")->required();
  optional_flag(e, "--support-size", eval.support_size, "Support set size (default: checkpoint config, 20)");
  optional_flag(e, "--repeats", eval.repeats, "Episodes per task (default: checkpoint config, 10)");
  optional_flag(e, "--protocol", eval.protocol, "balanced or unbalanced (default: checkpoint config)");
  optional_flag(e, "--query-size", eval.query_size, "Query cap, 0 for none (default: checkpoint config, 256)");
  optional_flag(e, "--seed", eval.seed, "Episode seed (default: checkpoint seed)");
  e->add_option("--split", eval.split, "Split to evaluate (default test)");
  e->add_flag("--no-finetune", eval.no_finetune, "Skip inference-time fine-tuning (zero-shot)");
  e->add_option("--workers", eval.workers, "Worker threads (default: UNIMATCH_WORKERS or 1)");

  PredictArgs pred;
  auto* p = app.add_subcommand("predict", "Predict query molecules against a labeled support file");
  p->add_option("--ckpt", pred.ckpt, "Checkpoint")->required();
  p->add_option("--support", pred.support, "Support JSON lines: {\"smiles\": ..., \"label\": 0|1}")->required();
  p->add_option("--query", pred.query, "Query file, one SMILES per line")->required();
  optional_flag(p, "--seed", pred.seed, "Fine-tuning seed (default: checkpoint seed)");
  p->add_flag("--no-finetune", pred.no_finetune, "Skip inference-time fine-tuning");

  TaskRelArgs rel;
  auto* r = app.add_subcommand("taskrel", "Write the task relationship matrix as CSV plus metadata");
  r->add_option("--ckpt", rel.ckpt, "Checkpoint")->required();
  r->add_option("--data", rel.data, "Dataset root")->required();
  r->add_option("--out", rel.out, "Matrix CSV path")->required();
  optional_flag(r, "--metric", rel.metric, "dot, cosine or euclidean (default: checkpoint config, cosine)");
  optional_flag(r, "--mode", rel.mode, "adapted-w-delta or mean-support-embedding (default adapted-w-delta)");
  optional_flag(r, "--normalize", rel.normalize, "softmax or raw; softmax also writes <out>.normalized.csv");
  r->add_option("--split", rel.split, "Split to analyse (default train)");
  optional_flag(r, "--seed", rel.seed, "Episode seed (default: checkpoint seed)");

  ExportArgs exp;
  auto* x = app.add_subcommand("export-embeddings", "Write per-layer molecule embeddings as CSV");
  x->add_option("--ckpt", exp.ckpt, "Checkpoint")->required();
  x->add_option("--smiles", exp.smiles, "One SMILES per line")->required();
  x->add_option("--out", exp.out, "Embedding CSV path")->required();
  x->add_option("--pca", exp.pca, "Also write <out>.pca.csv with k principal components per layer");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kConfigError;
  }
  if (t->parsed()) return cmd_train(train, std::cout, std::cerr);
  if (e->parsed()) return cmd_eval(eval, std::cout, std::cerr);
  if (p->parsed()) return cmd_predict(pred, std::cout, std::cerr);
  if (r->parsed()) return cmd_taskrel(rel, std::cout, std::cerr);
  return cmd_export_embeddings(exp, std::cout, std::cerr);
}
