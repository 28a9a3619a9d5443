// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command implementations behind the `unimatch` executable. Each command
// writes results to `out`, diagnostics to `err`, and returns an exit code:
// 0 success, 2 configuration error, 3 data error, 4 numerical failure.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "unimatch/checkpoint.hpp"
#include "unimatch/config.hpp"
#include "unimatch/episodes.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/evaluation.hpp"
#include "unimatch/meta.hpp"
#include "unimatch/metrics.hpp"
#include "unimatch/task_relation.hpp"
#include "unimatch/threads.hpp"
#include "unimatch/train.hpp"

namespace unimatch::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericalError = 4 };

/// Runs a command body and maps library exceptions onto exit codes.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumericalError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kDataError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const ParseError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::invalid_argument& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  }
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// Quotes a CSV field when it holds a comma, quote or newline.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto b = line.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t");
    lines.push_back(line.substr(b, e - b + 1));
  }
  return lines;
}

// --- train ----------------------------------------------------------------------------

struct TrainArgs {
  std::string config;  // empty: built-in defaults
  std::string data;
  std::string out;
  std::string log;  // empty: <out>.log.csv
  std::optional<std::uint64_t> seed;
  std::size_t workers = 0;  // 0: UNIMATCH_WORKERS or 1
  std::optional<std::size_t> epochs;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = a.config.empty() ? RunConfig{} : load_config(a.config);
    if (a.seed) cfg.train.seed = *a.seed;
    if (a.epochs) cfg.train.max_epochs = *a.epochs;
    cfg.validate();
    const Registry reg = load_registry(a.data);
    if (reg.report().rejected_lines > 0)
      err << "warning: " << reg.report().rejected_lines << " malformed lines skipped\n";
    for (const std::string& t : reg.report().skipped_tasks) err << "warning: skipped task " << t << "\n";

    const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw DataError("cannot write training log '" + log_path + "'");
    log << "epoch,mean_outer_loss,wall_seconds,val_metric\n";
    TrainConfig tcfg = cfg.train;
    tcfg.workers = resolve_workers(a.workers > 0 ? a.workers : cfg.train.workers);
    const TrainResult res = meta_train(reg, cfg.model, tcfg, std::nullopt, [&](const EpochLog& e) {
      log << e.epoch << "," << fmt(e.mean_outer_loss) << "," << fmt(e.wall_seconds) << ","
          << (e.val_metric ? fmt(*e.val_metric) : std::string()) << "\n";
      log.flush();
    });
    Checkpoint ck;
    ck.config = cfg;
    ck.epoch = res.log.size();
    ck.seed = cfg.train.seed;
    ck.params = res.params;
    save_checkpoint(ck, a.out);
    out << "trained " << res.log.size() << " epochs; final mean outer loss "
        << fmt(res.log.empty() ? 0.0 : res.log.back().mean_outer_loss) << "; checkpoint " << a.out << "\n";
    return static_cast<int>(kOk);
  });
}

// --- eval -----------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::optional<std::size_t> support_size;
  std::optional<std::size_t> repeats;
  std::optional<std::string> protocol;
  std::optional<std::size_t> query_size;
  std::optional<std::uint64_t> seed;
  std::string split = "test";
  bool no_finetune = false;
  std::size_t workers = 0;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    EvalSettings s;
    s.protocol = a.protocol ? parse_protocol(*a.protocol) : ck.config.train.protocol;
    s.support_size = a.support_size.value_or(ck.config.train.support_size);
    s.query_size = a.query_size.value_or(ck.config.train.query_size);
    s.repeats = a.repeats.value_or(ck.config.eval_repeats);
    s.seed = a.seed.value_or(ck.config.train.seed);
    s.finetune = !a.no_finetune;
    if (s.repeats < 1) throw ConfigError("--repeats must be >= 1");
    const Split split = parse_split(a.split);
    const Registry reg = load_registry(a.data);
    if (reg.tasks(split).empty()) throw DataError("split '" + a.split + "' has no tasks");

    const std::vector<TaskEvaluation> ev = evaluate_split(ck.params, reg, split, ck.config.model, ck.config.train, s,
                                                          resolve_workers(a.workers));
    const bool with_se = s.repeats >= 2;
    out << "task_id,status,support_size,repeats";
    for (const char* m : {"auroc", "auprc", "delta_auprc"}) {
      out << "," << m << "_mean";
      if (with_se) out << "," << m << "_se," << m << "_sd";
    }
    out << "\n";
    auto cells = [&](const metrics::EvalResult& r) {
      std::string c = "," + fmt(r.mean);
      if (with_se) c += "," + (r.stderr_ ? fmt(*r.stderr_) : std::string()) + "," + (r.stddev ? fmt(*r.stddev) : std::string());
      return c;
    };
    const std::string blanks = with_se ? ",,," : ",";
    for (const TaskEvaluation& e : ev) {
      out << csv_field(e.task_id) << "," << (e.skipped ? "skipped" : "ok") << "," << s.support_size << ","
          << (e.skipped ? 0 : e.auroc.values.size());
      if (e.skipped) {
        out << blanks << blanks << blanks << "\n";
        err << "skipped " << e.task_id << ": " << e.reason << "\n";
        continue;
      }
      out << cells(e.auroc) << cells(e.auprc) << cells(e.delta_auprc) << "\n";
      for (const std::string& w : e.warnings) err << "warning: " << e.task_id << ": " << w << "\n";
    }
    const OverallMetrics o = overall(ev);
    if (o.tasks == 0) throw DataError("no task could be evaluated");
    out << "OVERALL,ok," << s.support_size << "," << o.tasks << "," << fmt(o.auroc) << (with_se ? ",," : "") << ","
        << fmt(o.auprc) << (with_se ? ",," : "") << "," << fmt(o.delta_auprc) << (with_se ? ",," : "") << "\n";
    return static_cast<int>(kOk);
  });
}

// --- predict --------------------------------------------------------------------------

struct PredictArgs {
  std::string ckpt;
  std::string support;  // JSON lines with smiles and label
  std::string query;    // one SMILES per line
  std::optional<std::uint64_t> seed;
  bool no_finetune = false;
};

inline int cmd_predict(const PredictArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    LoadReport report;
    const std::vector<Example> sup = read_labeled_jsonl(a.support, report);
    if (report.rejected_lines > 0) err << "warning: " << report.rejected_lines << " malformed support lines skipped\n";
    if (sup.empty()) throw DataError("support file '" + a.support + "' has no usable examples");
    LabeledSet support;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < sup.size(); ++i) {
      support.push_back({sup[i].graph, sup[i].label, i});
      n_pos += sup[i].label == 1;
    }
    if (n_pos == 0 || n_pos == sup.size())
      err << "warning: support holds a single class; every layer prediction will be constant\n";

    const std::vector<std::string> lines = read_lines(a.query);
    if (lines.empty()) throw DataError("query file '" + a.query + "' is empty");
    GraphList graphs;
    std::vector<std::string> status(lines.size());
    std::vector<std::size_t> slot(lines.size(), SIZE_MAX);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      try {
        graphs.push_back(std::make_shared<const smiles::MolGraph>(smiles::mol_from_smiles(lines[i])));
        slot[i] = graphs.size() - 1;
        status[i] = "ok";
      } catch (const ParseError& e) {
        status[i] = std::string("error: ") + e.what();
      }
    }
    out << "smiles,p_positive,status\n";
    std::optional<ad::Tensor> probs;
    if (!graphs.empty())
      probs = finetune_and_predict(ck.params, support, graphs, ck.config.model, ck.config.train,
                                   a.seed.value_or(ck.config.train.seed), !a.no_finetune)
                  .probs;
    for (std::size_t i = 0; i < lines.size(); ++i)
      out << csv_field(lines[i]) << "," << (slot[i] != SIZE_MAX ? fmt(probs->at(slot[i], 0)) : std::string()) << ","
          << csv_field(status[i]) << "\n";
    const std::size_t failed = lines.size() - graphs.size();
    err << "predicted " << graphs.size() << " molecules, " << failed << " failed\n";
    return static_cast<int>(graphs.empty() ? kDataError : kOk);
  });
}

// --- taskrel --------------------------------------------------------------------------

struct TaskRelArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::optional<std::string> metric;
  std::optional<std::string> mode;
  std::optional<std::string> normalize;
  std::string split = "train";
  std::optional<std::uint64_t> seed;
};

inline void write_matrix_csv(const taskrel::RelationMatrix& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path + "'");
  f << "task_id";
  for (const std::string& id : m.task_ids) f << "," << csv_field(id);
  f << "\n";
  for (std::size_t i = 0; i < m.n(); ++i) {
    f << csv_field(m.task_ids[i]);
    for (std::size_t j = 0; j < m.n(); ++j) f << "," << fmt(m.at(i, j));
    f << "\n";
  }
}

/// Sibling path with a suffix inserted before the extension: a/b.csv -> a/b<suffix>.csv
inline std::string sibling(const std::string& path, const std::string& suffix, const std::string& ext) {
  std::filesystem::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix + ext)).string();
}

inline int cmd_taskrel(const TaskRelArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    TaskRelConfig tr = ck.config.taskrel;
    if (a.metric) tr.metric = taskrel::parse_metric(*a.metric);
    if (a.mode) tr.mode = taskrel::parse_mode(*a.mode);
    if (a.normalize) {
      if (*a.normalize == "softmax") tr.normalize = true;
      else if (*a.normalize == "raw") tr.normalize = false;
      else throw ConfigError("--normalize must be softmax or raw");
    }
    const std::uint64_t seed = a.seed.value_or(ck.config.train.seed);
    const Split split = parse_split(a.split);
    const Registry reg = load_registry(a.data);
    std::vector<taskrel::TaskVector> vectors;
    for (const TaskRecord* t : reg.tasks(split)) {
      if (!episode_feasible(ck.config.train.protocol, *t, ck.config.train.support_size)) {
        err << "skipped " << t->id << ": too small for the configured support size\n";
        continue;
      }
      vectors.push_back(taskrel::task_vector(*t, ck.params, ck.config.model, ck.config.train, tr.mode,
                                             derive_seed(seed, {task_key(t->id)})));
    }
    if (vectors.size() < 2) throw DataError("split '" + a.split + "' needs at least 2 usable tasks");
    const taskrel::RelationMatrix m = taskrel::relation_matrix(vectors, tr.metric);
    write_matrix_csv(m, a.out);
    std::string normalized_path;
    if (tr.normalize) {
      normalized_path = sibling(a.out, ".normalized", ".csv");
      write_matrix_csv(taskrel::normalize_rows_softmax(m), normalized_path);
    }
    nlohmann::json meta;
    meta["metric"] = taskrel::metric_name(tr.metric);
    meta["mode"] = taskrel::mode_name(tr.mode);
    meta["normalization"] = tr.normalize ? "softmax" : "raw";
    meta["split"] = a.split;
    meta["tasks"] = m.n();
    meta["seed"] = seed;
    meta["matrix"] = a.out;
    if (!normalized_path.empty()) meta["normalized_matrix"] = normalized_path;
    const std::string meta_path = sibling(a.out, ".meta", ".jsonl");
    std::ofstream mf(meta_path, std::ios::trunc);
    if (!mf) throw DataError("cannot write '" + meta_path + "'");
    mf << meta.dump() << "\n";
    out << "wrote " << m.n() << "x" << m.n() << " " << taskrel::metric_name(tr.metric) << " matrix to " << a.out << "\n";
    return static_cast<int>(kOk);
  });
}

// --- export-embeddings ----------------------------------------------------------------

struct ExportArgs {
  std::string ckpt;
  std::string smiles;  // one SMILES per line
  std::string out;
  std::size_t pca = 0;  // 0: no PCA output
};

inline int cmd_export_embeddings(const ExportArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    const std::vector<std::string> lines = read_lines(a.smiles);
    if (lines.empty()) throw DataError("'" + a.smiles + "' holds no SMILES");
    GraphList graphs;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      try {
        graphs.push_back(std::make_shared<const smiles::MolGraph>(smiles::mol_from_smiles(lines[i])));
      } catch (const ParseError& e) {
        throw DataError("line " + std::to_string(i + 1) + ": " + e.what());
      }
    }
    const MultiLevelEmbedding emb = encode_multilevel(make_batch(graphs), bind(ck.params.encoder, false));
    const std::size_t d = emb.z.front().cols();
    std::ofstream f(a.out, std::ios::trunc);
    if (!f) throw DataError("cannot write '" + a.out + "'");
    f << "molecule_index,smiles,layer";
    for (std::size_t j = 0; j < d; ++j) f << ",dim_" << j;
    f << "\n";
    for (std::size_t l = 0; l < emb.layers(); ++l)
      for (std::size_t i = 0; i < graphs.size(); ++i) {
        f << i << "," << csv_field(lines[i]) << "," << l + 1;
        for (std::size_t j = 0; j < d; ++j) f << "," << fmt(emb.z[l].at(i, j));
        f << "\n";
      }
    if (a.pca > 0) {
      const std::string pca_path = sibling(a.out, ".pca", ".csv");
      std::ofstream p(pca_path, std::ios::trunc);
      if (!p) throw DataError("cannot write '" + pca_path + "'");
      p << "molecule_index,smiles,layer";
      for (std::size_t c = 1; c <= a.pca; ++c) p << ",pc_" << c;
      p << "\n";
      for (std::size_t l = 0; l < emb.layers(); ++l) {
        const metrics::PcaResult r = metrics::pca_project(emb.z[l].values(), graphs.size(), d, a.pca);
        for (std::size_t i = 0; i < graphs.size(); ++i) {
          p << i << "," << csv_field(lines[i]) << "," << l + 1;
          for (std::size_t c = 0; c < a.pca; ++c) p << "," << fmt(r.projection[i * a.pca + c]);
          p << "\n";
        }
        err << "layer " << l + 1 << " explained variance:";
        for (double v : r.explained_ratio) err << " " << fmt(v);
        err << "\n";
      }
    }
    out << "exported " << graphs.size() << " molecules x " << emb.layers() << " layers to " << a.out << "\n";
    return static_cast<int>(kOk);
  });
}

}  // namespace unimatch::cli
