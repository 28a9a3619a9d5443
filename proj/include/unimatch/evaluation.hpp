// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "unimatch/episodes.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/meta.hpp"
#include "unimatch/metrics.hpp"
#include "unimatch/threads.hpp"

namespace unimatch {

struct EvalSettings {
  Protocol protocol = Protocol::kBalanced;
  std::size_t support_size = 20;
  std::size_t query_size = 256;
  std::size_t repeats = 10;
  std::uint64_t seed = 0;
  bool finetune = true;
};

struct TaskEvaluation {
  std::string task_id;
  std::size_t support_size = 0;
  bool skipped = false;
  std::string reason;
  metrics::EvalResult auroc, auprc, delta_auprc;
  std::vector<std::string> warnings;
};

/// FNV-1a of the task id; keeps per-task seeds independent of registry order.
inline std::uint64_t task_key(const std::string& id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : id) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Scores one task over `repeats` sampled episodes. A task whose size or class
/// balance cannot supply the episode is reported as skipped.
inline TaskEvaluation evaluate_task(const ModelParams& params, const TaskRecord& task, const ModelConfig& mcfg,
                                    const TrainConfig& tcfg, const EvalSettings& s) {
  TaskEvaluation out;
  out.task_id = task.id;
  out.support_size = s.support_size;
  std::vector<double> roc, prc, dprc;
  for (std::size_t r = 0; r < s.repeats; ++r) {
    const std::uint64_t seed = derive_seed(s.seed, {task_key(task.id), r});
    Episode ep;
    try {
      ep = sample_episode(s.protocol, task, s.support_size, s.query_size, seed);
    } catch (const DataError& e) {
      out.skipped = true;
      out.reason = e.what();
      return out;
    }
    const FinetuneResult fr = finetune_and_predict(params, ep.support, graphs_of(ep.query), mcfg, tcfg, seed, s.finetune);
    std::vector<double> scores(ep.query.size());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = fr.probs.at(i, 0);
    const std::vector<int> labels = labels_of(ep.query);
    const auto n_pos = std::count(labels.begin(), labels.end(), 1);
    if (n_pos == 0 || n_pos == static_cast<std::ptrdiff_t>(labels.size())) {
      out.warnings.push_back("repeat " + std::to_string(r) + ": query holds a single class, not scored");
      continue;
    }
    if (metrics::ties_cross_classes(scores, labels))
      out.warnings.push_back("repeat " + std::to_string(r) + ": tied scores across classes; AUPRC uses input order");
    roc.push_back(metrics::auroc(scores, labels));
    prc.push_back(metrics::auprc(scores, labels));
    dprc.push_back(metrics::delta_auprc(scores, labels));
  }
  if (roc.empty()) {
    out.skipped = true;
    out.reason = "no repeat produced a two-class query";
    return out;
  }
  out.auroc = metrics::aggregate(roc, task.id, s.support_size);
  out.auprc = metrics::aggregate(prc, task.id, s.support_size);
  out.delta_auprc = metrics::aggregate(dprc, task.id, s.support_size);
  return out;
}

/// Evaluates every task of a split, in registry order.
inline std::vector<TaskEvaluation> evaluate_split(const ModelParams& params, const Registry& reg, Split split,
                                                  const ModelConfig& mcfg, const TrainConfig& tcfg,
                                                  const EvalSettings& s, std::size_t workers = 1) {
  const std::vector<const TaskRecord*> tasks = reg.tasks(split);
  std::vector<TaskEvaluation> out(tasks.size());
  parallel_for(tasks.size(), workers, [&](std::size_t i) { out[i] = evaluate_task(params, *tasks[i], mcfg, tcfg, s); });
  return out;
}

struct OverallMetrics {
  std::size_t tasks = 0;
  double auroc = 0.0, auprc = 0.0, delta_auprc = 0.0;
};

/// Unweighted mean over evaluated tasks of each task's mean.
inline OverallMetrics overall(const std::vector<TaskEvaluation>& evals) {
  OverallMetrics o;
  for (const TaskEvaluation& e : evals) {
    if (e.skipped) continue;
    ++o.tasks;
    o.auroc += e.auroc.mean;
    o.auprc += e.auprc.mean;
    o.delta_auprc += e.delta_auprc.mean;
  }
  if (o.tasks > 0) {
    const double n = static_cast<double>(o.tasks);
    o.auroc /= n;
    o.auprc /= n;
    o.delta_auprc /= n;
  }
  return o;
}

}  // namespace unimatch
