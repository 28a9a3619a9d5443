// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "unimatch/episodes.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/evaluation.hpp"
#include "unimatch/meta.hpp"
#include "unimatch/params.hpp"
#include "unimatch/threads.hpp"

namespace unimatch {

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double mean_outer_loss = 0.0;  // mean per-query cross-entropy over the batch tasks
  double wall_seconds = 0.0;
  std::optional<double> val_metric;  // mean validation delta-AUPRC
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// True when the protocol can draw an episode of this support size from the task.
inline bool episode_feasible(Protocol p, const TaskRecord& task, std::size_t support_size) {
  if (p == Protocol::kUnbalanced) return support_size > 0 && support_size < task.examples.size();
  const std::size_t per_class = support_size / 2;
  return support_size > 0 && support_size % 2 == 0 && task.count(1) >= per_class && task.count(0) >= per_class &&
         task.examples.size() > support_size;
}

/// Sum of the first-order task gradients of one batch, reduced in batch order.
struct BatchStep {
  ModelParams grad;
  double loss_sum = 0.0;
  double mean_per_query_loss = 0.0;
};

inline BatchStep batch_gradient(const ModelParams& params, const std::vector<const TaskRecord*>& batch,
                                const std::vector<std::uint64_t>& seeds, const ModelConfig& mcfg,
                                const TrainConfig& tcfg) {
  std::vector<TaskGradient> parts(batch.size());
  parallel_for(batch.size(), resolve_workers(tcfg.workers),
               [&](std::size_t i) { parts[i] = task_gradient(params, *batch[i], mcfg, tcfg, seeds[i]); });
  BatchStep out;
  out.grad = parts.front().grad;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    accumulate(out.grad.encoder, parts[i].grad.encoder);
    accumulate(out.grad.matcher, parts[i].grad.matcher);
  }
  for (const TaskGradient& p : parts) {
    out.loss_sum += p.loss;
    out.mean_per_query_loss += p.loss / static_cast<double>(p.n_query);
  }
  out.mean_per_query_loss /= static_cast<double>(parts.size());
  return out;
}

/// Meta-training: each epoch samples batch_tasks training tasks, adapts w per
/// task and applies one optimizer step on the summed first-order gradients.
inline TrainResult meta_train(const Registry& reg, const ModelConfig& mcfg, const TrainConfig& tcfg,
                              std::optional<ModelParams> init = std::nullopt, const EpochCallback& on_epoch = {}) {
  mcfg.validate();
  tcfg.validate();
  std::vector<const TaskRecord*> pool;
  for (const TaskRecord* t : reg.tasks(Split::kTrain))
    if (episode_feasible(tcfg.protocol, *t, tcfg.support_size)) pool.push_back(t);
  if (pool.empty())
    throw DataError("no training task can supply a " + std::string(protocol_name(tcfg.protocol)) +
                    " episode with support size " + std::to_string(tcfg.support_size));
  const std::vector<const TaskRecord*> valid = reg.tasks(Split::kValid);
  const bool early_stop = tcfg.early_stop_patience > 0 && !valid.empty();

  TrainResult res;
  res.params = init ? std::move(*init) : init_params(mcfg, tcfg.seed);
  MetaOptimizer opt(res.params, tcfg);
  std::optional<double> best;
  ModelParams best_params;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(tcfg.seed, {0xe0, epoch}));
    shuffle(order, rng);
    order.resize(std::min(order.size(), tcfg.batch_tasks));
    std::vector<const TaskRecord*> batch;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i : order) {
      batch.push_back(pool[i]);
      seeds.push_back(derive_seed(tcfg.seed, {epoch, task_key(pool[i]->id)}));
    }
    const BatchStep step = batch_gradient(res.params, batch, seeds, mcfg, tcfg);
    if (!std::isfinite(step.loss_sum))
      throw NumericalError("aggregate outer loss is not finite at epoch " + std::to_string(epoch));
    opt.step(res.params, step.grad);

    EpochLog row;
    row.epoch = epoch;
    row.mean_outer_loss = step.mean_per_query_loss;
    if (early_stop) {
      EvalSettings es;
      es.protocol = tcfg.protocol;
      es.support_size = tcfg.support_size;
      es.query_size = tcfg.query_size;
      es.repeats = 1;
      es.seed = derive_seed(tcfg.seed, {0xa1});
      const std::vector<TaskEvaluation> ev = evaluate_split(res.params, reg, Split::kValid, mcfg, tcfg, es,
                                                            resolve_workers(tcfg.workers));
      const OverallMetrics o = overall(ev);
      if (o.tasks > 0) row.val_metric = o.delta_auprc;
    }
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(row);
    if (on_epoch) on_epoch(row);

    if (early_stop && row.val_metric) {
      if (!best || *row.val_metric > *best) {
        best = row.val_metric;
        best_params = res.params;
        res.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= tcfg.early_stop_patience) {
        break;
      }
    }
  }
  if (best) {
    res.params = std::move(best_params);
  } else {
    res.best_epoch = res.log.size();
  }
  return res;
}

}  // namespace unimatch
