// SPDX-License-Identifier: Apache-2.0
#pragma once

// Bi-level meta-learning pieces: stratified support splitting, the inner loop
// on the matcher parameters w (theta fixed), per-task first-order outer
// gradients, the Adam/AdamW outer optimizer and inference-time fine-tuning.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unimatch/autodiff.hpp"
#include "unimatch/episodes.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/gin.hpp"
#include "unimatch/matcher.hpp"
#include "unimatch/params.hpp"
#include "unimatch/rng.hpp"

namespace unimatch {

enum class OptimizerKind { kAdam, kAdamW };

inline const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "adamw"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "adamw") return OptimizerKind::kAdamW;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam or adamw)");
}

struct TrainConfig {
  double inner_lr = 0.05;
  std::size_t inner_steps = 5;
  double meta_lr = 0.001;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double weight_decay = 0.0;
  std::size_t batch_tasks = 21;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  double support_split_fraction = 0.5;
  Protocol protocol = Protocol::kBalanced;
  std::size_t support_size = 20;
  std::size_t query_size = 256;  // 0: no cap
  std::size_t early_stop_patience = 0;  // 0: disabled
  std::size_t workers = 1;
  double log_clamp = ad::kDefaultLogClamp;

  // inner_lr = 0 and inner_steps = 0 are accepted: both reduce adaptation to
  // the identity, which the zero-shot baseline relies on.
  void validate() const {
    if (!(inner_lr >= 0.0) || !std::isfinite(inner_lr)) throw ConfigError("train.inner_lr must be finite and >= 0");
    if (!(meta_lr >= 0.0) || !std::isfinite(meta_lr)) throw ConfigError("train.meta_lr must be finite and >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (batch_tasks < 1) throw ConfigError("train.batch_tasks must be >= 1");
    if (!(support_split_fraction > 0.0 && support_split_fraction < 1.0))
      throw ConfigError("train.support_split_fraction must be in (0, 1)");
    if (support_size < 1) throw ConfigError("protocol.support_size must be >= 1");
    if (protocol == Protocol::kBalanced && support_size % 2 != 0)
      throw ConfigError("protocol.support_size must be even for balanced sampling");
    if (!(log_clamp > 0.0 && log_clamp < 1.0)) throw ConfigError("train.log_clamp must be in (0, 1)");
  }
};

// --- support split --------------------------------------------------------------

struct SupportSplit {
  std::vector<std::size_t> support;  // S' positions in the input, ascending
  std::vector<std::size_t> query;    // Q' positions, ascending
  std::vector<std::string> notes;
};

/// Stratified split of a labeled set into S' (about `fraction` of it) and Q'.
/// Per-class shares are floored and the remaining slots go to the largest
/// fractional parts; every class with two or more members lands on both sides.
inline SupportSplit split_support(std::span<const int> labels, double fraction, std::uint64_t seed) {
  if (labels.empty()) throw ValidationError("split_support on an empty set");
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("split fraction must be in (0, 1)");
  const std::size_t n = labels.size();
  std::vector<std::size_t> members[2];  // [0] positives, [1] negatives
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("labels must be 0 or 1");
    members[labels[i] == 1 ? 0 : 1].push_back(i);
  }
  const auto total = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
  std::size_t take[2];
  double frac[2];
  for (int c = 0; c < 2; ++c) {
    const double ideal = static_cast<double>(members[c].size()) * fraction;
    take[c] = static_cast<std::size_t>(std::floor(ideal));
    frac[c] = ideal - static_cast<double>(take[c]);
  }
  std::size_t rem = total - std::min(total, take[0] + take[1]);
  const int first = frac[1] > frac[0] ? 1 : 0;
  for (int c : {first, 1 - first})
    if (rem > 0 && take[c] < members[c].size()) {
      ++take[c];
      --rem;
    }

  SupportSplit out;
  Rng rng(derive_seed(seed, {0x5b1}));
  for (int c = 0; c < 2; ++c) {
    const std::size_t m = members[c].size();
    if (m == 0) continue;
    if (m == 1) {
      take[c] = 1;
      out.notes.push_back(std::string(c == 0 ? "positive" : "negative") +
                          " class has a single member; placed in the fine-tuning support");
    } else {
      take[c] = std::clamp<std::size_t>(take[c], 1, m - 1);
    }
    shuffle(members[c], rng);
    out.support.insert(out.support.end(), members[c].begin(), members[c].begin() + static_cast<std::ptrdiff_t>(take[c]));
    out.query.insert(out.query.end(), members[c].begin() + static_cast<std::ptrdiff_t>(take[c]), members[c].end());
  }
  std::sort(out.support.begin(), out.support.end());
  std::sort(out.query.begin(), out.query.end());
  return out;
}

inline LabeledSet subset(const LabeledSet& s, const std::vector<std::size_t>& idx) {
  LabeledSet out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(s.at(i));
  return out;
}

// --- losses ------------------------------------------------------------------------

/// Summed cross-entropy of predicted probabilities against 0/1 labels.
inline ad::Tensor episode_loss(const ad::Tensor& probs, std::span<const int> labels,
                               double log_clamp = ad::kDefaultLogClamp) {
  return ad::cross_entropy(probs, onehot_targets(labels), log_clamp);
}

/// Loss of the query set predicted against the support set under (theta, w).
inline ad::Tensor episode_loss(const LabeledSet& query, const LabeledSet& support, const EncoderTensors& theta,
                               const MatchTensors& w, const EncodeOptions& enc_opt = {},
                               const MatchOptions& match_opt = {}, double log_clamp = ad::kDefaultLogClamp) {
  const std::vector<int> ys = labels_of(support);
  const Prediction p = predict(graphs_of(support), ys, graphs_of(query), theta, w, enc_opt, match_opt);
  return episode_loss(p.probs, labels_of(query), log_clamp);
}

// --- inner loop ----------------------------------------------------------------------

struct AdaptedParams {
  MatchParams w;
  std::string task_id;
  double final_inner_loss = 0.0;
  std::vector<double> inner_losses;  // before each step and after the last one
};

namespace detail {

inline std::vector<ad::Tensor> gather_layers(const std::vector<ad::Tensor>& z, const std::vector<std::size_t>& rows,
                                             bool detach) {
  std::vector<ad::Tensor> out;
  out.reserve(z.size());
  for (const ad::Tensor& t : z) out.push_back(ad::gather_rows(detach ? t.detach() : t, rows));
  return out;
}

inline std::vector<std::size_t> iota_rows(std::size_t begin, std::size_t count) {
  std::vector<std::size_t> r(count);
  for (std::size_t i = 0; i < count; ++i) r[i] = begin + i;
  return r;
}

}  // namespace detail

/// Gradient descent on w over fixed embeddings: S' rows are the attention
/// support, Q' rows carry the loss.
inline AdaptedParams adapt_on_embeddings(const std::vector<ad::Tensor>& z_support, std::span<const int> y_support,
                                         const std::vector<ad::Tensor>& z_query, std::span<const int> y_query,
                                         const MatchParams& w, const ModelConfig& mcfg, const TrainConfig& tcfg,
                                         Rng* rng, bool training, const std::string& task_id = {}) {
  AdaptedParams out{w, task_id, 0.0, {}};
  if (y_query.empty() || y_support.empty()) return out;
  const MatchOptions opt{training, mcfg.match_dropout, rng};
  for (std::size_t step = 0;; ++step) {
    const bool last = step == tcfg.inner_steps;
    const MatchTensors wt = bind(out.w, !last, mcfg.fusion_bias);
    const Prediction p = match_and_fuse(z_support, y_support, z_query, wt, opt);
    const ad::Tensor loss = episode_loss(p.probs, y_query, tcfg.log_clamp);
    if (!std::isfinite(loss.item()))
      throw NumericalError("inner loop: non-finite loss at step " + std::to_string(step) +
                           (task_id.empty() ? std::string() : " of task '" + task_id + "'"));
    out.inner_losses.push_back(loss.item());
    if (last) break;
    const MatchParams g = matcher_gradients(out.w, wt, ad::backward(loss));
    zip_matcher(out.w, g, [&](ParamTensor& p, const ParamTensor& gp) {
      for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] -= tcfg.inner_lr * gp.values[i];
    });
  }
  out.final_inner_loss = out.inner_losses.back();
  return out;
}

/// Encodes S' and Q' under a frozen theta and adapts w on them.
inline AdaptedParams inner_adapt(const EncoderParams& theta, const MatchParams& w, const LabeledSet& s_prime,
                                 const LabeledSet& q_prime, const ModelConfig& mcfg, const TrainConfig& tcfg,
                                 std::uint64_t seed, bool training = true, const std::string& task_id = {}) {
  if (s_prime.empty()) throw ValidationError("inner_adapt: empty support split");
  if (q_prime.empty()) return AdaptedParams{w, task_id, 0.0, {}};
  Rng rng(derive_seed(seed, {0x1a}));
  GraphList all = graphs_of(s_prime);
  const GraphList q = graphs_of(q_prime);
  all.insert(all.end(), q.begin(), q.end());
  const MultiLevelEmbedding emb =
      encode_multilevel(make_batch(all), bind(theta, false), EncodeOptions{training, mcfg.encoder_dropout, &rng});
  const auto zs = detail::gather_layers(emb.z, detail::iota_rows(0, s_prime.size()), false);
  const auto zq = detail::gather_layers(emb.z, detail::iota_rows(s_prime.size(), q_prime.size()), false);
  return adapt_on_embeddings(zs, labels_of(s_prime), zq, labels_of(q_prime), w, mcfg, tcfg, &rng, training, task_id);
}

// --- outer gradient --------------------------------------------------------------------

struct TaskGradient {
  ModelParams grad;
  double loss = 0.0;  // summed over the episode query
  std::size_t n_query = 0;
  double inner_loss = 0.0;
};

/// First-order outer gradient of one sampled episode: the inner loop adapts
/// w to w_tau on a detached S'/Q' split of the support, then the query loss
/// under (theta, w_tau) is differentiated with w_tau as the leaf.
inline TaskGradient task_gradient(const ModelParams& params, const TaskRecord& task, const ModelConfig& mcfg,
                                  const TrainConfig& tcfg, std::uint64_t seed) {
  const Episode ep = sample_episode(tcfg.protocol, task, tcfg.support_size, tcfg.query_size, derive_seed(seed, {0xe1}));
  Rng rng(derive_seed(seed, {0xd0}));
  const std::size_t ns = ep.support.size(), nq = ep.query.size();
  GraphList all = graphs_of(ep.support);
  const GraphList q = graphs_of(ep.query);
  all.insert(all.end(), q.begin(), q.end());

  const EncoderTensors theta = bind(params.encoder, true);
  const MultiLevelEmbedding emb =
      encode_multilevel(make_batch(all), theta, EncodeOptions{true, mcfg.encoder_dropout, &rng});
  const std::vector<int> ys = labels_of(ep.support), yq = labels_of(ep.query);

  const SupportSplit split = split_support(ys, tcfg.support_split_fraction, derive_seed(seed, {0x5b}));
  std::vector<int> ys_prime, yq_prime;
  for (std::size_t i : split.support) ys_prime.push_back(ys[i]);
  for (std::size_t i : split.query) yq_prime.push_back(ys[i]);
  const AdaptedParams adapted =
      adapt_on_embeddings(detail::gather_layers(emb.z, split.support, true), ys_prime,
                          detail::gather_layers(emb.z, split.query, true), yq_prime, params.matcher, mcfg, tcfg,
                          &rng, true, task.id);

  const MatchTensors w_tau = bind(adapted.w, true, mcfg.fusion_bias);
  const Prediction p = match_and_fuse(detail::gather_layers(emb.z, detail::iota_rows(0, ns), false), ys,
                                      detail::gather_layers(emb.z, detail::iota_rows(ns, nq), false), w_tau,
                                      MatchOptions{true, mcfg.match_dropout, &rng});
  const ad::Tensor loss = episode_loss(p.probs, yq, tcfg.log_clamp);
  if (!std::isfinite(loss.item())) throw NumericalError("outer loss is not finite for task '" + task.id + "'");
  const ad::Gradients g = ad::backward(loss);
  TaskGradient out;
  out.grad.encoder = encoder_gradients(params.encoder, theta, g);
  out.grad.matcher = matcher_gradients(params.matcher, w_tau, g);
  out.loss = loss.item();
  out.n_query = nq;
  out.inner_loss = adapted.final_inner_loss;
  return out;
}

// --- outer optimizer ---------------------------------------------------------------------

/// Adam, or AdamW with decoupled weight decay. For plain Adam a nonzero
/// weight_decay is added to the gradient as an L2 term.
class MetaOptimizer {
 public:
  MetaOptimizer(const ModelParams& like, const TrainConfig& cfg)
      : kind_(cfg.optimizer), lr_(cfg.meta_lr), wd_(cfg.weight_decay), m_(zeros_like(like)), v_(zeros_like(like)) {}

  void step(ModelParams& params, const ModelParams& grad) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    const auto p = slots(params);
    const auto g = slots(grad);
    const auto m = slots(m_);
    const auto v = slots(v_);
    for (std::size_t k = 0; k < p.size(); ++k) {
      for (std::size_t i = 0; i < p[k]->values.size(); ++i) {
        double& x = p[k]->values[i];
        double gi = g[k]->values[i];
        if (kind_ == OptimizerKind::kAdam) gi += wd_ * x;
        double& mi = m[k]->values[i];
        double& vi = v[k]->values[i];
        mi = kBeta1 * mi + (1.0 - kBeta1) * gi;
        vi = kBeta2 * vi + (1.0 - kBeta2) * gi * gi;
        const double update = lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + kEps);
        if (kind_ == OptimizerKind::kAdamW) x -= lr_ * wd_ * x;
        x -= update;
      }
    }
  }

  std::size_t steps() const { return t_; }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  static ModelParams zeros_like(const ModelParams& like) {
    ModelParams z = like;
    visit_model(z, [](const std::string&, ParamTensor& p) { std::fill(p.values.begin(), p.values.end(), 0.0); });
    return z;
  }
  static std::vector<ParamTensor*> slots(ModelParams& p) {
    std::vector<ParamTensor*> out;
    visit_model(p, [&](const std::string&, ParamTensor& t) { out.push_back(&t); });
    return out;
  }
  static std::vector<const ParamTensor*> slots(const ModelParams& p) {
    std::vector<const ParamTensor*> out;
    visit_model(p, [&](const std::string&, const ParamTensor& t) { out.push_back(&t); });
    return out;
  }

  OptimizerKind kind_;
  double lr_, wd_;
  ModelParams m_, v_;
  std::size_t t_ = 0;
};

// --- inference ------------------------------------------------------------------------------

struct FinetuneResult {
  ad::Tensor probs;  // [N_q x 2], column 0 positive
  MatchParams w_fine;
  AdaptedParams adapted;
  SupportSplit split;
};

/// Fine-tunes w on a split of the test support (theta fixed), then predicts
/// the queries against the full test support. With finetune = false or zero
/// inner steps this is the zero-shot prediction of the meta-trained w.
inline FinetuneResult finetune_and_predict(const ModelParams& params, const LabeledSet& support, const GraphList& query,
                                           const ModelConfig& mcfg, const TrainConfig& tcfg, std::uint64_t seed,
                                           bool finetune = true) {
  if (support.empty()) throw ValidationError("finetune_and_predict: empty support set");
  if (query.empty()) throw ValidationError("finetune_and_predict: empty query set");
  GraphList all = graphs_of(support);
  all.insert(all.end(), query.begin(), query.end());
  const MultiLevelEmbedding emb = encode_multilevel(make_batch(all), bind(params.encoder, false));
  const std::vector<int> ys = labels_of(support);
  const auto zs = detail::gather_layers(emb.z, detail::iota_rows(0, support.size()), false);
  const auto zq = detail::gather_layers(emb.z, detail::iota_rows(support.size(), query.size()), false);

  FinetuneResult out;
  out.adapted = AdaptedParams{params.matcher, {}, 0.0, {}};
  if (finetune && tcfg.inner_steps > 0) {
    Rng rng(derive_seed(seed, {0xf7}));
    out.split = split_support(ys, tcfg.support_split_fraction, derive_seed(seed, {0x5b}));
    std::vector<int> ys_prime, yq_prime;
    for (std::size_t i : out.split.support) ys_prime.push_back(ys[i]);
    for (std::size_t i : out.split.query) yq_prime.push_back(ys[i]);
    out.adapted = adapt_on_embeddings(detail::gather_layers(zs, out.split.support, false), ys_prime,
                                      detail::gather_layers(zs, out.split.query, false), yq_prime, params.matcher,
                                      mcfg, tcfg, &rng, true);
  }
  out.w_fine = out.adapted.w;
  out.probs = match_and_fuse(zs, ys, zq, bind(out.w_fine, false)).probs;
  return out;
}

}  // namespace unimatch
