// SPDX-License-Identifier: Apache-2.0
#pragma once

// Implicit task-level matching. Tasks are summarized by vectors p_tau, a
// kernel over them gives the relation matrix M, and M drives the parameter
// updates
//
//   inner:     w_t   <- w_t + sum_j M_tj (w_j - w_t)
//   outer:     theta <- theta + eta sum_i sum_j M_ij (w_j - w_i)
//   inference: w_j    = w + sum_k M_jk (w_k - w_j)
//
// All updates act on flattened matcher parameters. The outer update targets
// a shadow block shaped like w rather than the encoder weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unimatch/episodes.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/gin.hpp"
#include "unimatch/meta.hpp"
#include "unimatch/params.hpp"

namespace unimatch::taskrel {

enum class Metric { kDot, kCosine, kEuclidean };
enum class VectorMode { kAdaptedWDelta, kMeanSupportEmbedding };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::kDot: return "dot";
    case Metric::kCosine: return "cosine";
    case Metric::kEuclidean: return "euclidean";
  }
  return "?";
}

inline Metric parse_metric(const std::string& s) {
  if (s == "dot") return Metric::kDot;
  if (s == "cosine") return Metric::kCosine;
  if (s == "euclidean") return Metric::kEuclidean;
  throw ConfigError("unknown metric '" + s + "' (expected dot, cosine or euclidean)");
}

inline const char* mode_name(VectorMode m) {
  return m == VectorMode::kAdaptedWDelta ? "adapted-w-delta" : "mean-support-embedding";
}

inline VectorMode parse_mode(const std::string& s) {
  if (s == "adapted-w-delta") return VectorMode::kAdaptedWDelta;
  if (s == "mean-support-embedding") return VectorMode::kMeanSupportEmbedding;
  throw ConfigError("unknown task vector mode '" + s + "' (expected adapted-w-delta or mean-support-embedding)");
}

struct TaskVector {
  std::string task_id;
  std::vector<double> p;
  VectorMode mode = VectorMode::kAdaptedWDelta;
};

struct RelationMatrix {
  std::vector<std::string> task_ids;
  std::vector<double> m;  // row-major n x n
  Metric metric = Metric::kCosine;
  bool normalized = false;

  std::size_t n() const { return task_ids.size(); }
  double at(std::size_t i, std::size_t j) const { return m[i * n() + j]; }
};

/// Task vector from one sampled support set. adapted-w-delta: flatten(w_tau - w)
/// after the inner loop (run without dropout). mean-support-embedding: per-layer
/// mean of the support embeddings, concatenated (length L*d).
inline TaskVector task_vector(const TaskRecord& task, const ModelParams& params, const ModelConfig& mcfg,
                              const TrainConfig& tcfg, VectorMode mode, std::uint64_t seed) {
  const Episode ep = sample_episode(tcfg.protocol, task, tcfg.support_size, tcfg.query_size, seed);
  TaskVector tv{task.id, {}, mode};
  if (mode == VectorMode::kAdaptedWDelta) {
    const std::vector<int> ys = labels_of(ep.support);
    const SupportSplit split = split_support(ys, tcfg.support_split_fraction, derive_seed(seed, {0x5b}));
    const AdaptedParams a = inner_adapt(params.encoder, params.matcher, subset(ep.support, split.support),
                                        subset(ep.support, split.query), mcfg, tcfg, seed, false, task.id);
    const std::vector<double> before = flatten(params.matcher), after = flatten(a.w);
    tv.p.resize(before.size());
    for (std::size_t i = 0; i < before.size(); ++i) tv.p[i] = after[i] - before[i];
  } else {
    const MultiLevelEmbedding emb = encode_multilevel(make_batch(graphs_of(ep.support)), bind(params.encoder, false));
    for (const ad::Tensor& z : emb.z) {
      const std::size_t rows = z.rows(), cols = z.cols();
      for (std::size_t c = 0; c < cols; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) s += z.at(r, c);
        tv.p.push_back(s / static_cast<double>(rows));
      }
    }
  }
  return tv;
}

/// Pairwise kernel matrix: dot p_i.p_j, cosine, or -||p_i - p_j||^2.
/// Only the upper triangle is computed and mirrored, so M is exactly symmetric.
inline RelationMatrix relation_matrix(const std::vector<TaskVector>& vectors, Metric metric) {
  if (vectors.size() < 2) throw ValidationError("relation_matrix needs at least 2 task vectors");
  const std::size_t n = vectors.size(), len = vectors.front().p.size();
  for (const TaskVector& v : vectors) {
    if (v.mode != vectors.front().mode) throw ValidationError("task vectors mix modes");
    if (v.p.size() != len)
      throw DimensionError("task vector '" + v.task_id + "' has length " + std::to_string(v.p.size()) + ", expected " +
                           std::to_string(len));
  }
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (double x : vectors[i].p) norms[i] += x * x;
    norms[i] = std::sqrt(norms[i]);
    if (metric == Metric::kCosine && norms[i] == 0.0)
      throw ValidationError("task '" + vectors[i].task_id + "' has a zero task vector; cosine is undefined");
  }
  RelationMatrix r;
  r.metric = metric;
  for (const TaskVector& v : vectors) r.task_ids.push_back(v.task_id);
  r.m.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      const auto& a = vectors[i].p;
      const auto& b = vectors[j].p;
      double v = 0.0;
      if (metric == Metric::kEuclidean) {
        for (std::size_t k = 0; k < len; ++k) v -= (a[k] - b[k]) * (a[k] - b[k]);
      } else {
        for (std::size_t k = 0; k < len; ++k) v += a[k] * b[k];
        if (metric == Metric::kCosine) v = i == j ? 1.0 : std::clamp(v / (norms[i] * norms[j]), -1.0, 1.0);
      }
      r.m[i * n + j] = r.m[j * n + i] = v;
    }
  return r;
}

/// Row-wise softmax (temperature 1). Rows become nonnegative and sum to 1.
inline RelationMatrix normalize_rows_softmax(const RelationMatrix& in) {
  RelationMatrix out = in;
  const std::size_t n = in.n();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = in.m[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in.m[i * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (out.m[i * n + j] = std::exp(in.m[i * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) out.m[i * n + j] /= s;
  }
  out.normalized = true;
  return out;
}

using FlatParams = std::vector<double>;

namespace detail {

inline void check_square(std::span<const double> m, std::size_t n, const char* what) {
  if (m.size() != n * n)
    throw DimensionError(std::string(what) + ": relation matrix has " + std::to_string(m.size()) + " entries for " +
                         std::to_string(n) + " tasks");
}

inline void check_lengths(const std::vector<FlatParams>& w, std::size_t len, const char* what) {
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i].size() != len)
      throw DimensionError(std::string(what) + ": parameter vector " + std::to_string(i) + " has length " +
                           std::to_string(w[i].size()) + ", expected " + std::to_string(len));
}

}  // namespace detail

/// Simultaneous update: every right-hand side reads the pre-update values.
inline std::vector<FlatParams> implicit_inner_update(const std::vector<FlatParams>& w, std::span<const double> m) {
  const std::size_t n = w.size();
  detail::check_square(m, n, "implicit_inner_update");
  if (n == 0) return {};
  const std::size_t len = w.front().size();
  detail::check_lengths(w, len, "implicit_inner_update");
  std::vector<FlatParams> out = w;
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t k = 0; k < len; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += m[t * n + j] * (w[j][k] - w[t][k]);
      out[t][k] = w[t][k] + s;
    }
  return out;
}

inline std::vector<MatchParams> implicit_inner_update(const std::vector<MatchParams>& w, const RelationMatrix& m) {
  std::vector<FlatParams> flat;
  for (const MatchParams& p : w) flat.push_back(flatten(p));
  const std::vector<FlatParams> upd = implicit_inner_update(flat, m.m);
  std::vector<MatchParams> out;
  for (std::size_t i = 0; i < upd.size(); ++i) out.push_back(unflatten(upd[i], w[i]));
  return out;
}

/// theta_block + eta * sum_i sum_j M_ij (w_j - w_i).
inline FlatParams implicit_outer_update(std::span<const double> theta_block, const std::vector<FlatParams>& w,
                                        std::span<const double> m, double eta) {
  if (!std::isfinite(eta)) throw ValidationError("implicit_outer_update: eta must be finite");
  const std::size_t n = w.size();
  detail::check_square(m, n, "implicit_outer_update");
  detail::check_lengths(w, theta_block.size(), "implicit_outer_update");
  FlatParams out(theta_block.begin(), theta_block.end());
  for (std::size_t k = 0; k < out.size(); ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) s += m[i * n + j] * (w[j][k] - w[i][k]);
    out[k] += eta * s;
  }
  return out;
}

inline MatchParams implicit_outer_update(const MatchParams& theta_block, const std::vector<MatchParams>& w,
                                         const RelationMatrix& m, double eta) {
  std::vector<FlatParams> flat;
  for (const MatchParams& p : w) flat.push_back(flatten(p));
  return unflatten(implicit_outer_update(flatten(theta_block), flat, m.m, eta), theta_block);
}

/// w_j = w + sum_k M_jk (w_k - w_j) for every test task j, from pre-update values.
inline std::vector<FlatParams> implicit_inference_update(std::span<const double> w,
                                                         const std::vector<FlatParams>& w_test,
                                                         std::span<const double> m) {
  const std::size_t n = w_test.size();
  detail::check_square(m, n, "implicit_inference_update");
  detail::check_lengths(w_test, w.size(), "implicit_inference_update");
  std::vector<FlatParams> out(n, FlatParams(w.begin(), w.end()));
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < w.size(); ++k) {
      double s = 0.0;
      for (std::size_t t = 0; t < n; ++t) s += m[j * n + t] * (w_test[t][k] - w_test[j][k]);
      out[j][k] += s;
    }
  return out;
}

inline std::vector<MatchParams> implicit_inference_update(const MatchParams& w, const std::vector<MatchParams>& w_test,
                                                          const RelationMatrix& m) {
  std::vector<FlatParams> flat;
  for (const MatchParams& p : w_test) flat.push_back(flatten(p));
  const std::vector<FlatParams> upd = implicit_inference_update(flatten(w), flat, m.m);
  std::vector<MatchParams> out;
  for (const FlatParams& f : upd) out.push_back(unflatten(f, w));
  return out;
}

}  // namespace unimatch::taskrel
