// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unimatch/errors.hpp"

namespace unimatch::metrics {

namespace detail {

inline void check_inputs(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size())
    throw ValidationError(std::string(what) + ": " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y != 0 && y != 1) throw ValidationError(std::string(what) + ": labels must be 0 or 1");
}

}  // namespace detail

/// Probability that a random positive outranks a random negative; ties count
/// one half (Mann-Whitney). Computed from average ranks.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_inputs(scores, labels, "auroc");
  const std::size_t n = scores.size();
  const auto n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("auroc needs both classes present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  return (pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// Average precision: sum_k (R_k - R_{k-1}) P_k over the descending-score
/// sweep. Equal scores keep their original relative order.
inline double auprc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_inputs(scores, labels, "auprc");
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (n_pos == 0) throw ValidationError("auprc needs at least one positive");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]] == 1) ++tp;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(k + 1);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

/// AUPRC minus the positive base rate of the scored set.
inline double delta_auprc(std::span<const double> scores, std::span<const int> labels) {
  const double ap = auprc(scores, labels);
  const auto n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  return ap - n_pos / static_cast<double>(labels.size());
}

/// True when some group of equal scores holds both classes, i.e. the average
/// precision depends on the tie-breaking order.
inline bool ties_cross_classes(std::span<const double> scores, std::span<const int> labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (scores[order[i]] == scores[order[i - 1]] && labels[order[i]] != labels[order[i - 1]]) return true;
  return false;
}

struct EvalResult {
  std::string task_id;
  std::size_t support_size = 0;
  std::vector<double> values;   // one per seed, in run order
  double mean = 0.0;
  std::optional<double> stddev;  // sample standard deviation, >= 2 seeds
  std::optional<double> stderr_;  // stddev / sqrt(n), >= 2 seeds
};

/// Mean, sample standard deviation and standard error. Statistics are
/// computed over the sorted values so the result does not depend on seed order.
inline EvalResult aggregate(std::vector<double> values, std::string task_id = {}, std::size_t support_size = 0) {
  if (values.empty()) throw ValidationError("aggregate needs at least one value");
  EvalResult r;
  r.task_id = std::move(task_id);
  r.support_size = support_size;
  r.values = values;
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  r.mean = sum / n;
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.stddev = std::sqrt(ss / (n - 1.0));
    r.stderr_ = *r.stddev / std::sqrt(n);
  }
  return r;
}

// --- PCA -----------------------------------------------------------------------

struct PcaResult {
  std::size_t n = 0, d = 0, k = 0;
  std::vector<double> projection;       // [n x k]
  std::vector<double> components;       // [k x d], orthonormal rows
  std::vector<double> eigenvalues;      // covariance eigenvalues, nonincreasing
  std::vector<double> explained_ratio;  // eigenvalue / total variance
};

struct PcaOptions {
  double tolerance = 1e-10;
  std::size_t max_iterations = 10'000;
};

/// Projects row-major data [n x d] onto the top-k principal axes found by
/// power iteration with deflation on the sample covariance. Each component's
/// largest-magnitude coordinate is made positive.
inline PcaResult pca_project(std::span<const double> data, std::size_t n, std::size_t d, std::size_t k,
                             const PcaOptions& opt = {}) {
  if (data.size() != n * d) throw DimensionError("pca_project: data size does not match n x d");
  if (n < 2) throw ValidationError("pca_project needs at least 2 rows");
  if (k < 1 || k > std::min(n, d))
    throw ValidationError("pca_project: k=" + std::to_string(k) + " outside [1, " + std::to_string(std::min(n, d)) + "]");

  std::vector<double> centered(data.begin(), data.end());
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += centered[i * d + j];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) centered[i * d + j] -= mean;
  }
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += centered[i * d + a] * centered[i * d + b];
      cov[a * d + b] = cov[b * d + a] = s / static_cast<double>(n - 1);
    }
  double total = 0.0;
  for (std::size_t a = 0; a < d; ++a) total += cov[a * d + a];

  PcaResult r;
  r.n = n;
  r.d = d;
  r.k = k;
  std::vector<double> work = cov;
  auto matvec = [&](const std::vector<double>& v) {
    std::vector<double> out(d, 0.0);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) out[a] += work[a * d + b] * v[b];
    return out;
  };
  auto orthogonalize = [&](std::vector<double>& v) {
    for (std::size_t c = 0; c < r.components.size() / d; ++c) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += v[j] * r.components[c * d + j];
      for (std::size_t j = 0; j < d; ++j) v[j] -= dot * r.components[c * d + j];
    }
  };
  auto normalize = [&](std::vector<double>& v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-300) return false;
    for (double& x : v) x /= norm;
    return true;
  };

  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> v(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = 1.0 + 0.1 * static_cast<double>(j % 7) + work[j * d + j];
    orthogonalize(v);
    bool ok = normalize(v);
    for (std::size_t j = 0; !ok && j < d; ++j) {  // start vector fell into the span of earlier components
      std::fill(v.begin(), v.end(), 0.0);
      v[j] = 1.0;
      orthogonalize(v);
      ok = normalize(v);
    }
    double lambda = 0.0;
    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
      std::vector<double> next = matvec(v);
      orthogonalize(next);
      if (!normalize(next)) break;  // v lies in the null space: eigenvalue 0
      double delta = 0.0, delta_flip = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        delta += (next[j] - v[j]) * (next[j] - v[j]);
        delta_flip += (next[j] + v[j]) * (next[j] + v[j]);
      }
      v = std::move(next);
      if (std::sqrt(std::min(delta, delta_flip)) < opt.tolerance) break;
    }
    const std::vector<double> cv = matvec(v);
    for (std::size_t j = 0; j < d; ++j) lambda += v[j] * cv[j];
    lambda = std::max(lambda, 0.0);

    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(v[j]) > std::abs(v[arg])) arg = j;
    if (v[arg] < 0)
      for (double& x : v) x = -x;

    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) work[a * d + b] -= lambda * v[a] * v[b];
    r.components.insert(r.components.end(), v.begin(), v.end());
    r.eigenvalues.push_back(lambda);
    r.explained_ratio.push_back(total > 0.0 ? lambda / total : 0.0);
  }

  r.projection.assign(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += centered[i * d + j] * r.components[c * d + j];
      r.projection[i * k + c] = s;
    }
  return r;
}

}  // namespace unimatch::metrics
