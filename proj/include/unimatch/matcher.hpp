// SPDX-License-Identifier: Apache-2.0
#pragma once

// Hierarchical matching: at every encoder layer the query molecules attend
// over the support molecules, with support labels as values,
//
//   y^(l) = softmax((z_q Wq)(z_s Wk)^T / sqrt(d)) y_s,
//
// and the L per-layer scores are fused by a linear map plus softmax into
// [p_positive, p_negative].

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "unimatch/autodiff.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/gin.hpp"
#include "unimatch/params.hpp"
#include "unimatch/smiles.hpp"

namespace unimatch {

struct LayerPrediction {
  ad::Tensor y_hat;      // [N_q x 1]
  ad::Tensor attention;  // [N_q x N_s], before dropout
};

struct MatchOptions {
  bool training = false;
  double dropout = 0.0;  // applied to attention weights and fusion input when training
  Rng* rng = nullptr;
};

/// Support labels as a [N x 1] value column. Labels must be 0 or 1.
inline ad::Tensor label_column(std::span<const int> labels) {
  if (labels.empty()) throw ValidationError("empty label list");
  std::vector<double> v;
  v.reserve(labels.size());
  for (int y : labels) {
    if (y != 0 && y != 1) throw ValidationError("labels must be 0 or 1, got " + std::to_string(y));
    v.push_back(static_cast<double>(y));
  }
  return ad::Tensor::matrix(labels.size(), 1, std::move(v));
}

/// One-hot targets with the positive class first: 1 -> [1,0], 0 -> [0,1].
inline ad::Tensor onehot_targets(std::span<const int> labels) {
  if (labels.empty()) throw ValidationError("empty label list");
  std::vector<double> v;
  v.reserve(2 * labels.size());
  for (int y : labels) {
    if (y != 0 && y != 1) throw ValidationError("labels must be 0 or 1, got " + std::to_string(y));
    v.push_back(y == 1 ? 1.0 : 0.0);
    v.push_back(y == 1 ? 0.0 : 1.0);
  }
  return ad::Tensor::matrix(labels.size(), 2, std::move(v));
}

namespace detail {

inline ad::Tensor maybe_dropout(const ad::Tensor& x, const MatchOptions& opt) {
  if (!opt.training || opt.dropout <= 0.0) return x;
  if (opt.rng == nullptr) throw ValidationError("matcher dropout requires an rng");
  return ad::dropout(x, opt.dropout, *opt.rng, true);
}

}  // namespace detail

inline LayerPrediction match_layer(const ad::Tensor& z_q, const ad::Tensor& z_s, const ad::Tensor& y_s,
                                   const ad::Tensor& wq, const ad::Tensor& wk, const MatchOptions& opt = {}) {
  if (z_s.rank() != 2 || z_s.rows() == 0) throw ValidationError("match_layer: empty support set");
  if (y_s.rows() != z_s.rows() || y_s.cols() != 1)
    throw DimensionError("match_layer: support labels " + ad::shape_str(y_s.shape()) + " for support " +
                         ad::shape_str(z_s.shape()));
  if (z_q.cols() != z_s.cols())
    throw DimensionError("match_layer: query " + ad::shape_str(z_q.shape()) + " vs support " +
                         ad::shape_str(z_s.shape()));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(z_q.cols()));
  ad::Tensor scores = ad::scale(ad::matmul(ad::matmul(z_q, wq), ad::transpose(ad::matmul(z_s, wk))), inv_sqrt_d);
  ad::Tensor attention = ad::softmax_rows(scores);
  ad::Tensor y_hat = ad::matmul(detail::maybe_dropout(attention, opt), y_s);
  if (!opt.training || opt.dropout <= 0.0) y_hat = ad::clamp_unit(y_hat);  // attention rows may sum to 1 + ulp
  return {y_hat, attention};
}

/// Concatenates the per-layer scores and maps them to class probabilities.
/// Column 0 is the positive class.
inline ad::Tensor fuse(const std::vector<LayerPrediction>& layer_preds, const MatchTensors& w,
                       const MatchOptions& opt = {}) {
  if (layer_preds.size() != w.wo.rows())
    throw DimensionError("fuse: " + std::to_string(layer_preds.size()) + " layer predictions for W_o " +
                         ad::shape_str(w.wo.shape()));
  std::vector<ad::Tensor> cols;
  cols.reserve(layer_preds.size());
  for (const LayerPrediction& p : layer_preds) {
    if (p.y_hat.rows() != layer_preds.front().y_hat.rows())
      throw DimensionError("fuse: layer predictions disagree on query count");
    cols.push_back(p.y_hat);
  }
  ad::Tensor joint = detail::maybe_dropout(ad::concat_cols(cols), opt);
  return ad::softmax_rows(ad::add_row(ad::matmul(joint, w.wo), w.bias));
}

struct Prediction {
  ad::Tensor probs;  // [N_q x 2]
  std::vector<LayerPrediction> layers;
};

/// Matches precomputed query embeddings against support embeddings at every layer and fuses.
inline Prediction match_and_fuse(const std::vector<ad::Tensor>& z_support, std::span<const int> support_labels,
                                 const std::vector<ad::Tensor>& z_query, const MatchTensors& w,
                                 const MatchOptions& opt = {}) {
  if (z_support.size() != z_query.size()) throw DimensionError("support and query have different layer counts");
  if (w.wq.size() != 1 && w.wq.size() != z_support.size())
    throw DimensionError("matcher has " + std::to_string(w.wq.size()) + " Wq blocks for " +
                         std::to_string(z_support.size()) + " layers");
  const ad::Tensor y_s = label_column(support_labels);
  Prediction out;
  for (std::size_t l = 0; l < z_support.size(); ++l) {
    const std::size_t k = w.wq.size() == 1 ? 0 : l;
    out.layers.push_back(match_layer(z_query[l], z_support[l], y_s, w.wq[k], w.wk[k], opt));
  }
  out.probs = fuse(out.layers, w, opt);
  return out;
}

/// Row subset of every layer's embedding.
inline std::vector<ad::Tensor> select_rows(const MultiLevelEmbedding& e, const std::vector<std::size_t>& rows) {
  std::vector<ad::Tensor> out;
  out.reserve(e.z.size());
  for (const ad::Tensor& z : e.z) out.push_back(ad::gather_rows(z, rows));
  return out;
}

using GraphList = std::vector<std::shared_ptr<const smiles::MolGraph>>;

/// Encodes support and query jointly, matches at every layer, fuses.
inline Prediction predict(const GraphList& support, std::span<const int> support_labels, const GraphList& query,
                          const EncoderTensors& theta, const MatchTensors& w, const EncodeOptions& enc_opt = {},
                          const MatchOptions& match_opt = {}) {
  if (support.empty()) throw ValidationError("predict: empty support set");
  if (query.empty()) throw ValidationError("predict: empty query set");
  if (support.size() != support_labels.size()) throw ValidationError("predict: support graphs and labels differ in count");
  GraphList all = support;
  all.insert(all.end(), query.begin(), query.end());
  const MultiLevelEmbedding emb = encode_multilevel(make_batch(all), theta, enc_opt);
  std::vector<std::size_t> s_rows(support.size()), q_rows(query.size());
  for (std::size_t i = 0; i < s_rows.size(); ++i) s_rows[i] = i;
  for (std::size_t i = 0; i < q_rows.size(); ++i) q_rows[i] = support.size() + i;
  return match_and_fuse(select_rows(emb, s_rows), support_labels, select_rows(emb, q_rows), w, match_opt);
}

}  // namespace unimatch
