// SPDX-License-Identifier: Apache-2.0
#pragma once

// Parameter containers. Encoder (theta) and matcher (w) parameters are plain
// value arrays; a forward pass binds them to fresh autodiff leaves, so one
// snapshot can be read by many workers while each builds its own graph.
//
// The same aggregate templates hold values (ParamTensor), bound leaves
// (ad::Tensor) and gradients, and are walked in a fixed order by the
// visit_* / zip_* helpers. That order is the checkpoint and flattening order.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "unimatch/autodiff.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/rng.hpp"
#include "unimatch/smiles.hpp"

namespace unimatch {

struct ParamTensor {
  ad::Shape shape;
  std::vector<double> values;

  static ParamTensor zeros(ad::Shape s) {
    const std::size_t n = ad::shape_numel(s);
    return {std::move(s), std::vector<double>(n, 0.0)};
  }
  std::size_t size() const { return values.size(); }
  ad::Tensor bind(bool requires_grad) const { return ad::Tensor::from(shape, values, requires_grad); }
  bool operator==(const ParamTensor&) const = default;
};

/// Architecture hyperparameters shared by every parameter set of one model.
struct ModelConfig {
  std::size_t layers = 5;
  std::size_t hidden = 300;
  std::size_t atom_dim = smiles::AtomFeatureSchema{}.width();
  std::size_t bond_dim = smiles::kBondFeatureWidth;
  double encoder_dropout = 0.0;
  double match_dropout = 0.1;
  bool share_qk = true;
  bool fusion_bias = true;  // false: bias frozen at zero (literal linear fusion)

  void validate() const {
    if (layers < 1) throw ConfigError("encoder.layers must be >= 1");
    if (hidden < 1) throw ConfigError("encoder.hidden must be >= 1");
    if (encoder_dropout < 0.0 || encoder_dropout >= 1.0) throw ConfigError("encoder.dropout must be in [0, 1)");
    if (match_dropout < 0.0 || match_dropout >= 1.0) throw ConfigError("matcher.dropout must be in [0, 1)");
  }
};

template <typename T>
struct EncoderLayerT {
  T w1, b1, w2, b2, eps;
};

/// GIN encoder: input projection, bond embedding, and L two-layer MLPs with learnable eps.
template <typename T>
struct EncoderT {
  T input_w, input_b, bond_w;
  std::vector<EncoderLayerT<T>> layers;
};

/// Matching and fusion parameters. wq/wk hold one entry when shared across
/// layers, L entries otherwise.
template <typename T>
struct MatchT {
  std::vector<T> wq, wk;
  T wo, bias;

  bool operator==(const MatchT&) const = default;
};

using EncoderParams = EncoderT<ParamTensor>;
using MatchParams = MatchT<ParamTensor>;
using EncoderTensors = EncoderT<ad::Tensor>;
using MatchTensors = MatchT<ad::Tensor>;

struct ModelParams {
  EncoderParams encoder;
  MatchParams matcher;
};

// --- visitation -------------------------------------------------------------

template <typename Enc, typename F>
void visit_encoder(Enc& e, F&& f) {
  f(std::string("encoder.input_w"), e.input_w);
  f(std::string("encoder.input_b"), e.input_b);
  f(std::string("encoder.bond_w"), e.bond_w);
  for (std::size_t l = 0; l < e.layers.size(); ++l) {
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    f(p + "w1", e.layers[l].w1);
    f(p + "b1", e.layers[l].b1);
    f(p + "w2", e.layers[l].w2);
    f(p + "b2", e.layers[l].b2);
    f(p + "eps", e.layers[l].eps);
  }
}

template <typename Match, typename F>
void visit_matcher(Match& m, F&& f) {
  for (std::size_t i = 0; i < m.wq.size(); ++i) f("matcher.wq" + std::to_string(i), m.wq[i]);
  for (std::size_t i = 0; i < m.wk.size(); ++i) f("matcher.wk" + std::to_string(i), m.wk[i]);
  f(std::string("matcher.wo"), m.wo);
  f(std::string("matcher.bias"), m.bias);
}

template <typename F>
void visit_model(ModelParams& p, F&& f) {
  visit_encoder(p.encoder, f);
  visit_matcher(p.matcher, f);
}
template <typename F>
void visit_model(const ModelParams& p, F&& f) {
  visit_encoder(p.encoder, f);
  visit_matcher(p.matcher, f);
}

/// Walks two encoder aggregates of possibly different element types in lockstep.
template <typename EncA, typename EncB, typename F>
void zip_encoder(EncA& a, EncB& b, F&& f) {
  f(a.input_w, b.input_w);
  f(a.input_b, b.input_b);
  f(a.bond_w, b.bond_w);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    f(a.layers[l].w1, b.layers[l].w1);
    f(a.layers[l].b1, b.layers[l].b1);
    f(a.layers[l].w2, b.layers[l].w2);
    f(a.layers[l].b2, b.layers[l].b2);
    f(a.layers[l].eps, b.layers[l].eps);
  }
}

template <typename MatchA, typename MatchB, typename F>
void zip_matcher(MatchA& a, MatchB& b, F&& f) {
  for (std::size_t i = 0; i < a.wq.size(); ++i) f(a.wq[i], b.wq[i]);
  for (std::size_t i = 0; i < a.wk.size(); ++i) f(a.wk[i], b.wk[i]);
  f(a.wo, b.wo);
  f(a.bias, b.bias);
}

// --- binding and gradient extraction ----------------------------------------

inline EncoderTensors bind(const EncoderParams& p, bool requires_grad) {
  EncoderTensors t;
  t.layers.resize(p.layers.size());
  zip_encoder(p, t, [&](const ParamTensor& src, ad::Tensor& dst) { dst = src.bind(requires_grad); });
  return t;
}

/// Binds matcher parameters. The fusion bias is never a gradient target when
/// `train_bias` is false.
inline MatchTensors bind(const MatchParams& p, bool requires_grad, bool train_bias = true) {
  MatchTensors t;
  t.wq.resize(p.wq.size());
  t.wk.resize(p.wk.size());
  zip_matcher(p, t, [&](const ParamTensor& src, ad::Tensor& dst) { dst = src.bind(requires_grad); });
  t.bias = p.bias.bind(requires_grad && train_bias);
  return t;
}

template <typename Params, typename Tensors, typename Zip>
Params gradients_like(const Params& like, const Tensors& bound, const ad::Gradients& g, Zip zip) {
  Params out = like;
  zip(out, bound, [&](ParamTensor& dst, const ad::Tensor& t) { dst.values = g.of(t); });
  return out;
}

inline EncoderParams encoder_gradients(const EncoderParams& like, const EncoderTensors& bound, const ad::Gradients& g) {
  return gradients_like(like, bound, g, [](auto& a, auto& b, auto&& f) { zip_encoder(a, b, f); });
}

inline MatchParams matcher_gradients(const MatchParams& like, const MatchTensors& bound, const ad::Gradients& g) {
  return gradients_like(like, bound, g, [](auto& a, auto& b, auto&& f) { zip_matcher(a, b, f); });
}

// --- initialization -----------------------------------------------------------

namespace detail {

inline ParamTensor uniform_fan_in(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  ParamTensor p = ParamTensor::zeros(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : p.values) v = uniform(rng, -bound, bound);
  return p;
}

}  // namespace detail

/// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases and eps zero.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x1417}));
  const std::size_t d = cfg.hidden;
  ModelParams p;
  p.encoder.input_w = detail::uniform_fan_in({cfg.atom_dim, d}, cfg.atom_dim, rng);
  p.encoder.input_b = ParamTensor::zeros({d});
  p.encoder.bond_w = detail::uniform_fan_in({cfg.bond_dim, d}, cfg.bond_dim, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    EncoderLayerT<ParamTensor> layer;
    layer.w1 = detail::uniform_fan_in({d, d}, d, rng);
    layer.b1 = ParamTensor::zeros({d});
    layer.w2 = detail::uniform_fan_in({d, d}, d, rng);
    layer.b2 = ParamTensor::zeros({d});
    layer.eps = ParamTensor::zeros({1});
    p.encoder.layers.push_back(std::move(layer));
  }
  const std::size_t n_qk = cfg.share_qk ? 1 : cfg.layers;
  for (std::size_t i = 0; i < n_qk; ++i) {
    p.matcher.wq.push_back(detail::uniform_fan_in({d, d}, d, rng));
    p.matcher.wk.push_back(detail::uniform_fan_in({d, d}, d, rng));
  }
  p.matcher.wo = detail::uniform_fan_in({cfg.layers, 2}, cfg.layers, rng);
  p.matcher.bias = ParamTensor::zeros({2});
  return p;
}

// --- flat views -----------------------------------------------------------------

inline std::vector<double> flatten(const MatchParams& w) {
  std::vector<double> out;
  visit_matcher(w, [&](const std::string&, const ParamTensor& p) { out.insert(out.end(), p.values.begin(), p.values.end()); });
  return out;
}

/// Inverse of flatten(); `like` supplies the shapes.
inline MatchParams unflatten(const std::vector<double>& flat, const MatchParams& like) {
  MatchParams out = like;
  std::size_t off = 0;
  visit_matcher(out, [&](const std::string& name, ParamTensor& p) {
    if (off + p.size() > flat.size()) throw DimensionError("unflatten: vector too short at " + name);
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p.size(), p.values.begin());
    off += p.size();
  });
  if (off != flat.size()) throw DimensionError("unflatten: vector longer than parameter set");
  return out;
}

inline std::size_t count_values(const MatchParams& w) {
  std::size_t n = 0;
  visit_matcher(w, [&](const std::string&, const ParamTensor& p) { n += p.size(); });
  return n;
}

/// dst += src, elementwise over matching aggregates.
inline void accumulate(EncoderParams& dst, const EncoderParams& src) {
  zip_encoder(dst, src, [](ParamTensor& a, const ParamTensor& b) {
    for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] += b.values[i];
  });
}
inline void accumulate(MatchParams& dst, const MatchParams& src) {
  zip_matcher(dst, src, [](ParamTensor& a, const ParamTensor& b) {
    for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] += b.values[i];
  });
}

inline bool all_finite(const MatchParams& w) {
  bool ok = true;
  visit_matcher(w, [&](const std::string&, const ParamTensor& p) {
    for (double v : p.values) ok = ok && std::isfinite(v);
  });
  return ok;
}

}  // namespace unimatch
