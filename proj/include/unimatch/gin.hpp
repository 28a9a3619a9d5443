// SPDX-License-Identifier: Apache-2.0
#pragma once

// Graph Isomorphism Network encoder with per-layer mean pooling.
//
//   h_v <- MLP_l((1 + eps_l) h_v + sum_{u in N(v)} (h_u + E b_vu))
//   z^(l) = mean over the atoms of each molecule of h^(l)
//
// MLP_l is affine -> ReLU -> affine. Bond features enter each message through
// a shared linear embedding E; every stored bond is expanded into two
// directed messages.

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "unimatch/autodiff.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/params.hpp"
#include "unimatch/smiles.hpp"

namespace unimatch {

/// Disjoint union of molecular graphs, ready for message passing.
struct GraphBatch {
  ad::Tensor atom_x;  // [N x atom_dim]
  ad::Tensor edge_x;  // [2E x bond_dim], empty when the batch has no bonds
  std::vector<std::size_t> edge_src;
  std::vector<std::size_t> edge_dst;
  std::vector<std::size_t> atom_mol;  // molecule index of every atom
  std::size_t n_molecules = 0;

  std::size_t n_atoms() const { return atom_mol.size(); }
  std::size_t n_edges() const { return edge_src.size(); }
};

inline GraphBatch make_batch(std::span<const smiles::MolGraph* const> graphs) {
  if (graphs.empty()) throw ValidationError("graph batch must contain at least one molecule");
  GraphBatch b;
  b.n_molecules = graphs.size();
  const std::size_t atom_dim = graphs.front()->atom_feats.cols;
  std::vector<double> ax, ex;
  std::size_t offset = 0;
  for (std::size_t m = 0; m < graphs.size(); ++m) {
    const smiles::MolGraph& g = *graphs[m];
    if (g.atom_feats.cols != atom_dim) throw DimensionError("graphs in one batch use different atom schemas");
    if (g.num_atoms() == 0) throw ValidationError("molecule without atoms in batch");
    ax.insert(ax.end(), g.atom_feats.data.begin(), g.atom_feats.data.end());
    for (std::size_t a = 0; a < g.num_atoms(); ++a) b.atom_mol.push_back(m);
    for (std::size_t k = 0; k < g.bonds.size(); ++k) {
      const auto [u, v] = g.bonds[k];
      const auto feat = std::span(g.bond_feats.data).subspan(k * g.bond_feats.cols, g.bond_feats.cols);
      b.edge_src.push_back(offset + u);
      b.edge_dst.push_back(offset + v);
      ex.insert(ex.end(), feat.begin(), feat.end());
      b.edge_src.push_back(offset + v);
      b.edge_dst.push_back(offset + u);
      ex.insert(ex.end(), feat.begin(), feat.end());
    }
    offset += g.num_atoms();
  }
  b.atom_x = ad::Tensor::matrix(offset, atom_dim, std::move(ax));
  if (!b.edge_src.empty()) b.edge_x = ad::Tensor::matrix(b.edge_src.size(), smiles::kBondFeatureWidth, std::move(ex));
  return b;
}

inline GraphBatch make_batch(const std::vector<std::shared_ptr<const smiles::MolGraph>>& graphs) {
  std::vector<const smiles::MolGraph*> raw;
  raw.reserve(graphs.size());
  for (const auto& g : graphs) raw.push_back(g.get());
  return make_batch(std::span<const smiles::MolGraph* const>(raw));
}

/// Per-layer molecule embeddings z^(1..L), each [n_molecules x d].
struct MultiLevelEmbedding {
  std::vector<ad::Tensor> z;

  std::size_t layers() const { return z.size(); }
  std::size_t molecules() const { return z.empty() ? 0 : z.front().rows(); }
};

struct EncodeOptions {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
};

/// One GIN message-passing layer over node states H [N x d].
inline ad::Tensor gin_layer(const ad::Tensor& h, const GraphBatch& batch, const EncoderTensors& enc,
                            std::size_t layer) {
  if (layer >= enc.layers.size())
    throw DimensionError("gin_layer: layer " + std::to_string(layer) + " out of range for " +
                         std::to_string(enc.layers.size()) + " layers");
  if (h.rows() != batch.n_atoms())
    throw DimensionError("gin_layer: " + std::to_string(h.rows()) + " node rows for " +
                         std::to_string(batch.n_atoms()) + " atoms");
  const EncoderLayerT<ad::Tensor>& p = enc.layers[layer];
  ad::Tensor combined = ad::add(h, ad::scale_by(h, p.eps));
  if (batch.n_edges() > 0) {
    ad::Tensor messages = ad::add(ad::gather_rows(h, batch.edge_src), ad::matmul(batch.edge_x, enc.bond_w));
    combined = ad::add(combined, ad::segment_sum(messages, batch.edge_dst, batch.n_atoms()));
  }
  ad::Tensor hidden = ad::relu(ad::add_row(ad::matmul(combined, p.w1), p.b1));
  return ad::add_row(ad::matmul(hidden, p.w2), p.b2);
}

/// Input projection followed by L GIN layers; returns the mean-pooled
/// embedding after every layer.
inline MultiLevelEmbedding encode_multilevel(const GraphBatch& batch, const EncoderTensors& enc,
                                             const EncodeOptions& opt = {}) {
  if (batch.n_molecules == 0) throw ValidationError("encode_multilevel on an empty batch");
  if (batch.atom_x.cols() != enc.input_w.rows())
    throw DimensionError("atom features " + ad::shape_str(batch.atom_x.shape()) + " do not match input projection " +
                         ad::shape_str(enc.input_w.shape()));
  ad::Tensor h = ad::add_row(ad::matmul(batch.atom_x, enc.input_w), enc.input_b);
  MultiLevelEmbedding out;
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    h = gin_layer(h, batch, enc, l);
    if (opt.training && opt.dropout > 0.0) {
      if (opt.rng == nullptr) throw ValidationError("encoder dropout requires an rng");
      h = ad::dropout(h, opt.dropout, *opt.rng, true);
    }
    out.z.push_back(ad::segment_mean(h, batch.atom_mol, batch.n_molecules));
  }
  return out;
}

}  // namespace unimatch
