// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal reverse-mode differentiation over dense fp64 tensors of rank 1 or 2.
//
// A Tensor is a cheap handle to an immutable node. Operations whose inputs all
// have requires_grad == false produce plain constant nodes and record nothing,
// so forward-only passes (frozen encoder, evaluation) carry no tape overhead.
// A graph is meant to be built and differentiated by one thread; parameter
// values are shared between workers by copying them into per-worker leaves.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "unimatch/errors.hpp"
#include "unimatch/rng.hpp"

namespace unimatch::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (std::size_t e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape.size() > 2) throw DimensionError("only rank 1 and 2 tensors are supported, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                           " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad = false) {
    return from({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? node_->shape[1] : node_->shape[0]; }

  std::span<const double> values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  const char* op() const { return node_->op; }

  /// Same values, detached from any recorded history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_matrix(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap as_matrix(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) n->inputs.push_back(t.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(a.node()->value, m, k) * detail::as_matrix(b.node()->value, k, n);
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    auto dC = detail::as_matrix(std::as_const(self.grad), m, n);
    if (A.requires_grad)
      detail::as_matrix(A.grad_buffer(), m, k).noalias() += dC * detail::as_matrix(std::as_const(B.value), k, n).transpose();
    if (B.requires_grad)
      detail::as_matrix(B.grad_buffer(), k, n).noalias() += detail::as_matrix(std::as_const(A.value), m, k).transpose() * dC;
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return detail::make_result("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto& A = *self.inputs[0];
    if (!A.requires_grad) return;
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

/// Elementwise sum of same-shape tensors.
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// a[m x n] + row[n], the row broadcast over every row of a.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  detail::require_rank2(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (row.size() != n)
    throw DimensionError("add_row: row " + shape_str(row.shape()) + " does not broadcast over " + shape_str(a.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + row[j];
  return detail::make_result("add_row", a.shape(), std::move(out), {a, row}, [m, n](detail::Node& self) {
    auto& A = *self.inputs[0];
    auto& R = *self.inputs[1];
    if (A.requires_grad) {
      auto& g = A.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (R.requires_grad) {
      auto& g = R.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

/// Elementwise (Hadamard) product of same-shape tensors.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) {
      auto& g = A.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.value[i];
    }
    if (B.requires_grad) {
      auto& g = B.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.value[i];
    }
  });
}

/// a * c for a compile-time-free constant c (no gradient flows to c).
inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return detail::make_result("scale", a.shape(), std::move(out), {a}, [c](detail::Node& self) {
    auto& A = *self.inputs[0];
    if (!A.requires_grad) return;
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
}

/// a * s where s is a one-element tensor that may itself be learnable.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("scale_by expects a scalar factor, got " + shape_str(s.shape()));
  const double c = s[0];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return detail::make_result("scale_by", a.shape(), std::move(out), {a, s}, [c](detail::Node& self) {
    auto& A = *self.inputs[0];
    auto& S = *self.inputs[1];
    if (A.requires_grad) {
      auto& g = A.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    }
    if (S.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * A.value[i];
      S.grad_buffer()[0] += acc;
    }
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return detail::make_result("relu", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& A = *self.inputs[0];
    if (!A.requires_grad) return;
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (A.value[i] > 0.0) g[i] += self.grad[i];
  });
}

/// Clips into [0, 1]. Meant for removing round-off from convex combinations,
/// so the gradient passes through unchanged.
inline Tensor clamp_unit(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a[i], 0.0, 1.0);
  return detail::make_result("clamp_unit", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& A = *self.inputs[0];
    if (!A.requires_grad) return;
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Sum of all entries, as a one-element tensor.
inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return detail::make_result("sum", {1}, {acc}, {a}, [](detail::Node& self) {
    auto& A = *self.inputs[0];
    if (!A.requires_grad) return;
    auto& g = A.grad_buffer();
    for (double& x : g) x += self.grad[0];
  });
}

/// Concatenate matrices with equal row counts along the column axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of zero tensors");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != m)
      throw DimensionError("concat_cols row mismatch: " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = parts[k][i * widths[k] + j];
    off += widths[k];
  }
  return detail::make_result("concat_cols", {m, total}, std::move(out), parts,
                             [m, total, widths](detail::Node& self) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                 auto& in = *self.inputs[k];
                                 if (in.requires_grad) {
                                   auto& g = in.grad_buffer();
                                   for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t j = 0; j < widths[k]; ++j)
                                       g[i * widths[k] + j] += self.grad[i * total + off + j];
                                 }
                                 off += widths[k];
                               }
                             });
}

/// Rows of a selected by index (indices may repeat).
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> index) {
  detail::require_rank2(a, "gather_rows");
  const std::size_t n = a.cols();
  for (std::size_t r : index)
    if (r >= a.rows())
      throw DimensionError("gather_rows index " + std::to_string(r) + " out of range for " + shape_str(a.shape()));
  if (index.empty()) throw DimensionError("gather_rows with empty index");
  std::vector<double> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i)
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(index[i] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(i * n));
  const std::size_t rows = index.size();
  return detail::make_result("gather_rows", {rows, n}, std::move(out), {a},
                             [n, index = std::move(index)](detail::Node& self) {
                               auto& A = *self.inputs[0];
                               if (!A.requires_grad) return;
                               auto& g = A.grad_buffer();
                               for (std::size_t i = 0; i < index.size(); ++i)
                                 for (std::size_t j = 0; j < n; ++j) g[index[i] * n + j] += self.grad[i * n + j];
                             });
}

/// Row-wise sum into n_segments buckets; empty buckets are zero rows.
inline Tensor segment_sum(const Tensor& a, std::vector<std::size_t> segment_ids, std::size_t n_segments) {
  detail::require_rank2(a, "segment_sum");
  if (segment_ids.size() != a.rows())
    throw DimensionError("segment_sum: " + std::to_string(segment_ids.size()) + " ids for " + shape_str(a.shape()));
  if (n_segments == 0) throw DimensionError("segment_sum: n_segments must be positive");
  const std::size_t n = a.cols();
  std::vector<double> out(n_segments * n, 0.0);
  for (std::size_t i = 0; i < segment_ids.size(); ++i) {
    const std::size_t s = segment_ids[i];
    if (s >= n_segments)
      throw ValidationError("segment id " + std::to_string(s) + " out of range [0, " + std::to_string(n_segments) + ")");
    for (std::size_t j = 0; j < n; ++j) out[s * n + j] += a[i * n + j];
  }
  return detail::make_result("segment_sum", {n_segments, n}, std::move(out), {a},
                             [n, ids = std::move(segment_ids)](detail::Node& self) {
                               auto& A = *self.inputs[0];
                               if (!A.requires_grad) return;
                               auto& g = A.grad_buffer();
                               for (std::size_t i = 0; i < ids.size(); ++i)
                                 for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[ids[i] * n + j];
                             });
}

/// Row s of the result is the mean of the rows of a whose segment id is s.
inline Tensor segment_mean(const Tensor& a, std::vector<std::size_t> segment_ids, std::size_t n_segments) {
  detail::require_rank2(a, "segment_mean");
  if (segment_ids.size() != a.rows())
    throw DimensionError("segment_mean: " + std::to_string(segment_ids.size()) + " ids for " + shape_str(a.shape()));
  if (n_segments == 0) throw DimensionError("segment_mean: n_segments must be positive");
  std::vector<std::size_t> counts(n_segments, 0);
  for (std::size_t s : segment_ids) {
    if (s >= n_segments)
      throw ValidationError("segment id " + std::to_string(s) + " out of range [0, " + std::to_string(n_segments) + ")");
    ++counts[s];
  }
  for (std::size_t s = 0; s < n_segments; ++s)
    if (counts[s] == 0) throw ValidationError("segment_mean: segment " + std::to_string(s) + " is empty");
  const std::size_t n = a.cols();
  std::vector<double> out(n_segments * n, 0.0);
  for (std::size_t i = 0; i < segment_ids.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[segment_ids[i] * n + j] += a[i * n + j];
  for (std::size_t s = 0; s < n_segments; ++s)
    for (std::size_t j = 0; j < n; ++j) out[s * n + j] /= static_cast<double>(counts[s]);
  return detail::make_result("segment_mean", {n_segments, n}, std::move(out), {a},
                             [n, ids = std::move(segment_ids), counts = std::move(counts)](detail::Node& self) {
                               auto& A = *self.inputs[0];
                               if (!A.requires_grad) return;
                               auto& g = A.grad_buffer();
                               for (std::size_t i = 0; i < ids.size(); ++i) {
                                 const double inv = 1.0 / static_cast<double>(counts[ids[i]]);
                                 for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[ids[i] * n + j] * inv;
                               }
                             });
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return detail::make_result("softmax_rows", x.shape(), std::move(out), {x}, [m, n](detail::Node& self) {
    auto& X = *self.inputs[0];
    if (!X.requires_grad) return;
    auto& g = X.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

inline constexpr double kDefaultLogClamp = 1e-12;

/// Sum over rows of -y . log(p), with log(p) evaluated at max(p, eps_log).
/// Every one-hot row must be exactly [1,0] or [0,1].
inline Tensor cross_entropy(const Tensor& probs, const Tensor& onehot, double eps_log = kDefaultLogClamp) {
  if (probs.rank() != 2 || probs.cols() != 2 || probs.shape() != onehot.shape())
    throw DimensionError("cross_entropy expects matching [m x 2] tensors, got " + shape_str(probs.shape()) + " and " +
                         shape_str(onehot.shape()));
  const std::size_t m = probs.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const double a = onehot[2 * i], b = onehot[2 * i + 1];
    if (!((a == 1.0 && b == 0.0) || (a == 0.0 && b == 1.0))) {
      std::ostringstream os;
      os << "cross_entropy: row " << i << " is not one-hot: [" << a << ", " << b << "]";
      throw ValidationError(os.str());
    }
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (onehot[i] != 0.0) loss -= onehot[i] * std::log(std::max(probs[i], eps_log));
  return detail::make_result("cross_entropy", {1}, {loss}, {probs, onehot}, [eps_log](detail::Node& self) {
    auto& P = *self.inputs[0];
    auto& Y = *self.inputs[1];
    const double up = self.grad[0];
    if (P.requires_grad) {
      auto& g = P.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (Y.value[i] != 0.0 && P.value[i] > eps_log) g[i] -= up * Y.value[i] / P.value[i];
    }
    if (Y.requires_grad) {
      auto& g = Y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= up * std::log(std::max(P.value[i], eps_log));
    }
  });
}

/// Inverted dropout. Identity when not training or rate == 0; otherwise each
/// entry is kept with probability 1 - rate and scaled by 1 / (1 - rate).
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ValidationError("dropout rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = uniform01(rng) >= rate ? keep_scale : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Gradients of a scalar loss with respect to the requires_grad leaves it reached.
class Gradients {
 public:
  /// Gradient for t; zeros when the loss did not depend on t.
  std::vector<double> of(const Tensor& t) const {
    auto it = grads_.find(t.node());
    if (it == grads_.end()) return std::vector<double>(t.size(), 0.0);
    return it->second;
  }
  bool reached(const Tensor& t) const { return grads_.count(t.node()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend Gradients backward(const Tensor& loss);
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

/// Reverse-mode sweep from a one-element loss. Every grad slot in the graph is
/// reset before the sweep, so repeated calls do not accumulate.
inline Gradients backward(const Tensor& loss) {
  if (!loss) throw DimensionError("backward on an empty tensor");
  if (loss.size() != 1) throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  Gradients result;
  if (!loss.requires_grad()) return result;

  // Iterative post-order DFS; topo ends with the loss.
  std::vector<detail::Node*> topo;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : topo) n->grad.assign(n->value.size(), 0.0);
  loss.node()->grad[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);

  for (detail::Node* n : topo)
    if (!n->backward) result.grads_.emplace(n, n->grad);
  return result;
}

}  // namespace unimatch::ad
