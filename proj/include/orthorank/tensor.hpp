#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "orthorank/errors.hpp"

namespace orthorank {

std::string shape_to_string(std::span<const int64_t> shape);

/// Dense row-major tensor owning its storage.
///
/// A default-constructed tensor is "unset" (rank 0, no storage). Every other
/// tensor has a non-empty shape with all extents >= 1 and exactly
/// product(shape) elements.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T{0}) {}

  BasicTensor(std::vector<int64_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != checked_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_to_string(shape_));
    }
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  int64_t dim(size_t axis) const { return shape_.at(axis); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Row access along the leading axis.
  int64_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  int64_t row_size() const { return rows() == 0 ? 0 : numel() / rows(); }
  std::span<T> row(int64_t r) {
    return std::span<T>(data_).subspan(static_cast<size_t>(r * row_size()),
                                       static_cast<size_t>(row_size()));
  }
  std::span<const T> row(int64_t r) const {
    return std::span<const T>(data_).subspan(static_cast<size_t>(r * row_size()),
                                             static_cast<size_t>(row_size()));
  }

  T& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
  const T& at(int64_t r, int64_t c) const {
    return data_[static_cast<size_t>(r * shape_[1] + c)];
  }

  // Value equality (IEEE comparison of each element).
  bool operator==(const BasicTensor& other) const = default;

 private:
  static int64_t checked_numel(const std::vector<int64_t>& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    int64_t n = 1;
    for (int64_t s : shape) {
      if (s < 1) throw DimensionError("tensor extents must be >= 1, got " + shape_to_string(shape));
      n *= s;
    }
    return n;
  }

  std::vector<int64_t> shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// True when both tensors have the same shape and identical bit patterns.
template <typename T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

// Sequential reductions over contiguous vectors.
template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{0};
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T l2_norm(std::span<const T> a) {
  return std::sqrt(dot<T>(a, a));
}

/// out = a · b for a: [m×k], b: [k×n]. The k-sum runs sequentially so
/// results are bit-reproducible.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " +
                         shape_to_string(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> out({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T acc{0};
      for (int64_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      out.at(i, j) = acc;
    }
  }
  return out;
}

/// out = x · wᵀ for x: [T×in], w: [out×in] (projection weights stored
/// output-major).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw DimensionError("linear: input " + shape_to_string(x.shape()) +
                         " incompatible with weight " + shape_to_string(w.shape()));
  }
  const int64_t rows = x.dim(0), out_dim = w.dim(0);
  BasicTensor<T> out({rows, out_dim});
  for (int64_t r = 0; r < rows; ++r) {
    auto xr = x.row(r);
    for (int64_t o = 0; o < out_dim; ++o) out.at(r, o) = dot<T>(xr, w.row(o));
  }
  return out;
}

/// RMSNorm with learned gain: out[t] = gain ⊙ x[t] / sqrt(mean(x[t]²) + eps).
template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, std::span<const T> gain, T eps) {
  if (x.rank() != 2 || x.dim(1) != static_cast<int64_t>(gain.size())) {
    throw DimensionError("rms_norm: input " + shape_to_string(x.shape()) + " with gain of length " +
                         std::to_string(gain.size()));
  }
  if (!(eps > T{0})) throw ConfigError("rms_norm: eps must be positive");
  const int64_t d = x.dim(1);
  BasicTensor<T> out(x.shape());
  for (int64_t t = 0; t < x.dim(0); ++t) {
    auto xr = x.row(t);
    T ss{0};
    for (int64_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
    auto orow = out.row(t);
    for (int64_t j = 0; j < d; ++j) orow[j] = gain[j] * (xr[j] * inv);
  }
  return out;
}

template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, T eps) {
  return rms_norm(x, gain.data(), eps);
}

/// Row-wise softmax with causal masking. Key j sits at key_positions[j]
/// (defaults to j); it is visible to query i only when its position does not
/// exceed query_positions[i]. Masked entries are exactly 0. A row with no
/// visible key is all zeros.
template <typename T>
BasicTensor<T> softmax_causal(const BasicTensor<T>& scores, std::span<const int64_t> query_positions,
                              std::span<const int64_t> key_positions = {}) {
  if (scores.rank() != 2 || static_cast<int64_t>(query_positions.size()) != scores.dim(0) ||
      (!key_positions.empty() && static_cast<int64_t>(key_positions.size()) != scores.dim(1))) {
    throw DimensionError("softmax_causal: position lists do not match scores " +
                         shape_to_string(scores.shape()));
  }
  const int64_t tq = scores.dim(0), tk = scores.dim(1);
  auto key_pos = [&](int64_t j) { return key_positions.empty() ? j : key_positions[j]; };
  BasicTensor<T> out(scores.shape());
  for (int64_t i = 0; i < tq; ++i) {
    const int64_t qpos = query_positions[i];
    T row_max = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < tk; ++j) {
      if (key_pos(j) <= qpos) row_max = std::max(row_max, scores.at(i, j));
    }
    if (row_max == -std::numeric_limits<T>::infinity()) continue;
    T total{0};
    for (int64_t j = 0; j < tk; ++j) {
      if (key_pos(j) <= qpos) {
        const T e = std::exp(scores.at(i, j) - row_max);
        out.at(i, j) = e;
        total += e;
      }
    }
    for (int64_t j = 0; j < tk; ++j) out.at(i, j) /= total;
  }
  return out;
}

/// Rotates one head vector in place by its absolute position. Adjacent pairs
/// (2i, 2i+1) rotate at frequency theta_base^(-2i/d).
template <typename T>
void rope_rotate(std::span<T> head, int64_t position, double theta_base) {
  const size_t d = head.size();
  for (size_t i = 0; i + 1 < d; i += 2) {
    const double inv_freq = std::pow(theta_base, -static_cast<double>(i) / static_cast<double>(d));
    const double angle = static_cast<double>(position) * inv_freq;
    const T c = static_cast<T>(std::cos(angle));
    const T s = static_cast<T>(std::sin(angle));
    const T x0 = head[i], x1 = head[i + 1];
    head[i] = x0 * c - x1 * s;
    head[i + 1] = x0 * s + x1 * c;
  }
}

/// Rotary embedding for x: [T×heads×d_head] with one position per row.
template <typename T>
BasicTensor<T> rope_apply(const BasicTensor<T>& x, std::span<const int64_t> positions,
                          double theta_base) {
  if (x.rank() != 3 || static_cast<int64_t>(positions.size()) != x.dim(0)) {
    throw DimensionError("rope_apply: expected [T×heads×d_head] with T positions, got " +
                         shape_to_string(x.shape()));
  }
  if (x.dim(2) % 2 != 0) throw ConfigError("rope_apply: head dimension must be even");
  BasicTensor<T> out = x;
  const int64_t heads = x.dim(1), dh = x.dim(2);
  for (int64_t t = 0; t < x.dim(0); ++t) {
    for (int64_t h = 0; h < heads; ++h) {
      rope_rotate<T>(out.data().subspan(static_cast<size_t>((t * heads + h) * dh),
                                        static_cast<size_t>(dh)),
                     positions[t], theta_base);
    }
  }
  return out;
}

// Copies the listed rows of a 2-D tensor.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const int> rows) {
  BasicTensor<T> out({static_cast<int64_t>(rows.size()), x.dim(1)});
  for (size_t i = 0; i < rows.size(); ++i) {
    auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(static_cast<int64_t>(i)).begin());
  }
  return out;
}

inline float silu(float v) { return v / (1.0f + std::exp(-v)); }

}  // namespace orthorank
