#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "orthorank/model.hpp"

namespace orthorank {

// Which tokens to prefer. *_asc keeps the tokens with the smallest key,
// *_desc the largest; the key is |⟨s₀, sᵢ⟩| for orthogonal and ‖sᵢ‖ for norm.
enum class CriterionKind { orthogonal_asc, orthogonal_desc, norm_asc, norm_desc, random };

// States the criterion reads: post-RMSNorm (h̄) or the raw block input (h).
enum class Stage { normalized, raw_hidden };

struct Criterion {
  CriterionKind kind = CriterionKind::orthogonal_asc;
  Stage stage = Stage::normalized;
  uint64_t seed = 0;  // random only

  std::string name() const;
  // Accepts "orthogonal_asc", "random:7", "orthogonal_asc@raw_hidden", ...
  static Criterion parse(const std::string& text);

  bool operator==(const Criterion&) const = default;
};

std::string to_string(CriterionKind kind);
std::string to_string(Stage stage);

/// score[i] = |⟨states[sink], states[i]⟩|, with the sink entry set to +inf.
struct SelectionScores {
  std::vector<float> values;
};

/// Ascending token indices chosen for full computation.
struct SelectionMask {
  std::vector<int> selected;
  int k = 0;
};

SelectionScores compute_scores(const Tensor& states, int sink_index = 0);

// floor(p · n), as in int(p * n).
int keep_count(double keep_ratio, int64_t n);

/// The k = floor(p·T) indices with the smallest scores, ties to the smaller
/// index, returned in ascending index order.
SelectionMask select_topk(std::span<const float> scores, double keep_ratio);
inline SelectionMask select_topk(const SelectionScores& scores, double keep_ratio) {
  return select_topk(scores.values, keep_ratio);
}

/// Decode-time rule: with S = history ∪ {s} and k = floor(p·|S|), s is kept
/// iff fewer than k history entries are <= s (incumbents win ties). s is
/// appended to the history either way.
bool decode_select(std::vector<float>& history, float score, double keep_ratio);

namespace detail {
// Reductions for the scalar helpers below run in at least double precision.
template <typename T>
using Accum = std::conditional_t<(sizeof(T) < sizeof(double)), double, T>;

template <typename T>
Accum<T> dot_acc(std::span<const T> a, std::span<const T> b) {
  Accum<T> acc{0};
  for (size_t i = 0; i < a.size(); ++i) acc += static_cast<Accum<T>>(a[i]) * b[i];
  return acc;
}
}  // namespace detail

template <typename T>
T cosine(std::span<const T> a, std::span<const T> b) {
  using A = detail::Accum<T>;
  const A ab = detail::dot_acc(a, b), aa = detail::dot_acc(a, a), bb = detail::dot_acc(b, b);
  return static_cast<T>(ab / std::sqrt(aa * bb));
}

/// ∂cos(h0, hi)/∂hi = (h0/‖h0‖ − cos(h0, hi) · hi/‖hi‖) / ‖hi‖.
template <typename T>
std::vector<T> cos_gradient(std::span<const T> h0, std::span<const T> hi) {
  using A = detail::Accum<T>;
  if (h0.size() != hi.size()) throw DimensionError("cos_gradient: vector lengths differ");
  const A n0 = std::sqrt(detail::dot_acc(h0, h0)), ni = std::sqrt(detail::dot_acc(hi, hi));
  if (!(n0 > A{0}) || !(ni > A{0})) throw DomainError("cos_gradient: zero vector");
  const A c = detail::dot_acc(h0, hi) / (n0 * ni);
  std::vector<T> g(h0.size());
  for (size_t j = 0; j < g.size(); ++j) {
    g[j] = static_cast<T>((static_cast<A>(h0[j]) / n0 - c * (static_cast<A>(hi[j]) / ni)) / ni);
  }
  return g;
}

// ‖cos_gradient(h0, hi)‖²; equals (1 − cos²) / ‖hi‖².
template <typename T>
T importance_norm_sq(std::span<const T> h0, std::span<const T> hi) {
  const std::vector<T> g = cos_gradient<T>(h0, hi);
  return static_cast<T>(detail::dot_acc(std::span<const T>(g), std::span<const T>(g)));
}

// Ranking key of one state against the sink state; smaller is preferred.
float rank_key(const Criterion& criterion, std::span<const float> sink_state,
               std::span<const float> state, int layer, int64_t position);

// Ranking keys for a chunk whose row 0 is the sink (key +inf).
std::vector<float> rank_keys(const Criterion& criterion, const Tensor& states, int layer,
                             std::span<const int64_t> positions);

struct LayerSetting {
  int layer = 0;
  double keep_ratio = 1.0;

  bool operator==(const LayerSetting&) const = default;
};

struct SelectionConfig {
  Criterion criterion;
  bool compute_kv_for_unselected = true;
};

// One row of the selection audit log.
struct AuditRow {
  int layer = 0;
  int step = 0;
  int64_t position = 0;
  float score = 0.0f;
  bool selected = false;
};

void write_audit_csv(std::span<const AuditRow> rows, const std::filesystem::path& path);

/// Token selection on the configured layers.
///
/// A chunk that starts the sequence is ranked as a whole (top-k with the
/// sink excluded while k < T); later chunks are decided token by token
/// against that layer's score history. Non-selected tokens still contribute
/// K/V unless compute_kv_for_unselected is off.
class OrthoRankPolicy : public BlockPolicy {
 public:
  OrthoRankPolicy(std::vector<LayerSetting> layers, SelectionConfig config,
                  std::vector<AuditRow>* audit = nullptr);

  std::optional<RowSelection> select(int layer, const Tensor& hidden, const Tensor& normalized,
                                     std::span<const int64_t> positions, KVCache& cache) override;

  const std::vector<LayerSetting>& layers() const { return layers_; }

 private:
  std::vector<LayerSetting> layers_;
  SelectionConfig config_;
  std::vector<AuditRow>* audit_;
};

struct OrthoRankLayerOutput {
  Tensor x_out;
  Tensor keys;    // [n_kv_rows × n_kv_heads·d_head], post-rotary
  Tensor values;  // same layout
  SelectionMask mask;
};

/// One block of a fresh sequence (positions 0..T-1) run as a token-selection
/// layer. Unselected rows of x_out equal x bitwise.
OrthoRankLayerOutput forward_orthorank_layer(const Model& model, int layer_index, const Tensor& x,
                                             double keep_ratio, const Criterion& criterion = {},
                                             bool compute_kv_for_unselected = true);

}  // namespace orthorank
