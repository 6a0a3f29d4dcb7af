#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "orthorank/tensor.hpp"
#include "orthorank/trace.hpp"

namespace orthorank {

enum class SimilarityKind { sink_vs_tokens, token_across_layers };

/// Cosine similarities between normalized hidden states, row-major.
struct SimilarityMatrix {
  SimilarityKind kind = SimilarityKind::sink_vs_tokens;
  std::string corner_label;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  // Token positions the matrix describes.
  std::vector<int> subjects;
  std::vector<double> values;

  size_t rows() const { return row_labels.size(); }
  size_t cols() const { return col_labels.size(); }
  double at(size_t r, size_t c) const { return values[r * cols() + c]; }

  void write_csv(const std::filesystem::path& path) const;
};

// Cosine in f64; 0 when either vector is zero. Clamped to [-1, 1].
double cosine_similarity(std::span<const float> a, std::span<const float> b);

// M[l][i] = cos(h̄₀ˡ, h̄ᵢˡ) for the requested positions (which exclude 0).
SimilarityMatrix sink_token_similarity(const HiddenTrace& trace, std::span<const int> positions);

// M[l1][l2] = cos(h̄ₚˡ¹, h̄ₚˡ²); symmetric with a unit diagonal.
SimilarityMatrix cross_layer_self_similarity(const HiddenTrace& trace, int position);

struct NormProfile {
  // norms[l][t] = ‖h̄ₜˡ‖
  std::vector<std::vector<double>> norms;
  // Population coefficient of variation over positions >= 1, per layer.
  std::vector<double> cv;

  void write_csv(const std::filesystem::path& norms_path,
                 const std::filesystem::path& cv_path) const;
};

NormProfile norm_profile(const HiddenTrace& trace);

/// Per-token cosine between gain ⊙ (x/RMS(x)) and x/RMS(x).
std::vector<double> scaling_agreement(const Tensor& hidden, std::span<const float> gain, double eps);

// Parses "1..10", "0,50,100" or a mix ("1..3,7").
std::vector<int> parse_positions(const std::string& text);

}  // namespace orthorank
