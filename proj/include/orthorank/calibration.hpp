#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "orthorank/model.hpp"
#include "orthorank/selection.hpp"

namespace orthorank {

struct CalibrationMeta {
  std::string corpus_sha256;
  int context_len = 0;
};

/// Layers converted to token-selection layers, with their keep ratios.
struct LayerPlan {
  std::string model_id;
  int l_sink = 0;
  double target_sparsity = 0.0;
  double keep_ratio = 0.333;
  std::vector<LayerSetting> layers;
  CalibrationMeta calib;

  // Stable identifier derived from the plan contents.
  std::string id() const;
  std::vector<int> layer_indices() const;

  // Throws ConfigError unless indices ascend strictly, lie in (l_sink, n_layers - 1)
  // and ratios lie in (0, 1].
  void validate(int n_layers) const;

  std::string to_json() const;
  static LayerPlan from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static LayerPlan load(const std::filesystem::path& path);
};

// Fraction of block compute removed: layer_fraction × (1 − keep_ratio).
double effective_sparsity(double layer_fraction, double keep_ratio);

// Layers after the sink, excluding the last layer.
std::vector<int> eligible_layers(int n_layers, int l_sink);

struct SparsityTarget {
  int layer_count = 0;
  std::vector<int> eligible;
};

/// m = round(s · n_layers / (1 − r)). Throws ConfigError with the maximum
/// achievable sparsity when s exceeds (1 − r)·|eligible|/n_layers.
SparsityTarget plan_from_sparsity(int n_layers, int l_sink, double target_sparsity,
                                  double keep_ratio);

struct CalibrationOptions {
  int context_len = 256;
  int max_chunks = 8;  // 0 = every full chunk of the corpus
  bool one_shot = false;
  SelectionConfig selection;
  int threads = 1;
  std::string model_id;
  int l_sink = 0;
  double target_sparsity = 0.0;
};

struct CandidateScore {
  int layer = 0;
  double perplexity = 0.0;
};

struct CalibrationResult {
  LayerPlan plan;
  double dense_perplexity = 0.0;
  // Perplexity of every candidate in each round, in ascending layer order.
  std::vector<std::vector<CandidateScore>> rounds;
};

/// Greedy incremental conversion: each round tentatively converts every
/// remaining eligible layer on top of the layers chosen so far and keeps the
/// one with the lowest calibration perplexity (ties to the smaller index).
/// In one-shot mode a single round ranks all layers and the m best are kept.
CalibrationResult calibrate_greedy(const Model& model, std::span<const int32_t> calib_tokens,
                                   int layer_count, double keep_ratio,
                                   std::span<const int> eligible,
                                   const CalibrationOptions& options);

struct FlopCount {
  uint64_t dense_flops = 0;
  uint64_t plan_flops = 0;
  double ratio = 1.0;
};

// FLOPs (2 per multiply-add) of one block, by component.
struct BlockFlops {
  uint64_t attn_norm = 0;
  uint64_t kv_projection = 0;
  uint64_t q_projection = 0;
  uint64_t attention = 0;  // scores and weighted values against all T keys
  uint64_t out_projection = 0;
  uint64_t ffn_norm = 0;
  uint64_t ffn = 0;
  uint64_t scoring = 0;  // sink inner products of a token-selection layer

  uint64_t total() const {
    return attn_norm + kv_projection + q_projection + attention + out_projection + ffn_norm +
           ffn + scoring;
  }
};

// One block over T tokens of which `selected` are fully computed; K/V always
// cover all T. selected == T without token_selection is the dense block.
BlockFlops block_flops(const ModelConfig& config, int64_t tokens, int64_t selected,
                       bool token_selection);

/// Block FLOPs of the whole stack, dense vs. plan. Embedding lookup and the
/// output head are identical in both and excluded.
FlopCount flop_count(const ModelConfig& config, const LayerPlan& plan, int64_t tokens);

}  // namespace orthorank
