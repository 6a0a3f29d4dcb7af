#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "orthorank/checkpoint.hpp"
#include "orthorank/tensor.hpp"
#include "orthorank/trace.hpp"

namespace orthorank {

struct LayerWeights {
  Tensor attn_norm;
  Tensor wq, wk, wv, wo;
  Tensor ffn_norm;
  Tensor w_gate, w_up, w_down;
};

/// Immutable decoder-only transformer: pre-norm blocks with grouped-query
/// attention, rotary positions and a SwiGLU feed-forward.
class Model {
 public:
  static Model from_checkpoint(const Checkpoint& checkpoint);
  static Model load(const std::filesystem::path& dir);

  const ModelConfig& config() const { return config_; }
  int n_layers() const { return config_.n_layers; }
  const LayerWeights& layer(int i) const { return layers_.at(static_cast<size_t>(i)); }
  const Tensor& embedding() const { return embed_; }
  const Tensor& final_norm() const { return final_norm_; }
  const Tensor& output_weight() const { return config_.tied_embeddings ? embed_ : lm_head_; }

 private:
  ModelConfig config_;
  Tensor embed_;
  std::vector<LayerWeights> layers_;
  Tensor final_norm_;
  Tensor lm_head_;
};

struct LayerCache {
  // Rows of n_kv_heads * d_head floats, one per cached token, post-rotary.
  std::vector<float> keys;
  std::vector<float> values;
  std::vector<int64_t> positions;

  size_t size() const { return positions.size(); }
};

/// Per-sequence decode state.
///
/// With full KV computation every layer holds one key/value row per processed
/// token. score_history and sink_state are keyed by token-selection layer:
/// history entry 0 belongs to the sink and is +inf.
struct KVCache {
  std::vector<LayerCache> layers;
  std::map<int, std::vector<float>> score_history;
  std::map<int, std::vector<float>> sink_state;
  int64_t tokens_processed = 0;
  int chunks_processed = 0;

  KVCache() = default;
  explicit KVCache(int n_layers) : layers(static_cast<size_t>(n_layers)) {}
};

// Rows of a chunk that get a query / full update and rows that contribute K/V.
struct RowSelection {
  std::vector<int> query_rows;
  std::vector<int> kv_rows;
};

/// Chooses per layer which rows of a chunk are computed. Returning nullopt
/// runs the block densely.
class BlockPolicy {
 public:
  virtual ~BlockPolicy() = default;
  virtual std::optional<RowSelection> select(int layer, const Tensor& hidden,
                                             const Tensor& normalized,
                                             std::span<const int64_t> positions,
                                             KVCache& cache) = 0;
};

struct TraceOptions {
  bool capture = false;
  bool attention = false;
};

struct ForwardResult {
  Tensor logits;
  HiddenTrace trace;
};

Tensor embed_tokens(const Model& model, std::span<const int32_t> tokens);

/// One decoder block over the rows of x (in place).
///
/// `normalized` must be the block's pre-attention RMSNorm of x. Rows outside
/// rows->query_rows are left untouched; K/V for rows->kv_rows are appended to
/// `cache` before attention. A null `rows` computes every row.
void run_block(const Model& model, int layer, Tensor& x, const Tensor& normalized,
               std::span<const int64_t> positions, LayerCache& cache, const RowSelection* rows,
               std::vector<float>* attn_to_sink = nullptr);

/// Runs blocks [first_layer, last_layer) over x in place.
void run_layers(const Model& model, Tensor& x, std::span<const int64_t> positions, KVCache& cache,
                BlockPolicy* policy, int first_layer, int last_layer, HiddenTrace* trace = nullptr,
                bool capture_attention = false);

Tensor output_logits(const Model& model, const Tensor& x);

/// Appends a chunk of tokens to the sequence in `cache` and returns logits for
/// each chunk position. Positions continue from cache.tokens_processed.
ForwardResult forward_chunk(const Model& model, std::span<const int32_t> tokens, KVCache& cache,
                            BlockPolicy* policy = nullptr, const TraceOptions& trace = {});

struct DenseForward {
  Tensor logits;
  HiddenTrace trace;
  KVCache cache;
};

DenseForward forward_dense(const Model& model, std::span<const int32_t> tokens,
                           const TraceOptions& trace = {});

// Logits [1×vocab] for `token` appended to the cached prefix.
Tensor decode_step_dense(const Model& model, KVCache& cache, int32_t token);

// Smallest layer whose mean attention to position 0 (queries >= 1, all heads)
// reaches tau; n_layers when no layer does.
int detect_sink_layer(const Model& model, std::span<const int32_t> calib_tokens,
                      double tau = 0.3);

int argmax(std::span<const float> values);

}  // namespace orthorank
