#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "orthorank/calibration.hpp"
#include "orthorank/model.hpp"
#include "orthorank/selection.hpp"

namespace orthorank {

struct EvalOptions {
  int context_len = 256;
  int max_chunks = 0;  // 0 = all full chunks
  SelectionConfig selection;
  int threads = 1;
};

struct EvalReport {
  std::string config_summary;
  std::string plan_id;
  std::string corpus_sha256;
  int context_len = 0;
  std::vector<double> chunk_nll;
  double total_nll = 0.0;
  int64_t token_count = 0;
  int64_t predicted_tokens = 0;
  double perplexity = 0.0;
  double flop_ratio = 1.0;

  std::string to_json() const;
};

// Non-overlapping chunks of `context_len` tokens; a trailing partial chunk is dropped.
std::vector<std::span<const int32_t>> corpus_chunks(std::span<const int32_t> corpus,
                                                    int context_len, int max_chunks = 0);

// Compensated running sum in extended precision.
struct NllSum {
  long double sum = 0.0L;
  long double compensation = 0.0L;

  void add(long double v);
  long double value() const { return sum + compensation; }
};

/// Σ_{t≥1} −log softmax(logits[t−1])[tokens[t]].
///
/// Log-sum-exp and the running sum use extended precision so that aggregate
/// perplexities of analytically simple models (uniform logits) come out exact.
long double sequence_nll_extended(const Tensor& logits, std::span<const int32_t> tokens);
double sequence_nll(const Tensor& logits, std::span<const int32_t> tokens);

// exp(Σ chunk NLL / predicted tokens).
double perplexity_from_nll(std::span<const long double> chunk_nll, int64_t predicted_tokens);

/// Teacher-forced perplexity over non-overlapping chunks; `plan` null means dense.
EvalReport perplexity(const Model& model, const LayerPlan* plan, std::span<const int32_t> corpus,
                      const EvalOptions& options);

/// Documents of `doc_len` tokens, each starting with token 0, continued by
/// sampling from the dense model at `temperature` (0 = greedy). Token 0
/// never appears past a document start.
std::vector<int32_t> sample_corpus(const Model& model, int n_docs, int doc_len, double temperature,
                                   uint64_t seed);

/// Greedy decode of `max_new` tokens after `prompt`; token-selection layers
/// from `plan` (null = dense) apply to the prefill and every decode step.
std::vector<int32_t> greedy_generate(const Model& model, std::span<const int32_t> prompt,
                                     int max_new, const LayerPlan* plan,
                                     const SelectionConfig& selection = {},
                                     std::vector<AuditRow>* audit = nullptr);

// Reads whitespace-separated integer token ids.
std::vector<int32_t> read_token_file(const std::filesystem::path& path);
void write_token_file(const std::filesystem::path& path, std::span<const int32_t> tokens);

struct LayerwiseTable {
  double dense_perplexity = 0.0;
  std::vector<int> layers;
  std::vector<std::string> criteria;
  // perplexity[row][criterion]
  std::vector<std::vector<double>> perplexity;

  void write_csv(const std::filesystem::path& path) const;
};

/// Converts each layer after the sink on its own, once per criterion.
LayerwiseTable layerwise_comparison(const Model& model, std::span<const int32_t> corpus,
                                    double keep_ratio, std::span<const Criterion> criteria,
                                    int l_sink, const EvalOptions& options);

struct KvAudit {
  int layer = 0;
  int tokens = 0;
  int selected = 0;
  int kv_entries = 0;
};

struct AblationRow {
  std::string label;
  Criterion criterion;
  bool compute_kv = true;
  double perplexity = 0.0;
  // Per plan layer, from one forward pass over the first chunk.
  std::vector<KvAudit> audit;
};

// The seven criterion / stage / KV configurations; the last row is the default.
std::vector<SelectionConfig> ablation_configs(uint64_t random_seed = 0);

std::vector<AblationRow> ablation_grid(const Model& model, const LayerPlan& plan,
                                       std::span<const int32_t> corpus, const EvalOptions& options,
                                       uint64_t random_seed = 0);

void write_ablation_csv(std::span<const AblationRow> rows, const std::filesystem::path& path);

}  // namespace orthorank
