#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "orthorank/tensor.hpp"

namespace orthorank {

struct ModelConfig {
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int n_kv_heads = 0;
  int d_head = 0;
  int d_ffn = 0;
  int vocab_size = 0;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  bool tied_embeddings = false;

  // Throws ConfigError naming the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct ManifestEntry {
  std::string name;
  std::string dtype = "f32";
  std::vector<int64_t> shape;
  uint64_t byte_offset = 0;
};

struct CheckpointManifest {
  std::vector<ManifestEntry> entries;
};

using WeightMap = std::map<std::string, Tensor>;

struct Checkpoint {
  ModelConfig config;
  WeightMap weights;
};

// Required tensor names and shapes for a config, in canonical file order.
std::vector<std::pair<std::string, std::vector<int64_t>>> expected_tensors(const ModelConfig& config);

// Checks offsets and lengths against a blob of `blob_bytes`; throws LoadError.
void validate_manifest(const CheckpointManifest& manifest, uint64_t blob_bytes);

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);
ModelConfig load_config(const std::filesystem::path& dir);

/// Reads config.json, manifest.json and weights.bin from `dir`.
///
/// Every manifest entry is materialized; a missing or unexpected tensor, a
/// shape that disagrees with the config, overlapping offsets, a short blob or
/// an unknown dtype raise LoadError naming the tensor involved.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Writes the three checkpoint files with tensors packed in canonical order.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);

// SHA-256 of weights.bin, hex encoded.
std::string checkpoint_hash(const std::filesystem::path& dir);

struct SynthOptions {
  uint64_t seed = 0;
  // Plants an attention sink on token id 0 starting at this layer.
  std::optional<int> sink_layer;
  float sink_strength = 8.0f;
};

/// Deterministic pseudo-random weights: uniform in [-1, 1) scaled by
/// 1/sqrt(d_model), gains set to one.
///
/// With `sink_layer` set, embedding dimension 0 marks token 0 and dimension 1
/// is constant; no block writes to either dimension, and from `sink_layer` on
/// every other kv-head group attends from all queries to token 0.
Checkpoint synthesize_model(const ModelConfig& config, const SynthOptions& options);

std::filesystem::path generate_synthetic_model(const ModelConfig& config, uint64_t seed,
                                               const std::filesystem::path& dir);
std::filesystem::path generate_synthetic_model(const ModelConfig& config,
                                               const SynthOptions& options,
                                               const std::filesystem::path& dir);

}  // namespace orthorank
