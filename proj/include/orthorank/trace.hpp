#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "orthorank/tensor.hpp"

namespace orthorank {

/// Per-layer hidden states of one sequence.
///
/// hidden[l] is the input of block l and normalized[l] its pre-attention
/// RMSNorm output (gain applied), both [T×d]. attn_to_sink[l][t] is the
/// head-averaged attention probability from query t to position 0; it is
/// empty unless attention capture was requested.
///
/// Traces produced by the runtime satisfy normalized[l] == rms_norm(hidden[l])
/// bitwise. Synthetic traces store the same unit vectors in both fields.
struct HiddenTrace {
  std::vector<Tensor> hidden;
  std::vector<Tensor> normalized;
  std::vector<std::vector<float>> attn_to_sink;

  int n_layers() const { return static_cast<int>(normalized.size()); }
  int seq_len() const { return normalized.empty() ? 0 : static_cast<int>(normalized[0].dim(0)); }
  int dim() const { return normalized.empty() ? 0 : static_cast<int>(normalized[0].dim(1)); }
};

/// Synthetic trace with a static sink that other tokens drift toward.
///
/// Layers 0..l_sink hold fixed random unit vectors (token 0 included). From
/// l_sink + 1 on, token 0 is a fixed unit vector s and every other token moves
/// a fraction `alignment_rate` of its remaining angle toward s per layer
/// (slerp, renormalized). alignment_rate = 0 freezes all tokens.
HiddenTrace generate_synthetic_sink_trace(int n_layers, int seq_len, int d, int l_sink,
                                          double alignment_rate, uint64_t seed);

/// Writes trace_layer{l}.csv (layer, position, d values of h̄) per layer and
/// trace_norms.csv (layer, position, ‖h̄‖).
void write_trace_csv(const HiddenTrace& trace, const std::filesystem::path& dir);

}  // namespace orthorank
