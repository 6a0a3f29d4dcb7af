#include "orthorank/model.hpp"

#include <cmath>
#include <numeric>

namespace orthorank {

Model Model::from_checkpoint(const Checkpoint& ck) {
  ck.config.validate();
  Model m;
  m.config_ = ck.config;
  auto get = [&](const std::string& name) -> const Tensor& {
    auto it = ck.weights.find(name);
    if (it == ck.weights.end()) throw LoadError("missing tensor " + name);
    return it->second;
  };
  for (const auto& [name, shape] : expected_tensors(ck.config)) {
    if (get(name).shape() != shape) {
      throw LoadError("tensor " + name + ": shape " + shape_to_string(get(name).shape()) +
                      " does not match config shape " + shape_to_string(shape));
    }
  }
  m.embed_ = get("embed.weight");
  for (int i = 0; i < ck.config.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    m.layers_.push_back({get(p + "attn_norm.gain"), get(p + "attn.wq.weight"),
                         get(p + "attn.wk.weight"), get(p + "attn.wv.weight"),
                         get(p + "attn.wo.weight"), get(p + "ffn_norm.gain"),
                         get(p + "ffn.w_gate.weight"), get(p + "ffn.w_up.weight"),
                         get(p + "ffn.w_down.weight")});
  }
  m.final_norm_ = get("final_norm.gain");
  if (!ck.config.tied_embeddings) m.lm_head_ = get("lm_head.weight");
  return m;
}

Model Model::load(const std::filesystem::path& dir) { return from_checkpoint(load_checkpoint(dir)); }

Tensor embed_tokens(const Model& model, std::span<const int32_t> tokens) {
  const auto& c = model.config();
  if (tokens.empty()) throw UsageError("token sequence is empty");
  Tensor x({static_cast<int64_t>(tokens.size()), c.d_model});
  for (size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || tokens[t] >= c.vocab_size) {
      throw UsageError("token id " + std::to_string(tokens[t]) + " outside vocabulary of size " +
                       std::to_string(c.vocab_size));
    }
    auto src = model.embedding().row(tokens[t]);
    std::copy(src.begin(), src.end(), x.row(static_cast<int64_t>(t)).begin());
  }
  return x;
}

void run_block(const Model& model, int layer, Tensor& x, const Tensor& normalized,
               std::span<const int64_t> positions, LayerCache& cache, const RowSelection* rows,
               std::vector<float>* attn_to_sink) {
  const ModelConfig& c = model.config();
  const LayerWeights& w = model.layer(layer);
  const int64_t n = x.dim(0);
  const int dh = c.d_head, heads = c.n_heads, kv_heads = c.n_kv_heads;
  const int group = heads / kv_heads;
  const int64_t kv_width = int64_t{kv_heads} * dh;

  std::vector<int> all_rows;
  if (rows == nullptr) {
    all_rows.resize(static_cast<size_t>(n));
    std::iota(all_rows.begin(), all_rows.end(), 0);
  }
  const std::vector<int>& query_rows = rows ? rows->query_rows : all_rows;
  const std::vector<int>& kv_rows = rows ? rows->kv_rows : all_rows;

  if (!kv_rows.empty()) {
    const Tensor xn = gather_rows(normalized, std::span<const int>(kv_rows));
    Tensor k = linear(xn, w.wk);
    const Tensor v = linear(xn, w.wv);
    for (size_t i = 0; i < kv_rows.size(); ++i) {
      const int64_t pos = positions[kv_rows[i]];
      auto krow = k.row(static_cast<int64_t>(i));
      for (int g = 0; g < kv_heads; ++g) {
        rope_rotate<float>(krow.subspan(static_cast<size_t>(g * dh), static_cast<size_t>(dh)), pos,
                           c.rope_theta);
      }
      cache.keys.insert(cache.keys.end(), krow.begin(), krow.end());
      auto vrow = v.row(static_cast<int64_t>(i));
      cache.values.insert(cache.values.end(), vrow.begin(), vrow.end());
      cache.positions.push_back(pos);
    }
  }

  if (attn_to_sink) attn_to_sink->assign(static_cast<size_t>(n), 0.0f);
  if (query_rows.empty()) return;

  const int64_t nq = static_cast<int64_t>(query_rows.size());
  const int64_t nk = static_cast<int64_t>(cache.size());
  Tensor q = linear(gather_rows(normalized, std::span<const int>(query_rows)), w.wq);
  std::vector<int64_t> qpos(static_cast<size_t>(nq));
  for (int64_t i = 0; i < nq; ++i) {
    qpos[i] = positions[query_rows[i]];
    auto qrow = q.row(i);
    for (int h = 0; h < heads; ++h) {
      rope_rotate<float>(qrow.subspan(static_cast<size_t>(h * dh), static_cast<size_t>(dh)), qpos[i],
                         c.rope_theta);
    }
  }

  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const std::span<const float> keys(cache.keys), values(cache.values);
  int64_t sink_key = -1;
  for (int64_t j = 0; j < nk; ++j) {
    if (cache.positions[j] == 0) {
      sink_key = j;
      break;
    }
  }
  Tensor attn({nq, int64_t{heads} * dh});
  std::vector<float> acc(static_cast<size_t>(dh));
  for (int h = 0; h < heads; ++h) {
    const int g = h / group;
    Tensor scores({nq, nk});
    for (int64_t i = 0; i < nq; ++i) {
      auto qh = q.row(i).subspan(static_cast<size_t>(h * dh), static_cast<size_t>(dh));
      for (int64_t j = 0; j < nk; ++j) {
        auto kh = keys.subspan(static_cast<size_t>(j * kv_width + g * dh), static_cast<size_t>(dh));
        scores.at(i, j) = dot<float>(qh, kh) * scale;
      }
    }
    const Tensor probs = softmax_causal(scores, std::span<const int64_t>(qpos),
                                        std::span<const int64_t>(cache.positions));
    for (int64_t i = 0; i < nq; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0f);
      for (int64_t j = 0; j < nk; ++j) {
        const float p = probs.at(i, j);
        if (p == 0.0f) continue;
        const float* vh = values.data() + j * kv_width + g * dh;
        for (int e = 0; e < dh; ++e) acc[e] += p * vh[e];
      }
      std::copy(acc.begin(), acc.end(), attn.row(i).begin() + h * dh);
      if (attn_to_sink && sink_key >= 0) {
        (*attn_to_sink)[query_rows[i]] += probs.at(i, sink_key) / static_cast<float>(heads);
      }
    }
  }

  const Tensor o = linear(attn, w.wo);
  for (int64_t i = 0; i < nq; ++i) {
    auto xr = x.row(query_rows[i]);
    auto orow = o.row(i);
    for (size_t j = 0; j < xr.size(); ++j) xr[j] += orow[j];
  }

  const Tensor h2 = rms_norm(gather_rows(x, std::span<const int>(query_rows)), w.ffn_norm,
                             static_cast<float>(c.norm_eps));
  const Tensor gate = linear(h2, w.w_gate);
  Tensor act = linear(h2, w.w_up);
  for (int64_t i = 0; i < act.numel(); ++i) act[i] = silu(gate[i]) * act[i];
  const Tensor down = linear(act, w.w_down);
  for (int64_t i = 0; i < nq; ++i) {
    auto xr = x.row(query_rows[i]);
    auto drow = down.row(i);
    for (size_t j = 0; j < xr.size(); ++j) xr[j] += drow[j];
  }
}

void run_layers(const Model& model, Tensor& x, std::span<const int64_t> positions, KVCache& cache,
                BlockPolicy* policy, int first_layer, int last_layer, HiddenTrace* trace,
                bool capture_attention) {
  const float eps = static_cast<float>(model.config().norm_eps);
  for (int l = first_layer; l < last_layer; ++l) {
    const Tensor xn = rms_norm(x, model.layer(l).attn_norm, eps);
    if (trace) {
      trace->hidden[l] = x;
      trace->normalized[l] = xn;
    }
    std::optional<RowSelection> rows;
    if (policy) rows = policy->select(l, x, xn, positions, cache);
    std::vector<float>* sink_probs =
        (trace && capture_attention) ? &trace->attn_to_sink[l] : nullptr;
    run_block(model, l, x, xn, positions, cache.layers[l], rows ? &*rows : nullptr, sink_probs);
  }
}

Tensor output_logits(const Model& model, const Tensor& x) {
  const Tensor xn = rms_norm(x, model.final_norm(), static_cast<float>(model.config().norm_eps));
  return linear(xn, model.output_weight());
}

ForwardResult forward_chunk(const Model& model, std::span<const int32_t> tokens, KVCache& cache,
                            BlockPolicy* policy, const TraceOptions& trace) {
  const int n_layers = model.n_layers();
  if (cache.layers.empty() && cache.tokens_processed == 0) {
    cache.layers.resize(static_cast<size_t>(n_layers));
  }
  if (static_cast<int>(cache.layers.size()) != n_layers) {
    throw StateError("KV cache has " + std::to_string(cache.layers.size()) +
                     " layers, model has " + std::to_string(n_layers));
  }
  Tensor x = embed_tokens(model, tokens);
  std::vector<int64_t> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), cache.tokens_processed);

  ForwardResult result;
  HiddenTrace* trace_out = nullptr;
  if (trace.capture || trace.attention) {
    result.trace.hidden.resize(static_cast<size_t>(n_layers));
    result.trace.normalized.resize(static_cast<size_t>(n_layers));
    if (trace.attention) result.trace.attn_to_sink.resize(static_cast<size_t>(n_layers));
    trace_out = &result.trace;
  }
  run_layers(model, x, positions, cache, policy, 0, n_layers, trace_out, trace.attention);
  result.logits = output_logits(model, x);
  cache.tokens_processed += static_cast<int64_t>(tokens.size());
  cache.chunks_processed += 1;
  return result;
}

DenseForward forward_dense(const Model& model, std::span<const int32_t> tokens,
                           const TraceOptions& trace) {
  DenseForward out;
  out.cache = KVCache(model.n_layers());
  ForwardResult r = forward_chunk(model, tokens, out.cache, nullptr, trace);
  out.logits = std::move(r.logits);
  out.trace = std::move(r.trace);
  return out;
}

Tensor decode_step_dense(const Model& model, KVCache& cache, int32_t token) {
  const int32_t one[1] = {token};
  return forward_chunk(model, one, cache).logits;
}

int detect_sink_layer(const Model& model, std::span<const int32_t> calib_tokens, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw UsageError("tau must lie in (0, 1]");
  if (calib_tokens.size() < 8) throw UsageError("sink detection needs at least 8 tokens");
  TraceOptions opts;
  opts.attention = true;
  const DenseForward fwd = forward_dense(model, calib_tokens, opts);
  for (int l = 0; l < model.n_layers(); ++l) {
    const auto& probs = fwd.trace.attn_to_sink[l];
    double total = 0.0;
    for (size_t t = 1; t < probs.size(); ++t) total += probs[t];
    if (total / static_cast<double>(probs.size() - 1) >= tau) return l;
  }
  return model.n_layers();
}

int argmax(std::span<const float> values) {
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

}  // namespace orthorank
