#include "orthorank/calibration.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "orthorank/eval.hpp"
#include "orthorank/hashing.hpp"

namespace orthorank {

using nlohmann::json;

std::vector<int> LayerPlan::layer_indices() const {
  std::vector<int> out;
  for (const auto& s : layers) out.push_back(s.layer);
  return out;
}

void LayerPlan::validate(int n_layers) const {
  int prev = -1;
  for (const auto& s : layers) {
    if (s.layer <= prev) throw ConfigError("plan layers must be strictly ascending");
    if (s.layer <= l_sink) {
      throw ConfigError("plan layer " + std::to_string(s.layer) + " is not after l_sink " +
                        std::to_string(l_sink));
    }
    if (s.layer >= n_layers - 1) {
      throw ConfigError("plan layer " + std::to_string(s.layer) +
                        " must precede the final layer " + std::to_string(n_layers - 1));
    }
    if (!(s.keep_ratio > 0.0 && s.keep_ratio <= 1.0)) {
      throw ConfigError("plan keep ratio must lie in (0, 1]");
    }
    prev = s.layer;
  }
}

std::string LayerPlan::to_json() const {
  json j;
  j["model_id"] = model_id;
  j["l_sink"] = l_sink;
  j["target_sparsity"] = target_sparsity;
  j["keep_ratio"] = keep_ratio;
  j["layers"] = layer_indices();
  const bool uniform = std::all_of(layers.begin(), layers.end(),
                                   [&](const LayerSetting& s) { return s.keep_ratio == keep_ratio; });
  if (!uniform) {
    std::vector<double> ratios;
    for (const auto& s : layers) ratios.push_back(s.keep_ratio);
    j["layer_keep_ratios"] = ratios;
  }
  j["calib"] = {{"corpus_sha256", calib.corpus_sha256}, {"context_len", calib.context_len}};
  return j.dump(2);
}

LayerPlan LayerPlan::from_json(const std::string& text) {
  LayerPlan p;
  try {
    const json j = json::parse(text);
    p.model_id = j.at("model_id").get<std::string>();
    p.l_sink = j.at("l_sink").get<int>();
    p.target_sparsity = j.at("target_sparsity").get<double>();
    p.keep_ratio = j.at("keep_ratio").get<double>();
    const auto indices = j.at("layers").get<std::vector<int>>();
    std::vector<double> ratios(indices.size(), p.keep_ratio);
    if (j.contains("layer_keep_ratios")) {
      ratios = j.at("layer_keep_ratios").get<std::vector<double>>();
      if (ratios.size() != indices.size()) {
        throw ConfigError("plan: layer_keep_ratios length differs from layers");
      }
    }
    for (size_t i = 0; i < indices.size(); ++i) p.layers.push_back({indices[i], ratios[i]});
    const json& calib = j.at("calib");
    p.calib.corpus_sha256 = calib.at("corpus_sha256").get<std::string>();
    p.calib.context_len = calib.at("context_len").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("plan file: ") + e.what());
  }
  return p;
}

std::string LayerPlan::id() const { return "plan-" + sha256_hex(to_json()).substr(0, 12); }

void LayerPlan::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << to_json() << '\n';
}

LayerPlan LayerPlan::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open plan " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

double effective_sparsity(double layer_fraction, double keep_ratio) {
  if (layer_fraction < 0.0 || layer_fraction > 1.0 || keep_ratio < 0.0 || keep_ratio > 1.0) {
    throw UsageError("effective_sparsity: fractions must lie in [0, 1]");
  }
  return layer_fraction * (1.0 - keep_ratio);
}

std::vector<int> eligible_layers(int n_layers, int l_sink) {
  std::vector<int> out;
  for (int l = std::max(l_sink + 1, 0); l < n_layers - 1; ++l) out.push_back(l);
  return out;
}

SparsityTarget plan_from_sparsity(int n_layers, int l_sink, double target_sparsity,
                                  double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ConfigError("keep ratio must lie in (0, 1]");
  if (target_sparsity < 0.0) throw ConfigError("target sparsity must be non-negative");
  SparsityTarget out;
  out.eligible = eligible_layers(n_layers, l_sink);
  const double max_sparsity =
      (1.0 - keep_ratio) * static_cast<double>(out.eligible.size()) / n_layers;
  if (target_sparsity > max_sparsity + 1e-12) {
    std::ostringstream msg;
    msg << "target sparsity " << target_sparsity << " is infeasible; maximum achievable sparsity is "
        << max_sparsity << " (" << out.eligible.size() << " eligible layers of " << n_layers
        << ", keep ratio " << keep_ratio << ")";
    throw ConfigError(msg.str());
  }
  if (target_sparsity == 0.0) return out;
  out.layer_count = static_cast<int>(std::lround(target_sparsity * n_layers / (1.0 - keep_ratio)));
  out.layer_count = std::min(out.layer_count, static_cast<int>(out.eligible.size()));
  return out;
}

namespace {

std::vector<LayerSetting> settings_for(std::vector<int> layers, double keep_ratio) {
  std::sort(layers.begin(), layers.end());
  std::vector<LayerSetting> out;
  for (int l : layers) out.push_back({l, keep_ratio});
  return out;
}

// Runs `jobs` indices over up to `threads` workers.
template <typename Fn>
void parallel_for(size_t jobs, int threads, Fn&& fn) {
  const size_t workers = std::min<size_t>(jobs, static_cast<size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (size_t i = next++; i < jobs; i = next++) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Per-chunk block inputs under the current plan, so a candidate layer c only
// recomputes layers c..L-1.
class PrefixCache {
 public:
  PrefixCache(const Model& model, std::vector<std::span<const int32_t>> chunks)
      : model_(model), chunks_(std::move(chunks)), inputs_(chunks_.size()) {}

  void rebuild(const std::vector<LayerSetting>& plan, const SelectionConfig& selection,
               int from_layer, int threads) {
    parallel_for(chunks_.size(), threads, [&](size_t c) {
      auto& layers = inputs_[c];
      const auto positions = positions_for(chunks_[c].size());
      Tensor x;
      int start = from_layer;
      if (layers.empty()) {
        layers.resize(static_cast<size_t>(model_.n_layers()) + 1);
        x = embed_tokens(model_, chunks_[c]);
        start = 0;
      } else {
        x = layers[from_layer];
      }
      OrthoRankPolicy policy(plan, selection);
      KVCache cache(model_.n_layers());
      for (int l = start; l < model_.n_layers(); ++l) {
        layers[l] = x;
        run_layers(model_, x, positions, cache, &policy, l, l + 1);
      }
      layers[model_.n_layers()] = std::move(x);
    });
  }

  // Total NLL of chunk c with `plan`, which must agree with the cached plan
  // on every layer below `from_layer`.
  long double chunk_nll(size_t c, const std::vector<LayerSetting>& plan,
                   const SelectionConfig& selection, int from_layer) const {
    Tensor x = inputs_[c][from_layer];
    OrthoRankPolicy policy(plan, selection);
    KVCache cache(model_.n_layers());
    run_layers(model_, x, positions_for(chunks_[c].size()), cache, &policy, from_layer,
               model_.n_layers());
    return sequence_nll_extended(output_logits(model_, x), chunks_[c]);
  }

  size_t chunks() const { return chunks_.size(); }
  int64_t predicted_tokens() const {
    int64_t n = 0;
    for (const auto& c : chunks_) n += static_cast<int64_t>(c.size()) - 1;
    return n;
  }

 private:
  static std::vector<int64_t> positions_for(size_t n) {
    std::vector<int64_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    return p;
  }

  const Model& model_;
  std::vector<std::span<const int32_t>> chunks_;
  std::vector<std::vector<Tensor>> inputs_;
};

}  // namespace

CalibrationResult calibrate_greedy(const Model& model, std::span<const int32_t> calib_tokens,
                                   int layer_count, double keep_ratio,
                                   std::span<const int> eligible,
                                   const CalibrationOptions& options) {
  if (layer_count < 0 || layer_count > static_cast<int>(eligible.size())) {
    throw ConfigError("cannot convert " + std::to_string(layer_count) + " layers: only " +
                      std::to_string(eligible.size()) + " are eligible");
  }
  for (int l : eligible) {
    if (l <= options.l_sink || l >= model.n_layers() - 1) {
      throw ConfigError("layer " + std::to_string(l) +
                        " is not eligible (must follow the sink and precede the final layer)");
    }
  }
  const auto chunks = corpus_chunks(calib_tokens, options.context_len, options.max_chunks);
  if (chunks.empty()) throw UsageError("calibration corpus is shorter than the context length");

  PrefixCache prefix(model, chunks);
  std::vector<LayerSetting> current;
  prefix.rebuild(current, options.selection, 0, options.threads);

  auto perplexity_of = [&](const std::vector<LayerSetting>& plan, int from_layer) {
    std::vector<long double> nll(prefix.chunks());
    for (size_t c = 0; c < nll.size(); ++c) {
      nll[c] = prefix.chunk_nll(c, plan, options.selection, from_layer);
    }
    return perplexity_from_nll(nll, prefix.predicted_tokens());
  };

  CalibrationResult result;
  result.dense_perplexity = perplexity_of(current, model.n_layers());

  std::vector<int> remaining(eligible.begin(), eligible.end());
  std::sort(remaining.begin(), remaining.end());
  std::vector<int> chosen;
  const int rounds = options.one_shot ? (layer_count > 0 ? 1 : 0) : layer_count;
  for (int round = 0; round < rounds; ++round) {
    std::vector<CandidateScore> scores(remaining.size());
    parallel_for(remaining.size(), options.threads, [&](size_t i) {
      std::vector<int> trial = chosen;
      trial.push_back(remaining[i]);
      scores[i] = {remaining[i], perplexity_of(settings_for(trial, keep_ratio), remaining[i])};
    });
    result.rounds.push_back(scores);

    if (options.one_shot) {
      std::vector<CandidateScore> ranked = scores;
      std::stable_sort(ranked.begin(), ranked.end(),
                       [](const CandidateScore& a, const CandidateScore& b) {
                         return a.perplexity < b.perplexity;
                       });
      for (int i = 0; i < layer_count; ++i) chosen.push_back(ranked[i].layer);
      break;
    }
    size_t best = 0;
    for (size_t i = 1; i < scores.size(); ++i) {
      if (scores[i].perplexity < scores[best].perplexity) best = i;
    }
    chosen.push_back(remaining[best]);
    const int changed = remaining[best];
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best));
    current = settings_for(chosen, keep_ratio);
    if (round + 1 < rounds) prefix.rebuild(current, options.selection, changed, options.threads);
  }

  LayerPlan& plan = result.plan;
  plan.model_id = options.model_id;
  plan.l_sink = options.l_sink;
  plan.target_sparsity = options.target_sparsity;
  plan.keep_ratio = keep_ratio;
  plan.layers = settings_for(chosen, keep_ratio);
  plan.calib.corpus_sha256 = sha256_tokens(calib_tokens);
  plan.calib.context_len = options.context_len;
  return result;
}

BlockFlops block_flops(const ModelConfig& c, int64_t tokens, int64_t selected,
                       bool token_selection) {
  const uint64_t T = static_cast<uint64_t>(tokens), k = static_cast<uint64_t>(selected);
  const uint64_t d = static_cast<uint64_t>(c.d_model);
  const uint64_t q_width = static_cast<uint64_t>(c.n_heads) * c.d_head;
  const uint64_t kv_width = static_cast<uint64_t>(c.n_kv_heads) * c.d_head;
  const uint64_t f = static_cast<uint64_t>(c.d_ffn);
  BlockFlops out;
  out.attn_norm = 2 * (2 * T * d);
  out.kv_projection = 2 * (2 * T * d * kv_width);
  out.q_projection = 2 * (k * d * q_width);
  out.attention = 2 * (2 * k * T * q_width);
  out.out_projection = 2 * (k * q_width * d);
  out.ffn_norm = 2 * (2 * k * d);
  out.ffn = 2 * (3 * k * d * f);
  out.scoring = token_selection ? 2 * (T * d) : 0;
  return out;
}

FlopCount flop_count(const ModelConfig& config, const LayerPlan& plan, int64_t tokens) {
  if (tokens < 1) throw UsageError("flop_count needs at least one token");
  FlopCount out;
  const uint64_t dense_layer = block_flops(config, tokens, tokens, false).total();
  out.dense_flops = dense_layer * static_cast<uint64_t>(config.n_layers);
  for (int l = 0; l < config.n_layers; ++l) {
    auto it = std::find_if(plan.layers.begin(), plan.layers.end(),
                           [l](const LayerSetting& s) { return s.layer == l; });
    out.plan_flops +=
        it == plan.layers.end()
            ? dense_layer
            : block_flops(config, tokens, keep_count(it->keep_ratio, tokens), true).total();
  }
  out.ratio = static_cast<double>(out.plan_flops) / static_cast<double>(out.dense_flops);
  return out;
}

}  // namespace orthorank
