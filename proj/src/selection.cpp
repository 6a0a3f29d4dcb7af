#include "orthorank/selection.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace orthorank {

std::string to_string(CriterionKind kind) {
  switch (kind) {
    case CriterionKind::orthogonal_asc: return "orthogonal_asc";
    case CriterionKind::orthogonal_desc: return "orthogonal_desc";
    case CriterionKind::norm_asc: return "norm_asc";
    case CriterionKind::norm_desc: return "norm_desc";
    case CriterionKind::random: return "random";
  }
  return "unknown";
}

std::string to_string(Stage stage) {
  return stage == Stage::normalized ? "normalized" : "raw_hidden";
}

std::string Criterion::name() const {
  std::string out = to_string(kind);
  if (kind == CriterionKind::random) out += ":" + std::to_string(seed);
  if (stage == Stage::raw_hidden) out += "@raw_hidden";
  return out;
}

Criterion Criterion::parse(const std::string& text) {
  Criterion c;
  std::string body = text;
  if (auto at = body.find('@'); at != std::string::npos) {
    const std::string stage = body.substr(at + 1);
    if (stage == "raw_hidden" || stage == "raw") {
      c.stage = Stage::raw_hidden;
    } else if (stage != "normalized") {
      throw UsageError("unknown criterion stage '" + stage + "'");
    }
    body = body.substr(0, at);
  }
  if (auto colon = body.find(':'); colon != std::string::npos) {
    c.seed = std::stoull(body.substr(colon + 1));
    body = body.substr(0, colon);
  }
  if (body == "orthogonal_asc") c.kind = CriterionKind::orthogonal_asc;
  else if (body == "orthogonal_desc") c.kind = CriterionKind::orthogonal_desc;
  else if (body == "norm_asc") c.kind = CriterionKind::norm_asc;
  else if (body == "norm_desc") c.kind = CriterionKind::norm_desc;
  else if (body == "random") c.kind = CriterionKind::random;
  else throw UsageError("unknown criterion '" + body + "'");
  return c;
}

SelectionScores compute_scores(const Tensor& states, int sink_index) {
  if (states.rank() != 2) throw DimensionError("compute_scores expects [T×d] states");
  SelectionScores out;
  out.values.resize(static_cast<size_t>(states.dim(0)));
  const auto sink = states.row(sink_index);
  for (int64_t i = 0; i < states.dim(0); ++i) {
    out.values[i] = std::fabs(dot<float>(sink, states.row(i)));
  }
  out.values[sink_index] = std::numeric_limits<float>::infinity();
  return out;
}

int keep_count(double keep_ratio, int64_t n) {
  if (!(keep_ratio >= 0.0 && keep_ratio <= 1.0)) {
    throw UsageError("keep ratio must lie in [0, 1], got " + std::to_string(keep_ratio));
  }
  return static_cast<int>(std::floor(keep_ratio * static_cast<double>(n)));
}

SelectionMask select_topk(std::span<const float> scores, double keep_ratio) {
  SelectionMask mask;
  mask.k = keep_count(keep_ratio, static_cast<int64_t>(scores.size()));
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + mask.k, order.end(), [&](int a, int b) {
    return scores[a] < scores[b] || (scores[a] == scores[b] && a < b);
  });
  mask.selected.assign(order.begin(), order.begin() + mask.k);
  std::sort(mask.selected.begin(), mask.selected.end());
  return mask;
}

bool decode_select(std::vector<float>& history, float score, double keep_ratio) {
  const int k = keep_count(keep_ratio, static_cast<int64_t>(history.size()) + 1);
  const auto at_or_below =
      std::count_if(history.begin(), history.end(), [score](float h) { return h <= score; });
  history.push_back(score);
  return at_or_below < k;
}

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

float rank_key(const Criterion& criterion, std::span<const float> sink_state,
               std::span<const float> state, int layer, int64_t position) {
  switch (criterion.kind) {
    case CriterionKind::orthogonal_asc: return std::fabs(dot<float>(sink_state, state));
    case CriterionKind::orthogonal_desc: return -std::fabs(dot<float>(sink_state, state));
    case CriterionKind::norm_asc: return l2_norm<float>(state);
    case CriterionKind::norm_desc: return -l2_norm<float>(state);
    case CriterionKind::random: {
      const uint64_t h = splitmix64(splitmix64(splitmix64(criterion.seed) ^
                                               static_cast<uint64_t>(layer)) ^
                                    static_cast<uint64_t>(position));
      return static_cast<float>(h >> 40) * (1.0f / 16777216.0f);
    }
  }
  return 0.0f;
}

std::vector<float> rank_keys(const Criterion& criterion, const Tensor& states, int layer,
                             std::span<const int64_t> positions) {
  if (criterion.kind == CriterionKind::orthogonal_asc) return compute_scores(states, 0).values;
  std::vector<float> keys(static_cast<size_t>(states.dim(0)));
  const auto sink = states.row(0);
  for (int64_t i = 0; i < states.dim(0); ++i) {
    keys[i] = rank_key(criterion, sink, states.row(i), layer, positions[i]);
  }
  keys[0] = std::numeric_limits<float>::infinity();
  return keys;
}

OrthoRankPolicy::OrthoRankPolicy(std::vector<LayerSetting> layers, SelectionConfig config,
                                 std::vector<AuditRow>* audit)
    : layers_(std::move(layers)), config_(config), audit_(audit) {}

std::optional<RowSelection> OrthoRankPolicy::select(int layer, const Tensor& hidden,
                                                    const Tensor& normalized,
                                                    std::span<const int64_t> positions,
                                                    KVCache& cache) {
  auto setting = std::find_if(layers_.begin(), layers_.end(),
                              [layer](const LayerSetting& s) { return s.layer == layer; });
  if (setting == layers_.end()) return std::nullopt;

  const Tensor& states = config_.criterion.stage == Stage::normalized ? normalized : hidden;
  const int64_t n = states.dim(0);
  std::vector<float> keys(static_cast<size_t>(n));
  std::vector<char> chosen(static_cast<size_t>(n), 0);

  auto history = cache.score_history.find(layer);
  if (history == cache.score_history.end()) {
    if (positions.front() != 0) {
      throw StateError("token selection layer " + std::to_string(layer) +
                       " has no score history for a sequence that does not start at position 0");
    }
    keys = rank_keys(config_.criterion, states, layer, positions);
    for (int i : select_topk(keys, setting->keep_ratio).selected) chosen[i] = 1;
    cache.score_history[layer] = keys;
    const auto sink = states.row(0);
    cache.sink_state[layer].assign(sink.begin(), sink.end());
  } else {
    const std::vector<float>& sink = cache.sink_state.at(layer);
    for (int64_t i = 0; i < n; ++i) {
      keys[i] = rank_key(config_.criterion, sink, states.row(i), layer, positions[i]);
      chosen[i] = decode_select(history->second, keys[i], setting->keep_ratio) ? 1 : 0;
    }
  }

  RowSelection rows;
  for (int i = 0; i < n; ++i) {
    if (chosen[i]) rows.query_rows.push_back(i);
    if (chosen[i] || config_.compute_kv_for_unselected) rows.kv_rows.push_back(i);
    if (audit_) {
      audit_->push_back({layer, cache.chunks_processed, positions[i], keys[i], chosen[i] != 0});
    }
  }
  return rows;
}

void write_audit_csv(std::span<const AuditRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << "layer,step,position,score,selected\n" << std::setprecision(9);
  for (const auto& r : rows) {
    out << r.layer << ',' << r.step << ',' << r.position << ',' << r.score << ','
        << (r.selected ? 1 : 0) << '\n';
  }
}

OrthoRankLayerOutput forward_orthorank_layer(const Model& model, int layer_index, const Tensor& x,
                                             double keep_ratio, const Criterion& criterion,
                                             bool compute_kv_for_unselected) {
  if (layer_index < 0 || layer_index >= model.n_layers()) {
    throw UsageError("layer index " + std::to_string(layer_index) + " out of range");
  }
  const int64_t n = x.dim(0);
  std::vector<int64_t> positions(static_cast<size_t>(n));
  std::iota(positions.begin(), positions.end(), 0);
  KVCache cache(model.n_layers());
  OrthoRankPolicy policy({{layer_index, keep_ratio}}, {criterion, compute_kv_for_unselected});

  const Tensor xn =
      rms_norm(x, model.layer(layer_index).attn_norm, static_cast<float>(model.config().norm_eps));
  const auto rows = policy.select(layer_index, x, xn, positions, cache);

  OrthoRankLayerOutput out;
  out.x_out = x;
  LayerCache& lc = cache.layers[layer_index];
  run_block(model, layer_index, out.x_out, xn, positions, lc, &*rows);

  const int64_t kv_width = int64_t{model.config().n_kv_heads} * model.config().d_head;
  if (lc.size() > 0) {
    out.keys = Tensor({static_cast<int64_t>(lc.size()), kv_width}, lc.keys);
    out.values = Tensor({static_cast<int64_t>(lc.size()), kv_width}, lc.values);
  }
  out.mask.selected = rows->query_rows;
  out.mask.k = static_cast<int>(rows->query_rows.size());
  return out;
}

}  // namespace orthorank
