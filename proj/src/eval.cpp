#include "orthorank/eval.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "orthorank/hashing.hpp"

namespace orthorank {

using nlohmann::json;

std::vector<std::span<const int32_t>> corpus_chunks(std::span<const int32_t> corpus,
                                                    int context_len, int max_chunks) {
  if (context_len < 2) throw UsageError("context length must be at least 2");
  if (corpus.size() < static_cast<size_t>(context_len)) {
    throw UsageError("corpus has " + std::to_string(corpus.size()) +
                     " tokens, fewer than the context length " + std::to_string(context_len));
  }
  std::vector<std::span<const int32_t>> out;
  for (size_t start = 0; start + context_len <= corpus.size(); start += context_len) {
    if (max_chunks > 0 && static_cast<int>(out.size()) == max_chunks) break;
    out.push_back(corpus.subspan(start, static_cast<size_t>(context_len)));
  }
  return out;
}

void NllSum::add(long double v) {
  const long double t = sum + v;
  if (std::fabs(sum) >= std::fabs(v)) {
    compensation += (sum - t) + v;
  } else {
    compensation += (v - t) + sum;
  }
  sum = t;
}

long double sequence_nll_extended(const Tensor& logits, std::span<const int32_t> tokens) {
  if (logits.rank() != 2 || logits.dim(0) + 1 < static_cast<int64_t>(tokens.size())) {
    throw DimensionError("sequence_nll: logits " + shape_to_string(logits.shape()) +
                         " do not cover " + std::to_string(tokens.size()) + " tokens");
  }
  NllSum total;
  for (size_t t = 1; t < tokens.size(); ++t) {
    const auto row = logits.row(static_cast<int64_t>(t - 1));
    if (tokens[t] < 0 || tokens[t] >= static_cast<int32_t>(row.size())) {
      throw UsageError("token id " + std::to_string(tokens[t]) + " outside the vocabulary");
    }
    long double row_max = -std::numeric_limits<long double>::infinity();
    for (float v : row) row_max = std::max(row_max, static_cast<long double>(v));
    long double sum = 0.0L;
    for (float v : row) sum += std::exp(static_cast<long double>(v) - row_max);
    total.add(row_max + std::log(sum) - static_cast<long double>(row[tokens[t]]));
  }
  return total.value();
}

double sequence_nll(const Tensor& logits, std::span<const int32_t> tokens) {
  return static_cast<double>(sequence_nll_extended(logits, tokens));
}

double perplexity_from_nll(std::span<const long double> chunk_nll, int64_t predicted_tokens) {
  if (predicted_tokens < 1) throw UsageError("perplexity needs at least one predicted token");
  NllSum total;
  for (long double v : chunk_nll) total.add(v);
  return static_cast<double>(std::exp(total.value() / static_cast<long double>(predicted_tokens)));
}

namespace {

template <typename Fn>
void for_each_index(size_t jobs, int threads, Fn&& fn) {
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

// Per-chunk NLL with the given token-selection layers (empty = dense).
std::vector<long double> chunk_nlls(const Model& model, const std::vector<LayerSetting>& layers,
                                    const SelectionConfig& selection,
                                    const std::vector<std::span<const int32_t>>& chunks,
                                    int threads) {
  std::vector<long double> nll(chunks.size());
  for_each_index(chunks.size(), threads, [&](size_t c) {
    KVCache cache(model.n_layers());
    std::optional<OrthoRankPolicy> policy;
    if (!layers.empty()) policy.emplace(layers, selection);
    const ForwardResult r = forward_chunk(model, chunks[c], cache, policy ? &*policy : nullptr);
    nll[c] = sequence_nll_extended(r.logits, chunks[c]);
  });
  return nll;
}

std::string config_summary(const Model& model, const EvalOptions& options) {
  const auto& c = model.config();
  std::ostringstream os;
  os << "layers=" << c.n_layers << " d_model=" << c.d_model << " heads=" << c.n_heads << "/"
     << c.n_kv_heads << " d_ffn=" << c.d_ffn << " vocab=" << c.vocab_size
     << " context_len=" << options.context_len << " criterion=" << options.selection.criterion.name()
     << " kv_unselected=" << (options.selection.compute_kv_for_unselected ? 1 : 0);
  return os.str();
}

}  // namespace

std::string EvalReport::to_json() const {
  json j;
  j["config"] = config_summary;
  j["plan_id"] = plan_id;
  j["corpus_sha256"] = corpus_sha256;
  j["context_len"] = context_len;
  j["chunk_nll"] = chunk_nll;
  j["total_nll"] = total_nll;
  j["token_count"] = token_count;
  j["predicted_tokens"] = predicted_tokens;
  j["perplexity"] = perplexity;
  j["flop_ratio"] = flop_ratio;
  return j.dump(2);
}

EvalReport perplexity(const Model& model, const LayerPlan* plan, std::span<const int32_t> corpus,
                      const EvalOptions& options) {
  const auto chunks = corpus_chunks(corpus, options.context_len, options.max_chunks);
  if (plan) plan->validate(model.n_layers());

  EvalReport report;
  report.config_summary = config_summary(model, options);
  report.plan_id = plan ? plan->id() : "dense";
  report.context_len = options.context_len;
  const std::vector<long double> nll = chunk_nlls(
      model, plan ? plan->layers : std::vector<LayerSetting>{}, options.selection, chunks,
      options.threads);
  NllSum total;
  for (long double v : nll) {
    report.chunk_nll.push_back(static_cast<double>(v));
    total.add(v);
  }
  report.total_nll = static_cast<double>(total.value());
  std::vector<int32_t> used;
  for (const auto& c : chunks) used.insert(used.end(), c.begin(), c.end());
  report.corpus_sha256 = sha256_tokens(used);
  for (size_t c = 0; c < chunks.size(); ++c) {
    report.token_count += static_cast<int64_t>(chunks[c].size());
    report.predicted_tokens += static_cast<int64_t>(chunks[c].size()) - 1;
  }
  report.perplexity = perplexity_from_nll(nll, report.predicted_tokens);
  report.flop_ratio = plan ? flop_count(model.config(), *plan, options.context_len).ratio : 1.0;
  return report;
}

std::vector<int32_t> sample_corpus(const Model& model, int n_docs, int doc_len, double temperature,
                                   uint64_t seed) {
  if (n_docs < 1 || doc_len < 1) throw UsageError("sample_corpus needs n_docs, doc_len >= 1");
  if (temperature < 0.0) throw UsageError("temperature must be non-negative");
  if (model.config().vocab_size < 2) throw UsageError("sample_corpus needs a vocabulary of >= 2");
  std::mt19937_64 rng(seed);
  std::vector<int32_t> corpus;
  corpus.reserve(static_cast<size_t>(n_docs) * doc_len);
  for (int doc = 0; doc < n_docs; ++doc) {
    KVCache cache(model.n_layers());
    int32_t token = 0;
    corpus.push_back(token);
    for (int t = 1; t < doc_len; ++t) {
      const Tensor logits = decode_step_dense(model, cache, token);
      const auto row = logits.row(0);
      // Token 0 is reserved for document starts.
      const auto body = row.subspan(1);
      if (temperature == 0.0) {
        token = 1 + argmax(body);
      } else {
        const float row_max = *std::max_element(body.begin(), body.end());
        std::vector<double> weights(body.size());
        for (size_t i = 0; i < body.size(); ++i) {
          weights[i] = std::exp((static_cast<double>(body[i]) - row_max) / temperature);
        }
        std::discrete_distribution<int32_t> pick(weights.begin(), weights.end());
        token = 1 + pick(rng);
      }
      corpus.push_back(token);
    }
  }
  return corpus;
}

std::vector<int32_t> greedy_generate(const Model& model, std::span<const int32_t> prompt,
                                     int max_new, const LayerPlan* plan,
                                     const SelectionConfig& selection,
                                     std::vector<AuditRow>* audit) {
  if (prompt.empty()) throw UsageError("prompt is empty");
  if (plan) plan->validate(model.n_layers());
  std::optional<OrthoRankPolicy> policy;
  if (plan && !plan->layers.empty()) policy.emplace(plan->layers, selection, audit);
  BlockPolicy* p = policy ? &*policy : nullptr;

  KVCache cache(model.n_layers());
  std::vector<int32_t> out;
  if (max_new <= 0) return out;
  Tensor logits = forward_chunk(model, prompt, cache, p).logits;
  int32_t next = argmax(logits.row(logits.dim(0) - 1));
  out.push_back(next);
  while (static_cast<int>(out.size()) < max_new) {
    const int32_t one[1] = {next};
    logits = forward_chunk(model, one, cache, p).logits;
    next = argmax(logits.row(0));
    out.push_back(next);
  }
  return out;
}

std::vector<int32_t> read_token_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open token file " + path.string());
  std::vector<int32_t> tokens;
  long long v;
  while (in >> v) tokens.push_back(static_cast<int32_t>(v));
  if (!in.eof()) throw UsageError("token file " + path.string() + " contains a non-integer entry");
  return tokens;
}

void write_token_file(const std::filesystem::path& path, std::span<const int32_t> tokens) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  for (size_t i = 0; i < tokens.size(); ++i) out << tokens[i] << ((i + 1) % 32 == 0 ? '\n' : ' ');
  out << '\n';
}

void LayerwiseTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << "layer,dense";
  for (const auto& c : criteria) out << ',' << c;
  out << '\n' << std::setprecision(10);
  for (size_t r = 0; r < layers.size(); ++r) {
    out << layers[r] << ',' << dense_perplexity;
    for (double v : perplexity[r]) out << ',' << v;
    out << '\n';
  }
}

LayerwiseTable layerwise_comparison(const Model& model, std::span<const int32_t> corpus,
                                    double keep_ratio, std::span<const Criterion> criteria,
                                    int l_sink, const EvalOptions& options) {
  if (criteria.empty()) throw UsageError("layerwise comparison needs at least one criterion");
  keep_count(keep_ratio, 1);
  const auto chunks = corpus_chunks(corpus, options.context_len, options.max_chunks);
  LayerwiseTable table;
  int64_t predicted = 0;
  for (const auto& c : chunks) predicted += static_cast<int64_t>(c.size()) - 1;
  table.dense_perplexity = perplexity_from_nll(
      chunk_nlls(model, {}, options.selection, chunks, options.threads), predicted);
  for (const auto& c : criteria) table.criteria.push_back(c.name());
  for (int l = std::max(l_sink + 1, 0); l < model.n_layers(); ++l) {
    table.layers.push_back(l);
    std::vector<double> row;
    for (const auto& c : criteria) {
      const SelectionConfig selection{c, options.selection.compute_kv_for_unselected};
      row.push_back(perplexity_from_nll(
          chunk_nlls(model, {{l, keep_ratio}}, selection, chunks, options.threads), predicted));
    }
    table.perplexity.push_back(std::move(row));
  }
  return table;
}

std::vector<SelectionConfig> ablation_configs(uint64_t random_seed) {
  auto make = [](CriterionKind kind, Stage stage, bool kv, uint64_t seed = 0) {
    SelectionConfig s;
    s.criterion.kind = kind;
    s.criterion.stage = stage;
    s.criterion.seed = seed;
    s.compute_kv_for_unselected = kv;
    return s;
  };
  return {
      make(CriterionKind::random, Stage::normalized, true, random_seed),
      make(CriterionKind::norm_asc, Stage::normalized, true),
      make(CriterionKind::norm_desc, Stage::normalized, true),
      make(CriterionKind::orthogonal_desc, Stage::normalized, true),
      make(CriterionKind::orthogonal_asc, Stage::raw_hidden, true),
      make(CriterionKind::orthogonal_asc, Stage::normalized, false),
      make(CriterionKind::orthogonal_asc, Stage::normalized, true),
  };
}

std::vector<AblationRow> ablation_grid(const Model& model, const LayerPlan& plan,
                                       std::span<const int32_t> corpus, const EvalOptions& options,
                                       uint64_t random_seed) {
  plan.validate(model.n_layers());
  const auto chunks = corpus_chunks(corpus, options.context_len, options.max_chunks);
  std::vector<AblationRow> rows;
  for (const SelectionConfig& selection : ablation_configs(random_seed)) {
    AblationRow row;
    row.criterion = selection.criterion;
    row.compute_kv = selection.compute_kv_for_unselected;
    row.label = selection.criterion.name() + (row.compute_kv ? "" : "+no_kv");
    EvalOptions opts = options;
    opts.selection = selection;
    row.perplexity = perplexity(model, &plan, corpus, opts).perplexity;

    std::vector<AuditRow> audit;
    KVCache cache(model.n_layers());
    OrthoRankPolicy policy(plan.layers, selection, &audit);
    forward_chunk(model, chunks.front(), cache, &policy);
    for (const auto& s : plan.layers) {
      KvAudit a;
      a.layer = s.layer;
      a.tokens = static_cast<int>(chunks.front().size());
      for (const auto& r : audit) {
        if (r.layer == s.layer && r.selected) ++a.selected;
      }
      a.kv_entries = static_cast<int>(cache.layers[s.layer].size());
      row.audit.push_back(a);
    }
    rows.push_back(std::move(row));
  }
  rows.back().label += " (default)";
  return rows;
}

void write_ablation_csv(std::span<const AblationRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << "label,criterion,stage,kv,perplexity,kv_entries,selected_tokens\n"
      << std::setprecision(10);
  for (const auto& r : rows) {
    int kv = 0, selected = 0;
    for (const auto& a : r.audit) {
      kv += a.kv_entries;
      selected += a.selected;
    }
    out << '"' << r.label << "\"," << to_string(r.criterion.kind) << ','
        << to_string(r.criterion.stage) << ',' << (r.compute_kv ? 1 : 0) << ',' << r.perplexity
        << ',' << kv << ',' << selected << '\n';
  }
}

}  // namespace orthorank
