// orthorank command-line entry point.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "orthorank/analysis.hpp"
#include "orthorank/calibration.hpp"
#include "orthorank/checkpoint.hpp"
#include "orthorank/eval.hpp"
#include "orthorank/model.hpp"
#include "orthorank/selection.hpp"

namespace fs = std::filesystem;
using namespace orthorank;

namespace {

int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("ORTHORANK_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string());
}

std::string model_id(const fs::path& dir) {
  return fs::absolute(dir).filename().string() + "@" + checkpoint_hash(dir).substr(0, 12);
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << text << '\n';
}

std::vector<int32_t> parse_tokens(const std::string& text) {
  std::vector<int32_t> out;
  std::stringstream ss(text);
  long long v;
  while (ss >> v) out.push_back(static_cast<int32_t>(v));
  if (!ss.eof()) throw UsageError("prompt must be whitespace-separated token ids");
  return out;
}

std::vector<Criterion> parse_criteria(const std::string& text) {
  std::vector<Criterion> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(Criterion::parse(item));
  }
  return out;
}

// Explicit --l-sink wins; otherwise detect from the first tokens of `tokens`.
int resolve_l_sink(const Model& model, std::span<const int32_t> tokens, int flag, double tau,
                   int context_len) {
  if (flag >= 0) return flag;
  const size_t n = std::min(tokens.size(), static_cast<size_t>(std::max(context_len, 8)));
  const int l_sink = detect_sink_layer(model, tokens.first(n), tau);
  if (l_sink >= model.n_layers()) {
    throw ConfigError("no attention sink detected at tau " + std::to_string(tau) +
                      "; pass --l-sink explicitly");
  }
  std::cerr << "detected l_sink = " << l_sink << '\n';
  return l_sink;
}

struct SynthModelArgs {
  fs::path out;
  int layers = 4, d_model = 64, heads = 4, kv_heads = 0, d_ffn = 0, vocab = 256;
  double rope_theta = 10000.0, norm_eps = 1e-5;
  bool tied = false;
  uint64_t seed = 0;
  int sink_layer = -1;
  float sink_strength = 8.0f;
};

int cmd_synth_model(const SynthModelArgs& a) {
  if (a.heads < 1 || a.d_model % a.heads != 0) {
    throw ConfigError("d_model (" + std::to_string(a.d_model) + ") must be divisible by --heads (" +
                      std::to_string(a.heads) + ")");
  }
  ModelConfig c;
  c.n_layers = a.layers;
  c.d_model = a.d_model;
  c.n_heads = a.heads;
  c.n_kv_heads = a.kv_heads > 0 ? a.kv_heads : a.heads;
  c.d_head = a.d_model / a.heads;
  c.d_ffn = a.d_ffn > 0 ? a.d_ffn : 4 * a.d_model;
  c.vocab_size = a.vocab;
  c.rope_theta = a.rope_theta;
  c.norm_eps = a.norm_eps;
  c.tied_embeddings = a.tied;
  SynthOptions opts;
  opts.seed = a.seed;
  if (a.sink_layer >= 0) opts.sink_layer = a.sink_layer;
  opts.sink_strength = a.sink_strength;
  generate_synthetic_model(c, opts, a.out);
  std::cout << "checkpoint " << a.out.string() << " sha256 " << checkpoint_hash(a.out) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OrthoRank: sink-orthogonal token selection for decoder-only transformers"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: ORTHORANK_THREADS or 1)");

  // synth-model
  SynthModelArgs sm;
  auto* synth = app.add_subcommand("synth-model", "Write a seeded synthetic checkpoint");
  synth->add_option("--out", sm.out, "Checkpoint directory")->required();
  synth->add_option("--layers", sm.layers, "Number of blocks");
  synth->add_option("--d-model", sm.d_model, "Model width");
  synth->add_option("--heads", sm.heads, "Attention heads");
  synth->add_option("--kv-heads", sm.kv_heads, "Key/value heads (default: --heads)");
  synth->add_option("--d-ffn", sm.d_ffn, "FFN width (default: 4 * d_model)");
  synth->add_option("--vocab", sm.vocab, "Vocabulary size");
  synth->add_option("--rope-theta", sm.rope_theta, "Rotary base");
  synth->add_option("--norm-eps", sm.norm_eps, "RMSNorm epsilon");
  synth->add_flag("--tied", sm.tied, "Tie the output head to the embedding");
  synth->add_option("--seed", sm.seed, "RNG seed");
  synth->add_option("--sink-layer", sm.sink_layer, "Plant an attention sink on token 0 from this layer");
  synth->add_option("--sink-strength", sm.sink_strength, "Planted sink query/key weight");

  // synth-corpus
  fs::path sc_model, sc_out;
  int sc_vocab = 0, sc_docs = 8, sc_doc_len = 256;
  double sc_temperature = 1.0;
  uint64_t sc_seed = 0;
  auto* corpus_cmd = app.add_subcommand("synth-corpus", "Write a token corpus of BOS-led documents");
  corpus_cmd->add_option("--model", sc_model, "Sample documents from this checkpoint");
  corpus_cmd->add_option("--vocab", sc_vocab, "Uniform random tokens over this vocabulary instead");
  corpus_cmd->add_option("--docs", sc_docs, "Number of documents");
  corpus_cmd->add_option("--doc-len", sc_doc_len, "Tokens per document (token 0 first)");
  corpus_cmd->add_option("--temperature", sc_temperature, "Sampling temperature (0 = greedy)");
  corpus_cmd->add_option("--seed", sc_seed, "RNG seed");
  corpus_cmd->add_option("--out", sc_out, "Token file")->required();

  // analyze
  fs::path an_model, an_tokens, an_out = "analysis";
  bool an_synthetic = false, an_dump = false;
  int an_layers = 32, an_seq = 101, an_dim = 64, an_l_sink = 2;
  double an_rate = 0.1;
  uint64_t an_seed = 0;
  std::string an_positions = "1..10", an_cross = "0,50,100";
  auto* analyze = app.add_subcommand("analyze", "Sink similarity, cross-layer similarity and norms");
  analyze->add_option("--model", an_model, "Checkpoint to trace");
  analyze->add_option("--tokens", an_tokens, "Token file fed to --model");
  analyze->add_flag("--synthetic-trace", an_synthetic, "Analyze a generated sink trace");
  analyze->add_option("--layers", an_layers, "Synthetic trace layers");
  analyze->add_option("--seq-len", an_seq, "Synthetic trace length");
  analyze->add_option("--dim", an_dim, "Synthetic trace width");
  analyze->add_option("--l-sink", an_l_sink, "Synthetic trace sink layer");
  analyze->add_option("--alignment-rate", an_rate, "Synthetic per-layer alignment toward the sink");
  analyze->add_option("--seed", an_seed, "Synthetic trace seed");
  analyze->add_option("--positions", an_positions, "Sink comparison positions, e.g. 1..10");
  analyze->add_option("--cross-positions", an_cross, "Cross-layer positions, e.g. 0,50,100");
  analyze->add_flag("--dump-trace", an_dump, "Also write the per-layer trace CSVs");
  analyze->add_option("--out", an_out, "Output directory");

  // Shared by the model-evaluating commands.
  fs::path model_dir, corpus_path, plan_path, out_path;
  int context_len = 256, max_chunks = 0, l_sink_flag = -1;
  double keep_ratio = 0.333, tau = 0.3, sparsity = 0.0;
  std::string criterion_text = "orthogonal_asc";
  bool no_kv = false;
  uint64_t seed = 0;

  auto add_model = [&](CLI::App* cmd) {
    cmd->add_option("--model", model_dir, "Checkpoint directory")->required();
  };
  auto add_corpus = [&](CLI::App* cmd) {
    cmd->add_option("--corpus", corpus_path, "Token file")->required();
    cmd->add_option("--context-len", context_len, "Chunk length W");
  };
  auto add_selection = [&](CLI::App* cmd) {
    cmd->add_option("--criterion", criterion_text, "Selection criterion");
    cmd->add_flag("--no-kv", no_kv, "Skip K/V for unselected tokens");
  };

  auto* calibrate = app.add_subcommand("calibrate", "Greedy choice of token-selection layers");
  add_model(calibrate);
  add_corpus(calibrate);
  add_selection(calibrate);
  int calib_chunks = 8;
  bool one_shot = false;
  calibrate->add_option("--sparsity", sparsity, "Target effective sparsity")->required();
  calibrate->add_option("--keep-ratio", keep_ratio, "Tokens kept per converted layer");
  calibrate->add_option("--calib-chunks", calib_chunks, "Calibration chunks (0 = all)");
  calibrate->add_option("--l-sink", l_sink_flag, "Sink layer (default: detect)");
  calibrate->add_option("--tau", tau, "Sink detection threshold");
  calibrate->add_flag("--one-shot", one_shot, "Rank single-layer conversions once");
  calibrate->add_option("--out", out_path, "Plan JSON")->required();

  auto* eval_cmd = app.add_subcommand("eval-ppl", "Perplexity report");
  add_model(eval_cmd);
  add_corpus(eval_cmd);
  add_selection(eval_cmd);
  eval_cmd->add_option("--plan", plan_path, "Plan JSON (default: dense)");
  eval_cmd->add_option("--max-chunks", max_chunks, "Evaluate at most this many chunks");
  eval_cmd->add_option("--out", out_path, "Report JSON");

  std::string criteria_text = "orthogonal_asc,orthogonal_desc,random:0";
  auto* layerwise = app.add_subcommand("layerwise", "Single-layer conversion per criterion");
  add_model(layerwise);
  add_corpus(layerwise);
  layerwise->add_option("--keep-ratio", keep_ratio, "Tokens kept in the converted layer");
  layerwise->add_option("--criteria", criteria_text, "Comma-separated criteria");
  layerwise->add_option("--max-chunks", max_chunks, "Evaluate at most this many chunks");
  layerwise->add_option("--l-sink", l_sink_flag, "Sink layer (default: detect)");
  layerwise->add_option("--tau", tau, "Sink detection threshold");
  layerwise->add_option("--out", out_path, "CSV output")->required();

  auto* ablate = app.add_subcommand("ablate", "Criterion / stage / KV ablation grid");
  add_model(ablate);
  add_corpus(ablate);
  ablate->add_option("--plan", plan_path, "Plan JSON")->required();
  ablate->add_option("--max-chunks", max_chunks, "Evaluate at most this many chunks");
  ablate->add_option("--seed", seed, "Seed of the random criterion");
  ablate->add_option("--out", out_path, "CSV output")->required();

  fs::path config_path;
  int64_t seq_len = 256;
  auto* flops = app.add_subcommand("flops", "Dense vs. plan block FLOPs");
  flops->add_option("--model", model_dir, "Checkpoint directory (config.json is read)");
  flops->add_option("--config", config_path, "config.json path");
  flops->add_option("--plan", plan_path, "Plan JSON");
  flops->add_option("--sparsity", sparsity, "Build a plan of this sparsity instead of --plan");
  flops->add_option("--keep-ratio", keep_ratio, "Keep ratio for --sparsity");
  flops->add_option("--l-sink", l_sink_flag, "Sink layer for --sparsity");
  flops->add_option("--seq-len", seq_len, "Tokens T");
  flops->add_option("--out", out_path, "JSON output (default: stdout)");

  std::string prompt_text = "0";
  int max_new = 16;
  fs::path audit_path;
  auto* generate = app.add_subcommand("generate", "Greedy decode with optional token selection");
  add_model(generate);
  add_selection(generate);
  generate->add_option("--plan", plan_path, "Plan JSON (default: dense)");
  generate->add_option("--prompt", prompt_text, "Prompt token ids");
  generate->add_option("--max-new", max_new, "Tokens to generate");
  generate->add_option("--audit", audit_path, "Selection audit CSV");
  generate->add_option("--out", out_path, "Write generated ids here as well");

  CLI11_PARSE(app, argc, argv);
  const int workers = resolve_threads(threads);

  auto selection = [&]() {
    SelectionConfig s;
    s.criterion = Criterion::parse(criterion_text);
    s.compute_kv_for_unselected = !no_kv;
    return s;
  };

  try {
    if (*synth) return cmd_synth_model(sm);

    if (*corpus_cmd) {
      std::vector<int32_t> tokens;
      if (!sc_model.empty()) {
        require_exists(sc_model, "model");
        tokens = sample_corpus(Model::load(sc_model), sc_docs, sc_doc_len, sc_temperature, sc_seed);
      } else {
        if (sc_vocab < 2) throw UsageError("synth-corpus needs --model or --vocab >= 2");
        std::mt19937_64 rng(sc_seed);
        for (int d = 0; d < sc_docs; ++d) {
          tokens.push_back(0);
          for (int t = 1; t < sc_doc_len; ++t) {
            tokens.push_back(1 + static_cast<int32_t>(rng() % static_cast<uint64_t>(sc_vocab - 1)));
          }
        }
      }
      write_token_file(sc_out, tokens);
      std::cout << "wrote " << tokens.size() << " tokens to " << sc_out.string() << '\n';
      return 0;
    }

    if (*analyze) {
      HiddenTrace trace;
      if (an_synthetic) {
        trace = generate_synthetic_sink_trace(an_layers, an_seq, an_dim, an_l_sink, an_rate, an_seed);
      } else if (!an_model.empty()) {
        if (an_tokens.empty()) throw UsageError("analyze --model needs --tokens");
        require_exists(an_model, "model");
        const auto tokens = read_token_file(an_tokens);
        TraceOptions opts;
        opts.capture = true;
        opts.attention = true;
        trace = forward_dense(Model::load(an_model), tokens, opts).trace;
      } else {
        throw UsageError("analyze needs --model with --tokens, or --synthetic-trace");
      }
      fs::create_directories(an_out);
      std::vector<int> positions;
      for (int p : parse_positions(an_positions)) {
        if (p > 0 && p < trace.seq_len()) positions.push_back(p);
      }
      if (positions.empty()) throw UsageError("no sink comparison position fits the trace");
      sink_token_similarity(trace, positions).write_csv(an_out / "sink_vs_tokens.csv");
      for (int p : parse_positions(an_cross)) {
        if (p < 0 || p >= trace.seq_len()) continue;
        cross_layer_self_similarity(trace, p)
            .write_csv(an_out / ("cross_layer_p" + std::to_string(p) + ".csv"));
      }
      norm_profile(trace).write_csv(an_out / "norms.csv", an_out / "norms_cv.csv");
      if (an_dump) write_trace_csv(trace, an_out / "trace");
      std::cout << "wrote analysis CSVs to " << an_out.string() << '\n';
      return 0;
    }

    if (*flops) {
      ModelConfig config;
      if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw UsageError("cannot open " + config_path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        config = config_from_json(ss.str());
        config.validate();
      } else if (!model_dir.empty()) {
        config = load_config(model_dir);
      } else {
        throw UsageError("flops needs --model or --config");
      }
      LayerPlan plan;
      if (!plan_path.empty()) {
        plan = LayerPlan::load(plan_path);
      } else if (sparsity > 0.0) {
        plan.l_sink = std::max(l_sink_flag, 0);
        plan.keep_ratio = keep_ratio;
        plan.target_sparsity = sparsity;
        const auto target = plan_from_sparsity(config.n_layers, plan.l_sink, sparsity, keep_ratio);
        for (int i = 0; i < target.layer_count; ++i) {
          plan.layers.push_back({target.eligible[i], keep_ratio});
        }
      }
      const FlopCount count = flop_count(config, plan, seq_len);
      nlohmann::json j = {{"dense_flops", count.dense_flops},
                          {"plan_flops", count.plan_flops},
                          {"ratio", count.ratio},
                          {"converted_layers", plan.layers.size()},
                          {"seq_len", seq_len}};
      if (out_path.empty()) {
        std::cout << j.dump(2) << '\n';
      } else {
        write_file(out_path, j.dump(2));
        std::cout << "flop ratio " << count.ratio << '\n';
      }
      return 0;
    }

    require_exists(model_dir, "model");
    const Model model = Model::load(model_dir);

    if (*generate) {
      const auto prompt = parse_tokens(prompt_text);
      std::optional<LayerPlan> plan;
      if (!plan_path.empty()) plan = LayerPlan::load(plan_path);
      std::vector<AuditRow> audit;
      const auto tokens = greedy_generate(model, prompt, max_new, plan ? &*plan : nullptr,
                                          selection(), audit_path.empty() ? nullptr : &audit);
      std::ostringstream text;
      for (size_t i = 0; i < tokens.size(); ++i) text << (i ? " " : "") << tokens[i];
      std::cout << text.str() << '\n';
      if (!out_path.empty()) write_file(out_path, text.str());
      if (!audit_path.empty()) write_audit_csv(audit, audit_path);
      return 0;
    }

    require_exists(corpus_path, "corpus");
    const auto corpus = read_token_file(corpus_path);

    if (*calibrate) {
      const int l_sink = sparsity > 0.0
                             ? resolve_l_sink(model, corpus, l_sink_flag, tau, context_len)
                             : std::max(l_sink_flag, 0);
      const SparsityTarget target = plan_from_sparsity(model.n_layers(), l_sink, sparsity, keep_ratio);
      CalibrationOptions opts;
      opts.context_len = context_len;
      opts.max_chunks = calib_chunks;
      opts.one_shot = one_shot;
      opts.selection = selection();
      opts.threads = workers;
      opts.model_id = model_id(model_dir);
      opts.l_sink = l_sink;
      opts.target_sparsity = sparsity;
      const CalibrationResult result =
          calibrate_greedy(model, corpus, target.layer_count, keep_ratio, target.eligible, opts);
      fs::path parent = out_path.parent_path();
      if (!parent.empty()) fs::create_directories(parent);
      result.plan.save(out_path);
      std::cout << "plan with " << result.plan.layers.size() << " layers written to "
                << out_path.string() << " (dense calibration ppl " << result.dense_perplexity
                << ")\n";
      return 0;
    }

    EvalOptions eopts;
    eopts.context_len = context_len;
    eopts.max_chunks = max_chunks;
    eopts.threads = workers;

    if (*eval_cmd) {
      eopts.selection = selection();
      std::optional<LayerPlan> plan;
      if (!plan_path.empty()) plan = LayerPlan::load(plan_path);
      const EvalReport report = perplexity(model, plan ? &*plan : nullptr, corpus, eopts);
      std::cout << std::setprecision(10) << "perplexity " << report.perplexity << " over "
                << report.predicted_tokens << " predicted tokens\n";
      if (!out_path.empty()) write_file(out_path, report.to_json());
      return 0;
    }

    if (*layerwise) {
      const int l_sink = resolve_l_sink(model, corpus, l_sink_flag, tau, context_len);
      const auto criteria = parse_criteria(criteria_text);
      layerwise_comparison(model, corpus, keep_ratio, criteria, l_sink, eopts).write_csv(out_path);
      std::cout << "wrote " << out_path.string() << '\n';
      return 0;
    }

    if (*ablate) {
      const LayerPlan plan = LayerPlan::load(plan_path);
      const auto rows = ablation_grid(model, plan, corpus, eopts, seed);
      write_ablation_csv(rows, out_path);
      std::cout << "wrote " << out_path.string() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
