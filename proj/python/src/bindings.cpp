#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "orthorank/analysis.hpp"
#include "orthorank/calibration.hpp"
#include "orthorank/checkpoint.hpp"
#include "orthorank/errors.hpp"
#include "orthorank/eval.hpp"
#include "orthorank/model.hpp"
#include "orthorank/selection.hpp"
#include "orthorank/trace.hpp"

namespace py = pybind11;
using namespace orthorank;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_array(const Tensor& t) {
  py::array_t<float> out(t.shape());
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<double> to_array(const SimilarityMatrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.values.begin(), m.values.end(), out.mutable_data());
  return out;
}

std::vector<float> as_floats(const FloatArray& a) { return {a.data(), a.data() + a.size()}; }

py::object parse_json(const std::string& text) {
  return py::module_::import("json").attr("loads")(text);
}

std::optional<LayerPlan> plan_arg(const std::optional<std::string>& plan_json) {
  if (!plan_json) return std::nullopt;
  return LayerPlan::from_json(*plan_json);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sink-orthogonal token selection runtime";

  auto base = py::register_exception<Error>(m, "OrthoRankError", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<LoadError>(m, "LoadError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<StateError>(m, "StateError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init([](int n_layers, int d_model, int n_heads, int n_kv_heads, int d_ffn,
                       int vocab_size, double rope_theta, double norm_eps, bool tied) {
             ModelConfig c;
             c.n_layers = n_layers;
             c.d_model = d_model;
             c.n_heads = n_heads;
             c.n_kv_heads = n_kv_heads > 0 ? n_kv_heads : n_heads;
             c.d_head = n_heads > 0 ? d_model / n_heads : 0;
             c.d_ffn = d_ffn;
             c.vocab_size = vocab_size;
             c.rope_theta = rope_theta;
             c.norm_eps = norm_eps;
             c.tied_embeddings = tied;
             c.validate();
             return c;
           }),
           py::arg("n_layers"), py::arg("d_model"), py::arg("n_heads"), py::arg("n_kv_heads") = 0,
           py::arg("d_ffn"), py::arg("vocab_size"), py::arg("rope_theta") = 10000.0,
           py::arg("norm_eps") = 1e-5, py::arg("tied_embeddings") = false)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("n_kv_heads", &ModelConfig::n_kv_heads)
      .def_readwrite("d_head", &ModelConfig::d_head)
      .def_readwrite("d_ffn", &ModelConfig::d_ffn)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("rope_theta", &ModelConfig::rope_theta)
      .def_readwrite("norm_eps", &ModelConfig::norm_eps)
      .def_readwrite("tied_embeddings", &ModelConfig::tied_embeddings)
      .def("validate", &ModelConfig::validate)
      .def("to_json", [](const ModelConfig& c) { return config_to_json(c); })
      .def_static("from_json", &config_from_json)
      .def(py::self == py::self);

  m.def(
      "synthesize_model",
      [](const ModelConfig& config, const std::filesystem::path& out, uint64_t seed,
         std::optional<int> sink_layer, float sink_strength) {
        SynthOptions o;
        o.seed = seed;
        o.sink_layer = sink_layer;
        o.sink_strength = sink_strength;
        return generate_synthetic_model(config, o, out);
      },
      py::arg("config"), py::arg("out"), py::arg("seed") = 0, py::arg("sink_layer") = py::none(),
      py::arg("sink_strength") = 8.0f, "Writes a seeded synthetic checkpoint directory.");
  m.def("checkpoint_hash", &checkpoint_hash);

  py::class_<Model>(m, "Model")
      .def_static("load", &Model::load, py::arg("path"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("n_layers", &Model::n_layers)
      .def(
          "logits",
          [](const Model& model, const std::vector<int32_t>& tokens) {
            return to_array(forward_dense(model, tokens).logits);
          },
          py::arg("tokens"))
      .def(
          "hidden_states",
          [](const Model& model, const std::vector<int32_t>& tokens, bool normalized) {
            TraceOptions opts;
            opts.capture = true;
            const auto trace = forward_dense(model, tokens, opts).trace;
            py::list out;
            for (const Tensor& t : normalized ? trace.normalized : trace.hidden) {
              out.append(to_array(t));
            }
            return out;
          },
          py::arg("tokens"), py::arg("normalized") = true,
          "Per-layer block inputs, or their pre-attention RMSNorm outputs.")
      .def(
          "detect_sink_layer",
          [](const Model& model, const std::vector<int32_t>& tokens, double tau) {
            return detect_sink_layer(model, tokens, tau);
          },
          py::arg("tokens"), py::arg("tau") = 0.3);

  m.def(
      "compute_scores",
      [](const FloatArray& states, int sink_index) {
        return compute_scores(to_tensor(states), sink_index).values;
      },
      py::arg("states"), py::arg("sink_index") = 0);
  m.def(
      "select_topk",
      [](const FloatArray& scores, double keep_ratio) {
        return select_topk(as_floats(scores), keep_ratio).selected;
      },
      py::arg("scores"), py::arg("keep_ratio"));
  m.def(
      "decode_select",
      [](std::vector<float> history, float score, double keep_ratio) {
        const bool keep = decode_select(history, score, keep_ratio);
        return py::make_tuple(keep, history);
      },
      py::arg("history"), py::arg("score"), py::arg("keep_ratio"),
      "Returns (selected, updated_history).");
  m.def("keep_count", &keep_count, py::arg("keep_ratio"), py::arg("n"));
  m.def(
      "cos_gradient",
      [](const std::vector<double>& h0, const std::vector<double>& hi) {
        return cos_gradient<double>(h0, hi);
      },
      py::arg("sink"), py::arg("token"));
  m.def(
      "importance_norm_sq",
      [](const std::vector<double>& h0, const std::vector<double>& hi) {
        return importance_norm_sq<double>(h0, hi);
      },
      py::arg("sink"), py::arg("token"));

  m.def("effective_sparsity", &effective_sparsity, py::arg("layer_fraction"),
        py::arg("keep_ratio"));
  m.def(
      "plan_layer_count",
      [](int n_layers, int l_sink, double sparsity, double keep_ratio) {
        return plan_from_sparsity(n_layers, l_sink, sparsity, keep_ratio).layer_count;
      },
      py::arg("n_layers"), py::arg("l_sink"), py::arg("sparsity"), py::arg("keep_ratio"));
  m.def(
      "flop_ratio",
      [](const ModelConfig& config, const std::string& plan_json, int64_t tokens) {
        return flop_count(config, LayerPlan::from_json(plan_json), tokens).ratio;
      },
      py::arg("config"), py::arg("plan"), py::arg("tokens"));

  m.def(
      "calibrate",
      [](const Model& model, const std::vector<int32_t>& corpus, double sparsity,
         double keep_ratio, int l_sink, int context_len, int max_chunks, bool one_shot,
         int threads) {
        const auto target = plan_from_sparsity(model.n_layers(), l_sink, sparsity, keep_ratio);
        CalibrationOptions o;
        o.context_len = context_len;
        o.max_chunks = max_chunks;
        o.one_shot = one_shot;
        o.threads = threads;
        o.l_sink = l_sink;
        o.target_sparsity = sparsity;
        py::gil_scoped_release release;
        return calibrate_greedy(model, corpus, target.layer_count, keep_ratio, target.eligible, o)
            .plan.to_json();
      },
      py::arg("model"), py::arg("corpus"), py::arg("sparsity"), py::arg("keep_ratio") = 0.333,
      py::arg("l_sink"), py::arg("context_len") = 256, py::arg("max_chunks") = 8,
      py::arg("one_shot") = false, py::arg("threads") = 1, "Returns the plan as JSON text.");

  m.def(
      "perplexity",
      [](const Model& model, const std::vector<int32_t>& corpus,
         const std::optional<std::string>& plan_json, int context_len, int max_chunks,
         const std::string& criterion, bool compute_kv, int threads) {
        const auto plan = plan_arg(plan_json);
        EvalOptions o;
        o.context_len = context_len;
        o.max_chunks = max_chunks;
        o.selection.criterion = Criterion::parse(criterion);
        o.selection.compute_kv_for_unselected = compute_kv;
        o.threads = threads;
        std::string report;
        {
          py::gil_scoped_release release;
          report = perplexity(model, plan ? &*plan : nullptr, corpus, o).to_json();
        }
        return parse_json(report);
      },
      py::arg("model"), py::arg("corpus"), py::arg("plan") = py::none(),
      py::arg("context_len") = 256, py::arg("max_chunks") = 0,
      py::arg("criterion") = "orthogonal_asc", py::arg("compute_kv") = true,
      py::arg("threads") = 1, "Returns the evaluation report as a dict.");

  m.def(
      "sample_corpus",
      [](const Model& model, int n_docs, int doc_len, double temperature, uint64_t seed) {
        return sample_corpus(model, n_docs, doc_len, temperature, seed);
      },
      py::arg("model"), py::arg("n_docs"), py::arg("doc_len"), py::arg("temperature") = 1.0,
      py::arg("seed") = 0);
  m.def(
      "generate",
      [](const Model& model, const std::vector<int32_t>& prompt, int max_new,
         const std::optional<std::string>& plan_json) {
        const auto plan = plan_arg(plan_json);
        return greedy_generate(model, prompt, max_new, plan ? &*plan : nullptr);
      },
      py::arg("model"), py::arg("prompt"), py::arg("max_new"), py::arg("plan") = py::none());

  m.def(
      "synthetic_sink_trace",
      [](int n_layers, int seq_len, int d, int l_sink, double alignment_rate, uint64_t seed) {
        const HiddenTrace t =
            generate_synthetic_sink_trace(n_layers, seq_len, d, l_sink, alignment_rate, seed);
        py::list out;
        for (const Tensor& layer : t.normalized) out.append(to_array(layer));
        return out;
      },
      py::arg("n_layers"), py::arg("seq_len"), py::arg("d"), py::arg("l_sink"),
      py::arg("alignment_rate"), py::arg("seed") = 0,
      "Per-layer [seq_len, d] unit vectors with a static sink at position 0.");
  m.def(
      "sink_similarity",
      [](const std::vector<FloatArray>& layers, const std::vector<int>& positions) {
        HiddenTrace t;
        for (const auto& a : layers) t.normalized.push_back(to_tensor(a));
        t.hidden = t.normalized;
        return to_array(sink_token_similarity(t, positions));
      },
      py::arg("layers"), py::arg("positions"));
  m.def(
      "cross_layer_similarity",
      [](const std::vector<FloatArray>& layers, int position) {
        HiddenTrace t;
        for (const auto& a : layers) t.normalized.push_back(to_tensor(a));
        t.hidden = t.normalized;
        return to_array(cross_layer_self_similarity(t, position));
      },
      py::arg("layers"), py::arg("position"));
}
