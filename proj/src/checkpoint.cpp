#include "orthorank/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "orthorank/hashing.hpp"

namespace orthorank {

using nlohmann::json;
namespace fs = std::filesystem;

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid model config: " + what);
  };
  require(n_layers >= 1, "n_layers must be >= 1");
  require(d_model >= 1, "d_model must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(n_kv_heads >= 1, "n_kv_heads must be >= 1");
  require(d_head >= 1, "d_head must be >= 1");
  require(d_ffn >= 1, "d_ffn must be >= 1");
  require(vocab_size >= 1, "vocab_size must be >= 1");
  require(n_heads % n_kv_heads == 0, "n_heads (" + std::to_string(n_heads) +
                                         ") must be divisible by n_kv_heads (" +
                                         std::to_string(n_kv_heads) + ")");
  require(d_model == n_heads * d_head,
          "d_model (" + std::to_string(d_model) + ") must equal n_heads * d_head (" +
              std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
  require(d_head % 2 == 0, "d_head must be even for rotary embeddings");
  require(rope_theta > 0.0, "rope_theta must be positive");
  require(norm_eps > 0.0, "norm_eps must be positive");
}

std::vector<std::pair<std::string, std::vector<int64_t>>> expected_tensors(const ModelConfig& c) {
  const int64_t d = c.d_model, q = int64_t{c.n_heads} * c.d_head,
                kv = int64_t{c.n_kv_heads} * c.d_head, f = c.d_ffn, v = c.vocab_size;
  std::vector<std::pair<std::string, std::vector<int64_t>>> out;
  out.emplace_back("embed.weight", std::vector<int64_t>{v, d});
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "attn_norm.gain", std::vector<int64_t>{d});
    out.emplace_back(p + "attn.wq.weight", std::vector<int64_t>{q, d});
    out.emplace_back(p + "attn.wk.weight", std::vector<int64_t>{kv, d});
    out.emplace_back(p + "attn.wv.weight", std::vector<int64_t>{kv, d});
    out.emplace_back(p + "attn.wo.weight", std::vector<int64_t>{d, q});
    out.emplace_back(p + "ffn_norm.gain", std::vector<int64_t>{d});
    out.emplace_back(p + "ffn.w_gate.weight", std::vector<int64_t>{f, d});
    out.emplace_back(p + "ffn.w_up.weight", std::vector<int64_t>{f, d});
    out.emplace_back(p + "ffn.w_down.weight", std::vector<int64_t>{d, f});
  }
  out.emplace_back("final_norm.gain", std::vector<int64_t>{d});
  if (!c.tied_embeddings) out.emplace_back("lm_head.weight", std::vector<int64_t>{v, d});
  return out;
}

std::string config_to_json(const ModelConfig& c) {
  json j = {{"n_layers", c.n_layers},     {"d_model", c.d_model},
            {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads},
            {"d_head", c.d_head},         {"d_ffn", c.d_ffn},
            {"vocab_size", c.vocab_size}, {"rope_theta", c.rope_theta},
            {"norm_eps", c.norm_eps},     {"tied_embeddings", c.tied_embeddings}};
  return j.dump(2);
}

ModelConfig config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_kv_heads = j.at("n_kv_heads").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.d_ffn = j.at("d_ffn").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.tied_embeddings = j.at("tied_embeddings").get<bool>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("config.json: ") + e.what());
  }
  return c;
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CheckpointManifest manifest_from_json(const std::string& text) {
  CheckpointManifest m;
  try {
    const json j = json::parse(text);
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.name = e.at("name").get<std::string>();
      entry.dtype = e.at("dtype").get<std::string>();
      entry.shape = e.at("shape").get<std::vector<int64_t>>();
      entry.byte_offset = e.at("byte_offset").get<uint64_t>();
      m.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("manifest.json: ") + e.what());
  }
  return m;
}

std::string manifest_to_json(const CheckpointManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries) {
    entries.push_back(
        {{"name", e.name}, {"dtype", e.dtype}, {"shape", e.shape}, {"byte_offset", e.byte_offset}});
  }
  return json{{"entries", entries}}.dump(2);
}

uint64_t entry_bytes(const ManifestEntry& e) {
  uint64_t n = 4;
  for (int64_t s : e.shape) n *= static_cast<uint64_t>(s);
  return n;
}

float load_f32_le(const char* p) {
  uint32_t bits;
  std::memcpy(&bits, p, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

void store_f32_le(float v, char* p) {
  uint32_t bits = std::bit_cast<uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  std::memcpy(p, &bits, 4);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << text << '\n';
}

}  // namespace

void validate_manifest(const CheckpointManifest& manifest, uint64_t blob_bytes) {
  const ManifestEntry* prev = nullptr;
  uint64_t prev_end = 0;
  uint64_t required = 0;
  for (const auto& e : manifest.entries) {
    if (e.dtype != "f32") throw LoadError("tensor " + e.name + ": unknown dtype '" + e.dtype + "'");
    if (e.shape.empty()) throw LoadError("tensor " + e.name + ": empty shape");
    for (int64_t s : e.shape) {
      if (s < 1) throw LoadError("tensor " + e.name + ": non-positive extent in shape");
    }
    if (prev != nullptr && e.byte_offset < prev_end) {
      throw LoadError("tensor " + e.name + " at offset " + std::to_string(e.byte_offset) +
                      " overlaps tensor " + prev->name + " ending at offset " +
                      std::to_string(prev_end));
    }
    prev = &e;
    prev_end = e.byte_offset + entry_bytes(e);
    required = std::max(required, prev_end);
  }
  if (required > blob_bytes) {
    throw LoadError("weights.bin is " + std::to_string(blob_bytes) + " bytes, expected at least " +
                    std::to_string(required) + " (tensor " + prev->name + ")");
  }
}

ModelConfig load_config(const fs::path& dir) {
  ModelConfig c = config_from_json(read_text(dir / "config.json"));
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw LoadError(std::string("config.json: ") + e.what());
  }
  return c;
}

Checkpoint load_checkpoint(const fs::path& dir) {
  Checkpoint ck;
  ck.config = load_config(dir);
  const CheckpointManifest manifest = manifest_from_json(read_text(dir / "manifest.json"));

  const fs::path blob_path = dir / "weights.bin";
  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + blob_path.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  validate_manifest(manifest, blob.size());

  std::map<std::string, std::vector<int64_t>> expected;
  for (auto& [name, shape] : expected_tensors(ck.config)) expected.emplace(name, shape);

  for (const auto& e : manifest.entries) {
    auto it = expected.find(e.name);
    if (it == expected.end()) throw LoadError("unexpected tensor " + e.name + " in manifest");
    if (it->second != e.shape) {
      throw LoadError("tensor " + e.name + ": shape " + shape_to_string(e.shape) +
                      " does not match config shape " + shape_to_string(it->second));
    }
    if (ck.weights.count(e.name)) throw LoadError("tensor " + e.name + " listed twice");
    std::vector<float> data(entry_bytes(e) / 4);
    const char* src = blob.data() + e.byte_offset;
    for (size_t i = 0; i < data.size(); ++i) data[i] = load_f32_le(src + 4 * i);
    ck.weights.emplace(e.name, Tensor(e.shape, std::move(data)));
  }
  for (const auto& [name, shape] : expected) {
    if (!ck.weights.count(name)) throw LoadError("missing tensor " + name);
  }
  return ck;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ck) {
  ck.config.validate();
  fs::create_directories(dir);
  CheckpointManifest manifest;
  std::vector<char> blob;
  for (const auto& [name, shape] : expected_tensors(ck.config)) {
    auto it = ck.weights.find(name);
    if (it == ck.weights.end()) throw ConfigError("save_checkpoint: missing tensor " + name);
    if (it->second.shape() != shape) {
      throw ConfigError("save_checkpoint: tensor " + name + " has shape " +
                        shape_to_string(it->second.shape()) + ", expected " +
                        shape_to_string(shape));
    }
    manifest.entries.push_back({name, "f32", shape, blob.size()});
    const size_t base = blob.size();
    blob.resize(base + 4 * it->second.data().size());
    for (size_t i = 0; i < it->second.data().size(); ++i) {
      store_f32_le(it->second.data()[i], blob.data() + base + 4 * i);
    }
  }
  write_text(dir / "config.json", config_to_json(ck.config));
  write_text(dir / "manifest.json", manifest_to_json(manifest));
  std::ofstream out(dir / "weights.bin", std::ios::binary);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw UsageError("cannot write " + (dir / "weights.bin").string());
}

std::string checkpoint_hash(const fs::path& dir) { return sha256_file(dir / "weights.bin"); }

Checkpoint synthesize_model(const ModelConfig& config, const SynthOptions& options) {
  config.validate();
  Checkpoint ck;
  ck.config = config;
  std::mt19937_64 rng(options.seed);
  const float scale = 1.0f / std::sqrt(static_cast<float>(config.d_model));
  // 24 high bits -> exactly representable float in [-1, 1).
  auto uniform = [&rng]() {
    return static_cast<float>(rng() >> 40) * (1.0f / 8388608.0f) - 1.0f;
  };
  for (const auto& [name, shape] : expected_tensors(config)) {
    Tensor t(shape);
    const bool is_gain = name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
    for (float& v : t.data()) v = is_gain ? 1.0f : uniform() * scale;
    ck.weights.emplace(name, std::move(t));
  }

  if (options.sink_layer) {
    const int first = *options.sink_layer;
    if (first < 0 || first >= config.n_layers) {
      throw ConfigError("sink_layer must lie in [0, n_layers)");
    }
    if (config.d_model < 2) throw ConfigError("planted sink needs d_model >= 2");
    Tensor& embed = ck.weights.at("embed.weight");
    for (int64_t t = 0; t < embed.dim(0); ++t) {
      embed.at(t, 0) = t == 0 ? 1.0f : 0.0f;
      embed.at(t, 1) = 1.0f;
    }
    const int dh = config.d_head;
    const int group = config.n_heads / config.n_kv_heads;
    const float a = options.sink_strength;
    for (int l = 0; l < config.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      // Residual dimensions 0 and 1 are read-only for every block.
      for (const char* w : {"attn.wo.weight", "ffn.w_down.weight"}) {
        Tensor& out_proj = ck.weights.at(p + w);
        for (int r = 0; r < 2; ++r) {
          for (float& v : out_proj.row(r)) v = 0.0f;
        }
      }
      if (l < first) continue;
      Tensor& wq = ck.weights.at(p + "attn.wq.weight");
      Tensor& wk = ck.weights.at(p + "attn.wk.weight");
      for (int g = 0; g < config.n_kv_heads; ++g) {
        if (config.n_kv_heads > 1 && g % 2 != 0) continue;
        // The slowest rotary pair carries the sink signal.
        for (int j = 0; j < dh; ++j) {
          for (float& v : wk.row(g * dh + j)) v = 0.0f;
        }
        wk.at(g * dh + dh - 2, 0) = a;
        for (int h = g * group; h < (g + 1) * group; ++h) {
          for (int j = 0; j < dh; ++j) {
            for (float& v : wq.row(h * dh + j)) v = 0.0f;
          }
          wq.at(h * dh + dh - 2, 1) = a;
        }
      }
    }
  }
  return ck;
}

fs::path generate_synthetic_model(const ModelConfig& config, uint64_t seed, const fs::path& dir) {
  SynthOptions options;
  options.seed = seed;
  return generate_synthetic_model(config, options, dir);
}

fs::path generate_synthetic_model(const ModelConfig& config, const SynthOptions& options,
                                  const fs::path& dir) {
  save_checkpoint(dir, synthesize_model(config, options));
  return dir;
}

}  // namespace orthorank
