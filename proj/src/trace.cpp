#include "orthorank/trace.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>

#include "orthorank/errors.hpp"

namespace orthorank {
namespace {

std::vector<double> random_unit(std::mt19937_64& rng, int d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(d);
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (double& x : v) {
      x = normal(rng);
      n2 += x * x;
    }
  } while (n2 == 0.0);
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  return v;
}

void normalize(std::vector<double>& v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
}

// Moves unit vector `a` by fraction t of its angle toward unit vector `s`.
std::vector<double> slerp(const std::vector<double>& a, const std::vector<double>& s, double t) {
  double c = 0.0;
  for (size_t i = 0; i < a.size(); ++i) c += a[i] * s[i];
  c = std::clamp(c, -1.0, 1.0);
  const double theta = std::acos(c);
  if (theta < 1e-15 || t == 0.0) return a;
  const double sin_theta = std::sin(theta);
  const double wa = std::sin((1.0 - t) * theta) / sin_theta;
  const double ws = std::sin(t * theta) / sin_theta;
  std::vector<double> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = wa * a[i] + ws * s[i];
  normalize(out);
  return out;
}

}  // namespace

HiddenTrace generate_synthetic_sink_trace(int n_layers, int seq_len, int d, int l_sink,
                                          double alignment_rate, uint64_t seed) {
  if (n_layers < 1 || seq_len < 1 || d < 2) {
    throw UsageError("synthetic trace needs n_layers >= 1, seq_len >= 1, d >= 2");
  }
  if (l_sink < 0 || l_sink >= n_layers) throw UsageError("l_sink must lie in [0, n_layers)");
  if (alignment_rate < 0.0 || alignment_rate >= 1.0) {
    throw UsageError("alignment_rate must lie in [0, 1)");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> state(seq_len);
  for (auto& v : state) v = random_unit(rng, d);
  const std::vector<double> sink = random_unit(rng, d);

  HiddenTrace trace;
  for (int l = 0; l < n_layers; ++l) {
    if (l > l_sink) {
      state[0] = sink;
      for (int t = 1; t < seq_len; ++t) state[t] = slerp(state[t], sink, alignment_rate);
    }
    Tensor layer({seq_len, d});
    for (int t = 0; t < seq_len; ++t) {
      for (int j = 0; j < d; ++j) layer.at(t, j) = static_cast<float>(state[t][j]);
    }
    trace.hidden.push_back(layer);
    trace.normalized.push_back(std::move(layer));
  }
  return trace;
}

void write_trace_csv(const HiddenTrace& trace, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream norms(dir / "trace_norms.csv");
  norms << "layer,position,norm\n" << std::setprecision(9);
  for (int l = 0; l < trace.n_layers(); ++l) {
    std::ofstream out(dir / ("trace_layer" + std::to_string(l) + ".csv"));
    out << "layer,position";
    for (int j = 0; j < trace.dim(); ++j) out << ",h" << j;
    out << '\n' << std::setprecision(9);
    const Tensor& h = trace.normalized[l];
    for (int t = 0; t < trace.seq_len(); ++t) {
      out << l << ',' << t;
      for (float v : h.row(t)) out << ',' << v;
      out << '\n';
      norms << l << ',' << t << ',' << l2_norm<float>(h.row(t)) << '\n';
    }
  }
  if (!norms) throw UsageError("cannot write trace CSVs to " + dir.string());
}

}  // namespace orthorank
