#include "orthorank/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace orthorank {

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

void SimilarityMatrix::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << corner_label;
  for (const auto& c : col_labels) out << ',' << c;
  out << '\n' << std::setprecision(12);
  for (size_t r = 0; r < rows(); ++r) {
    out << row_labels[r];
    for (size_t c = 0; c < cols(); ++c) out << ',' << at(r, c);
    out << '\n';
  }
}

SimilarityMatrix sink_token_similarity(const HiddenTrace& trace, std::span<const int> positions) {
  SimilarityMatrix m;
  m.kind = SimilarityKind::sink_vs_tokens;
  m.corner_label = "layer";
  for (int p : positions) {
    if (p == 0) throw UsageError("sink comparison positions must exclude the sink (0)");
    if (p < 0 || p >= trace.seq_len()) {
      throw UsageError("position " + std::to_string(p) + " out of range for a trace of length " +
                       std::to_string(trace.seq_len()));
    }
    m.subjects.push_back(p);
    m.col_labels.push_back("p" + std::to_string(p));
  }
  for (int l = 0; l < trace.n_layers(); ++l) {
    m.row_labels.push_back(std::to_string(l));
    const Tensor& h = trace.normalized[l];
    for (int p : positions) m.values.push_back(cosine_similarity(h.row(0), h.row(p)));
  }
  return m;
}

SimilarityMatrix cross_layer_self_similarity(const HiddenTrace& trace, int position) {
  if (position < 0 || position >= trace.seq_len()) {
    throw UsageError("position " + std::to_string(position) + " out of range for a trace of length " +
                     std::to_string(trace.seq_len()));
  }
  SimilarityMatrix m;
  m.kind = SimilarityKind::token_across_layers;
  m.corner_label = "layer";
  m.subjects = {position};
  const int n = trace.n_layers();
  for (int l = 0; l < n; ++l) {
    m.row_labels.push_back(std::to_string(l));
    m.col_labels.push_back(std::to_string(l));
  }
  m.values.resize(static_cast<size_t>(n) * n);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      m.values[static_cast<size_t>(a) * n + b] = cosine_similarity(
          trace.normalized[a].row(position), trace.normalized[b].row(position));
    }
  }
  return m;
}

NormProfile norm_profile(const HiddenTrace& trace) {
  NormProfile out;
  for (int l = 0; l < trace.n_layers(); ++l) {
    const Tensor& h = trace.normalized[l];
    std::vector<double> norms;
    for (int t = 0; t < trace.seq_len(); ++t) {
      double ss = 0.0;
      for (float v : h.row(t)) ss += static_cast<double>(v) * v;
      norms.push_back(std::sqrt(ss));
    }
    double mean = 0.0, var = 0.0;
    const size_t n = norms.size() > 1 ? norms.size() - 1 : 0;
    for (size_t t = 1; t < norms.size(); ++t) mean += norms[t];
    if (n > 0) mean /= static_cast<double>(n);
    for (size_t t = 1; t < norms.size(); ++t) var += (norms[t] - mean) * (norms[t] - mean);
    if (n > 0) var /= static_cast<double>(n);
    out.cv.push_back(mean > 0.0 ? std::sqrt(var) / mean : 0.0);
    out.norms.push_back(std::move(norms));
  }
  return out;
}

void NormProfile::write_csv(const std::filesystem::path& norms_path,
                            const std::filesystem::path& cv_path) const {
  std::ofstream out(norms_path);
  std::ofstream cv_out(cv_path);
  if (!out || !cv_out) throw UsageError("cannot write norm CSVs");
  out << "layer,position,norm\n" << std::setprecision(12);
  cv_out << "layer,cv\n" << std::setprecision(12);
  for (size_t l = 0; l < norms.size(); ++l) {
    for (size_t t = 0; t < norms[l].size(); ++t) out << l << ',' << t << ',' << norms[l][t] << '\n';
    cv_out << l << ',' << cv[l] << '\n';
  }
}

std::vector<double> scaling_agreement(const Tensor& hidden, std::span<const float> gain,
                                      double eps) {
  if (!(eps > 0.0)) throw ConfigError("scaling_agreement: eps must be positive");
  if (hidden.rank() != 2 || hidden.dim(1) != static_cast<int64_t>(gain.size())) {
    throw DimensionError("scaling_agreement: gain length must match the state width");
  }
  // Cosine is invariant to rescaling the gain; dividing by its largest
  // magnitude makes a constant gain exactly the identity.
  double gmax = 0.0;
  for (float g : gain) gmax = std::max(gmax, std::fabs(static_cast<double>(g)));
  const int64_t d = hidden.dim(1);
  std::vector<double> out;
  for (int64_t t = 0; t < hidden.dim(0); ++t) {
    const auto x = hidden.row(t);
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    const double rms = std::sqrt(ss / static_cast<double>(d) + eps);
    double an = 0.0, aa = 0.0, nn = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double n = static_cast<double>(x[j]) / rms;
      const double a = gmax > 0.0 ? (static_cast<double>(gain[j]) / gmax) * n : 0.0;
      an += a * n;
      aa += a * a;
      nn += n * n;
    }
    out.push_back(aa == 0.0 || nn == 0.0 ? 0.0 : std::clamp(an / std::sqrt(aa * nn), -1.0, 1.0));
  }
  return out;
}

std::vector<int> parse_positions(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      if (auto dots = item.find(".."); dots != std::string::npos) {
        const int lo = std::stoi(item.substr(0, dots));
        const int hi = std::stoi(item.substr(dots + 2));
        if (hi < lo) throw UsageError("empty position range '" + item + "'");
        for (int p = lo; p <= hi; ++p) out.push_back(p);
      } else {
        out.push_back(std::stoi(item));
      }
    } catch (const std::logic_error&) {
      throw UsageError("cannot parse position list '" + text + "'");
    }
  }
  return out;
}

}  // namespace orthorank
