#include <doctest.h>

#include <cmath>
#include <fstream>

#include "orthorank/analysis.hpp"
#include "orthorank/errors.hpp"
#include "test_support.hpp"

using namespace orthorank;
using namespace orthorank::testing;

TEST_CASE("cosine_similarity") {
  const std::vector<float> a{1, 2, 2}, b{2, 4, 4}, c{-1, -2, -2}, z{0, 0, 0}, e{2, 0, -1};
  CHECK(cosine_similarity(a, b) == 1.0);
  CHECK(cosine_similarity(a, c) == -1.0);
  CHECK(cosine_similarity(a, z) == 0.0);
  CHECK(cosine_similarity(a, e) == 0.0);
  CHECK(cosine_similarity(std::vector<float>{1, 0}, std::vector<float>{1, 1}) ==
        doctest::Approx(std::sqrt(0.5)));
}

TEST_CASE("sink versus token similarity") {
  const HiddenTrace trace = generate_synthetic_sink_trace(10, 12, 16, 2, 0.3, 82);
  const std::vector<int> pos{1, 5, 11};
  const SimilarityMatrix m = sink_token_similarity(trace, pos);
  CHECK(m.rows() == 10);
  CHECK(m.cols() == 3);
  for (size_t l = 0; l < 10; ++l) {
    for (size_t i = 0; i < 3; ++i) {
      CHECK(m.at(l, i) == cosine_similarity(trace.normalized[l].row(0),
                                            trace.normalized[l].row(pos[i])));
    }
  }
  // Tokens drift toward the sink after it forms.
  for (size_t i = 0; i < 3; ++i) CHECK(m.at(9, i) > m.at(3, i));

  CHECK_THROWS_AS(sink_token_similarity(trace, std::vector<int>{0}), UsageError);
  CHECK_THROWS_AS(sink_token_similarity(trace, std::vector<int>{12}), UsageError);

  const auto dir = scratch_dir("sim_csv");
  m.write_csv(dir / "m.csv");
  std::ifstream in(dir / "m.csv");
  std::string header;
  std::getline(in, header);
  CHECK(std::count(header.begin(), header.end(), ',') == 3);
}

TEST_CASE("identical tokens are fully similar") {
  HiddenTrace trace = generate_synthetic_sink_trace(4, 6, 8, 1, 0.0, 83);
  for (auto& t : trace.normalized) {
    for (int64_t r = 1; r < 6; ++r) {
      for (int64_t j = 0; j < 8; ++j) t.at(r, j) = t.at(0, j);
    }
  }
  const std::vector<int> pos{1, 2, 3, 4, 5};
  const SimilarityMatrix m = sink_token_similarity(trace, pos);
  for (double v : m.values) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cross-layer self similarity") {
  const int L = 12, l_sink = 2;
  const HiddenTrace trace = generate_synthetic_sink_trace(L, 10, 16, l_sink, 0.25, 84);
  const SimilarityMatrix m = cross_layer_self_similarity(trace, 4);
  REQUIRE(m.rows() == L);
  REQUIRE(m.cols() == L);
  for (int a = 0; a < L; ++a) {
    CHECK(m.at(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    for (int b = 0; b < L; ++b) CHECK(m.at(a, b) == m.at(b, a));
  }
  CHECK(m.at(l_sink + 1, L - 1) < m.at(l_sink + 1, l_sink + 2));
  CHECK_THROWS_AS(cross_layer_self_similarity(trace, 10), UsageError);
}

TEST_CASE("norm profile") {
  HiddenTrace trace = generate_synthetic_sink_trace(5, 8, 16, 1, 0.2, 85);
  const NormProfile unit = norm_profile(trace);
  REQUIRE(unit.norms.size() == 5);
  for (double cv : unit.cv) CHECK(cv == doctest::Approx(0.0).epsilon(1e-6));
  for (const auto& row : unit.norms) {
    for (double n : row) CHECK(n == doctest::Approx(1.0).epsilon(1e-6));
  }

  for (float& v : trace.normalized[3].row(2)) v *= 3.0f;
  const NormProfile scaled = norm_profile(trace);
  CHECK(scaled.norms[3][2] == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(scaled.cv[3] > 0.0);
  CHECK(scaled.cv[2] == unit.cv[2]);

  const auto dir = scratch_dir("norms");
  scaled.write_csv(dir / "norms.csv", dir / "cv.csv");
  CHECK(std::filesystem::exists(dir / "norms.csv"));
  CHECK(std::filesystem::exists(dir / "cv.csv"));
}

TEST_CASE("scaling agreement") {
  const Tensor h({3, 4}, {1, -2, 3, 0.5f, 4, 4, -1, 2, 0.1f, 0.2f, 0.3f, 0.4f});
  const std::vector<float> constant(4, 2.5f);
  for (double v : scaling_agreement(h, constant, 1e-6)) CHECK(v == doctest::Approx(1.0));
  const std::vector<float> skew{1, 0, 0, 0};
  const auto s = scaling_agreement(h, skew, 1e-6);
  CHECK(s[0] < 1.0);
  CHECK(s[0] == doctest::Approx(1.0 / std::sqrt(1 + 4 + 9 + 0.25)));
}

TEST_CASE("parse_positions") {
  CHECK(parse_positions("1..4") == std::vector<int>{1, 2, 3, 4});
  CHECK(parse_positions("0,50,100") == std::vector<int>{0, 50, 100});
  CHECK(parse_positions("1..3,7") == std::vector<int>{1, 2, 3, 7});
  CHECK_THROWS_AS(parse_positions("3..1"), UsageError);
  CHECK_THROWS_AS(parse_positions("a"), UsageError);
}
