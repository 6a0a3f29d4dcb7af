#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "orthorank/errors.hpp"
#include "orthorank/model.hpp"
#include "orthorank/selection.hpp"
#include "test_support.hpp"

using namespace orthorank;
using namespace orthorank::testing;

namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();

Tensor random_states(int64_t T, int64_t d, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Tensor t({T, d});
  for (float& v : t.data()) v = n(rng);
  return t;
}

}  // namespace

TEST_CASE("compute_scores") {
  const Tensor s({3, 3}, {1, 0, 0, 0, 1, 0, -2, 0, 0});
  const SelectionScores sc = compute_scores(s);
  CHECK(sc.values[0] == kInf);
  CHECK(sc.values[1] == 0.0f);
  CHECK(sc.values[2] == 2.0f);
}

TEST_CASE("select_topk examples") {
  CHECK(keep_count(0.333, 10) == 3);
  CHECK(keep_count(1.0, 7) == 7);
  CHECK(keep_count(0.0, 7) == 0);
  CHECK_THROWS_AS(keep_count(1.5, 7), UsageError);

  const std::vector<float> scores{kInf, 0.5f, 0.1f, 0.9f, 0.2f};
  const SelectionMask m = select_topk(scores, 0.4);
  CHECK(m.k == 2);
  CHECK(m.selected == std::vector<int>{2, 4});

  const SelectionMask all = select_topk(scores, 1.0);
  CHECK(all.selected == std::vector<int>{0, 1, 2, 3, 4});

  const std::vector<float> ties{kInf, 1, 1, 1, 1, 1, 1};
  CHECK(select_topk(ties, 0.5).selected == std::vector<int>{1, 2, 3});
}

TEST_CASE("decode_select") {
  std::vector<float> h{kInf, 0.1f, 0.2f, 0.9f};
  CHECK(decode_select(h, 0.15f, 0.5));
  CHECK(h.size() == 5);
  CHECK(h.back() == 0.15f);

  std::vector<float> none{kInf, 0.1f, 0.2f};
  CHECK_FALSE(decode_select(none, 0.0f, 0.0));
  CHECK(none.size() == 4);

  std::vector<float> h2{kInf, 0.3f, 0.4f, 0.5f};
  CHECK(decode_select(h2, 0.01f, 0.333));

  // Incumbents win ties: k = floor(0.5 * 4) = 2, and two entries <= 0.3.
  std::vector<float> tie{kInf, 0.3f, 0.3f};
  CHECK_FALSE(decode_select(tie, 0.3f, 0.5));
}

TEST_CASE("decode decisions agree with prefill when the boundary is stable") {
  const std::vector<float> prefix{kInf, 1.0f, 2.0f};
  const std::vector<float> later{0.5f, 3.0f, 0.1f};
  const double p = 0.5;
  std::vector<float> history = prefix;
  std::vector<int> decoded;
  for (int i : select_topk(prefix, p).selected) decoded.push_back(i);
  for (size_t j = 0; j < later.size(); ++j) {
    if (decode_select(history, later[j], p)) decoded.push_back(static_cast<int>(prefix.size() + j));
  }
  CHECK(select_topk(history, p).selected == decoded);
}

TEST_CASE("cos_gradient and importance") {
  const std::vector<double> h0{1, 0}, hi{0, 2};
  const auto g = cos_gradient<double>(h0, hi);
  CHECK(g[0] == doctest::Approx(0.5));
  CHECK(g[1] == doctest::Approx(0.0));

  const std::vector<double> a{1, -2, 3}, b{3, -6, 9};
  for (double v : cos_gradient<double>(a, b)) CHECK(std::fabs(v) < 1e-15);
  CHECK(importance_norm_sq<double>(a, b) == doctest::Approx(0.0));

  const std::vector<double> u{0, 1, 0}, e{1, 0, 0};
  CHECK(importance_norm_sq<double>(u, e) == doctest::Approx(1.0));

  const std::vector<double> zero{0, 0, 0};
  CHECK_THROWS_AS(cos_gradient<double>(zero, a), DomainError);
  CHECK_THROWS_AS(importance_norm_sq<double>(a, zero), DomainError);
  CHECK_THROWS_AS(cos_gradient<double>(a, std::vector<double>{1, 2}), DimensionError);

  SUBCASE("finite differences with step 1e-6") {
    std::mt19937_64 rng(41);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> x(16), y(16);
    for (double& v : x) v = n(rng);
    for (double& v : y) v = n(rng);
    const auto grad = cos_gradient<double>(x, y);
    double diff = 0.0, norm = 0.0;
    for (size_t j = 0; j < y.size(); ++j) {
      std::vector<double> up = y, down = y;
      up[j] += 1e-6;
      down[j] -= 1e-6;
      const double fd = (cosine<double>(x, up) - cosine<double>(x, down)) / 2e-6;
      diff += (fd - grad[j]) * (fd - grad[j]);
      norm += grad[j] * grad[j];
    }
    CHECK(std::sqrt(diff / norm) < 1e-6);
  }
}

TEST_CASE("ranking properties") {
  SUBCASE("equal norms: inner products rank like cosines") {
    Tensor s = random_states(40, 8, 42);
    for (int64_t t = 1; t < 40; ++t) {
      const float n = l2_norm<float>(s.row(t));
      for (float& v : s.row(t)) v *= 2.5f / n;
    }
    const auto ip = compute_scores(s).values;
    std::vector<float> cs(ip.size());
    for (int64_t t = 1; t < 40; ++t) {
      cs[t] = std::fabs(cosine<float>(s.row(0), s.row(t)));
    }
    cs[0] = kInf;
    CHECK(select_topk(ip, 0.5).selected == select_topk(cs, 0.5).selected);
  }
  SUBCASE("scaling the sink leaves the mask unchanged") {
    Tensor s = random_states(50, 8, 43);
    const auto before = select_topk(compute_scores(s), 0.333).selected;
    for (float& v : s.row(0)) v *= 4.0f;
    CHECK(select_topk(compute_scores(s), 0.333).selected == before);
  }
}

TEST_CASE("criteria") {
  CHECK(Criterion::parse("orthogonal_asc") == Criterion{});
  const Criterion r = Criterion::parse("random:7@raw_hidden");
  CHECK(r.kind == CriterionKind::random);
  CHECK(r.seed == 7);
  CHECK(r.stage == Stage::raw_hidden);
  CHECK(Criterion::parse(r.name()) == r);
  CHECK_THROWS_AS(Criterion::parse("sideways"), UsageError);
  CHECK_THROWS_AS(Criterion::parse("norm_asc@middle"), UsageError);

  const Tensor s({3, 2}, {1, 0, 3, 0, 0, 2});
  const std::vector<int64_t> pos{0, 1, 2};
  const auto keys = [&](const char* name) {
    return rank_keys(Criterion::parse(name), s, 1, pos);
  };
  CHECK(keys("orthogonal_asc") == std::vector<float>{kInf, 3, 0});
  CHECK(keys("orthogonal_desc") == std::vector<float>{kInf, -3, 0});
  CHECK(keys("norm_asc") == std::vector<float>{kInf, 3, 2});
  CHECK(keys("norm_desc") == std::vector<float>{kInf, -3, -2});
  CHECK(keys("random:1") == keys("random:1"));
  CHECK(keys("random:1") != keys("random:2"));
}

TEST_CASE("forward_orthorank_layer") {
  const ModelConfig c = tiny_config(4, 32, 4, 2, 64, 40);
  const Model model = tiny_model(c, 44, 1);
  const auto tokens = random_tokens(30, c.vocab_size, 45);
  Tensor x = embed_tokens(model, tokens);
  std::vector<int64_t> pos(30);
  std::iota(pos.begin(), pos.end(), 0);
  KVCache warm(c.n_layers);
  run_layers(model, x, pos, warm, nullptr, 0, 2);

  const auto r = forward_orthorank_layer(model, 2, x, 0.333);
  CHECK(r.mask.k == 9);
  CHECK(r.keys.dim(0) == 30);
  CHECK(std::find(r.mask.selected.begin(), r.mask.selected.end(), 0) == r.mask.selected.end());

  const auto no_kv = forward_orthorank_layer(model, 2, x, 0.333, {}, false);
  CHECK(no_kv.keys.dim(0) == 9);

  const auto zero = forward_orthorank_layer(model, 2, x, 0.0);
  CHECK(zero.mask.selected.empty());
  CHECK(bitwise_equal(zero.x_out, x));
  CHECK_THROWS_AS(forward_orthorank_layer(model, 9, x, 0.5), UsageError);
}

TEST_CASE("policy over prefill and decode") {
  const ModelConfig c = tiny_config(4, 32, 4, 2, 64, 40);
  const Model model = tiny_model(c, 46, 1);
  const auto tokens = random_tokens(24, c.vocab_size, 47);
  const std::vector<LayerSetting> layers{{2, 0.5}};

  std::vector<AuditRow> audit;
  OrthoRankPolicy policy(layers, {}, &audit);
  KVCache cache(c.n_layers);
  forward_chunk(model, std::span<const int32_t>(tokens).first(16), cache, &policy);
  REQUIRE(cache.score_history.count(2) == 1);
  CHECK(cache.score_history[2].size() == 16);
  CHECK(cache.score_history[2][0] == kInf);
  for (int s = 0; s < 8; ++s) forward_chunk(model, std::span<const int32_t>(tokens).subspan(16 + s, 1), cache, &policy);
  CHECK(cache.score_history[2].size() == 24);
  for (const auto& layer : cache.layers) CHECK(layer.size() == 24);
  CHECK(audit.size() == 24);
  CHECK(std::count_if(audit.begin(), audit.begin() + 16, [](const AuditRow& a) { return a.selected; }) == 8);
  CHECK(audit.back().step == 8);
  CHECK(audit.back().position == 23);

  // Decode decisions replay against the stored history.
  std::vector<float> history(cache.score_history[2].begin(), cache.score_history[2].begin() + 16);
  for (size_t i = 16; i < 24; ++i) {
    CHECK(decode_select(history, audit[i].score, 0.5) == audit[i].selected);
  }

  SUBCASE("skipping unselected K/V") {
    OrthoRankPolicy lean(layers, {Criterion{}, false});
    KVCache c2(c.n_layers);
    forward_chunk(model, std::span<const int32_t>(tokens).first(16), c2, &lean);
    CHECK(c2.layers[2].size() == 8);
    CHECK(c2.layers[1].size() == 16);
  }
  SUBCASE("a later chunk without history is rejected") {
    KVCache dense(c.n_layers);
    forward_chunk(model, std::span<const int32_t>(tokens).first(4), dense);
    OrthoRankPolicy late(layers, {});
    CHECK_THROWS_AS(forward_chunk(model, std::span<const int32_t>(tokens).subspan(4, 1), dense, &late),
                    StateError);
  }

  const auto dir = scratch_dir("audit");
  write_audit_csv(audit, dir / "audit.csv");
  std::ifstream in(dir / "audit.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "layer,step,position,score,selected");
}
