#include <doctest.h>

#include <cmath>
#include <random>

#include "orthorank/errors.hpp"
#include "orthorank/tensor.hpp"

using namespace orthorank;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, scale);
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = n(rng);
  return t;
}

}  // namespace

TEST_CASE("tensor shapes") {
  CHECK(Tensor().empty());
  CHECK(Tensor({2, 3}).numel() == 6);
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor(std::vector<int64_t>{}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
}

TEST_CASE("matmul") {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  CHECK(bitwise_equal(matmul(eye, a), a));
  CHECK(bitwise_equal(matmul(a, eye), a));
  CHECK(matmul(a, Tensor({2, 1}, {0, 1})) == Tensor({2, 1}, {2, 4}));
  CHECK(matmul(Tensor({1, 1}, {2}), Tensor({1, 1}, {3})) == Tensor({1, 1}, {6}));
  CHECK_THROWS_AS(matmul(a, Tensor({3, 1})), DimensionError);

  const Tensor x = random_tensor({7, 5}, 1), y = random_tensor({5, 4}, 2);
  CHECK(bitwise_equal(matmul(x, y), matmul(x, y)));
}

TEST_CASE("linear multiplies by the transposed weight") {
  const Tensor x({1, 2}, {1, 2});
  const Tensor w({3, 2}, {1, 0, 0, 1, 1, 1});
  CHECK(linear(x, w) == Tensor({1, 3}, {1, 2, 3}));
  CHECK_THROWS_AS(linear(x, Tensor({3, 3})), DimensionError);
}

TEST_CASE("rms_norm") {
  SUBCASE("constant rows normalize to ones") {
    const Tensor x({2, 8}, std::vector<float>(16, 3.0f));
    const Tensor out = rms_norm(x, Tensor({8}, std::vector<float>(8, 1.0f)), 1e-5f);
    for (float v : out.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
  }
  SUBCASE("zero gain") {
    const Tensor x = random_tensor({3, 8}, 3);
    const Tensor out = rms_norm(x, Tensor({8}), 1e-5f);
    for (float v : out.data()) CHECK(v == 0.0f);
  }
  SUBCASE("scalar oracle and unit RMS") {
    const Tensor x = random_tensor({16, 64}, 4, 2.0f);
    const Tensor gain = random_tensor({64}, 5);
    const Tensor out = rms_norm(x, gain, 1e-5f);
    const Tensor unit = rms_norm(x, Tensor({64}, std::vector<float>(64, 1.0f)), 1e-5f);
    for (int64_t t = 0; t < 16; ++t) {
      double ss = 0.0;
      for (int64_t j = 0; j < 64; ++j) ss += static_cast<double>(x.at(t, j)) * x.at(t, j);
      const double inv = 1.0 / std::sqrt(ss / 64.0 + 1e-5);
      double us = 0.0;
      for (int64_t j = 0; j < 64; ++j) {
        CHECK(std::fabs(out.at(t, j) - gain[j] * x.at(t, j) * inv) < 1e-6);
        us += static_cast<double>(unit.at(t, j)) * unit.at(t, j);
      }
      CHECK(std::sqrt(us / 64.0) == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
  CHECK_THROWS_AS(rms_norm(Tensor({2, 4}), Tensor({3}), 1e-5f), DimensionError);
  CHECK_THROWS_AS(rms_norm(Tensor({2, 4}), Tensor({4}), 0.0f), ConfigError);
}

TEST_CASE("softmax_causal") {
  const std::vector<int64_t> q0{0}, q1{1};
  SUBCASE("symmetric row") {
    const Tensor p = softmax_causal(Tensor({1, 2}, {0, 0}), std::span<const int64_t>(q1));
    CHECK(p.at(0, 0) == 0.5f);
    CHECK(p.at(0, 1) == 0.5f);
  }
  SUBCASE("single visible entry") {
    const Tensor p = softmax_causal(Tensor({1, 3}, {5, -2, 7}), std::span<const int64_t>(q0));
    CHECK(p.at(0, 0) == 1.0f);
    CHECK(p.at(0, 1) == 0.0f);
    CHECK(p.at(0, 2) == 0.0f);
  }
  SUBCASE("64-bit oracle") {
    const int64_t tq = 9, tk = 12;
    const Tensor s = random_tensor({tq, tk}, 6, 3.0f);
    std::vector<int64_t> qpos(tq);
    for (int64_t i = 0; i < tq; ++i) qpos[i] = i + 3;
    const Tensor p = softmax_causal(s, std::span<const int64_t>(qpos));
    for (int64_t i = 0; i < tq; ++i) {
      double mx = -1e300, total = 0.0;
      for (int64_t j = 0; j <= qpos[i]; ++j) mx = std::max(mx, static_cast<double>(s.at(i, j)));
      for (int64_t j = 0; j <= qpos[i]; ++j) total += std::exp(s.at(i, j) - mx);
      double row = 0.0;
      for (int64_t j = 0; j < tk; ++j) {
        const double ref = j <= qpos[i] ? std::exp(s.at(i, j) - mx) / total : 0.0;
        CHECK(std::fabs(p.at(i, j) - ref) < 1e-6);
        if (j > qpos[i]) CHECK(p.at(i, j) == 0.0f);
        row += p.at(i, j);
      }
      CHECK(std::fabs(row - 1.0) < 1e-6);
    }
  }
  SUBCASE("explicit key positions") {
    const std::vector<int64_t> keys{0, 4, 9};
    const std::vector<int64_t> q{5};
    const Tensor p = softmax_causal(Tensor({1, 3}, {1, 1, 1}), std::span<const int64_t>(q),
                                    std::span<const int64_t>(keys));
    CHECK(p.at(0, 2) == 0.0f);
    CHECK(p.at(0, 0) == 0.5f);
  }
  CHECK_THROWS_AS(softmax_causal(Tensor({2, 2}), std::span<const int64_t>(q0)), DimensionError);
}

TEST_CASE("rope_apply") {
  SUBCASE("position 0 is the identity") {
    const Tensor x = random_tensor({1, 2, 8}, 7);
    const std::vector<int64_t> pos{0};
    CHECK(bitwise_equal(rope_apply(x, std::span<const int64_t>(pos), 10000.0), x));
  }
  SUBCASE("one radian at position 1 with a two-dimensional head") {
    const Tensor x({1, 1, 2}, {0.3f, -0.8f});
    const std::vector<int64_t> pos{1};
    const Tensor r = rope_apply(x, std::span<const int64_t>(pos), 10000.0);
    const double c = std::cos(1.0), s = std::sin(1.0);
    CHECK(r[0] == doctest::Approx(0.3 * c + 0.8 * s).epsilon(1e-6));
    CHECK(r[1] == doctest::Approx(0.3 * s - 0.8 * c).epsilon(1e-6));
  }
  SUBCASE("norms preserved") {
    const int64_t T = 20;
    const Tensor x = random_tensor({T, 3, 16}, 8);
    std::vector<int64_t> pos(T);
    for (int64_t t = 0; t < T; ++t) pos[t] = 37 * t;
    const Tensor r = rope_apply(x, std::span<const int64_t>(pos), 10000.0);
    for (int64_t h = 0; h < T * 3; ++h) {
      const auto a = x.data().subspan(static_cast<size_t>(h * 16), 16);
      const auto b = r.data().subspan(static_cast<size_t>(h * 16), 16);
      CHECK(std::fabs(l2_norm<float>(a) - l2_norm<float>(b)) < 1e-5 * l2_norm<float>(a) + 1e-6);
    }
  }
  SUBCASE("relative rotation depends on the position difference only") {
    const Tensor q = random_tensor({1, 1, 8}, 9), k = random_tensor({1, 1, 8}, 10);
    auto score = [&](int64_t pq, int64_t pk) {
      const std::vector<int64_t> a{pq}, b{pk};
      const Tensor rq = rope_apply(q, std::span<const int64_t>(a), 10000.0);
      const Tensor rk = rope_apply(k, std::span<const int64_t>(b), 10000.0);
      return dot<float>(rq.data(), rk.data());
    };
    CHECK(score(10, 3) == doctest::Approx(score(107, 100)).epsilon(1e-4));
  }
  const std::vector<int64_t> pos{0};
  CHECK_THROWS_AS(rope_apply(Tensor({1, 1, 3}), std::span<const int64_t>(pos), 10000.0),
                  ConfigError);
}
