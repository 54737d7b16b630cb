#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <numeric>
#include <vector>

#include "mhvae/rng.hpp"

using mhvae::RngStream;
using mhvae::substream;

TEST_CASE("same seed reproduces the sequence exactly") {
  RngStream a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) {
    REQUIRE(a.bits() == b.bits());
  }
  RngStream c(1234), d(1234);
  for (int i = 0; i < 1000; ++i) {
    REQUIRE(c.uniform() == d.uniform());
    REQUIRE(c.normal() == d.normal());
  }
}

TEST_CASE("uniform lies in (0, 1]") {
  RngStream r(7);
  double mn = 1.0, mx = 0.0, sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    REQUIRE(u > 0.0);
    REQUIRE(u <= 1.0);
    mn = std::min(mn, u);
    mx = std::max(mx, u);
    sum += u;
  }
  REQUIRE(sum / n == Catch::Approx(0.5).margin(0.005));
  REQUIRE(mn < 1e-4);
  REQUIRE(mx > 1.0 - 1e-4);
}

TEST_CASE("normal moments match a standard gaussian") {
  RngStream r(42);
  const int n = 1000000;
  double s1 = 0.0, s2 = 0.0, s3 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s1 += z;
    s2 += z * z;
    s3 += z * z * z;
  }
  const double mean = s1 / n;
  const double var = s2 / n - mean * mean;
  const double skew = s3 / n;
  // SE(mean) = 1/sqrt(n) = 1e-3; allow 4 sigma.
  REQUIRE(mean == Catch::Approx(0.0).margin(4e-3));
  REQUIRE(var == Catch::Approx(1.0).margin(0.01));
  REQUIRE(skew == Catch::Approx(0.0).margin(0.02));
}

TEST_CASE("below is in range and roughly uniform") {
  RngStream r(99);
  std::vector<int> counts(10, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const std::int64_t k = r.below(10);
    REQUIRE(k >= 0);
    REQUIRE(k < 10);
    counts[static_cast<size_t>(k)]++;
  }
  for (int c : counts) REQUIRE(std::abs(c - n / 10) < 500);
}

TEST_CASE("bernoulli frequency tracks p") {
  RngStream r(5);
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) hits += r.bernoulli(0.3) ? 1 : 0;
  REQUIRE(static_cast<double>(hits) / n == Catch::Approx(0.3).margin(0.01));
}

TEST_CASE("shuffle is a deterministic permutation") {
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  std::vector<int> w = v;
  RngStream a(11), b(11);
  a.shuffle(v);
  b.shuffle(w);
  REQUIRE(v == w);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) REQUIRE(sorted[static_cast<size_t>(i)] == i);
  // and it actually moved something
  bool moved = false;
  for (int i = 0; i < 100; ++i) moved = moved || v[static_cast<size_t>(i)] != i;
  REQUIRE(moved);
}

TEST_CASE("substreams are keyed by purpose and indices") {
  RngStream a = substream(1, "noise", 0, 0);
  RngStream a2 = substream(1, "noise", 0, 0);
  RngStream b = substream(1, "noise", 1, 0);
  RngStream c = substream(1, "mask", 0, 0);
  RngStream d = substream(2, "noise", 0, 0);
  const auto x = a.bits();
  REQUIRE(x == a2.bits());
  REQUIRE(x != b.bits());
  REQUIRE(x != c.bits());
  REQUIRE(x != d.bits());
}

TEST_CASE("tensor draws are shaped and deterministic") {
  RngStream a(3), b(3);
  auto t1 = a.normal_tensor<double>(mhvae::Shape{4, 5});
  auto t2 = b.normal_tensor<double>(mhvae::Shape{4, 5});
  REQUIRE(t1.size() == 20);
  for (std::int64_t i = 0; i < 20; ++i) REQUIRE(t1[i] == t2[i]);
  auto u = a.uniform_tensor<float>(mhvae::Shape{8}, -2.0f, 2.0f);
  for (std::int64_t i = 0; i < 8; ++i) {
    REQUIRE(u[i] >= -2.0f);
    REQUIRE(u[i] <= 2.0f);
  }
}
