#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <map>
#include <vector>

#include "fd_check.hpp"
#include "mhvae/mrd.hpp"

using namespace mhvae;

namespace {

uint32_t mask_key(const Mask& m) {
  uint32_t k = 0;
  for (size_t i = 0; i < m.size(); ++i)
    if (m[i]) k |= 1u << i;
  return k;
}

}  // namespace

TEST_CASE("mask sampling never drops every modality") {
  MaskConfig cfg{{0.9, 0.9}};
  RngStream rng(17);
  for (int t = 0; t < 100000; ++t) {
    auto m = sample_mask(cfg, rng);
    REQUIRE(m.size() == 2);
    REQUIRE((m[0] + m[1]) >= 1);
  }
}

TEST_CASE("two symmetric modalities give one third each") {
  MaskConfig cfg{{0.5, 0.5}};
  RngStream rng(19);
  std::map<uint32_t, int> counts;
  const int n = 200000;
  for (int t = 0; t < n; ++t) counts[mask_key(sample_mask(cfg, rng))]++;
  REQUIRE(counts.size() == 3);
  for (auto& [k, c] : counts) {
    INFO("mask " << k);
    REQUIRE(static_cast<double>(c) / n == Catch::Approx(1.0 / 3.0).margin(0.01));
  }
  REQUIRE(mask_probability(cfg, {1, 0}) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  REQUIRE(mask_probability(cfg, {0, 1}) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  REQUIRE(mask_probability(cfg, {1, 1}) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("mask probabilities normalize and zero mask is impossible") {
  MaskConfig cfg{{0.3, 0.7, 0.55}};
  REQUIRE(mask_probability(cfg, {0, 0, 0}) == 0.0);
  double total = 0.0;
  for (uint32_t k = 1; k < 8; ++k) {
    Mask m{static_cast<uint8_t>(k & 1), static_cast<uint8_t>((k >> 1) & 1),
           static_cast<uint8_t>((k >> 2) & 1)};
    total += mask_probability(cfg, m);
  }
  REQUIRE(total == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("empirical mask distribution passes chi-squared") {
  struct Case {
    MaskConfig cfg;
    double crit;  // 0.01 significance
  };
  // df = 2^N - 2, crit at 0.01: df 2 -> 9.210, df 6 -> 16.812
  std::vector<Case> cases{{MaskConfig{{0.5, 0.5}}, 9.210},
                          {MaskConfig{{0.3, 0.7}}, 9.210},
                          {MaskConfig{{1.0 / 3, 1.0 / 3, 1.0 / 3}}, 16.812},
                          {MaskConfig{{0.2, 0.5, 0.8}}, 16.812}};
  uint64_t seed = 101;
  for (auto& c : cases) {
    const size_t N = c.cfg.drop_prob.size();
    RngStream rng(seed++);
    const int n = 100000;
    std::map<uint32_t, int> counts;
    for (int t = 0; t < n; ++t) counts[mask_key(sample_mask(c.cfg, rng))]++;
    double chi2 = 0.0;
    for (uint32_t k = 1; k < (1u << N); ++k) {
      Mask m(N);
      for (size_t i = 0; i < N; ++i) m[i] = static_cast<uint8_t>((k >> i) & 1);
      const double expected = n * mask_probability(c.cfg, m);
      REQUIRE(expected > 5.0);  // chi-squared applicability
      const double observed = counts.count(k) ? counts[k] : 0;
      chi2 += (observed - expected) * (observed - expected) / expected;
    }
    INFO("N=" << N << " chi2=" << chi2 << " crit=" << c.crit);
    REQUIRE(chi2 < c.crit);
  }
}

TEST_CASE("degenerate drop probabilities are rejected") {
  RngStream rng(1);
  REQUIRE_THROWS_AS(validate_mask_config(MaskConfig{{1.0, 0.5}}), ConfigError);
  REQUIRE_THROWS_AS(validate_mask_config(MaskConfig{{-0.1}}), ConfigError);
  REQUIRE_THROWS_AS(validate_mask_config(MaskConfig{{}}), ConfigError);
  REQUIRE_NOTHROW(validate_mask_config(MaskConfig{{0.0, 0.99}}));
  // keep-everything config: the only legal mask is all ones
  MaskConfig keep{{0.0, 0.0}};
  for (int t = 0; t < 100; ++t) {
    auto m = sample_mask(keep, rng);
    REQUIRE((m[0] == 1 && m[1] == 1));
  }
}

TEST_CASE("mask_column extracts per-datapoint gates") {
  std::vector<Mask> masks{{1, 0}, {0, 1}, {1, 1}};
  auto c0 = mask_column<double>(masks, 0);
  auto c1 = mask_column<double>(masks, 1);
  REQUIRE(c0.shape() == Shape{3});
  REQUIRE(c0[0] == 1.0);
  REQUIRE(c0[1] == 0.0);
  REQUIRE(c0[2] == 1.0);
  REQUIRE(c1[0] == 0.0);
  REQUIRE(c1[1] == 1.0);
  REQUIRE(c1[2] == 1.0);
}

TEST_CASE("poe combination worked example") {
  // experts N(0,1) and N(1,1), implicit N(0,1) prior:
  // precision 3, variance 1/3, mean (0+1+0)/3 = 1/3
  Graph<double> g;
  std::vector<GaussianPair<double>> experts;
  experts.push_back({g.leaf(Tensor<double>(Shape{1, 1}, 0.0)),
                     g.leaf(Tensor<double>(Shape{1, 1}, 0.0))});
  experts.push_back({g.leaf(Tensor<double>(Shape{1, 1}, 1.0)),
                     g.leaf(Tensor<double>(Shape{1, 1}, 0.0))});
  auto [m, lv] = poe_combine(experts);
  REQUIRE(m.val()[0] == Catch::Approx(1.0 / 3.0).margin(1e-6));
  REQUIRE(std::exp(lv.val()[0]) == Catch::Approx(1.0 / 3.0).margin(1e-6));

  // single expert N(2, e^{-1}) with the prior: precision 1 + e,
  // mean 2e/(1+e)
  std::vector<GaussianPair<double>> one;
  one.push_back({g.leaf(Tensor<double>(Shape{1, 1}, 2.0)),
                 g.leaf(Tensor<double>(Shape{1, 1}, -1.0))});
  auto [m1, lv1] = poe_combine(one);
  const double e1 = std::exp(1.0);
  REQUIRE(m1.val()[0] == Catch::Approx(2.0 * e1 / (1.0 + e1)).margin(1e-9));
  REQUIRE(std::exp(lv1.val()[0]) == Catch::Approx(1.0 / (1.0 + e1)).margin(1e-9));
}

TEST_CASE("poe posterior is sharper than every expert") {
  RngStream rng(31);
  for (int t = 0; t < 100; ++t) {
    Graph<double> g;
    const int n = 1 + static_cast<int>(rng.below(4));
    std::vector<GaussianPair<double>> experts;
    std::vector<double> vars;
    for (int i = 0; i < n; ++i) {
      auto m = rng.normal_tensor<double>(Shape{2, 3});
      auto lv = rng.uniform_tensor<double>(Shape{2, 3}, -3.0, 3.0);
      vars.insert(vars.end(), lv.data(), lv.data() + lv.size());
      experts.push_back({g.leaf(m), g.leaf(lv)});
    }
    auto [m, lv] = poe_combine(experts);
    for (std::int64_t j = 0; j < lv.val().size(); ++j) {
      const double v = std::exp(lv.val()[j]);
      REQUIRE(v < 1.0 + 1e-12);  // never wider than the prior
      for (int i = 0; i < n; ++i) {
        REQUIRE(v < std::exp(vars[static_cast<size_t>(i) * 6 + j]) + 1e-12);
      }
    }
  }
}

TEST_CASE("poe gradients match finite differences") {
  RngStream rng(41);
  auto M1 = rng.normal_tensor<double>(Shape{3, 2});
  auto LV1 = rng.uniform_tensor<double>(Shape{3, 2}, -1.0, 1.0);
  auto M2 = rng.normal_tensor<double>(Shape{3, 2});
  auto LV2 = rng.uniform_tensor<double>(Shape{3, 2}, -1.0, 1.0);
  auto W = rng.uniform_tensor<double>(Shape{3, 2}, 0.5, 1.5);
  check_gradients(
      [W](Graph<double>& g, const std::vector<Var<double>>& in) {
        std::vector<GaussianPair<double>> experts{{in[0], in[1]}, {in[2], in[3]}};
        auto [m, lv] = poe_combine(experts);
        return sum_all(add(mul_const(m, W), exp_(lv)));
      },
      {M1, LV1, M2, LV2});
}
