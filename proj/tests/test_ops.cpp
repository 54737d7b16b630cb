#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "mhvae/ops.hpp"

using namespace mhvae;

namespace {

// Reduce any tensor to a scalar with nonuniform weights so gradient structure
// is exercised (a plain sum would make many backward bugs invisible).
template <class T>
Var<T> weighted_sum(Var<T> x) {
  const std::int64_t n = x.val().size();
  Tensor<T> w(x.val().shape());
  T* wd = w.mutable_data();
  for (std::int64_t i = 0; i < n; ++i) wd[i] = T(0.3) + T(0.1) * static_cast<T>(i % 7);
  return sum_all(mul_const(x, w));
}

}  // namespace

TEST_CASE("matmul forward worked example") {
  Graph<double> g;
  auto a = g.leaf(Tensor<double>::from_data({2, 2}, {1, 2, 3, 4}));
  auto b = g.leaf(Tensor<double>::from_data({2, 2}, {5, 6, 7, 8}));
  auto c = matmul(a, b);
  REQUIRE(c.val()[0] == Catch::Approx(19));
  REQUIRE(c.val()[1] == Catch::Approx(22));
  REQUIRE(c.val()[2] == Catch::Approx(43));
  REQUIRE(c.val()[3] == Catch::Approx(50));
}

TEST_CASE("matmul rejects mismatched shapes") {
  Graph<double> g;
  auto a = g.leaf(Tensor<double>(Shape{2, 3}));
  auto b = g.leaf(Tensor<double>(Shape{4, 2}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("[2 x 3]") != std::string::npos);
    REQUIRE(msg.find("[4 x 2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients") {
  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(static_cast<uint64_t>(seed));
    auto A = random_tensor(rng, {3, 4});
    auto B = random_tensor(rng, {4, 2});
    check_gradients(
        [](Graph<double>& g, const std::vector<Var<double>>& in) {
          (void)g;
          return weighted_sum(matmul(in[0], in[1]));
        },
        {A, B});
  }
}

TEST_CASE("bias_add forward and gradients") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::from_data({2, 3}, {0, 1, 2, 3, 4, 5}));
  auto b = g.leaf(Tensor<double>::from_data({3}, {10, 20, 30}));
  auto y = bias_add(x, b);
  REQUIRE(y.val()[0] == 10);
  REQUIRE(y.val()[5] == 35);

  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(100 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {4, 3});
    auto B = random_tensor(rng, {3});
    check_gradients(
        [](Graph<double>&, const std::vector<Var<double>>& in) {
          return weighted_sum(bias_add(in[0], in[1]));
        },
        {X, B});
  }
}

TEST_CASE("elementwise binary gradients") {
  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(200 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {3, 4});
    auto Y = random_tensor(rng, {3, 4});
    check_gradients(
        [](Graph<double>&, const std::vector<Var<double>>& in) {
          return weighted_sum(add(in[0], in[1]));
        },
        {X, Y});
    check_gradients(
        [](Graph<double>&, const std::vector<Var<double>>& in) {
          return weighted_sum(sub(in[0], in[1]));
        },
        {X, Y});
    check_gradients(
        [](Graph<double>&, const std::vector<Var<double>>& in) {
          return weighted_sum(mul(in[0], in[1]));
        },
        {X, Y});
  }
}

TEST_CASE("elementwise binary rejects shape mismatch") {
  Graph<double> g;
  auto a = g.leaf(Tensor<double>(Shape{2, 3}));
  auto b = g.leaf(Tensor<double>(Shape{3, 2}));
  REQUIRE_THROWS_AS(add(a, b), ShapeError);
  REQUIRE_THROWS_AS(sub(a, b), ShapeError);
  REQUIRE_THROWS_AS(mul(a, b), ShapeError);
}

TEST_CASE("unary op gradients") {
  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(300 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {3, 4}, -2.0, 2.0);
    auto P = random_tensor(rng, {3, 4}, 0.2, 3.0);  // positive, for log
    auto K = random_tensor_avoiding(rng, {3, 4}, {0.0}, 0.05, -2.0, 2.0);
    auto C = random_tensor_avoiding(rng, {3, 4}, {-0.5, 0.5}, 0.05, -1.5, 1.5);

    auto u = [](auto op) {
      return [op](Graph<double>&, const std::vector<Var<double>>& in) {
        return weighted_sum(op(in[0]));
      };
    };
    check_gradients(u([](Var<double> v) { return exp_(v); }), {X});
    check_gradients(u([](Var<double> v) { return log_(v); }), {P});
    check_gradients(u([](Var<double> v) { return sigmoid_(v); }), {X});
    check_gradients(u([](Var<double> v) { return softplus_(v); }), {X});
    check_gradients(u([](Var<double> v) { return swish_(v); }), {X});
    check_gradients(u([](Var<double> v) { return leaky_relu(v, 0.01); }), {K});
    check_gradients(u([](Var<double> v) { return clamp_(v, -0.5, 0.5); }), {C});
    check_gradients(u([](Var<double> v) { return scalar_mul(v, -1.7); }), {X});
    check_gradients(u([](Var<double> v) { return add_scalar(v, 0.9); }), {X});
    check_gradients(u([](Var<double> v) { return neg(v); }), {X});
  }
}

TEST_CASE("unary forward values") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::from_data({4}, {-1.0, 0.0, 0.5, 30.0}));
  auto sp = softplus_(x);
  REQUIRE(sp.val()[0] == Catch::Approx(std::log1p(std::exp(-1.0))));
  REQUIRE(sp.val()[1] == Catch::Approx(std::log(2.0)));
  REQUIRE(sp.val()[3] == Catch::Approx(30.0).epsilon(1e-12));  // no overflow at large input

  auto lr = leaky_relu(x, 0.01);
  REQUIRE(lr.val()[0] == Catch::Approx(-0.01));
  REQUIRE(lr.val()[2] == Catch::Approx(0.5));

  auto cl = clamp_(x, -0.5, 0.5);
  REQUIRE(cl.val()[0] == -0.5);
  REQUIRE(cl.val()[3] == 0.5);

  auto sw = swish_(x);
  REQUIRE(sw.val()[1] == 0.0);
  REQUIRE(sw.val()[2] == Catch::Approx(0.5 / (1.0 + std::exp(-0.5))));

  auto neg_in = g.leaf(Tensor<double>::from_data({2}, {0.0, -1.0}));
  REQUIRE_THROWS_AS(log_(neg_in), DomainError);
}

TEST_CASE("softplus is stable at extreme inputs") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::from_data({2}, {-800.0, 800.0}));
  auto y = softplus_(x);
  REQUIRE(y.val()[0] == 0.0);
  REQUIRE(y.val()[1] == 800.0);
  REQUIRE(y.val().all_finite());
}

TEST_CASE("reduction gradients and values") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6}));
  REQUIRE(sum_all(x).val()[0] == 21);
  auto rs = row_sum(x);
  REQUIRE(rs.val()[0] == 6);
  REQUIRE(rs.val()[1] == 15);

  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(400 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {3, 5});
    check_gradients(
        [](Graph<double>&, const std::vector<Var<double>>& in) { return sum_all(in[0]); }, {X});
    check_gradients(
        [](Graph<double>&, const std::vector<Var<double>>& in) {
          return weighted_sum(row_sum(in[0]));
        },
        {X});
  }
}

TEST_CASE("logsumexp worked values") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::from_data({2}, {0.0, 0.0}));
  REQUIRE(logsumexp(x, 0).val()[0] == Catch::Approx(std::log(2.0)));

  // Max-shift keeps large magnitudes finite.
  auto big = g.leaf(Tensor<double>::from_data({2}, {1000.0, 1000.0}));
  REQUIRE(logsumexp(big, 0).val()[0] == Catch::Approx(1000.0 + std::log(2.0)));

  // Shift identity: lse(x + c) == lse(x) + c.
  RngStream rng(17);
  auto t = random_tensor(rng, {6}, -3.0, 3.0);
  Tensor<double> tc = t;
  double* d = tc.mutable_data();
  for (int i = 0; i < 6; ++i) d[i] += 2.5;
  auto v1 = logsumexp(g.leaf(t), 0).val()[0];
  auto v2 = logsumexp(g.leaf(tc), 0).val()[0];
  REQUIRE(v2 == Catch::Approx(v1 + 2.5));
}

TEST_CASE("logsumexp gradients over every axis") {
  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(500 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {3, 4, 2}, -2.0, 2.0);
    for (int axis = 0; axis < 3; ++axis) {
      check_gradients(
          [axis](Graph<double>&, const std::vector<Var<double>>& in) {
            return weighted_sum(logsumexp(in[0], axis));
          },
          {X});
    }
  }
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{3}));
  REQUIRE_THROWS_AS(logsumexp(x, 1), ShapeError);
  REQUIRE_THROWS_AS(logsumexp(x, -1), ShapeError);
}

TEST_CASE("concat forward and gradients") {
  Graph<double> g;
  auto a = g.leaf(Tensor<double>::from_data({2, 2}, {1, 2, 3, 4}));
  auto b = g.leaf(Tensor<double>::from_data({2, 1}, {5, 6}));
  auto c = concat<double>({a, b}, 1);
  REQUIRE(c.val().shape() == Shape{2, 3});
  REQUIRE(c.val()[2] == 5);
  REQUIRE(c.val()[5] == 6);

  auto d = concat<double>({a, a}, 0);
  REQUIRE(d.val().shape() == Shape{4, 2});
  REQUIRE(d.val()[6] == 3);

  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(600 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {2, 3, 2});
    auto Y = random_tensor(rng, {2, 1, 2});
    auto Z = random_tensor(rng, {2, 2, 2});
    check_gradients(
        [](Graph<double>&, const std::vector<Var<double>>& in) {
          return weighted_sum(concat<double>({in[0], in[1], in[2]}, 1));
        },
        {X, Y, Z});
  }

  auto bad = g.leaf(Tensor<double>(Shape{3, 2}));
  REQUIRE_THROWS_AS(concat<double>({a, bad}, 1), ShapeError);
  REQUIRE_THROWS_AS(concat<double>({a, b}, 2), ShapeError);
}

TEST_CASE("scale_rows applies per-row constants") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::from_data({2, 2}, {1, 2, 3, 4}));
  auto y = scale_rows(x, Tensor<double>::from_data({2}, {0.0, 2.0}));
  REQUIRE(y.val()[0] == 0);
  REQUIRE(y.val()[1] == 0);
  REQUIRE(y.val()[2] == 6);
  REQUIRE(y.val()[3] == 8);

  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(700 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {4, 3});
    auto S = random_tensor(rng, {4}, -1.0, 1.0);
    check_gradients(
        [S](Graph<double>&, const std::vector<Var<double>>& in) {
          return weighted_sum(scale_rows(in[0], S));
        },
        {X});
  }

  // A zeroed row denies gradient to that row.
  Graph<double> g2;
  auto x2 = g2.leaf(Tensor<double>::from_data({2, 2}, {1, 2, 3, 4}), true);
  auto loss = sum_all(scale_rows(x2, Tensor<double>::from_data({2}, {0.0, 1.0})));
  g2.backward(loss);
  auto grad = g2.grad(x2.id);
  REQUIRE(grad[0] == 0.0);
  REQUIRE(grad[1] == 0.0);
  REQUIRE(grad[2] == 1.0);
  REQUIRE(grad[3] == 1.0);
}

TEST_CASE("pick selects one entry per row") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto y = pick(x, {2, 0});
  REQUIRE(y.val()[0] == 3);
  REQUIRE(y.val()[1] == 4);
  REQUIRE_THROWS_AS(pick(x, {3, 0}), DomainError);
  REQUIRE_THROWS_AS(pick(x, {0, -1}), DomainError);
  REQUIRE_THROWS_AS(pick(x, std::vector<int>{0}), ContractError);

  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(800 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {4, 5});
    std::vector<int> idx;
    for (int r = 0; r < 4; ++r) idx.push_back(static_cast<int>(rng.below(5)));
    check_gradients(
        [idx](Graph<double>&, const std::vector<Var<double>>& in) {
          return weighted_sum(pick(in[0], idx));
        },
        {X});
  }
}

TEST_CASE("reshape keeps data and routes gradient") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto y = reshape(x, Shape{3, 2});
  REQUIRE(y.val().shape() == Shape{3, 2});
  REQUIRE(y.val()[4] == 5);
  REQUIRE_THROWS_AS(reshape(x, Shape{4, 2}), ShapeError);

  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(900 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {2, 6});
    check_gradients(
        [](Graph<double>&, const std::vector<Var<double>>& in) {
          return weighted_sum(mul(reshape(in[0], Shape{3, 4}), reshape(in[0], Shape{3, 4})));
        },
        {X});
  }
}

TEST_CASE("mul_const gradients") {
  for (int seed = 0; seed < 20; ++seed) {
    RngStream rng(1000 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {3, 3});
    auto C = random_tensor(rng, {3, 3});
    check_gradients(
        [C](Graph<double>&, const std::vector<Var<double>>& in) {
          return weighted_sum(mul_const(in[0], C));
        },
        {X});
  }
}

TEST_CASE("backward demands a scalar loss") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{2, 2}), true);
  auto y = add(x, x);
  REQUIRE_THROWS_AS(g.backward(y), ContractError);
}

TEST_CASE("an unreachable leaf gets zero gradient") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{3}, 1.0), true);
  auto orphan = g.leaf(Tensor<double>(Shape{4}, 2.0), true);
  auto loss = sum_all(x);
  g.backward(loss);
  auto gx = g.grad(x.id);
  for (int i = 0; i < 3; ++i) REQUIRE(gx[i] == 1.0);
  auto go = g.grad(orphan.id);
  REQUIRE(go.shape() == Shape{4});
  for (int i = 0; i < 4; ++i) REQUIRE(go[i] == 0.0);
}

TEST_CASE("reused nodes accumulate gradient") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::from_data({2}, {3.0, -1.0}), true);
  // loss = sum(x*x + x + x) -> d/dx = 2x + 2
  auto loss = sum_all(add(mul(x, x), add(x, x)));
  g.backward(loss);
  auto gx = g.grad(x.id);
  REQUIRE(gx[0] == Catch::Approx(8.0));
  REQUIRE(gx[1] == Catch::Approx(0.0));
}

TEST_CASE("backward is linear in the loss") {
  RngStream rng(1234);
  auto X = random_tensor(rng, {3, 3}, -1.5, 1.5);
  auto run = [&](double a, double b) {
    Graph<double> g;
    auto x = g.leaf(X, true);
    auto f = sum_all(mul(x, x));
    auto h = sum_all(sigmoid_(x));
    auto loss = add(scalar_mul(f, a), scalar_mul(h, b));
    g.backward(loss);
    return g.grad(x.id);
  };
  auto gf = run(1.0, 0.0);
  auto gh = run(0.0, 1.0);
  auto gmix = run(2.0, -3.0);
  for (std::int64_t i = 0; i < X.size(); ++i)
    REQUIRE(gmix[i] == Catch::Approx(2.0 * gf[i] - 3.0 * gh[i]).margin(1e-12));
}

TEST_CASE("gradients of a deep composite stay finite and correct") {
  for (int seed = 0; seed < 5; ++seed) {
    RngStream rng(1700 + static_cast<uint64_t>(seed));
    auto X = random_tensor(rng, {2, 3}, -1.0, 1.0);
    auto W1 = random_tensor(rng, {3, 4}, -0.7, 0.7);
    auto W2 = random_tensor(rng, {4, 2}, -0.7, 0.7);
    check_gradients(
        [](Graph<double>&, const std::vector<Var<double>>& in) {
          auto h = sigmoid_(matmul(in[0], in[1]));
          auto o = matmul(h, in[2]);
          auto p = logsumexp(o, 1);
          return sum_all(mul(p, p));
        },
        {X, W1, W2});
  }
}
