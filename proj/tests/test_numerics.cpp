#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "masc/adam.hpp"
#include "masc/array.hpp"
#include "masc/rng.hpp"
#include "masc/tape.hpp"

using namespace masc;

namespace {

Array random_array(Rng& rng, std::vector<std::size_t> shape, double lo = -2.0,
                   double hi = 2.0) {
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

// Central finite differences of a scalar function of one array input.
Array finite_diff(const std::function<double(const Array&)>& f, Array x,
                  double step = 1e-5) {
  Array g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = f(x);
    x[i] = orig - step;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

void check_close(const Array& analytic, const Array& fd, double tol = 1e-4) {
  REQUIRE(analytic.same_shape(fd));
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(fd[i]), 1e-6});
    CHECK(std::abs(analytic[i] - fd[i]) / denom <= tol);
  }
}

}  // namespace

TEST_CASE("matmul identity and annihilator") {
  Rng rng(1);
  Array m = random_array(rng, {3, 3});
  CHECK(matmul(Array::identity(3), m) == m);
  Array z = Array::zeros({2, 3});
  Array b = random_array(rng, {3, 4});
  CHECK(matmul(z, b) == Array::zeros({2, 4}));
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(2);
  Array a = random_array(rng, {2, 2});
  Array b = random_array(rng, {2, 2});
  Array c = matmul(a, b);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < 2; ++p) acc += a.at(i, p) * b.at(p, j);
      CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-13));
    }
  }
}

TEST_CASE("matmul shape mismatch throws") {
  Array a = Array::zeros({2, 3});
  Array b = Array::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("backward of sum gives all-ones") {
  Tape t;
  NodeId p = t.leaf(Array{1.0, -2.0, 3.5});
  t.backward(t.sum(p));
  CHECK(t.grad(p) == Array{1.0, 1.0, 1.0});
}

TEST_CASE("backward of half squared norm gives the parameter") {
  Tape t;
  Array v{0.5, -1.25, 2.0, 0.0};
  NodeId p = t.leaf(v);
  NodeId loss = t.scale(t.sum(t.mul(p, p)), 0.5);
  t.backward(loss);
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(t.grad(p)[i] == doctest::Approx(v[i]).epsilon(1e-14));
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape t;
  NodeId p = t.leaf(Array{1.0, 2.0});
  NodeId y = t.tanh(p);
  CHECK_THROWS_AS(t.backward(y), ContractError);
}

TEST_CASE("composed graph gradient matches finite differences") {
  // tanh / sigmoid / matmul / layer_norm / softmax / bce chained together
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Array w = random_array(rng, {4, 6});
    const Array x0 = random_array(rng, {6});

    auto eval = [&](const Array& x, Tape& t, NodeId& x_node) -> NodeId {
      x_node = t.leaf(x);
      NodeId wn = t.leaf(w);
      NodeId h = t.matmul(wn, t.layer_norm(x_node));
      NodeId s = t.softmax(t.sigmoid(h));
      NodeId logit = t.sum(t.mul(s, t.tanh(h)));
      return t.bce_with_logits(logit, 1.0);
    };

    Tape t;
    NodeId x_node;
    NodeId loss = eval(x0, t, x_node);
    t.backward(loss);

    Array fd = finite_diff(
        [&](const Array& x) {
          Tape t2;
          NodeId dummy;
          return t2.value(eval(x, t2, dummy))[0];
        },
        x0);
    check_close(t.grad(x_node), fd);
  }
}

TEST_CASE("per-op gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    const Array x0 = random_array(rng, {5});
    const Array other = random_array(rng, {5});
    const Array m0 = random_array(rng, {3, 5});

    using Builder = std::function<NodeId(Tape&, NodeId)>;
    std::vector<Builder> builders = {
        [&](Tape& t, NodeId x) { return t.sum(t.tanh(x)); },
        [&](Tape& t, NodeId x) { return t.sum(t.sigmoid(x)); },
        [&](Tape& t, NodeId x) { return t.sum(t.mul(x, t.leaf(other))); },
        [&](Tape& t, NodeId x) { return t.sum(t.add(x, t.leaf(other))); },
        [&](Tape& t, NodeId x) { return t.sum(t.sub(t.leaf(other), x)); },
        [&](Tape& t, NodeId x) { return t.scale(t.sum(x), -2.5); },
        [&](Tape& t, NodeId x) { return t.sum(t.matmul(t.leaf(m0), x)); },
        [&](Tape& t, NodeId x) { return t.sum(t.softmax(t.scale(x, 2.0))); },
        [&](Tape& t, NodeId x) { return t.sum(t.layer_norm(x)); },
        [&](Tape& t, NodeId x) { return t.l1(x); },
        [&](Tape& t, NodeId x) {
          return t.sum(t.gather(x, {0, 2, 2, 4}));
        },
        [&](Tape& t, NodeId x) {
          std::vector<NodeId> parts = {x, t.tanh(x)};
          return t.sum(t.concat(parts));
        },
        [&](Tape& t, NodeId x) {
          return t.ce_with_logits(x, 2);
        },
        [&](Tape& t, NodeId x) {
          return t.sum(t.mul(t.normalize_sum(t.sigmoid(x)), t.leaf(other)));
        },
        [&](Tape& t, NodeId x) {
          return t.sum(t.scale_by(x, t.sum(t.tanh(x))));
        },
    };

    for (const auto& build : builders) {
      Tape t;
      NodeId x_node = t.leaf(x0);
      t.backward(build(t, x_node));
      Array fd = finite_diff([&](const Array& x) {
        Tape t2;
        return t2.value(build(t2, t2.leaf(x)))[0];
      }, x0);
      check_close(t.grad(x_node), fd);
    }
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(9);
  const Array x0 = random_array(rng, {6});

  auto loss_a = [](Tape& t, NodeId x) { return t.sum(t.tanh(x)); };
  auto loss_b = [](Tape& t, NodeId x) { return t.l1(t.sigmoid(x)); };

  Tape ta;
  NodeId xa = ta.leaf(x0);
  ta.backward(loss_a(ta, xa));
  Tape tb;
  NodeId xb = tb.leaf(x0);
  tb.backward(loss_b(tb, xb));
  Tape tc;
  NodeId xc = tc.leaf(x0);
  tc.backward(tc.add(loss_a(tc, xc), loss_b(tc, xc)));

  for (std::size_t i = 0; i < x0.size(); ++i) {
    CHECK(tc.grad(xc)[i] ==
          doctest::Approx(ta.grad(xa)[i] + tb.grad(xb)[i]).epsilon(1e-12));
  }
}

TEST_CASE("bce_with_logits closed-form values") {
  Tape t;
  CHECK(t.value(t.bce_with_logits(t.leaf(Array{0.0}), 1.0))[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(t.value(t.bce_with_logits(t.leaf(Array{30.0}), 1.0))[0] < 1e-12);
  // stable at large negative logits, no overflow
  CHECK(t.value(t.bce_with_logits(t.leaf(Array{-30.0}), 1.0))[0] ==
        doctest::Approx(30.0).epsilon(1e-9));
}

TEST_CASE("adam zero gradient leaves params unchanged") {
  Array p{1.0, -2.0};
  Array g = Array::zeros({2});
  Adam opt;
  opt.step({&p}, {&g});
  CHECK(p == Array{1.0, -2.0});
  CHECK(opt.step_count() == 1);
}

TEST_CASE("adam first step moves against the gradient sign") {
  Array p{0.0, 0.0, 0.0};
  Array g{3.0, -0.5, 1e-3};
  AdamConfig cfg;
  Adam opt(cfg);
  opt.step({&p}, {&g});
  for (std::size_t i = 0; i < 3; ++i) {
    const double expected = -cfg.lr * (g[i] > 0 ? 1.0 : -1.0);
    CHECK(p[i] == doctest::Approx(expected).epsilon(1e-3));
  }
}

TEST_CASE("adam converges on a scalar quadratic") {
  // f(p) = (p - 3)^2 from p = 0, lr = 0.01
  Array p{0.0};
  Adam opt(AdamConfig{.lr = 0.01});
  double prev = 3.0;
  for (int i = 0; i < 100; ++i) {
    Array g{2.0 * (p[0] - 3.0)};
    opt.step({&p}, {&g});
    const double dist = std::abs(p[0] - 3.0);
    CHECK(dist < prev);
    prev = dist;
  }
}

TEST_CASE("adam rejects non-finite gradients") {
  Array p{1.0};
  Array g{std::nan("")};
  Adam opt;
  CHECK_THROWS_WITH_AS(opt.step({&p}, {&g}, {"weight"}),
                       doctest::Contains("weight"), OptimizerError);
}
