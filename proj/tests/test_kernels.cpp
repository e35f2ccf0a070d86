#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "masc/kernels.hpp"
#include "masc/rng.hpp"

using namespace masc;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-3.0, 3.0);
  return v;
}

}  // namespace

TEST_CASE("scalar and avx2 kernels agree on random inputs") {
#if !(defined(__x86_64__) || defined(_M_X64))
  return;  // no vector variant on this target
#else
  Rng rng(7);
  // odd lengths exercise the scalar tails
  for (std::size_t n : {1u, 3u, 4u, 7u, 8u, 64u, 257u}) {
    auto a = random_vec(rng, n);
    auto b = random_vec(rng, n);

    const auto& s = kernels::scalar_table;
    const auto& v = kernels::avx2_table;

    CHECK(s.dot(a.data(), b.data(), n) ==
          doctest::Approx(v.dot(a.data(), b.data(), n)).epsilon(1e-12));
    CHECK(s.sum(a.data(), n) == doctest::Approx(v.sum(a.data(), n)).epsilon(1e-12));
    CHECK(s.max(a.data(), n) == v.max(a.data(), n));

    std::vector<double> out_s(n), out_v(n);
    s.add(a.data(), b.data(), out_s.data(), n);
    v.add(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);
    s.sub(a.data(), b.data(), out_s.data(), n);
    v.sub(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);
    s.mul(a.data(), b.data(), out_s.data(), n);
    v.mul(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    auto ys = a, yv = a;
    s.axpy(0.37, b.data(), ys.data(), n);
    v.axpy(0.37, b.data(), yv.data(), n);
    for (std::size_t i = 0; i < n; ++i)
      CHECK(ys[i] == doctest::Approx(yv[i]).epsilon(1e-14));

    auto xs = a, xv = a;
    s.scale(-1.5, xs.data(), n);
    v.scale(-1.5, xv.data(), n);
    CHECK(xs == xv);
  }
#endif
}

TEST_CASE("active table is selectable") {
  const auto& prev = kernels::set_active(kernels::scalar_table);
  CHECK(std::string(kernels::active().name) == "scalar");
  kernels::set_active(prev);
}
