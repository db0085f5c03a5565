#include <cmath>
#include <cstdlib>

#include "doctest.h"
#include "rlqfs/kernels/kernels.hpp"
#include "rlqfs/ndgrad/rng.hpp"

using namespace rlqfs;

namespace {

std::vector<double> randv(std::size_t n, nd::Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

// FMA and reassociation change rounding only.
bool close(double a, double b, double scale) { return std::abs(a - b) <= 1e-12 * std::max(1.0, scale); }

struct ActiveGuard {
  std::string prev{kernels::active().name};
  ~ActiveGuard() { kernels::set_active(prev); }
};

}  // namespace

TEST_CASE("scalar table is always available and listed first") {
  auto t = kernels::available_tables();
  REQUIRE_FALSE(t.empty());
  CHECK(t.front()->name == "scalar");
  CHECK(kernels::set_active("scalar"));
  CHECK_FALSE(kernels::set_active("no-such-kernel"));
}

TEST_CASE("every SIMD variant agrees with the scalar reference") {
  const auto& ref = kernels::scalar_table();
  nd::Rng rng(42);
  for (const auto* t : kernels::available_tables()) {
    CAPTURE(t->name);
    for (std::size_t n = 0; n < 70; ++n) {
      auto a = randv(n, rng), b = randv(n, rng);
      double mag = 0;
      for (std::size_t i = 0; i < n; ++i) mag += std::abs(a[i] * b[i]);
      CHECK(close(t->dot(a.data(), b.data(), n), ref.dot(a.data(), b.data(), n), mag));

      auto y1 = randv(n, rng);
      auto y2 = y1;
      t->axpy(0.37, a.data(), y1.data(), n);
      ref.axpy(0.37, a.data(), y2.data(), n);
      for (std::size_t i = 0; i < n; ++i) REQUIRE(close(y1[i], y2[i], std::abs(y2[i]) + 1));

      std::vector<double> m1(n), m2(n);
      t->mul(a.data(), b.data(), m1.data(), n);
      ref.mul(a.data(), b.data(), m2.data(), n);
      for (std::size_t i = 0; i < n; ++i) REQUIRE(m1[i] == m2[i]);
    }
  }
  if (kernels::available_tables().size() == 1) MESSAGE("only the scalar kernels are available on this CPU");
}

TEST_CASE("gemm helpers agree across tables and with a naive product") {
  ActiveGuard guard;
  nd::Rng rng(7);
  const std::size_t m = 5, k = 9, n = 6;
  auto a = randv(m * k, rng), b = randv(k * n, rng), bt = randv(n * k, rng), at = randv(k * m, rng);
  std::vector<double> naive_nn(m * n, 0), naive_nt(m * n, 0), naive_tn(m * n, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) {
        naive_nn[i * n + j] += a[i * k + p] * b[p * n + j];
        naive_nt[i * n + j] += a[i * k + p] * bt[j * k + p];
        naive_tn[i * n + j] += at[p * m + i] * b[p * n + j];
      }
  for (const auto* t : kernels::available_tables()) {
    CAPTURE(t->name);
    REQUIRE(kernels::set_active(t->name));
    std::vector<double> c1(m * n, 0), c2(m * n, 0), c3(m * n, 0);
    kernels::gemm_nn(m, k, n, a.data(), b.data(), c1.data());
    kernels::gemm_nt(m, k, n, a.data(), bt.data(), c2.data());
    kernels::gemm_tn(m, k, n, at.data(), b.data(), c3.data());
    for (std::size_t i = 0; i < m * n; ++i) {
      CHECK(close(c1[i], naive_nn[i], 10));
      CHECK(close(c2[i], naive_nt[i], 10));
      CHECK(close(c3[i], naive_tn[i], 10));
    }
  }
}
