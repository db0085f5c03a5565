#include <atomic>
#include <cstdlib>

#include "rlqfs/kernels/kernels.hpp"

namespace rlqfs::kernels {

#if !defined(RLQFS_HAVE_AVX2)
const KernelTable* avx2_table() { return nullptr; }
#endif

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* select_default() {
  auto tables = available_tables();
  if (const char* env = std::getenv("RLQFS_KERNELS")) {
    for (const auto* t : tables) {
      if (t->name == env) return t;
    }
  }
  return tables.back();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{select_default()};
  return table;
}

}  // namespace

std::vector<const KernelTable*> available_tables() {
  std::vector<const KernelTable*> out{&scalar_table()};
  if (const auto* t = avx2_table(); t != nullptr && cpu_has_avx2()) out.push_back(t);
  if (const auto* t = neon_table(); t != nullptr) out.push_back(t);
  return out;
}

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

bool set_active(std::string_view name) {
  for (const auto* t : available_tables()) {
    if (t->name == name) {
      current().store(t);
      return true;
    }
  }
  return false;
}

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) {
  const auto& t = active();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      if (arow[p] != 0.0) t.axpy(arow[p], b + p * n, crow, n);
    }
  }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) {
  const auto& t = active();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += t.dot(arow, b + j * k, k);
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) {
  const auto& t = active();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      if (arow[i] != 0.0) t.axpy(arow[i], brow, c + i * n, n);
    }
  }
}

}  // namespace rlqfs::kernels
