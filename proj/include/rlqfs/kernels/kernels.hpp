#pragma once
// Dense double-precision inner loops used by the tensor engine.
//
// Every kernel has a portable scalar reference implementation. SIMD variants
// (AVX2+FMA on x86-64, NEON on AArch64) are compiled into separate
// translation units and picked once at runtime from the CPU feature set.
// RLQFS_KERNELS=scalar|avx2|neon forces a specific table.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace rlqfs::kernels {

struct KernelTable {
  std::string_view name;
  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y[i] = a[i] * b[i]
  void (*mul)(const double* a, const double* b, double* y, std::size_t n);
};

const KernelTable& scalar_table();
// nullptr when the variant was not compiled in.
const KernelTable* avx2_table();
const KernelTable* neon_table();

// Variants compiled in AND supported by the running CPU, scalar first.
std::vector<const KernelTable*> available_tables();

const KernelTable& active();
// Returns false if `name` is not available on this machine.
bool set_active(std::string_view name);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}

// Row-major GEMM helpers built on the active table. All accumulate into C.
// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c);
// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c);
// C[m x n] += A[k x m]^T * B[k x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c);

}  // namespace rlqfs::kernels
