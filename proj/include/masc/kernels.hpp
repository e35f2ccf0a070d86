#pragma once
// Data-parallel inner loops used by the array/tape layer.
//
// Every kernel has a scalar reference implementation and, where the target
// supports it, an AVX2 variant. The active set is chosen once at startup
// from CPUID; scalar and vector variants are equivalence-tested against
// each other.

#include <cstddef>

namespace masc::kernels {

struct KernelTable {
  // out = a . b
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out[i] = a[i] + b[i]
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  // out[i] = a[i] - b[i]
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  // out[i] = a[i] * b[i]
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  // x[i] *= alpha
  void (*scale)(double alpha, double* x, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
  double (*max)(const double* x, std::size_t n);
  const char* name;
};

// Scalar reference kernels; always available.
extern const KernelTable scalar_table;
#if defined(__x86_64__) || defined(_M_X64)
extern const KernelTable avx2_table;
#endif

// Table selected at load time (scalar unless the CPU reports AVX2).
const KernelTable& active();

// Override for tests / benchmarking; returns the previous table.
const KernelTable& set_active(const KernelTable& t);

inline double dot(const double* a, const double* b, std::size_t n) {
  return active().dot(a, b, n);
}
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}
inline void add(const double* a, const double* b, double* out, std::size_t n) {
  active().add(a, b, out, n);
}
inline void sub(const double* a, const double* b, double* out, std::size_t n) {
  active().sub(a, b, out, n);
}
inline void mul(const double* a, const double* b, double* out, std::size_t n) {
  active().mul(a, b, out, n);
}
inline void scale(double alpha, double* x, std::size_t n) {
  active().scale(alpha, x, n);
}
inline double sum(const double* x, std::size_t n) { return active().sum(x, n); }
inline double max(const double* x, std::size_t n) { return active().max(x, n); }

}  // namespace masc::kernels
