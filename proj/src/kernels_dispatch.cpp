#include "masc/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#include <cpuid.h>
#endif

namespace masc::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  unsigned eax, ebx, ecx, edx;
  if (!__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) return false;
  return (ebx & bit_AVX2) != 0;
#else
  return false;
#endif
}

const KernelTable* detect() {
#if defined(__x86_64__) || defined(_M_X64)
  if (cpu_has_avx2()) return &avx2_table;
#endif
  return &scalar_table;
}

const KernelTable*& current() {
  static const KernelTable* table = detect();
  return table;
}

}  // namespace

const KernelTable& active() { return *current(); }

const KernelTable& set_active(const KernelTable& t) {
  const KernelTable* prev = current();
  current() = &t;
  return *prev;
}

}  // namespace masc::kernels
