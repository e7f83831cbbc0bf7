#include <atomic>
#include <cstdlib>
#include <string>

#include "mmgen/errors.hpp"
#include "mmgen/simd.hpp"

namespace mmgen::simd {
namespace {

std::atomic<int>& active_slot() {
  static std::atomic<int> slot{[] {
    Isa isa = detect_isa();
    if (const char* env = std::getenv("MMGEN_SIMD")) {
      const Isa wanted = parse_isa(env);
      if (cpu_supports(wanted)) isa = wanted;
    }
    return static_cast<int>(isa);
  }()};
  return slot;
}

}  // namespace

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      return true;
    case Isa::kAvx2:
#if defined(__x86_64__) || defined(__i386__)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

Isa detect_isa() { return cpu_supports(Isa::kAvx2) ? Isa::kAvx2 : Isa::kScalar; }

Isa active_isa() { return static_cast<Isa>(active_slot().load(std::memory_order_relaxed)); }

void set_isa(Isa isa) {
  if (!cpu_supports(isa))
    throw ConfigError("CPU does not support " + std::string(isa_name(isa)));
  active_slot().store(static_cast<int>(isa), std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) { return isa == Isa::kAvx2 ? "avx2" : "scalar"; }

Isa parse_isa(std::string_view name) {
  if (name == "avx2") return Isa::kAvx2;
  if (name == "scalar") return Isa::kScalar;
  throw ConfigError("unknown SIMD level '" + std::string(name) + "'");
}

template <class T>
const Kernels<T>& kernels(Isa isa) {
#if defined(MMGEN_HAVE_AVX2)
  if (isa == Isa::kAvx2) return avx2::table<T>();
#endif
  (void)isa;
  return scalar::table<T>();
}

template const Kernels<float>& kernels<float>(Isa);
template const Kernels<double>& kernels<double>(Isa);

}  // namespace mmgen::simd
