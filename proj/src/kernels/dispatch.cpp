#include <cstdlib>
#include <cstring>

#include "cidet/kernels.hpp"

namespace cidet::kernels {
namespace {

const Backend* detect() {
  const char* env = std::getenv("CIDET_KERNELS");
  if (env != nullptr) {
    for (const Backend* b : available_backends()) {
      if (std::strcmp(env, b->name) == 0) return b;
    }
    // Unknown or unavailable name: fall through to auto-detection.
  }
#if defined(__x86_64__) || defined(_M_X64)
  if (__builtin_cpu_supports("avx2")) return &avx2_backend();
#endif
#if defined(__aarch64__)
  return &neon_backend();
#endif
  return &scalar_backend();
}

}  // namespace

std::vector<const Backend*> available_backends() {
  std::vector<const Backend*> out{&scalar_backend()};
#if defined(__x86_64__) || defined(_M_X64)
  if (__builtin_cpu_supports("avx2")) out.push_back(&avx2_backend());
#endif
#if defined(__aarch64__)
  out.push_back(&neon_backend());
#endif
  return out;
}

const Backend& active_backend() {
  static const Backend* chosen = detect();
  return *chosen;
}

}  // namespace cidet::kernels
