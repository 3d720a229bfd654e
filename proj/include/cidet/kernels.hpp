#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace cidet::kernels {

// Double-precision vector kernels used by the training and loss inner
// loops. Every kernel has a scalar reference implementation plus SIMD
// variants (AVX2 on x86-64, NEON on aarch64) selected once at runtime.
// SIMD variants may reassociate additions, so results can differ from
// the scalar reference in the last bits; equivalence tests bound this.
struct Backend {
  const char* name;
  double (*dot)(const double* a, const double* b, size_t n);
  void (*axpy)(double alpha, const double* x, double* y, size_t n);
  void (*scale)(double alpha, double* x, size_t n);
  double (*sum)(const double* x, size_t n);
  double (*max)(const double* x, size_t n);  // n >= 1
  double (*sq_diff_sum)(const double* a, const double* b, size_t n);
  // Whole-matrix kernels (row-major). One dispatch per call keeps the
  // indirect-call overhead off the per-row fast path.
  // out[m x n] = A[m x k] * B[n x k]^T
  void (*matmul_nt)(const double* a, int m, int k, const double* b, int n,
                    double* out);
  // out[m x n] += A[m x k] * B[k x n]
  void (*matmul_nn_acc)(const double* a, int m, int k, const double* b, int n,
                        double* out);
  // out[k x n] += A[m x k]^T * B[m x n]
  void (*matmul_tn_acc)(const double* a, int m, int k, const double* b, int n,
                        double* out);
};

const Backend& scalar_backend();
#if defined(__x86_64__) || defined(_M_X64)
const Backend& avx2_backend();
#endif
#if defined(__aarch64__)
const Backend& neon_backend();
#endif

// Active backend. Chosen from CPU capabilities on first use; the
// CIDET_KERNELS environment variable ("scalar", "avx2", "neon")
// overrides the choice.
const Backend& active_backend();
std::vector<const Backend*> available_backends();

inline double dot(const double* a, const double* b, size_t n) {
  return active_backend().dot(a, b, n);
}
inline void axpy(double alpha, const double* x, double* y, size_t n) {
  active_backend().axpy(alpha, x, y, n);
}
inline void scale(double alpha, double* x, size_t n) {
  active_backend().scale(alpha, x, n);
}
inline double sum(const double* x, size_t n) {
  return active_backend().sum(x, n);
}
inline double max(const double* x, size_t n) {
  return active_backend().max(x, n);
}
inline double sq_diff_sum(const double* a, const double* b, size_t n) {
  return active_backend().sq_diff_sum(a, b, n);
}
inline void matmul_nt(const double* a, int m, int k, const double* b, int n,
                      double* out) {
  active_backend().matmul_nt(a, m, k, b, n, out);
}
inline void matmul_nn_acc(const double* a, int m, int k, const double* b, int n,
                          double* out) {
  active_backend().matmul_nn_acc(a, m, k, b, n, out);
}
inline void matmul_tn_acc(const double* a, int m, int k, const double* b, int n,
                          double* out) {
  active_backend().matmul_tn_acc(a, m, k, b, n, out);
}

}  // namespace cidet::kernels
