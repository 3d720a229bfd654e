#include "cidet/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

// NEON kernels, 2-wide double lanes (aarch64 only).

namespace cidet::kernels {
namespace {

double dot_neon(const double* a, const double* b, size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    acc = vfmaq_f64(acc, vld1q_f64(a + i), vld1q_f64(b + i));
  }
  double s = vaddvq_f64(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_neon(double alpha, const double* x, double* y, size_t n) {
  float64x2_t va = vdupq_n_f64(alpha);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t vy = vld1q_f64(y + i);
    vy = vfmaq_f64(vy, va, vld1q_f64(x + i));
    vst1q_f64(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_neon(double alpha, double* x, size_t n) {
  float64x2_t va = vdupq_n_f64(alpha);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(x + i, vmulq_f64(va, vld1q_f64(x + i)));
  }
  for (; i < n; ++i) x[i] *= alpha;
}

double sum_neon(const double* x, size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(x + i));
  double s = vaddvq_f64(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

double max_neon(const double* x, size_t n) {
  double m = x[0];
  size_t i = 0;
  if (n >= 2) {
    float64x2_t vm = vld1q_f64(x);
    for (i = 2; i + 2 <= n; i += 2) vm = vmaxq_f64(vm, vld1q_f64(x + i));
    m = vmaxvq_f64(vm);
  }
  for (; i < n; ++i)
    if (x[i] > m) m = x[i];
  return m;
}

double sq_diff_sum_neon(const double* a, const double* b, size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t d = vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i));
    acc = vfmaq_f64(acc, d, d);
  }
  double s = vaddvq_f64(acc);
  for (; i < n; ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void matmul_nt_neon(const double* a, int m, int k, const double* b, int n,
                    double* out) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<size_t>(i) * k;
    double* orow = out + static_cast<size_t>(i) * n;
    int j = 0;
    for (; j + 2 <= n; j += 2) {
      const double* b0 = b + static_cast<size_t>(j) * k;
      const double* b1 = b0 + k;
      float64x2_t acc0 = vdupq_n_f64(0.0), acc1 = vdupq_n_f64(0.0);
      int p = 0;
      for (; p + 2 <= k; p += 2) {
        float64x2_t av = vld1q_f64(ar + p);
        acc0 = vfmaq_f64(acc0, av, vld1q_f64(b0 + p));
        acc1 = vfmaq_f64(acc1, av, vld1q_f64(b1 + p));
      }
      double s0 = vaddvq_f64(acc0), s1 = vaddvq_f64(acc1);
      for (; p < k; ++p) {
        s0 += ar[p] * b0[p];
        s1 += ar[p] * b1[p];
      }
      orow[j] = s0;
      orow[j + 1] = s1;
    }
    for (; j < n; ++j)
      orow[j] = dot_neon(ar, b + static_cast<size_t>(j) * k, k);
  }
}

void matmul_nn_acc_neon(const double* a, int m, int k, const double* b, int n,
                        double* out) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<size_t>(i) * k;
    double* orow = out + static_cast<size_t>(i) * n;
    for (int j = 0; j < k; ++j)
      axpy_neon(ar[j], b + static_cast<size_t>(j) * n, orow, n);
  }
}

void matmul_tn_acc_neon(const double* a, int m, int k, const double* b, int n,
                        double* out) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<size_t>(i) * k;
    const double* br = b + static_cast<size_t>(i) * n;
    for (int j = 0; j < k; ++j)
      if (ar[j] != 0.0) axpy_neon(ar[j], br, out + static_cast<size_t>(j) * n, n);
  }
}

}  // namespace

const Backend& neon_backend() {
  static const Backend b{"neon",
                         dot_neon,
                         axpy_neon,
                         scale_neon,
                         sum_neon,
                         max_neon,
                         sq_diff_sum_neon,
                         matmul_nt_neon,
                         matmul_nn_acc_neon,
                         matmul_tn_acc_neon};
  return b;
}

}  // namespace cidet::kernels

#endif  // aarch64
