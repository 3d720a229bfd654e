#include "cidet/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

// AVX2+FMA kernels, 4-wide double lanes. This translation unit is the
// only one compiled with -mavx2 -mfma; callers go through the runtime
// dispatcher, so the rest of the binary stays baseline-x86-64.

namespace cidet::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* a, const double* b, size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_avx2(double alpha, const double* x, double* y, size_t n) {
  __m256d va = _mm256_set1_pd(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(double alpha, double* x, size_t n) {
  __m256d va = _mm256_set1_pd(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) x[i] *= alpha;
}

double sum_avx2(const double* x, size_t n) {
  __m256d acc = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double s = hsum(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

double max_avx2(const double* x, size_t n) {
  size_t i = 0;
  double m = x[0];
  if (n >= 4) {
    __m256d vm = _mm256_loadu_pd(x);
    for (i = 4; i + 4 <= n; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(x + i));
    __m128d lo = _mm256_castpd256_pd128(vm);
    __m128d hi = _mm256_extractf128_pd(vm, 1);
    lo = _mm_max_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    m = _mm_cvtsd_f64(_mm_max_sd(lo, sh));
  }
  for (; i < n; ++i)
    if (x[i] > m) m = x[i];
  return m;
}

double sq_diff_sum_avx2(const double* a, const double* b, size_t n) {
  __m256d acc = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    acc = _mm256_fmadd_pd(d, d, acc);
  }
  double s = hsum(acc);
  for (; i < n; ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Single-accumulator 4-wide dot; the nt-kernel tail must accumulate in
// exactly the same order as the block lanes so that out[j] does not
// depend on where j falls relative to the block boundary.
double dot4(const double* a, const double* b, int k) {
  __m256d acc = _mm256_setzero_pd();
  int p = 0;
  for (; p + 4 <= k; p += 4)
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + p), _mm256_loadu_pd(b + p), acc);
  double s = hsum(acc);
  for (; p < k; ++p) s += a[p] * b[p];
  return s;
}

// out = A B^T with a 1x4 register block: one pass over the A row feeds
// four B-row accumulators.
void matmul_nt_avx2(const double* a, int m, int k, const double* b, int n,
                    double* out) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<size_t>(i) * k;
    double* orow = out + static_cast<size_t>(i) * n;
    int j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + static_cast<size_t>(j) * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
      __m256d acc2 = _mm256_setzero_pd(), acc3 = _mm256_setzero_pd();
      int p = 0;
      for (; p + 4 <= k; p += 4) {
        __m256d av = _mm256_loadu_pd(ar + p);
        acc0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b0 + p), acc0);
        acc1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b1 + p), acc1);
        acc2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b2 + p), acc2);
        acc3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b3 + p), acc3);
      }
      double s0 = hsum(acc0), s1 = hsum(acc1), s2 = hsum(acc2), s3 = hsum(acc3);
      for (; p < k; ++p) {
        s0 += ar[p] * b0[p];
        s1 += ar[p] * b1[p];
        s2 += ar[p] * b2[p];
        s3 += ar[p] * b3[p];
      }
      orow[j] = s0;
      orow[j + 1] = s1;
      orow[j + 2] = s2;
      orow[j + 3] = s3;
    }
    for (; j < n; ++j) orow[j] = dot4(ar, b + static_cast<size_t>(j) * k, k);
  }
}

// out += A B, unrolling four A entries per output pass to cut the
// out-row load/store traffic.
void matmul_nn_acc_avx2(const double* a, int m, int k, const double* b, int n,
                        double* out) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<size_t>(i) * k;
    double* orow = out + static_cast<size_t>(i) * n;
    int j = 0;
    for (; j + 4 <= k; j += 4) {
      __m256d a0 = _mm256_set1_pd(ar[j]);
      __m256d a1 = _mm256_set1_pd(ar[j + 1]);
      __m256d a2 = _mm256_set1_pd(ar[j + 2]);
      __m256d a3 = _mm256_set1_pd(ar[j + 3]);
      const double* b0 = b + static_cast<size_t>(j) * n;
      const double* b1 = b0 + n;
      const double* b2 = b1 + n;
      const double* b3 = b2 + n;
      int c = 0;
      for (; c + 4 <= n; c += 4) {
        __m256d o = _mm256_loadu_pd(orow + c);
        o = _mm256_fmadd_pd(a0, _mm256_loadu_pd(b0 + c), o);
        o = _mm256_fmadd_pd(a1, _mm256_loadu_pd(b1 + c), o);
        o = _mm256_fmadd_pd(a2, _mm256_loadu_pd(b2 + c), o);
        o = _mm256_fmadd_pd(a3, _mm256_loadu_pd(b3 + c), o);
        _mm256_storeu_pd(orow + c, o);
      }
      for (; c < n; ++c)
        orow[c] += ar[j] * b0[c] + ar[j + 1] * b1[c] + ar[j + 2] * b2[c] +
                   ar[j + 3] * b3[c];
    }
    for (; j < k; ++j)
      axpy_avx2(ar[j], b + static_cast<size_t>(j) * n, orow, n);
  }
}

void matmul_tn_acc_avx2(const double* a, int m, int k, const double* b, int n,
                        double* out) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<size_t>(i) * k;
    const double* br = b + static_cast<size_t>(i) * n;
    for (int j = 0; j < k; ++j) {
      if (ar[j] != 0.0)
        axpy_avx2(ar[j], br, out + static_cast<size_t>(j) * n, n);
    }
  }
}

}  // namespace

const Backend& avx2_backend() {
  static const Backend b{"avx2",
                         dot_avx2,
                         axpy_avx2,
                         scale_avx2,
                         sum_avx2,
                         max_avx2,
                         sq_diff_sum_avx2,
                         matmul_nt_avx2,
                         matmul_nn_acc_avx2,
                         matmul_tn_acc_avx2};
  return b;
}

}  // namespace cidet::kernels

#endif  // x86-64
