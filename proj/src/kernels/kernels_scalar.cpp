#include "cidet/kernels.hpp"

// Scalar reference kernels. These define the semantics; SIMD variants
// must agree with them up to floating-point reassociation.

namespace cidet::kernels {
namespace {

double dot_scalar(const double* a, const double* b, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double alpha, double* x, size_t n) {
  for (size_t i = 0; i < n; ++i) x[i] *= alpha;
}

double sum_scalar(const double* x, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

double max_scalar(const double* x, size_t n) {
  double m = x[0];
  for (size_t i = 1; i < n; ++i)
    if (x[i] > m) m = x[i];
  return m;
}

double sq_diff_sum_scalar(const double* a, const double* b, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

void matmul_nt_scalar(const double* a, int m, int k, const double* b, int n,
                      double* out) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<size_t>(i) * k;
    double* orow = out + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j)
      orow[j] = dot_scalar(ar, b + static_cast<size_t>(j) * k, k);
  }
}

void matmul_nn_acc_scalar(const double* a, int m, int k, const double* b, int n,
                          double* out) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<size_t>(i) * k;
    double* orow = out + static_cast<size_t>(i) * n;
    for (int j = 0; j < k; ++j)
      axpy_scalar(ar[j], b + static_cast<size_t>(j) * n, orow, n);
  }
}

void matmul_tn_acc_scalar(const double* a, int m, int k, const double* b, int n,
                          double* out) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<size_t>(i) * k;
    const double* br = b + static_cast<size_t>(i) * n;
    for (int j = 0; j < k; ++j)
      axpy_scalar(ar[j], br, out + static_cast<size_t>(j) * n, n);
  }
}

}  // namespace

const Backend& scalar_backend() {
  static const Backend b{"scalar",
                         dot_scalar,
                         axpy_scalar,
                         scale_scalar,
                         sum_scalar,
                         max_scalar,
                         sq_diff_sum_scalar,
                         matmul_nt_scalar,
                         matmul_nn_acc_scalar,
                         matmul_tn_acc_scalar};
  return b;
}

}  // namespace cidet::kernels
