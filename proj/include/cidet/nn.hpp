#pragma once

#include <string>
#include <vector>

#include "cidet/error.hpp"
#include "cidet/rng.hpp"

namespace cidet::nn {

// Row-major double matrix. All model arithmetic runs in double so that
// finite-difference gradient checks have headroom.
struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

  double* row(int i) { return v.data() + static_cast<size_t>(i) * cols; }
  const double* row(int i) const { return v.data() + static_cast<size_t>(i) * cols; }
  double& at(int i, int j) { return v[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }
  size_t size() const { return v.size(); }
  void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

// out = A B^T (A: m x k, B: n x k -> m x n)
void matmul_nt(const Mat& a, const Mat& b, Mat& out);
// out += A B (A: m x k, B: k x n)
void matmul_nn_acc(const Mat& a, const Mat& b, Mat& out);
// out += A^T B (A: m x k, B: m x n -> k x n)
void matmul_tn_acc(const Mat& a, const Mat& b, Mat& out);

// In-place row softmax.
void softmax_rows(Mat& m);
// Given y = softmax(x) rowwise and dL/dy, return dL/dx.
Mat softmax_backward_rows(const Mat& y, const Mat& dy);

struct Param {
  std::string name;
  Mat value;
  Mat grad;

  void init_normal(Rng& rng, double stddev) {
    for (double& x : value.v) x = rng.normal(0.0, stddev);
    grad = Mat(value.rows, value.cols);
  }
  void init_zero() {
    value.zero();
    grad = Mat(value.rows, value.cols);
  }
};

struct Linear {
  Param w;  // out x in
  Param b;  // 1 x out

  void init(const std::string& name, int in, int out, Rng& rng);
  Mat forward(const Mat& x) const;
  // dy: n x out. Accumulates parameter grads, returns dx.
  Mat backward(const Mat& x, const Mat& dy);
  void collect(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct LayerNorm {
  Param gamma, beta;  // 1 x dim
  static constexpr double kEps = 1e-5;

  struct Cache {
    Mat xhat;
    std::vector<double> inv_std;
  };

  void init(const std::string& name, int dim);
  Mat forward(const Mat& x, Cache& cache) const;
  Mat backward(const Cache& cache, const Mat& dy);
  void collect(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

struct Mha {
  int heads = 1;
  Linear wq, wk, wv, wo;

  // Separate q/k/v inputs so positional embeddings can be added to the
  // attention addresses (q, k) without entering the values.
  struct Cache {
    Mat x_q, x_k, x_v;
    Mat q, k, v;              // n x d
    std::vector<Mat> attn;    // per head, nq x nk (post-softmax)
    Mat concat;               // nq x d
  };

  void init(const std::string& name, int dim, int num_heads, Rng& rng);
  Mat forward(const Mat& x_q, const Mat& x_k, const Mat& x_v,
              Cache& cache) const;
  // Returns dx_q; accumulates dx_k and dx_v.
  Mat backward(const Cache& cache, const Mat& dout, Mat& dx_k, Mat& dx_v);
  void collect(std::vector<Param*>& out) {
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
  }
};

struct Ffn {
  Linear lin1, lin2;

  struct Cache {
    Mat x, hidden;  // hidden is post-ReLU
  };

  void init(const std::string& name, int dim, int inner, Rng& rng);
  Mat forward(const Mat& x, Cache& cache) const;
  Mat backward(const Cache& cache, const Mat& dy);
  void collect(std::vector<Param*>& out) {
    lin1.collect(out);
    lin2.collect(out);
  }
};

// Adam with global-norm gradient clipping and decoupled weight decay.
class Adam {
 public:
  Adam(std::vector<Param*> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8, double grad_clip = 0.0,
       double weight_decay = 0.0);

  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Param*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_, grad_clip_, weight_decay_;
  int64_t t_ = 0;
};

}  // namespace cidet::nn
