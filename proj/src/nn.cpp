#include "cidet/nn.hpp"

#include <algorithm>
#include <cmath>

#include "cidet/kernels.hpp"

namespace cidet::nn {

void matmul_nt(const Mat& a, const Mat& b, Mat& out) {
  out = Mat(a.rows, b.rows);
  kernels::matmul_nt(a.v.data(), a.rows, a.cols, b.v.data(), b.rows,
                     out.v.data());
}

void matmul_nn_acc(const Mat& a, const Mat& b, Mat& out) {
  kernels::matmul_nn_acc(a.v.data(), a.rows, a.cols, b.v.data(), b.cols,
                         out.v.data());
}

void matmul_tn_acc(const Mat& a, const Mat& b, Mat& out) {
  kernels::matmul_tn_acc(a.v.data(), a.rows, a.cols, b.v.data(), b.cols,
                         out.v.data());
}

void softmax_rows(Mat& m) {
  for (int i = 0; i < m.rows; ++i) {
    double* r = m.row(i);
    double mx = kernels::max(r, static_cast<size_t>(m.cols));
    double sum = 0.0;
    for (int j = 0; j < m.cols; ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    kernels::scale(1.0 / sum, r, static_cast<size_t>(m.cols));
  }
}

Mat softmax_backward_rows(const Mat& y, const Mat& dy) {
  Mat dx(y.rows, y.cols);
  for (int i = 0; i < y.rows; ++i) {
    const double* yr = y.row(i);
    const double* dyr = dy.row(i);
    double inner = kernels::dot(yr, dyr, static_cast<size_t>(y.cols));
    double* dxr = dx.row(i);
    for (int j = 0; j < y.cols; ++j) dxr[j] = yr[j] * (dyr[j] - inner);
  }
  return dx;
}

void Linear::init(const std::string& name, int in, int out, Rng& rng) {
  w.name = name + ".w";
  w.value = Mat(out, in);
  w.init_normal(rng, std::sqrt(2.0 / (in + out)));
  b.name = name + ".b";
  b.value = Mat(1, out);
  b.init_zero();
}

Mat Linear::forward(const Mat& x) const {
  if (x.cols != w.value.cols)
    throw ConfigError("linear " + w.name + ": input width " +
                      std::to_string(x.cols) + " != " +
                      std::to_string(w.value.cols));
  Mat y;
  matmul_nt(x, w.value, y);
  for (int i = 0; i < y.rows; ++i)
    kernels::axpy(1.0, b.value.row(0), y.row(i), static_cast<size_t>(y.cols));
  return y;
}

Mat Linear::backward(const Mat& x, const Mat& dy) {
  matmul_tn_acc(dy, x, w.grad);
  for (int i = 0; i < dy.rows; ++i)
    kernels::axpy(1.0, dy.row(i), b.grad.row(0), static_cast<size_t>(dy.cols));
  Mat dx(x.rows, x.cols);
  matmul_nn_acc(dy, w.value, dx);
  return dx;
}

void LayerNorm::init(const std::string& name, int dim) {
  gamma.name = name + ".gamma";
  gamma.value = Mat(1, dim);
  std::fill(gamma.value.v.begin(), gamma.value.v.end(), 1.0);
  gamma.grad = Mat(1, dim);
  beta.name = name + ".beta";
  beta.value = Mat(1, dim);
  beta.init_zero();
}

Mat LayerNorm::forward(const Mat& x, Cache& cache) const {
  const int d = x.cols;
  Mat y(x.rows, d);
  cache.xhat = Mat(x.rows, d);
  cache.inv_std.assign(x.rows, 0.0);
  for (int i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    double mean = kernels::sum(xr, d) / d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = xr[j] - mean;
      var += c * c;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(var + kEps);
    cache.inv_std[i] = inv;
    double* xh = cache.xhat.row(i);
    double* yr = y.row(i);
    for (int j = 0; j < d; ++j) {
      xh[j] = (xr[j] - mean) * inv;
      yr[j] = xh[j] * gamma.value.at(0, j) + beta.value.at(0, j);
    }
  }
  return y;
}

Mat LayerNorm::backward(const Cache& cache, const Mat& dy) {
  const int d = dy.cols;
  Mat dx(dy.rows, d);
  for (int i = 0; i < dy.rows; ++i) {
    const double* dyr = dy.row(i);
    const double* xh = cache.xhat.row(i);
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
      double g = dyr[j] * gamma.value.at(0, j);
      sum_dxhat += g;
      sum_dxhat_xhat += g * xh[j];
      gamma.grad.at(0, j) += dyr[j] * xh[j];
      beta.grad.at(0, j) += dyr[j];
    }
    double inv = cache.inv_std[i];
    double* dxr = dx.row(i);
    for (int j = 0; j < d; ++j) {
      double g = dyr[j] * gamma.value.at(0, j);
      dxr[j] = inv * (g - sum_dxhat / d - xh[j] * sum_dxhat_xhat / d);
    }
  }
  return dx;
}

void Mha::init(const std::string& name, int dim, int num_heads, Rng& rng) {
  if (dim % num_heads != 0)
    throw ConfigError("hidden size must be divisible by head count");
  heads = num_heads;
  wq.init(name + ".wq", dim, dim, rng);
  wk.init(name + ".wk", dim, dim, rng);
  wv.init(name + ".wv", dim, dim, rng);
  wo.init(name + ".wo", dim, dim, rng);
}

namespace {

// Copies one head's strided slice into a contiguous matrix and back, so
// the attention matmuls can use the whole-matrix kernels.
Mat pack_head(const Mat& x, int off, int dh) {
  Mat out(x.rows, dh);
  for (int i = 0; i < x.rows; ++i)
    std::copy(x.row(i) + off, x.row(i) + off + dh, out.row(i));
  return out;
}

void unpack_head_add(const Mat& packed, Mat& x, int off) {
  for (int i = 0; i < x.rows; ++i) {
    const double* src = packed.row(i);
    double* dst = x.row(i) + off;
    for (int j = 0; j < packed.cols; ++j) dst[j] += src[j];
  }
}

}  // namespace

Mat Mha::forward(const Mat& x_q, const Mat& x_k, const Mat& x_v,
                 Cache& cache) const {
  const int d = x_q.cols, dh = d / heads;
  const int nq = x_q.rows, nk = x_k.rows;
  if (x_k.rows != x_v.rows) throw ConfigError("attention k/v length mismatch");
  cache.x_q = x_q;
  cache.x_k = x_k;
  cache.x_v = x_v;
  cache.q = wq.forward(x_q);
  cache.k = wk.forward(x_k);
  cache.v = wv.forward(x_v);
  cache.attn.assign(heads, Mat());
  cache.concat = Mat(nq, d);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    Mat qh = pack_head(cache.q, off, dh);
    Mat kh = pack_head(cache.k, off, dh);
    Mat vh = pack_head(cache.v, off, dh);
    Mat& attn = cache.attn[h];
    matmul_nt(qh, kh, attn);
    kernels::scale(inv_sqrt, attn.v.data(), attn.size());
    softmax_rows(attn);
    Mat oh(nq, dh);
    kernels::matmul_nn_acc(attn.v.data(), nq, nk, vh.v.data(), dh, oh.v.data());
    for (int i = 0; i < nq; ++i)
      std::copy(oh.row(i), oh.row(i) + dh, cache.concat.row(i) + off);
  }
  return wo.forward(cache.concat);
}

Mat Mha::backward(const Cache& cache, const Mat& dout, Mat& dx_k, Mat& dx_v) {
  const int d = cache.x_q.cols, dh = d / heads;
  const int nq = cache.x_q.rows, nk = cache.x_k.rows;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat dconcat = wo.backward(cache.concat, dout);
  Mat dq(nq, d), dk(nk, d), dv(nk, d);
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    const Mat& attn = cache.attn[h];
    Mat vh = pack_head(cache.v, off, dh);
    Mat doh = pack_head(dconcat, off, dh);
    // d attn = dO V^T; dV = attn^T dO
    Mat dattn;
    matmul_nt(doh, vh, dattn);
    Mat dvh(nk, dh);
    matmul_tn_acc(attn, doh, dvh);
    unpack_head_add(dvh, dv, off);

    Mat dscores = softmax_backward_rows(attn, dattn);
    kernels::scale(inv_sqrt, dscores.v.data(), dscores.size());
    Mat qh = pack_head(cache.q, off, dh);
    Mat kh = pack_head(cache.k, off, dh);
    // dQ = dS K; dK = dS^T Q
    Mat dqh(nq, dh);
    kernels::matmul_nn_acc(dscores.v.data(), nq, nk, kh.v.data(), dh, dqh.v.data());
    unpack_head_add(dqh, dq, off);
    Mat dkh(nk, dh);
    matmul_tn_acc(dscores, qh, dkh);
    unpack_head_add(dkh, dk, off);
  }
  Mat dxq = wq.backward(cache.x_q, dq);
  Mat dxk = wk.backward(cache.x_k, dk);
  Mat dxv = wv.backward(cache.x_v, dv);
  for (size_t i = 0; i < dx_k.v.size(); ++i) dx_k.v[i] += dxk.v[i];
  for (size_t i = 0; i < dx_v.v.size(); ++i) dx_v.v[i] += dxv.v[i];
  return dxq;
}

void Ffn::init(const std::string& name, int dim, int inner, Rng& rng) {
  lin1.init(name + ".lin1", dim, inner, rng);
  lin2.init(name + ".lin2", inner, dim, rng);
}

Mat Ffn::forward(const Mat& x, Cache& cache) const {
  cache.x = x;
  cache.hidden = lin1.forward(x);
  for (double& v : cache.hidden.v) v = v > 0 ? v : 0.0;
  return lin2.forward(cache.hidden);
}

Mat Ffn::backward(const Cache& cache, const Mat& dy) {
  Mat dhidden = lin2.backward(cache.hidden, dy);
  for (size_t i = 0; i < dhidden.v.size(); ++i)
    if (cache.hidden.v[i] <= 0.0) dhidden.v[i] = 0.0;
  return lin1.backward(cache.x, dhidden);
}

Adam::Adam(std::vector<Param*> params, double lr, double beta1, double beta2,
           double eps, double grad_clip, double weight_decay)
    : params_(std::move(params)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      grad_clip_(grad_clip),
      weight_decay_(weight_decay) {
  for (Param* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->grad.zero();
}

void Adam::step() {
  ++t_;
  if (grad_clip_ > 0.0) {
    double norm_sq = 0.0;
    for (Param* p : params_)
      norm_sq += kernels::dot(p->grad.v.data(), p->grad.v.data(), p->grad.size());
    double norm = std::sqrt(norm_sq);
    if (norm > grad_clip_) {
      double s = grad_clip_ / norm;
      for (Param* p : params_) kernels::scale(s, p->grad.v.data(), p->grad.size());
    }
  }
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    Param* p = params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (size_t i = 0; i < p->value.size(); ++i) {
      double g = p->grad.v[i];
      m[i] = beta1_ * m[i] + (1 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1 - beta2_) * g * g;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p->value.v[i] -=
          lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p->value.v[i]);
    }
  }
}

}  // namespace cidet::nn
