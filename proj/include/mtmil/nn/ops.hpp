// Copyright 2026 The mtmil Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Forward and backward kernels for the layers used by the MIL network.
// Every kernel works sample-by-sample so that a sample's output never depends
// on which other samples share the batch (inference results are bitwise
// independent of bag composition).

#include <Eigen/Core>

#include <cmath>
#include <vector>

#include "mtmil/nn/tensor.hpp"

namespace mtmil::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ConvGeom {
  int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;

  int out_size(int in) const { return (in + 2 * pad - k) / stride + 1; }
  int patch_len() const { return cin * k * k; }
};

// cols is (cin*k*k) x (ho*wo), row-major.
template <typename T>
void im2col(const T* x, int h, int w, const ConvGeom& g, T* cols) {
  const int ho = g.out_size(h), wo = g.out_size(w);
  const size_t ncol = static_cast<size_t>(ho) * wo;
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + static_cast<size_t>(ci) * h * w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((static_cast<size_t>(ci) * g.k + ky) * g.k + kx) * ncol;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* out = row + static_cast<size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + wo, T(0));
            continue;
          }
          const T* xr = xc + static_cast<size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            out[ox] = (ix >= 0 && ix < w) ? xr[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int h, int w, const ConvGeom& g, T* dx) {
  const int ho = g.out_size(h), wo = g.out_size(w);
  const size_t ncol = static_cast<size_t>(ho) * wo;
  std::fill(dx, dx + static_cast<size_t>(g.cin) * h * w, T(0));
  for (int ci = 0; ci < g.cin; ++ci) {
    T* dc = dx + static_cast<size_t>(ci) * h * w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row =
            cols + ((static_cast<size_t>(ci) * g.k + ky) * g.k + kx) * ncol;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dr = dc + static_cast<size_t>(iy) * w;
          const T* in = row + static_cast<size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < w) dr[ix] += in[ox];
          }
        }
      }
    }
  }
}

// weight: cout x (cin*k*k); bias may be null.
template <typename T>
Tensor<T> conv2d_forward(const ConvGeom& g, const T* weight, const T* bias,
                         const Tensor<T>& x) {
  if (x.c != g.cin) throw ShapeError("conv2d: input channel mismatch");
  const int ho = g.out_size(x.h), wo = g.out_size(x.w);
  Tensor<T> y(x.n, g.cout, ho, wo);
  const int ncol = ho * wo;
  ConstMapMat<T> W(weight, g.cout, g.patch_len());
  RowMat<T> cols(g.patch_len(), ncol);
  const bool pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
  for (int i = 0; i < x.n; ++i) {
    MapMat<T> Y(y.sample(i), g.cout, ncol);
    if (pointwise) {
      Y.noalias() = W * ConstMapMat<T>(x.sample(i), g.cin, ncol);
    } else {
      im2col(x.sample(i), x.h, x.w, g, cols.data());
      Y.noalias() = W * cols;
    }
    if (bias) {
      for (int co = 0; co < g.cout; ++co) Y.row(co).array() += bias[co];
    }
  }
  return y;
}

// Accumulates into grad_w / grad_b and returns dL/dx (empty when !need_dx).
template <typename T>
Tensor<T> conv2d_backward(const ConvGeom& g, const T* weight,
                          const Tensor<T>& x, const Tensor<T>& dy, T* grad_w,
                          T* grad_b, bool need_dx = true) {
  const int ho = dy.h, wo = dy.w, ncol = ho * wo;
  ConstMapMat<T> W(weight, g.cout, g.patch_len());
  MapMat<T> GW(grad_w, g.cout, g.patch_len());
  Tensor<T> dx;
  if (need_dx) dx = Tensor<T>(x.n, x.c, x.h, x.w);
  RowMat<T> cols(g.patch_len(), ncol);
  RowMat<T> dcols(g.patch_len(), ncol);
  const bool pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
  for (int i = 0; i < x.n; ++i) {
    ConstMapMat<T> DY(dy.sample(i), g.cout, ncol);
    if (pointwise) {
      ConstMapMat<T> X(x.sample(i), g.cin, ncol);
      GW.noalias() += DY * X.transpose();
      if (need_dx) MapMat<T>(dx.sample(i), g.cin, ncol).noalias() =
          W.transpose() * DY;
    } else {
      im2col(x.sample(i), x.h, x.w, g, cols.data());
      GW.noalias() += DY * cols.transpose();
      if (need_dx) {
        dcols.noalias() = W.transpose() * DY;
        col2im(dcols.data(), x.h, x.w, g, dx.sample(i));
      }
    }
    if (grad_b) {
      for (int co = 0; co < g.cout; ++co) grad_b[co] += DY.row(co).sum();
    }
  }
  return dx;
}

// Per-channel statistics captured by a training-mode batch-norm forward.
template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  std::vector<T> mean;
  std::vector<T> var;  // biased
};

template <typename T>
Tensor<T> batchnorm_forward_train(const Tensor<T>& x, const T* gamma,
                                  const T* beta, T eps,
                                  BatchNormCache<T>* cache) {
  const size_t plane = x.plane();
  const double m = static_cast<double>(x.n) * plane;
  Tensor<T> y(x.n, x.c, x.h, x.w);
  BatchNormCache<T> local;
  BatchNormCache<T>& bc = cache ? *cache : local;
  bc.xhat = Tensor<T>(x.n, x.c, x.h, x.w);
  bc.inv_std.assign(x.c, T(0));
  bc.mean.assign(x.c, T(0));
  bc.var.assign(x.c, T(0));
  for (int ch = 0; ch < x.c; ++ch) {
    double sum = 0, sq = 0;
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.sample(i) + ch * plane;
      for (size_t j = 0; j < plane; ++j) sum += p[j];
    }
    const double mean = sum / m;
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.sample(i) + ch * plane;
      for (size_t j = 0; j < plane; ++j) {
        const double d = p[j] - mean;
        sq += d * d;
      }
    }
    const double var = sq / m;
    const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    bc.mean[ch] = static_cast<T>(mean);
    bc.var[ch] = static_cast<T>(var);
    bc.inv_std[ch] = inv;
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.sample(i) + ch * plane;
      T* xh = bc.xhat.sample(i) + ch * plane;
      T* q = y.sample(i) + ch * plane;
      for (size_t j = 0; j < plane; ++j) {
        xh[j] = (p[j] - static_cast<T>(mean)) * inv;
        q[j] = gamma[ch] * xh[j] + beta[ch];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> batchnorm_forward_infer(const Tensor<T>& x, const T* gamma,
                                  const T* beta, const T* run_mean,
                                  const T* run_var, T eps) {
  const size_t plane = x.plane();
  Tensor<T> y(x.n, x.c, x.h, x.w);
  for (int ch = 0; ch < x.c; ++ch) {
    const T scale = gamma[ch] / std::sqrt(run_var[ch] + eps);
    const T shift = beta[ch] - run_mean[ch] * scale;
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.sample(i) + ch * plane;
      T* q = y.sample(i) + ch * plane;
      for (size_t j = 0; j < plane; ++j) q[j] = p[j] * scale + shift;
    }
  }
  return y;
}

template <typename T>
Tensor<T> batchnorm_backward(const BatchNormCache<T>& bc, const T* gamma,
                             const Tensor<T>& dy, T* grad_gamma,
                             T* grad_beta) {
  const size_t plane = dy.plane();
  const double m = static_cast<double>(dy.n) * plane;
  Tensor<T> dx(dy.n, dy.c, dy.h, dy.w);
  for (int ch = 0; ch < dy.c; ++ch) {
    double sdy = 0, sdyx = 0;
    for (int i = 0; i < dy.n; ++i) {
      const T* g = dy.sample(i) + ch * plane;
      const T* xh = bc.xhat.sample(i) + ch * plane;
      for (size_t j = 0; j < plane; ++j) {
        sdy += g[j];
        sdyx += static_cast<double>(g[j]) * xh[j];
      }
    }
    grad_gamma[ch] += static_cast<T>(sdyx);
    grad_beta[ch] += static_cast<T>(sdy);
    const double k = static_cast<double>(gamma[ch]) * bc.inv_std[ch] / m;
    for (int i = 0; i < dy.n; ++i) {
      const T* g = dy.sample(i) + ch * plane;
      const T* xh = bc.xhat.sample(i) + ch * plane;
      T* d = dx.sample(i) + ch * plane;
      for (size_t j = 0; j < plane; ++j)
        d[j] = static_cast<T>(k * (m * g[j] - sdy - xh[j] * sdyx));
    }
  }
  return dx;
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.data) v = v > T(0) ? v : T(0);
}

// dy is masked in place by the post-activation output y.
template <typename T>
void relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy) {
  for (size_t i = 0; i < dy.data.size(); ++i)
    if (!(y.data[i] > T(0))) dy.data[i] = T(0);
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  Tensor<T> y(x.n, x.c, x.h * 2, x.w * 2);
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch)
      for (int r = 0; r < y.h; ++r)
        for (int c = 0; c < y.w; ++c) y.at(i, ch, r, c) = x.at(i, ch, r / 2, c / 2);
  return y;
}

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
  for (int i = 0; i < dy.n; ++i)
    for (int ch = 0; ch < dy.c; ++ch)
      for (int r = 0; r < dy.h; ++r)
        for (int c = 0; c < dy.w; ++c)
          dx.at(i, ch, r / 2, c / 2) += dy.at(i, ch, r, c);
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w)
    throw ShapeError("concat: spatial or batch mismatch");
  Tensor<T> y(a.n, a.c + b.c, a.h, a.w);
  for (int i = 0; i < a.n; ++i) {
    std::copy(a.sample(i), a.sample(i) + a.sample_size(), y.sample(i));
    std::copy(b.sample(i), b.sample(i) + b.sample_size(),
              y.sample(i) + a.sample_size());
  }
  return y;
}

template <typename T>
void split_channels(const Tensor<T>& dy, int ca, Tensor<T>& da, Tensor<T>& db) {
  da = Tensor<T>(dy.n, ca, dy.h, dy.w);
  db = Tensor<T>(dy.n, dy.c - ca, dy.h, dy.w);
  for (int i = 0; i < dy.n; ++i) {
    std::copy(dy.sample(i), dy.sample(i) + da.sample_size(), da.sample(i));
    std::copy(dy.sample(i) + da.sample_size(),
              dy.sample(i) + dy.sample_size(), db.sample(i));
  }
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  Tensor<T> y(x.n, x.c, 1, 1);
  const size_t plane = x.plane();
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch) {
      const T* p = x.sample(i) + ch * plane;
      T s = 0;
      for (size_t j = 0; j < plane; ++j) s += p[j];
      y.at(i, ch, 0, 0) = s / static_cast<T>(plane);
    }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, int h, int w) {
  Tensor<T> dx(dy.n, dy.c, h, w);
  const size_t plane = dx.plane();
  for (int i = 0; i < dy.n; ++i)
    for (int ch = 0; ch < dy.c; ++ch) {
      const T g = dy.at(i, ch, 0, 0) / static_cast<T>(plane);
      T* p = dx.sample(i) + ch * plane;
      std::fill(p, p + plane, g);
    }
  return dx;
}

// x viewed as (n, in); weight is out x in row-major. Output is (n, out, 1, 1).
template <typename T>
Tensor<T> linear_forward(const T* weight, const T* bias, int in, int out,
                         const Tensor<T>& x) {
  if (static_cast<int>(x.sample_size()) != in)
    throw ShapeError("linear: input width mismatch");
  Tensor<T> y(x.n, out, 1, 1);
  ConstMapMat<T> W(weight, out, in);
  for (int i = 0; i < x.n; ++i) {
    Eigen::Map<Vec<T>> Y(y.sample(i), out);
    Y.noalias() = W * Eigen::Map<const Vec<T>>(x.sample(i), in);
    if (bias) Y += Eigen::Map<const Vec<T>>(bias, out);
  }
  return y;
}

template <typename T>
Tensor<T> linear_backward(const T* weight, int in, int out, const Tensor<T>& x,
                          const Tensor<T>& dy, T* grad_w, T* grad_b) {
  ConstMapMat<T> W(weight, out, in);
  MapMat<T> GW(grad_w, out, in);
  Tensor<T> dx(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    Eigen::Map<const Vec<T>> DY(dy.sample(i), out);
    Eigen::Map<const Vec<T>> X(x.sample(i), in);
    GW.noalias() += DY * X.transpose();
    if (grad_b) Eigen::Map<Vec<T>>(grad_b, out) += DY;
    Eigen::Map<Vec<T>>(dx.sample(i), in).noalias() = W.transpose() * DY;
  }
  return dx;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace mtmil::nn
