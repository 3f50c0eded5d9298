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

#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "support.hpp"

namespace mtmil::nn {
namespace {

Tensor<double> random_tensor(int n, int c, int h, int w, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor<double> t(n, c, h, w);
  for (auto& v : t.data) v = g(rng);
  return t;
}

std::vector<double> random_vec(size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// Scalar objective sum(y * probe) so that dL/dy = probe.
double dot(const Tensor<double>& y, const Tensor<double>& probe) {
  double s = 0;
  for (size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * probe.data[i];
  return s;
}

void check_fd(std::vector<double>& x, const std::vector<double>& analytic,
              const std::function<double()>& loss) {
  for (size_t i = 0; i < x.size(); ++i) {
    const double o = x[i], h = 1e-5;
    x[i] = o + h;
    const double lp = loss();
    x[i] = o - h;
    const double lm = loss();
    x[i] = o;
    const double num = (lp - lm) / (2 * h);
    ASSERT_NEAR(analytic[i], num, 1e-6 * std::max(1.0, std::abs(num))) << i;
  }
}

TEST(Conv2d, MatchesNaiveLoop) {
  std::mt19937_64 rng(1);
  for (ConvGeom g : {ConvGeom{3, 5, 3, 1, 1}, ConvGeom{2, 4, 3, 2, 1}, ConvGeom{4, 3, 1, 1, 0},
                     ConvGeom{2, 2, 7, 1, 3}}) {
    const auto x = random_tensor(2, g.cin, 9, 9, rng);
    const auto w = random_vec(static_cast<size_t>(g.cout) * g.patch_len(), rng);
    const auto b = random_vec(g.cout, rng);
    const auto y = conv2d_forward(g, w.data(), b.data(), x);
    ASSERT_EQ(y.h, g.out_size(9));
    for (int i = 0; i < y.n; ++i)
      for (int co = 0; co < g.cout; ++co)
        for (int oy = 0; oy < y.h; ++oy)
          for (int ox = 0; ox < y.w; ++ox) {
            double s = b[co];
            for (int ci = 0; ci < g.cin; ++ci)
              for (int ky = 0; ky < g.k; ++ky)
                for (int kx = 0; kx < g.k; ++kx) {
                  const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                  if (iy < 0 || ix < 0 || iy >= 9 || ix >= 9) continue;
                  s += w[((co * g.cin + ci) * g.k + ky) * g.k + kx] * x.at(i, ci, iy, ix);
                }
            ASSERT_NEAR(y.at(i, co, oy, ox), s, 1e-12);
          }
  }
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  const ConvGeom g{2, 3, 3, 2, 1};
  auto x = random_tensor(2, 2, 6, 6, rng);
  auto w = random_vec(3 * g.patch_len(), rng);
  auto b = random_vec(3, rng);
  const auto probe = random_tensor(2, 3, g.out_size(6), g.out_size(6), rng);
  std::vector<double> gw(w.size(), 0.0), gb(3, 0.0);
  const auto dx = conv2d_backward(g, w.data(), x, probe, gw.data(), gb.data());
  auto loss = [&] { return dot(conv2d_forward(g, w.data(), b.data(), x), probe); };
  check_fd(w, gw, loss);
  check_fd(b, gb, loss);
  check_fd(x.data, dx.data, loss);
}

TEST(BatchNorm, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto x = random_tensor(3, 2, 4, 4, rng);
  auto gamma = random_vec(2, rng), beta = random_vec(2, rng);
  const auto probe = random_tensor(3, 2, 4, 4, rng);
  BatchNormCache<double> cache;
  batchnorm_forward_train(x, gamma.data(), beta.data(), 1e-5, &cache);
  std::vector<double> gg(2, 0.0), gbeta(2, 0.0);
  const auto dx = batchnorm_backward(cache, gamma.data(), probe, gg.data(), gbeta.data());
  auto loss = [&] {
    return dot(batchnorm_forward_train(x, gamma.data(), beta.data(), 1e-5,
                                       static_cast<BatchNormCache<double>*>(nullptr)),
               probe);
  };
  check_fd(gamma, gg, loss);
  check_fd(beta, gbeta, loss);
  check_fd(x.data, dx.data, loss);
}

TEST(BatchNorm, TrainOutputIsStandardized) {
  std::mt19937_64 rng(4);
  const auto x = random_tensor(4, 3, 5, 5, rng);
  const std::vector<double> gamma(3, 1.0), beta(3, 0.0);
  const auto y = batchnorm_forward_train(x, gamma.data(), beta.data(), 0.0,
                                         static_cast<BatchNormCache<double>*>(nullptr));
  for (int ch = 0; ch < 3; ++ch) {
    double s = 0, sq = 0;
    for (int i = 0; i < 4; ++i)
      for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 5; ++c) {
          s += y.at(i, ch, r, c);
          sq += y.at(i, ch, r, c) * y.at(i, ch, r, c);
        }
    EXPECT_NEAR(s / 100, 0.0, 1e-12);
    EXPECT_NEAR(sq / 100, 1.0, 1e-9);
  }
}

TEST(BatchNorm, InferenceUsesRunningStats) {
  Tensor<double> x(1, 1, 1, 2);
  x.data = {1.0, 3.0};
  const double gamma = 2, beta = 1, mean = 1, var = 4;
  const auto y = batchnorm_forward_infer(x, &gamma, &beta, &mean, &var, 0.0);
  EXPECT_DOUBLE_EQ(y.data[0], 1.0);
  EXPECT_DOUBLE_EQ(y.data[1], 3.0);
}

TEST(Linear, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto x = random_tensor(3, 4, 1, 1, rng);
  auto w = random_vec(5 * 4, rng), b = random_vec(5, rng);
  const auto probe = random_tensor(3, 5, 1, 1, rng);
  std::vector<double> gw(w.size(), 0.0), gb(5, 0.0);
  const auto dx = linear_backward(w.data(), 4, 5, x, probe, gw.data(), gb.data());
  auto loss = [&] { return dot(linear_forward(w.data(), b.data(), 4, 5, x), probe); };
  check_fd(w, gw, loss);
  check_fd(b, gb, loss);
  check_fd(x.data, dx.data, loss);
}

TEST(Pooling, UpsampleAndAverageAdjoints) {
  std::mt19937_64 rng(6);
  auto x = random_tensor(2, 3, 3, 3, rng);
  const auto probe_up = random_tensor(2, 3, 6, 6, rng);
  const auto dx_up = upsample2x_backward(probe_up);
  check_fd(x.data, dx_up.data, [&] { return dot(upsample2x(x), probe_up); });
  const auto probe_gap = random_tensor(2, 3, 1, 1, rng);
  const auto dx_gap = global_avg_pool_backward(probe_gap, 3, 3);
  check_fd(x.data, dx_gap.data, [&] { return dot(global_avg_pool(x), probe_gap); });
}

TEST(Channels, ConcatSplitRoundTrip) {
  std::mt19937_64 rng(7);
  const auto a = random_tensor(2, 3, 2, 2, rng), b = random_tensor(2, 1, 2, 2, rng);
  Tensor<double> da, db;
  split_channels(concat_channels(a, b), 3, da, db);
  EXPECT_EQ(da, a);
  EXPECT_EQ(db, b);
}

TEST(Sigmoid, StableAtExtremes) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_GT(sigmoid(20.0), 0.999999);
  EXPECT_EQ(sigmoid(-1e4), 0.0);
  EXPECT_EQ(sigmoid(1e4), 1.0);
}

}  // namespace
}  // namespace mtmil::nn
