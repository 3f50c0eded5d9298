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

#include <cmath>
#include <cstdint>

#include "mtmil/nn/params.hpp"

namespace mtmil {

struct AdamOptions {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(const nn::ArrayStore<T>& params, AdamOptions opt)
      : opt_(opt), m_(params.zeros_like()), v_(params.zeros_like()) {}

  void step(nn::ArrayStore<T>& params, const nn::ArrayStore<T>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (int i = 0; i < params.size(); ++i) {
      auto& p = params[i].value;
      const auto& g = grads[i].value;
      auto& m = m_[i].value;
      auto& v = v_[i].value;
      for (size_t j = 0; j < p.size(); ++j) {
        const double gj = g[j];
        const double mj = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj;
        const double vj = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double update =
            opt_.learning_rate * (mj / c1) / (std::sqrt(vj / c2) + opt_.eps);
        p[j] = static_cast<T>(p[j] - update);
      }
    }
  }

  std::int64_t steps() const { return t_; }
  const AdamOptions& options() const { return opt_; }

 private:
  AdamOptions opt_;
  nn::ArrayStore<T> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace mtmil
