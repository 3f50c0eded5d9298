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

#include <algorithm>
#include <cmath>
#include <span>

#include "mtmil/errors.hpp"
#include "mtmil/nn/tensor.hpp"

namespace mtmil {

inline constexpr double kProbClamp = 1e-7;

// Binary cross entropy of one prediction, probability clamped to
// [kProbClamp, 1 - kProbClamp].
inline double bce(double p, double y) {
  const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
}

// d bce / d logit for p = sigmoid(logit); zero where the clamp is active.
inline double bce_dlogit(double p, double y) {
  if (p < kProbClamp || p > 1.0 - kProbClamp) return 0.0;
  return p - y;
}

// Mean BCE over a batch of bag probabilities.
template <typename P, typename Y>
double classification_loss(std::span<const P> probs, std::span<const Y> labels) {
  if (probs.size() != labels.size())
    throw ShapeError("classification_loss: length mismatch");
  if (probs.empty()) return 0.0;
  double s = 0;
  for (size_t i = 0; i < probs.size(); ++i)
    s += bce(static_cast<double>(probs[i]), static_cast<double>(labels[i]));
  return s / static_cast<double>(probs.size());
}

// Mean per-pixel BCE over every patch, channel and pixel; channels are
// independent binary problems.
template <typename T>
double segmentation_loss(const nn::Tensor<T>& maps,
                         const nn::Tensor<T>& targets) {
  if (!maps.same_shape(targets))
    throw ShapeError("segmentation_loss: shape mismatch");
  if (maps.data.empty()) return 0.0;
  double s = 0;
  for (size_t i = 0; i < maps.data.size(); ++i)
    s += bce(static_cast<double>(maps.data[i]),
             static_cast<double>(targets.data[i]));
  return s / static_cast<double>(maps.data.size());
}

}  // namespace mtmil
