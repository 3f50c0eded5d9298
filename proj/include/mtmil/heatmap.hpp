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

// Image-level maps stitched from per-patch network outputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mtmil/errors.hpp"
#include "mtmil/image.hpp"
#include "mtmil/mil_net.hpp"

namespace mtmil {

struct StitchedMaps {
  Image<double> lesion_map;     // frame x frame x C, mean over covering patches
  Image<double> attention_map;  // frame x frame, scaled so the maximum is 1
  Image<int> coverage;          // frame x frame, number of covering patches
};

namespace heatmap_detail {

inline Image<int> coverage_of(const std::vector<PatchOrigin>& origins, int d,
                              int frame) {
  Image<int> cov(frame, frame, 1, 0);
  for (const auto& o : origins) {
    if (o.row < 0 || o.col < 0 || o.row + d > frame || o.col + d > frame)
      throw InvalidArgument("patch origin outside the frame");
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) ++cov.at(o.row + r, o.col + c);
  }
  return cov;
}

}  // namespace heatmap_detail

// Each patch map is added into its footprint; the result is the per-pixel
// mean over covering patches, 0 where nothing covers.
template <typename T>
Image<double> stitch_lesion_maps(const BagForwardResult<T>& res, int frame = 512,
                                 Image<int>* coverage = nullptr) {
  const auto& maps = res.lesion_maps;
  if (maps.n != static_cast<int>(res.origins.size()))
    throw ShapeError("stitch: maps and origins differ in count");
  const int d = maps.h, C = maps.c;
  Image<int> cov = heatmap_detail::coverage_of(res.origins, d, frame);
  Image<double> sum(frame, frame, C, 0.0);
  for (int k = 0; k < maps.n; ++k) {
    const PatchOrigin o = res.origins[k];
    const T* m = maps.sample(k);
    for (int ch = 0; ch < C; ++ch)
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c)
          sum.at(o.row + r, o.col + c, ch) +=
              static_cast<double>(m[(static_cast<size_t>(ch) * d + r) * d + c]);
  }
  for (int r = 0; r < frame; ++r)
    for (int c = 0; c < frame; ++c) {
      const int n = cov.at(r, c);
      if (n > 1)
        for (int ch = 0; ch < C; ++ch) sum.at(r, c, ch) /= n;
    }
  if (coverage) *coverage = std::move(cov);
  return sum;
}

// Attention weight per pixel averaged over covering patches, divided by the
// maximum; all zeros if the maximum is 0.
template <typename T>
Image<double> stitch_attention(const BagForwardResult<T>& res, int d,
                               int frame = 512) {
  if (res.alphas.size() != res.origins.size())
    throw ShapeError("stitch: alphas and origins differ in count");
  Image<int> cov = heatmap_detail::coverage_of(res.origins, d, frame);
  Image<double> acc(frame, frame, 1, 0.0);
  for (size_t k = 0; k < res.origins.size(); ++k) {
    const PatchOrigin o = res.origins[k];
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c)
        acc.at(o.row + r, o.col + c) += static_cast<double>(res.alphas[k]);
  }
  double mx = 0;
  for (size_t i = 0; i < acc.data.size(); ++i) {
    if (cov.data[i] > 0) acc.data[i] /= cov.data[i];
    mx = std::max(mx, acc.data[i]);
  }
  for (auto& v : acc.data) v = mx > 0 ? v / mx : 0.0;
  return acc;
}

template <typename T>
StitchedMaps stitch(const BagForwardResult<T>& res, int frame = 512) {
  StitchedMaps s;
  s.lesion_map = stitch_lesion_maps(res, frame, &s.coverage);
  s.attention_map = stitch_attention(res, res.lesion_maps.h, frame);
  return s;
}

// 8-bit rendering of one channel of a [0, 1] map.
inline ImageU8 map_to_u8(const Image<double>& m, int channel = 0) {
  ImageU8 out(m.height, m.width, 1);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      out.at(r, c) = static_cast<std::uint8_t>(
          std::lround(255.0 * std::clamp(m.at(r, c, channel), 0.0, 1.0)));
  return out;
}

// Alpha-blends a red attention layer onto an RGB image.
inline ImageU8 overlay(const ImageF& rgb, const Image<double>& attention,
                       double strength = 0.6) {
  ImageU8 out(rgb.height, rgb.width, 3);
  for (int r = 0; r < rgb.height; ++r)
    for (int c = 0; c < rgb.width; ++c) {
      const double a = strength * std::clamp(attention.at(r, c), 0.0, 1.0);
      const double layer[3] = {255.0, 0.0, 0.0};
      for (int k = 0; k < 3; ++k) {
        const double v = (1 - a) * rgb.at(r, c, k) + a * layer[k];
        out.at(r, c, k) =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  return out;
}

}  // namespace mtmil
