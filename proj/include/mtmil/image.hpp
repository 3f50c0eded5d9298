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
#include <cstdint>
#include <vector>

#include "mtmil/errors.hpp"

namespace mtmil {

// Interleaved HxWxC raster. Row-major, channel fastest.
template <typename T>
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<T> data;

  Image() = default;
  Image(int h, int w, int c, T fill = T{})
      : height(h), width(w), channels(c),
        data(static_cast<size_t>(h) * w * c, fill) {}

  bool empty() const { return data.empty(); }
  size_t pixel_count() const { return static_cast<size_t>(height) * width; }

  T& at(int r, int c, int ch = 0) {
    return data[(static_cast<size_t>(r) * width + c) * channels + ch];
  }
  const T& at(int r, int c, int ch = 0) const {
    return data[(static_cast<size_t>(r) * width + c) * channels + ch];
  }
  bool contains(int r, int c) const {
    return r >= 0 && c >= 0 && r < height && c < width;
  }

  bool operator==(const Image& o) const = default;
};

using ImageU8 = Image<std::uint8_t>;
using ImageF = Image<float>;
// Single-channel binary raster holding 0 or 1.
using Mask = Image<std::uint8_t>;

inline Mask make_mask(int h, int w, std::uint8_t fill = 0) {
  return Mask(h, w, 1, fill);
}

inline size_t count_nonzero(const Mask& m) {
  return static_cast<size_t>(
      std::count_if(m.data.begin(), m.data.end(), [](auto v) { return v != 0; }));
}

// Rounds and saturates a real-valued image to 8 bits.
template <typename T>
ImageU8 to_u8(const Image<T>& img) {
  ImageU8 out(img.height, img.width, img.channels);
  for (size_t i = 0; i < img.data.size(); ++i) {
    double v = static_cast<double>(img.data[i]);
    v = std::clamp(v, 0.0, 255.0);
    out.data[i] = static_cast<std::uint8_t>(v + 0.5);
  }
  return out;
}

template <typename T>
ImageF to_float(const Image<T>& img) {
  ImageF out(img.height, img.width, img.channels);
  for (size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = static_cast<float>(img.data[i]);
  return out;
}

// Returns channel `ch` of `img` as a single-channel raster.
template <typename T>
Image<T> extract_channel(const Image<T>& img, int ch) {
  Image<T> out(img.height, img.width, 1);
  for (size_t p = 0; p < img.pixel_count(); ++p)
    out.data[p] = img.data[p * img.channels + ch];
  return out;
}

}  // namespace mtmil
