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

// Training-time augmentation: one geometric transform applied identically to
// image, retina mask and lesion masks, plus photometric jitter on the image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "mtmil/example.hpp"
#include "mtmil/image.hpp"

namespace mtmil {

struct AugmentRanges {
  double max_shift_fraction = 0.1;  // of the frame side
  double scale_min = 0.9, scale_max = 1.1;
  double max_rotation_deg = 180.0;
  bool hflip = true, vflip = true;
  double brightness = 0.1, contrast = 0.1, saturation = 0.1, hue = 0.1;

  static AugmentRanges identity() {
    AugmentRanges r;
    r.max_shift_fraction = 0;
    r.scale_min = r.scale_max = 1;
    r.max_rotation_deg = 0;
    r.hflip = r.vflip = false;
    r.brightness = r.contrast = r.saturation = r.hue = 0;
    return r;
  }
};

// Forward map about the frame centre: flip, then rotate+scale, then shift.
struct GeometricTransform {
  double rotation_deg = 0;
  double scale = 1;
  double shift_row = 0, shift_col = 0;
  bool hflip = false, vflip = false;

  bool is_identity() const {
    return rotation_deg == 0 && scale == 1 && shift_row == 0 &&
           shift_col == 0 && !hflip && !vflip;
  }

  // Output pixel -> source coordinate.
  void inverse(double r, double c, double centre, double& sr,
               double& sc) const {
    const double th = rotation_deg * std::numbers::pi / 180.0;
    const double y = r - centre - shift_row, x = c - centre - shift_col;
    // Inverse rotation by -th, then inverse scale.
    double yr = (std::cos(th) * y - std::sin(th) * x) / scale;
    double xr = (std::sin(th) * y + std::cos(th) * x) / scale;
    if (vflip) yr = -yr;
    if (hflip) xr = -xr;
    sr = yr + centre;
    sc = xr + centre;
  }
};

// Multiplicative factors are 1 and hue 0 (fraction of a full turn) at rest.
struct PhotometricJitter {
  double brightness = 1, contrast = 1, saturation = 1, hue = 0;
  bool is_identity() const {
    return brightness == 1 && contrast == 1 && saturation == 1 && hue == 0;
  }
};

inline GeometricTransform sample_transform(const AugmentRanges& r, int frame,
                                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> s(r.scale_min, r.scale_max);
  std::bernoulli_distribution coin(0.5);
  GeometricTransform t;
  t.rotation_deg = r.max_rotation_deg * u(rng);
  t.scale = r.scale_min == r.scale_max ? r.scale_min : s(rng);
  t.shift_row = std::round(r.max_shift_fraction * frame * u(rng));
  t.shift_col = std::round(r.max_shift_fraction * frame * u(rng));
  t.hflip = r.hflip && coin(rng);
  t.vflip = r.vflip && coin(rng);
  return t;
}

inline PhotometricJitter sample_jitter(const AugmentRanges& r,
                                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  PhotometricJitter j;
  j.brightness = 1 + r.brightness * u(rng);
  j.contrast = 1 + r.contrast * u(rng);
  j.saturation = 1 + r.saturation * u(rng);
  j.hue = r.hue * u(rng);
  return j;
}

inline Mask warp_nearest(const Mask& m, const GeometricTransform& t) {
  Mask out(m.height, m.width, m.channels, 0);
  const double centre = (m.height - 1) / 2.0;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      double sr, sc;
      t.inverse(r, c, centre, sr, sc);
      const int ir = static_cast<int>(std::lround(sr));
      const int ic = static_cast<int>(std::lround(sc));
      if (!m.contains(ir, ic)) continue;
      for (int ch = 0; ch < m.channels; ++ch) out.at(r, c, ch) = m.at(ir, ic, ch);
    }
  return out;
}

inline ImageF warp_bilinear(const ImageF& img, const GeometricTransform& t) {
  ImageF out(img.height, img.width, img.channels, 0.0f);
  const double centre = (img.height - 1) / 2.0;
  const int h = img.height, w = img.width;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double sr, sc;
      t.inverse(r, c, centre, sr, sc);
      if (sr < -0.5 || sc < -0.5 || sr > h - 0.5 || sc > w - 0.5) continue;
      sr = std::clamp(sr, 0.0, h - 1.0);
      sc = std::clamp(sc, 0.0, w - 1.0);
      const int y0 = static_cast<int>(sr), x0 = static_cast<int>(sc);
      const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = sr - y0, fx = sc - x0;
      for (int ch = 0; ch < img.channels; ++ch) {
        const double v = (img.at(y0, x0, ch) * (1 - fx) + img.at(y0, x1, ch) * fx) *
                             (1 - fy) +
                         (img.at(y1, x0, ch) * (1 - fx) + img.at(y1, x1, ch) * fx) * fy;
        out.at(r, c, ch) = static_cast<float>(v);
      }
    }
  return out;
}

// Brightness, contrast, saturation and hue (YIQ rotation) on masked pixels.
inline void apply_jitter(ImageF& img, const Mask& mask,
                         const PhotometricJitter& j) {
  double mean = 0;
  size_t n = 0;
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      if (mask.at(r, c)) {
        mean += (img.at(r, c, 0) + img.at(r, c, 1) + img.at(r, c, 2)) / 3.0;
        ++n;
      }
  if (n == 0) return;
  mean = mean * j.brightness / n;
  const double th = 2 * std::numbers::pi * j.hue;
  const double ch = std::cos(th), sh = std::sin(th);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      if (!mask.at(r, c)) continue;
      double rgb[3];
      for (int k = 0; k < 3; ++k) rgb[k] = img.at(r, c, k) * j.brightness;
      for (int k = 0; k < 3; ++k) rgb[k] = (rgb[k] - mean) * j.contrast + mean;
      const double gray = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
      for (int k = 0; k < 3; ++k) rgb[k] = gray + (rgb[k] - gray) * j.saturation;
      const double y = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
      double i = 0.596 * rgb[0] - 0.274 * rgb[1] - 0.322 * rgb[2];
      double q = 0.211 * rgb[0] - 0.523 * rgb[1] + 0.312 * rgb[2];
      const double i2 = ch * i - sh * q, q2 = sh * i + ch * q;
      i = i2;
      q = q2;
      rgb[0] = y + 0.956 * i + 0.621 * q;
      rgb[1] = y - 0.272 * i - 0.647 * q;
      rgb[2] = y - 1.106 * i + 1.703 * q;
      for (int k = 0; k < 3; ++k)
        img.at(r, c, k) = static_cast<float>(std::clamp(rgb[k], 0.0, 255.0));
    }
}

inline LabeledExample augment_with(const LabeledExample& ex,
                                   const GeometricTransform& t,
                                   const PhotometricJitter& j) {
  LabeledExample out = ex;
  if (!t.is_identity()) {
    out.image.retina_mask = warp_nearest(ex.image.retina_mask, t);
    out.image.image = warp_bilinear(ex.image.image, t);
    const Mask& rm = out.image.retina_mask;
    for (int r = 0; r < rm.height; ++r)
      for (int c = 0; c < rm.width; ++c)
        if (!rm.at(r, c))
          for (int k = 0; k < out.image.image.channels; ++k)
            out.image.image.at(r, c, k) = 0.0f;
    if (ex.has_masks) {
      out.lesion_masks = warp_nearest(ex.lesion_masks, t);
      for (int r = 0; r < rm.height; ++r)
        for (int c = 0; c < rm.width; ++c)
          if (!rm.at(r, c))
            for (int k = 0; k < out.lesion_masks.channels; ++k)
              out.lesion_masks.at(r, c, k) = 0;
    }
  }
  if (!j.is_identity()) apply_jitter(out.image.image, out.image.retina_mask, j);
  return out;
}

inline LabeledExample augment(const LabeledExample& ex, const AugmentRanges& r,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const GeometricTransform t = sample_transform(r, ex.image.frame(), rng);
  const PhotometricJitter j = sample_jitter(r, rng);
  return augment_with(ex, t, j);
}

}  // namespace mtmil
