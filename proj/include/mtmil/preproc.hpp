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

// Fundus preprocessing: Hough disk detection, crop/pad/resize to the
// canonical square frame, local colour normalisation and boundary zeroing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mtmil/errors.hpp"
#include "mtmil/image.hpp"

namespace mtmil {

struct RawFundusImage {
  ImageU8 pixels;  // H x W x 3
  std::string source_id;

  void validate() const {
    if (pixels.channels != 3)
      throw InvalidArgument("raw fundus image must have 3 channels");
    if (pixels.height < 64 || pixels.width < 64)
      throw InvalidArgument("raw fundus image must be at least 64x64");
  }
};

// Circle in source pixel coordinates; pixel (r, c) has its centre at (r, c).
struct DiskGeometry {
  double center_row = 0;
  double center_col = 0;
  double radius = 0;
};

struct PreprocessedImage {
  ImageF image;      // frame x frame x 3, values in [0, 255]
  Mask retina_mask;  // frame x frame
  std::string source_id;
  DiskGeometry disk;  // in source coordinates

  int frame() const { return image.height; }
};

struct HoughOptions {
  int width_target = 512;
  double min_radius_fraction = 0.2;
  double max_radius_fraction = 0.6;
  int radius_step = 2;
  double accept_ratio = 0.4;
};

struct ColorNormOptions {
  double scale = 4.0;
  double offset = 128.0;
  double sigma_per_radius = 1.0 / 30.0;
};

struct PreprocessOptions {
  int frame = 512;
  HoughOptions hough;
  ColorNormOptions color;
  double boundary_fraction = 0.05;
};

namespace preproc_detail {

inline std::vector<float> to_gray(const ImageU8& img) {
  std::vector<float> g(img.pixel_count());
  for (size_t p = 0; p < g.size(); ++p) {
    const auto* px = &img.data[p * img.channels];
    g[p] = (static_cast<float>(px[0]) + px[1] + px[2]) / 3.0f;
  }
  return g;
}

// Area-style resampling of a single-channel raster by supersampled bilinear
// lookups; coordinates outside the source clamp to the border.
inline std::vector<float> resize_gray(const std::vector<float>& src, int h,
                                      int w, int oh, int ow) {
  std::vector<float> out(static_cast<size_t>(oh) * ow);
  const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
  const int ssy = std::max(1, static_cast<int>(std::ceil(sy)));
  const int ssx = std::max(1, static_cast<int>(std::ceil(sx)));
  auto sample = [&](double y, double x) {
    y = std::clamp(y, 0.0, h - 1.0);
    x = std::clamp(x, 0.0, w - 1.0);
    const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = y - y0, fx = x - x0;
    const double a = src[static_cast<size_t>(y0) * w + x0];
    const double b = src[static_cast<size_t>(y0) * w + x1];
    const double c = src[static_cast<size_t>(y1) * w + x0];
    const double d = src[static_cast<size_t>(y1) * w + x1];
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
  };
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      double acc = 0;
      for (int a = 0; a < ssy; ++a)
        for (int b = 0; b < ssx; ++b)
          acc += sample((i + (a + 0.5) / ssy) * sy - 0.5,
                        (j + (b + 0.5) / ssx) * sx - 0.5);
      out[static_cast<size_t>(i) * ow + j] =
          static_cast<float>(acc / (ssy * ssx));
    }
  return out;
}

inline double otsu_threshold(const std::vector<float>& g) {
  std::array<double, 256> hist{};
  for (float v : g)
    hist[static_cast<size_t>(std::clamp(v, 0.0f, 255.0f) + 0.5f) & 255]++;
  const double total = static_cast<double>(g.size());
  double sum_all = 0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[i];
  double w0 = 0, sum0 = 0, best = -1, thr = 0;
  for (int t = 0; t < 255; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      thr = t + 0.5;
    }
  }
  return thr;
}

struct ContourPoint {
  double row, col;
  double nrow, ncol;  // unit normal pointing into the foreground
};

// `sigma` sets the Gaussian window of the normal estimate; it should exceed
// the staircase period of the edge (larger when the source was upscaled).
inline std::vector<ContourPoint> contour_points(const std::vector<uint8_t>& fg,
                                                int h, int w, double sigma = 3.0) {
  const int rad = static_cast<int>(std::ceil(2.5 * sigma));
  std::vector<double> wk(2 * rad + 1);
  for (int a = -rad; a <= rad; ++a) wk[a + rad] = std::exp(-a * a / (2 * sigma * sigma));
  auto at = [&](int r, int c) -> int {
    r = std::clamp(r, 0, h - 1);
    c = std::clamp(c, 0, w - 1);
    return fg[static_cast<size_t>(r) * w + c];
  };
  std::vector<ContourPoint> pts;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!fg[static_cast<size_t>(r) * w + c]) continue;
      bool edge = false;
      const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int rr = r + dr[k], cc = c + dc[k];
        if (rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
        if (!fg[static_cast<size_t>(rr) * w + cc]) edge = true;
      }
      if (!edge) continue;
      // Gaussian-weighted gradient of the foreground indicator; the wide
      // window averages out the staircase of a digitized edge.
      double gr = 0, gc = 0;
      for (int a = -rad; a <= rad; ++a)
        for (int b = -rad; b <= rad; ++b) {
          const double v = at(r + a, c + b) * wk[a + rad] * wk[b + rad];
          gr += a * v;
          gc += b * v;
        }
      const double n = std::hypot(gr, gc);
      if (n == 0) continue;
      pts.push_back({static_cast<double>(r), static_cast<double>(c), gr / n,
                     gc / n});
    }
  return pts;
}

// Algebraic least-squares circle fit. Returns false for degenerate input.
inline bool fit_circle(const std::vector<ContourPoint>& pts, double& cr,
                       double& cc, double& radius) {
  if (pts.size() < 8) return false;
  double mr = 0, mc = 0;
  for (const auto& p : pts) {
    mr += p.row;
    mc += p.col;
  }
  mr /= pts.size();
  mc /= pts.size();
  double suu = 0, svv = 0, suv = 0, suuu = 0, svvv = 0, suvv = 0, svuu = 0;
  for (const auto& p : pts) {
    const double u = p.row - mr, v = p.col - mc;
    suu += u * u;
    svv += v * v;
    suv += u * v;
    suuu += u * u * u;
    svvv += v * v * v;
    suvv += u * v * v;
    svuu += v * u * u;
  }
  const double det = suu * svv - suv * suv;
  if (std::abs(det) < 1e-9) return false;
  const double b1 = 0.5 * (suuu + suvv), b2 = 0.5 * (svvv + svuu);
  const double uc = (b1 * svv - b2 * suv) / det;
  const double vc = (suu * b2 - suv * b1) / det;
  cr = uc + mr;
  cc = vc + mc;
  radius = std::sqrt(uc * uc + vc * vc + (suu + svv) / pts.size());
  return std::isfinite(radius);
}

}  // namespace preproc_detail

// Hough search for the eye disk. The image is rescaled to the target width
// first; each contour pixel votes along its inward normal for every swept
// radius, and votes are pooled over a 3x3 neighbourhood.
inline DiskGeometry detect_disk(const RawFundusImage& raw,
                                const HoughOptions& opt = {}) {
  using namespace preproc_detail;
  raw.validate();
  if (opt.width_target <= 0) throw InvalidArgument("width_target must be > 0");
  const int h = raw.pixels.height, w = raw.pixels.width;
  const int ow = opt.width_target;
  const int oh = std::max(1, static_cast<int>(std::lround(
                                 static_cast<double>(h) * ow / w)));
  const std::vector<float> gray = resize_gray(to_gray(raw.pixels), h, w, oh, ow);

  const double thr = otsu_threshold(gray);
  std::vector<uint8_t> fg(gray.size());
  size_t nfg = 0;
  for (size_t i = 0; i < gray.size(); ++i) {
    fg[i] = gray[i] > thr ? 1 : 0;
    nfg += fg[i];
  }
  if (nfg == 0 || nfg == gray.size())
    throw DiskNotFound("no foreground/background separation in " +
                       raw.source_id);
  const auto pts =
      contour_points(fg, oh, ow, 3.0 * std::max(1.0, static_cast<double>(ow) / w));
  if (pts.empty()) throw DiskNotFound("no disk contour in " + raw.source_id);

  const int rmin = static_cast<int>(std::ceil(opt.min_radius_fraction * ow));
  const int rmax = static_cast<int>(std::floor(opt.max_radius_fraction * ow));
  const int pool = std::max(1, static_cast<int>(std::lround(0.01 * ow)));
  std::vector<int> acc(static_cast<size_t>(oh) * ow, 0);
  std::vector<size_t> touched;
  double best_votes = -1, best_ratio = 0;
  int best_r = 0, best_row = 0, best_col = 0;
  for (int r = rmin; r <= rmax; r += std::max(1, opt.radius_step)) {
    touched.clear();
    for (const auto& p : pts) {
      const int cr = static_cast<int>(std::lround(p.row + r * p.nrow));
      const int cc = static_cast<int>(std::lround(p.col + r * p.ncol));
      if (cr < 0 || cc < 0 || cr >= oh || cc >= ow) continue;
      const size_t id = static_cast<size_t>(cr) * ow + cc;
      if (acc[id]++ == 0) touched.push_back(id);
    }
    // Highest pooled vote wins; the pool absorbs sub-step radii and normal
    // noise. The least-squares refinement below restores precision.
    for (size_t id : touched) {
      const int cr = static_cast<int>(id / ow), cc = static_cast<int>(id % ow);
      int votes = 0;
      for (int a = -pool; a <= pool; ++a)
        for (int b = -pool; b <= pool; ++b) {
          const int rr = cr + a, c2 = cc + b;
          if (rr < 0 || c2 < 0 || rr >= oh || c2 >= ow) continue;
          votes += acc[static_cast<size_t>(rr) * ow + c2];
        }
      if (votes > best_votes) {
        best_votes = votes;
        best_ratio = votes / (2.0 * std::numbers::pi * r);
        best_r = r;
        best_row = cr;
        best_col = cc;
      }
    }
    for (size_t id : touched) acc[id] = 0;
  }
  if (best_votes <= 0 || best_ratio < opt.accept_ratio)
    throw DiskNotFound("Hough peak below vote threshold in " + raw.source_id);

  // Refine on the inliers of the voted circle.
  double cr = best_row, cc = best_col, rad = best_r;
  for (int iter = 0; iter < 3; ++iter) {
    const double band = iter == 0 ? std::max(3.0, 0.03 * rad) : 2.0;
    std::vector<ContourPoint> inliers;
    for (const auto& p : pts) {
      const double d = std::hypot(p.row - cr, p.col - cc);
      if (std::abs(d - (rad - 0.5)) <= band) inliers.push_back(p);
    }
    double r2, c2, rr;
    if (!fit_circle(inliers, r2, c2, rr)) break;
    cr = r2;
    cc = c2;
    // Contour pixels sit half a pixel inside the true edge.
    rad = rr + 0.5;
  }

  const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
  DiskGeometry g;
  g.center_row = (cr + 0.5) * sy - 0.5;
  g.center_col = (cc + 0.5) * sx - 0.5;
  g.radius = rad * sx;
  if (!(g.radius > 0)) throw DiskNotFound("degenerate disk in " + raw.source_id);
  return g;
}

inline DiskGeometry detect_disk(const RawFundusImage& raw, int width_target) {
  HoughOptions opt;
  opt.width_target = width_target;
  return detect_disk(raw, opt);
}

// Source coordinate sampled by output pixel `i` of the frame.
inline double frame_to_source(double center, double radius, int frame, int i) {
  return center + (i - (frame - 1) / 2.0) * (2.0 * radius / frame);
}

struct CroppedDisk {
  ImageF image;
  Mask mask;
};

// Crops the 2r x 2r square around the disk (zero outside the source, which is
// the same as zero-padding before cropping) and resamples it to frame x frame.
inline CroppedDisk crop_pad_resize(const RawFundusImage& raw,
                                   const DiskGeometry& geom, int frame = 512) {
  if (!(geom.radius > 0)) throw InvalidArgument("disk radius must be > 0");
  const ImageU8& src = raw.pixels;
  const int h = src.height, w = src.width;
  CroppedDisk out{ImageF(frame, frame, 3), make_mask(frame, frame)};
  const double step = 2.0 * geom.radius / frame;
  const int ss = std::max(1, static_cast<int>(std::ceil(step)));

  auto sample = [&](double y, double x, double* rgb) -> bool {
    if (y < -0.5 || x < -0.5 || y > h - 0.5 || x > w - 0.5) return false;
    y = std::clamp(y, 0.0, h - 1.0);
    x = std::clamp(x, 0.0, w - 1.0);
    const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = y - y0, fx = x - x0;
    for (int ch = 0; ch < 3; ++ch) {
      const double a = src.at(y0, x0, ch), b = src.at(y0, x1, ch);
      const double c = src.at(y1, x0, ch), d = src.at(y1, x1, ch);
      rgb[ch] = fx == 0 && fy == 0
                    ? a
                    : (a * (1 - fx) + b * fx) * (1 - fy) +
                          (c * (1 - fx) + d * fx) * fy;
    }
    return true;
  };

  for (int i = 0; i < frame; ++i) {
    const double y = frame_to_source(geom.center_row, geom.radius, frame, i);
    for (int j = 0; j < frame; ++j) {
      const double x = frame_to_source(geom.center_col, geom.radius, frame, j);
      const double dr = y - geom.center_row, dc = x - geom.center_col;
      const bool in_src = y >= -0.5 && x >= -0.5 && y <= h - 0.5 && x <= w - 0.5;
      out.mask.at(i, j) =
          in_src && dr * dr + dc * dc <= geom.radius * geom.radius ? 1 : 0;
      double acc[3] = {0, 0, 0};
      int n = 0;
      if (ss == 1) {
        double rgb[3];
        if (sample(y, x, rgb)) {
          for (int ch = 0; ch < 3; ++ch) acc[ch] = rgb[ch];
          n = 1;
        }
      } else {
        for (int a = 0; a < ss; ++a)
          for (int b = 0; b < ss; ++b) {
            double rgb[3];
            const double yy = y + ((a + 0.5) / ss - 0.5) * step;
            const double xx = x + ((b + 0.5) / ss - 0.5) * step;
            if (sample(yy, xx, rgb))
              for (int ch = 0; ch < 3; ++ch) acc[ch] += rgb[ch];
            ++n;
          }
      }
      for (int ch = 0; ch < 3; ++ch)
        out.image.at(i, j, ch) = n ? static_cast<float>(acc[ch] / n) : 0.0f;
    }
  }
  return out;
}

// Normalised, 3-sigma truncated 1-D Gaussian.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) throw InvalidArgument("sigma must be > 0");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double s = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    s += k[i + radius];
  }
  for (auto& v : k) v /= s;
  return k;
}

// Separable Gaussian blur with replicated borders.
inline Image<double> gaussian_blur(const ImageF& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int rad = static_cast<int>(k.size() / 2);
  const int h = img.height, w = img.width, nc = img.channels;
  Image<double> tmp(h, w, nc), out(h, w, nc);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < nc; ++ch) {
        double s = 0;
        for (int t = -rad; t <= rad; ++t)
          s += k[t + rad] * img.at(r, std::clamp(c + t, 0, w - 1), ch);
        tmp.at(r, c, ch) = s;
      }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < nc; ++ch) {
        double s = 0;
        for (int t = -rad; t <= rad; ++t)
          s += k[t + rad] * tmp.at(std::clamp(r + t, 0, h - 1), c, ch);
        out.at(r, c, ch) = s;
      }
  return out;
}

// image' = clamp(scale * (image - G * image) + offset, 0, 255) inside the
// mask, offset outside. sigma defaults to mapped_radius * sigma_per_radius.
inline ImageF normalize_color(const ImageF& image, const Mask& mask,
                              const ColorNormOptions& opt = {}) {
  if (image.height != mask.height || image.width != mask.width)
    throw ShapeError("normalize_color: image/mask mismatch");
  const double sigma = (image.width / 2.0) * opt.sigma_per_radius;
  const Image<double> blurred = gaussian_blur(image, sigma);
  ImageF out(image.height, image.width, image.channels);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c)
      for (int ch = 0; ch < image.channels; ++ch) {
        double v = opt.offset;
        if (mask.at(r, c)) {
          v = opt.scale * (image.at(r, c, ch) - blurred.at(r, c, ch)) + opt.offset;
          v = std::clamp(v, 0.0, 255.0);
        }
        out.at(r, c, ch) = static_cast<float>(v);
      }
  return out;
}

// True when frame pixel (r, c) survives boundary zeroing.
inline bool inside_shrunk_disk(int r, int c, int frame, double fraction) {
  const double center = (frame - 1) / 2.0;
  const double keep = (1.0 - fraction) * frame / 2.0;
  const double dr = r - center, dc = c - center;
  return dr * dr + dc * dc <= keep * keep;
}

// Zeroes every pixel farther than (1 - fraction) * mapped_radius from the
// mapped disk centre, in both image and mask.
inline PreprocessedImage zero_boundary(const ImageF& image, const Mask& mask,
                                       double fraction,
                                       const DiskGeometry& disk = {},
                                       std::string source_id = {}) {
  if (fraction < 0 || fraction >= 1)
    throw InvalidArgument("boundary fraction must be in [0, 1)");
  if (image.height != image.width || mask.height != image.height ||
      mask.width != image.width)
    throw ShapeError("zero_boundary: expects square image and matching mask");
  PreprocessedImage out{image, mask, std::move(source_id), disk};
  const int f = image.height;
  for (int r = 0; r < f; ++r)
    for (int c = 0; c < f; ++c) {
      if (inside_shrunk_disk(r, c, f, fraction)) continue;
      out.retina_mask.at(r, c) = 0;
      for (int ch = 0; ch < image.channels; ++ch) out.image.at(r, c, ch) = 0.0f;
    }
  return out;
}

inline PreprocessedImage preprocess(const RawFundusImage& raw,
                                    const PreprocessOptions& opt = {}) {
  const DiskGeometry geom = detect_disk(raw, opt.hough);
  CroppedDisk crop = crop_pad_resize(raw, geom, opt.frame);
  ImageF norm = normalize_color(crop.image, crop.mask, opt.color);
  return zero_boundary(norm, crop.mask, opt.boundary_fraction, geom,
                       raw.source_id);
}

// Maps raw-frame binary masks (any channel count) into the preprocessed
// frame with nearest-neighbour sampling, restricted to the retina mask.
inline Mask preprocess_masks(const Mask& raw_masks, const DiskGeometry& geom,
                             const Mask& retina_mask) {
  const int frame = retina_mask.height;
  Mask out(frame, frame, raw_masks.channels, 0);
  for (int i = 0; i < frame; ++i) {
    const double y = frame_to_source(geom.center_row, geom.radius, frame, i);
    const int sr = static_cast<int>(std::lround(y));
    for (int j = 0; j < frame; ++j) {
      if (!retina_mask.at(i, j)) continue;
      const double x = frame_to_source(geom.center_col, geom.radius, frame, j);
      const int sc = static_cast<int>(std::lround(x));
      if (!raw_masks.contains(sr, sc)) continue;
      for (int ch = 0; ch < raw_masks.channels; ++ch)
        out.at(i, j, ch) = raw_masks.at(sr, sc, ch) ? 1 : 0;
    }
  }
  return out;
}

}  // namespace mtmil
