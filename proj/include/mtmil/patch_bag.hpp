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

// Bag-of-patches encoding of a preprocessed image.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mtmil/errors.hpp"
#include "mtmil/image.hpp"
#include "mtmil/preproc.hpp"

namespace mtmil {

struct PatchSpec {
  int patch_size = 64;             // d
  double overlap = 0.75;           // t, grid policy
  int k_train = 50;                // random policy sample count
  double content_threshold = 0.5;  // minimum retina fraction per patch
  int pool_stride = 8;             // random policy candidate lattice

  void validate(int frame = 512) const {
    if (patch_size < 1 || patch_size > frame)
      throw InvalidArgument("patch_size must be in [1, frame]");
    if (!(overlap >= 0 && overlap < 1))
      throw InvalidArgument("overlap must be in [0, 1)");
    if (k_train < 1) throw InvalidArgument("k_train must be >= 1");
    if (!(content_threshold > 0 && content_threshold <= 1))
      throw InvalidArgument("content_threshold must be in (0, 1]");
    if (pool_stride < 1) throw InvalidArgument("pool_stride must be >= 1");
  }
};

struct PatchOrigin {
  int row = 0;
  int col = 0;
  bool operator==(const PatchOrigin&) const = default;
};

struct Patch {
  ImageF pixels;  // d x d x 3
  PatchOrigin origin;
};

struct PatchBag {
  std::vector<Patch> patches;
  std::string source_id;

  int size() const { return static_cast<int>(patches.size()); }
  std::vector<PatchOrigin> origins() const {
    std::vector<PatchOrigin> o;
    o.reserve(patches.size());
    for (const auto& p : patches) o.push_back(p.origin);
    return o;
  }
};

// Mean of the mask over the d x d window at `origin`.
inline double retina_content(const Mask& mask, PatchOrigin origin, int d) {
  if (origin.row < 0 || origin.col < 0 || origin.row + d > mask.height ||
      origin.col + d > mask.width)
    throw InvalidArgument("retina_content: window outside frame");
  size_t n = 0;
  for (int r = 0; r < d; ++r) {
    const auto* row = &mask.at(origin.row + r, origin.col);
    for (int c = 0; c < d; ++c) n += row[c] != 0;
  }
  return static_cast<double>(n) / (static_cast<double>(d) * d);
}

// Copies the window at `origin` (bit-identical, no resampling).
template <typename T>
Image<T> crop(const Image<T>& img, PatchOrigin origin, int d) {
  Image<T> out(d, d, img.channels);
  for (int r = 0; r < d; ++r) {
    const T* src = &img.at(origin.row + r, origin.col);
    std::copy(src, src + static_cast<size_t>(d) * img.channels,
              &out.at(r, 0));
  }
  return out;
}

// Lattice {0, stride, 2*stride, ...}; with `append_edge` the last origin
// frame - d is added when it is not on the lattice.
inline std::vector<int> lattice(int frame, int d, int stride, bool append_edge) {
  std::vector<int> v;
  for (int o = 0; o + d <= frame; o += stride) v.push_back(o);
  if (append_edge && (v.empty() || v.back() != frame - d)) v.push_back(frame - d);
  return v;
}

inline int grid_stride(const PatchSpec& spec) {
  return std::max(1, static_cast<int>(
                         std::lround(spec.patch_size * (1.0 - spec.overlap))));
}

namespace patch_detail {

inline PatchBag make_bag(const PreprocessedImage& img,
                         const std::vector<PatchOrigin>& origins, int d) {
  PatchBag bag;
  bag.source_id = img.source_id;
  bag.patches.reserve(origins.size());
  for (const auto& o : origins) bag.patches.push_back({crop(img.image, o, d), o});
  return bag;
}

}  // namespace patch_detail

// Grid candidates passing the content filter, row-major.
inline std::vector<PatchOrigin> grid_origins(const Mask& mask,
                                             const PatchSpec& spec) {
  const int d = spec.patch_size;
  const auto axis = lattice(mask.height, d, grid_stride(spec), true);
  std::vector<PatchOrigin> out;
  for (int r : axis)
    for (int c : axis)
      if (retina_content(mask, {r, c}, d) >= spec.content_threshold)
        out.push_back({r, c});
  return out;
}

inline PatchBag extract_grid(const PreprocessedImage& img,
                             const PatchSpec& spec) {
  spec.validate(img.frame());
  const auto origins = grid_origins(img.retina_mask, spec);
  if (origins.empty())
    throw EmptyBag("no grid patch passes the retina filter in " + img.source_id);
  return patch_detail::make_bag(img, origins, spec.patch_size);
}

// Dense pool_stride lattice filtered by retina content.
inline std::vector<PatchOrigin> random_pool(const Mask& mask,
                                            const PatchSpec& spec) {
  const int d = spec.patch_size;
  const auto axis = lattice(mask.height, d, spec.pool_stride, false);
  std::vector<PatchOrigin> out;
  for (int r : axis)
    for (int c : axis)
      if (retina_content(mask, {r, c}, d) >= spec.content_threshold)
        out.push_back({r, c});
  return out;
}

// Uniform sample without replacement of min(k_train, pool) pool origins.
inline std::vector<PatchOrigin> sample_origins(std::vector<PatchOrigin> pool,
                                               int k, std::mt19937_64& rng) {
  const size_t take = std::min(pool.size(), static_cast<size_t>(k));
  for (size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(take);
  return pool;
}

inline PatchBag extract_random(const PreprocessedImage& img,
                               const PatchSpec& spec, std::uint64_t seed) {
  spec.validate(img.frame());
  auto pool = random_pool(img.retina_mask, spec);
  if (pool.empty())
    throw EmptyBag("no candidate patch passes the retina filter in " +
                   img.source_id);
  std::mt19937_64 rng(seed);
  return patch_detail::make_bag(
      img, sample_origins(std::move(pool), spec.k_train, rng), spec.patch_size);
}

}  // namespace mtmil
