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

// Shared fixtures for the test suites.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "mtmil.hpp"

namespace mtmil::testing {

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("mtmil_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Filled circle of `value` on black, rasterised by pixel-centre inclusion.
inline RawFundusImage render_circle(int height, int width, double cr, double cc,
                                    double radius, std::uint8_t value = 255) {
  RawFundusImage raw{ImageU8(height, width, 3, 0), "circle"};
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const double dr = r - cr, dc = c - cc;
      if (dr * dr + dc * dc <= radius * radius)
        for (int ch = 0; ch < 3; ++ch) raw.pixels.at(r, c, ch) = value;
    }
  return raw;
}

// Square frame with random pixels in [0, 255] and an all-ones retina mask.
inline PreprocessedImage random_frame(int frame, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 255.0f);
  PreprocessedImage p;
  p.image = ImageF(frame, frame, 3);
  for (auto& v : p.image.data) v = u(rng);
  p.retina_mask = make_mask(frame, frame, 1);
  p.source_id = "frame_" + std::to_string(seed);
  p.disk = {(frame - 1) / 2.0, (frame - 1) / 2.0, frame / 2.0};
  return p;
}

// Reduced network used wherever the model size does not matter.
inline MilNetConfig tiny_net(int patch_size = 16) {
  MilNetConfig c;
  c.patch_size = patch_size;
  c.embed_dim = 8;
  c.attention_dim = 4;
  c.encoder_widths = {4, 4, 8, 8};
  c.blocks_per_stage = 1;
  c.stem_kernel = 3;
  return c;
}

inline PatchBag random_bag(int k, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 255.0f);
  PatchBag bag;
  bag.source_id = "bag";
  for (int i = 0; i < k; ++i) {
    Patch p{ImageF(d, d, 3), {i, 0}};
    for (auto& v : p.pixels.data) v = u(rng);
    bag.patches.push_back(std::move(p));
  }
  return bag;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Moves batch norm and biases away from ReLU kinks so central differences
// with a coarse step see a locally smooth loss.
template <typename T>
void smooth_operating_point(MilNet<T>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> head(0.0, 0.3);
  std::uniform_real_distribution<double> beta(2.0, 3.0), gamma(0.5, 1.0), bias(-0.2, 0.2);
  for (auto& e : net.params()) {
    if (e.name == "dec.head.weight") {
      for (auto& v : e.value) v = static_cast<T>(head(rng));
    } else if (ends_with(e.name, "bn.beta")) {
      for (auto& v : e.value) v = static_cast<T>(beta(rng));
    } else if (ends_with(e.name, "bn.gamma")) {
      for (auto& v : e.value) v = static_cast<T>(gamma(rng));
    } else if (ends_with(e.name, "bottleneck.bias")) {
      for (auto& v : e.value) v = static_cast<T>(beta(rng));
    } else if (ends_with(e.name, ".bias")) {
      for (auto& v : e.value) v = static_cast<T>(bias(rng));
    }
  }
}

// Random step batch of `bags` classification bags and `bags` segmentation
// bags of K patches each, in model input units.
template <typename T>
StepBatch<T> random_step_batch(int bags, int k, int d, int channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  StepBatch<T> b;
  for (int i = 0; i < bags; ++i) {
    TrainBag<T> t;
    t.patches = nn::Tensor<T>(k, 3, d, d);
    for (auto& v : t.patches.data) v = static_cast<T>(u(rng));
    t.label = i % 2;
    b.clf.push_back(std::move(t));
  }
  for (int i = 0; i < bags; ++i) {
    TrainBag<T> t;
    t.patches = nn::Tensor<T>(k, 3, d, d);
    for (auto& v : t.patches.data) v = static_cast<T>(u(rng));
    t.label = 1 - i % 2;
    t.targets = nn::Tensor<T>(k, channels, d, d);
    for (auto& v : t.targets.data) v = u(rng) > 0.4 ? T(1) : T(0);
    b.seg.push_back(std::move(t));
  }
  return b;
}

}  // namespace mtmil::testing
