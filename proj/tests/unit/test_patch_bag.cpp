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

#include <map>
#include <random>

#include "support.hpp"

namespace mtmil {
namespace {

PreprocessedImage full_frame(int f) {
  PreprocessedImage p = testing::random_frame(f, 1);
  return p;
}

TEST(RetinaContent, FullMaskIsOne) {
  EXPECT_EQ(retina_content(make_mask(64, 64, 1), {3, 5}, 16), 1.0);
}

TEST(RetinaContent, HalfInsideStraightEdge) {
  Mask m = make_mask(64, 64, 0);
  for (int r = 0; r < 64; ++r)
    for (int c = 32; c < 64; ++c) m.at(r, c) = 1;
  EXPECT_NEAR(retina_content(m, {10, 24}, 16), 0.5, 1.0 / 16);
}

TEST(RetinaContent, MatchesPixelCount) {
  std::mt19937_64 rng(2);
  std::bernoulli_distribution bit(0.4);
  Mask m = make_mask(40, 40, 0);
  for (auto& v : m.data) v = bit(rng);
  for (int t = 0; t < 50; ++t) {
    const int d = 1 + static_cast<int>(rng() % 20);
    const int r = static_cast<int>(rng() % (41 - d)), c = static_cast<int>(rng() % (41 - d));
    int n = 0;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) n += m.at(r + i, c + j);
    ASSERT_EQ(retina_content(m, {r, c}, d), static_cast<double>(n) / (d * d));
  }
}

TEST(RetinaContent, RejectsOutOfFrameWindow) {
  EXPECT_THROW(retina_content(make_mask(16, 16, 1), {10, 0}, 8), InvalidArgument);
}

TEST(ExtractGrid, PatchCounts) {
  const auto img = full_frame(512);
  PatchSpec spec;
  spec.patch_size = 64;
  spec.overlap = 0.75;
  EXPECT_EQ(grid_stride(spec), 16);
  EXPECT_EQ(extract_grid(img, spec).size(), 841);
  spec.overlap = 0.5;
  EXPECT_EQ(grid_stride(spec), 32);
  EXPECT_EQ(extract_grid(img, spec).size(), 225);
}

TEST(ExtractGrid, EmptyMaskThrows) {
  auto img = full_frame(64);
  img.retina_mask = make_mask(64, 64, 0);
  PatchSpec spec;
  spec.patch_size = 16;
  EXPECT_THROW(extract_grid(img, spec), EmptyBag);
  EXPECT_THROW(extract_random(img, spec, 1), EmptyBag);
}

TEST(ExtractGrid, ZeroOverlapTilesFrame) {
  for (int d : {16, 24, 40, 64}) {
    const auto img = full_frame(100);
    PatchSpec spec;
    spec.patch_size = d;
    spec.overlap = 0.0;
    const PatchBag bag = extract_grid(img, spec);
    Mask cover = make_mask(100, 100, 0);
    for (const auto& p : bag.patches)
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) cover.at(p.origin.row + r, p.origin.col + c) = 1;
    EXPECT_EQ(count_nonzero(cover), 100u * 100u) << d;
  }
}

TEST(ExtractGrid, PatchesAreExactCrops) {
  const auto img = full_frame(64);
  PatchSpec spec;
  spec.patch_size = 16;
  spec.overlap = 0.5;
  for (const auto& p : extract_grid(img, spec).patches)
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c)
        for (int ch = 0; ch < 3; ++ch)
          ASSERT_EQ(p.pixels.at(r, c, ch), img.image.at(p.origin.row + r, p.origin.col + c, ch));
}

TEST(PatchPolicies, ContentThresholdHolds) {
  // Disc-shaped retina; every emitted patch must be at least half inside.
  auto img = full_frame(96);
  for (int r = 0; r < 96; ++r)
    for (int c = 0; c < 96; ++c) img.retina_mask.at(r, c) = inside_shrunk_disk(r, c, 96, 0.05);
  PatchSpec spec;
  spec.patch_size = 16;
  spec.pool_stride = 4;
  spec.k_train = 1000;
  for (double t : {0.0, 0.5, 0.75}) {
    spec.overlap = t;
    for (const auto& p : extract_grid(img, spec).patches)
      ASSERT_GE(retina_content(img.retina_mask, p.origin, 16), 0.5);
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (const auto& p : extract_random(img, spec, seed).patches)
      ASSERT_GE(retina_content(img.retina_mask, p.origin, 16), 0.5);
}

TEST(ExtractRandom, SaturatesAtPoolSize) {
  const auto img = full_frame(64);
  PatchSpec spec;
  spec.patch_size = 16;
  spec.pool_stride = 8;
  spec.k_train = 50;
  // Lattice 0, 8, ..., 48 per axis: 49 candidates.
  ASSERT_EQ(random_pool(img.retina_mask, spec).size(), 49u);
  EXPECT_EQ(extract_random(img, spec, 4).size(), 49);
  spec.k_train = 10;
  EXPECT_EQ(extract_random(img, spec, 4).size(), 10);
}

TEST(ExtractRandom, ThirtyCandidatesFiftyRequested) {
  std::vector<PatchOrigin> pool;
  for (int i = 0; i < 30; ++i) pool.push_back({i, 0});
  std::mt19937_64 rng(1);
  const auto got = sample_origins(pool, 50, rng);
  EXPECT_EQ(got.size(), 30u);
  std::map<int, int> seen;
  for (const auto& o : got) ++seen[o.row];
  EXPECT_EQ(seen.size(), 30u);
}

TEST(ExtractRandom, DeterministicPerSeed) {
  const auto img = full_frame(64);
  PatchSpec spec;
  spec.patch_size = 16;
  spec.k_train = 12;
  spec.pool_stride = 4;
  const auto a = extract_random(img, spec, 77), b = extract_random(img, spec, 77);
  ASSERT_EQ(a.size(), b.size());
  for (int k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a.patches[k].origin.row, b.patches[k].origin.row);
    EXPECT_EQ(a.patches[k].origin.col, b.patches[k].origin.col);
    EXPECT_EQ(a.patches[k].pixels.data, b.patches[k].pixels.data);
  }
}

TEST(ExtractRandom, UniformOverCandidates) {
  std::vector<PatchOrigin> pool{{0, 0}, {0, 8}, {8, 0}, {8, 8}};
  std::map<std::pair<int, int>, int> freq;
  std::mt19937_64 rng(123);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto o = sample_origins(pool, 1, rng).front();
    ++freq[{o.row, o.col}];
  }
  ASSERT_EQ(freq.size(), 4u);
  for (const auto& [key, n] : freq) EXPECT_NEAR(n / double(draws), 0.25, 0.02);
}

TEST(PatchSpec, Validation) {
  PatchSpec s;
  s.overlap = 1.0;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = PatchSpec{};
  s.patch_size = 600;
  EXPECT_THROW(s.validate(512), InvalidArgument);
  s = PatchSpec{};
  s.k_train = 0;
  EXPECT_THROW(s.validate(), InvalidArgument);
}

}  // namespace
}  // namespace mtmil
