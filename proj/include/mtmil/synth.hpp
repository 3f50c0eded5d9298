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

// Synthetic fundus-like images with exact lesion masks, for desk-scale runs.
//
// Each image is a shaded retinal disc on black with an optic disc and
// vessel-like curves. Lesions: MA dark dots (radius 1-3 px), HE dark blobs
// (radius 4-12 px), EX bright blobs (radius 3-10 px, hard or soft).
// Grade: no lesions -> 0, MA only -> 1, anything more -> 2.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "mtmil/datasets.hpp"
#include "mtmil/example.hpp"
#include "mtmil/png_io.hpp"
#include "mtmil/preproc.hpp"

namespace mtmil {

struct SynthOptions {
  int frame = 512;
  double positive_fraction = 0.5;  // share of images with grade 2
  double mild_fraction = 0.125;    // share of images with MA only (grade 1)
};

struct SynthSample {
  RawFundusImage raw;
  // Raw-frame binary masks, one per folder in kMaskFolders order.
  std::array<Mask, 4> masks;
  int grade = 0;
};

namespace synth_detail {

struct Canvas {
  Image<double> rgb;
  explicit Canvas(int f) : rgb(f, f, 3, 0.0) {}

  void blend(int r, int c, const double col[3], double alpha) {
    if (!rgb.contains(r, c) || alpha <= 0) return;
    alpha = std::min(alpha, 1.0);
    for (int k = 0; k < 3; ++k)
      rgb.at(r, c, k) = rgb.at(r, c, k) * (1 - alpha) + col[k] * alpha;
  }
};

// Filled disc with a soft edge of `soft` px; pixels with alpha >= 0.5 are
// marked in `mask` (if provided) when they are inside `retina`.
inline void draw_blob(Canvas& cv, Mask* mask, const Mask& retina, double cr,
                      double cc, double rr, double rc, double angle,
                      const double col[3], double soft) {
  const int ext = static_cast<int>(std::ceil(std::max(rr, rc) + soft + 1));
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int r = static_cast<int>(cr) - ext; r <= static_cast<int>(cr) + ext; ++r)
    for (int c = static_cast<int>(cc) - ext; c <= static_cast<int>(cc) + ext; ++c) {
      if (!retina.contains(r, c) || !retina.at(r, c)) continue;
      const double y = r - cr, x = c - cc;
      const double u = (ca * y + sa * x) / rr, v = (-sa * y + ca * x) / rc;
      const double d = std::sqrt(u * u + v * v);  // 1 at the nominal edge
      const double scale = std::min(rr, rc);
      double alpha;
      if (soft <= 0) {
        alpha = d <= 1.0 ? 1.0 : 0.0;
      } else {
        alpha = std::clamp(0.5 - (d - 1.0) * scale / soft, 0.0, 1.0);
      }
      if (alpha <= 0) continue;
      cv.blend(r, c, col, alpha);
      if (mask && alpha >= 0.5) mask->at(r, c) = 1;
    }
}

}  // namespace synth_detail

inline SynthSample synth_render_one(int grade_kind, std::uint64_t seed,
                                    int frame, const std::string& id) {
  using namespace synth_detail;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };
  auto uint = [&](int a, int b) {
    return std::uniform_int_distribution<int>(a, b)(rng);
  };
  const double f = frame;
  Canvas cv(frame);
  const double cr = (f - 1) / 2 + uni(-0.02, 0.02) * f;
  const double cc = (f - 1) / 2 + uni(-0.02, 0.02) * f;
  const double R = uni(0.42, 0.46) * f;
  Mask retina = make_mask(frame, frame);
  const double base[3] = {uni(150, 190), uni(70, 100), uni(30, 55)};
  for (int r = 0; r < frame; ++r)
    for (int c = 0; c < frame; ++c) {
      const double rho = std::hypot(r - cr, c - cc) / R;
      if (rho > 1) continue;
      retina.at(r, c) = 1;
      const double shade = 1.0 - 0.35 * rho * rho;
      for (int k = 0; k < 3; ++k) cv.rgb.at(r, c, k) = base[k] * shade;
    }

  // Optic disc and vessels radiating from it.
  const double side = U(rng) < 0.5 ? -1 : 1;
  const double od_r = cr + uni(-0.05, 0.05) * R, od_c = cc + side * 0.45 * R;
  const double od_col[3] = {235, 195, 130};
  draw_blob(cv, nullptr, retina, od_r, od_c, 0.09 * R, 0.09 * R, 0, od_col,
            0.03 * R);
  const int n_vessels = uint(6, 9);
  const double vw = std::max(1.0, f / 300.0);
  for (int v = 0; v < n_vessels; ++v) {
    double ang = uni(0, 2 * std::numbers::pi);
    double y = od_r, x = od_c;
    const double len = uni(0.6, 1.3) * R;
    const double curl = uni(-1.5, 1.5) / R;
    double w = vw * uni(1.0, 1.8);
    for (double t = 0; t < len; t += 0.5) {
      ang += curl * 0.5;
      y += 0.5 * std::sin(ang);
      x += 0.5 * std::cos(ang);
      const int ext = static_cast<int>(std::ceil(w));
      for (int a = -ext; a <= ext; ++a)
        for (int b = -ext; b <= ext; ++b) {
          const int r = static_cast<int>(std::lround(y)) + a;
          const int c = static_cast<int>(std::lround(x)) + b;
          if (!retina.contains(r, c) || !retina.at(r, c)) continue;
          if (std::hypot(a, b) > w) continue;
          for (int k = 0; k < 3; ++k)
            cv.rgb.at(r, c, k) *= k == 0 ? 0.995 : 0.985;
        }
      w = std::max(0.6 * vw, w - 0.002 * vw);
    }
  }

  SynthSample s;
  for (auto& m : s.masks) m = make_mask(frame, frame);
  auto place = [&](double margin) {
    // Uniform inside 0.8 R, away from the optic disc.
    for (;;) {
      const double rho = 0.8 * R * std::sqrt(U(rng));
      const double th = uni(0, 2 * std::numbers::pi);
      const double y = cr + rho * std::sin(th), x = cc + rho * std::cos(th);
      if (std::hypot(y - od_r, x - od_c) > 0.15 * R + margin) return std::pair{y, x};
    }
  };
  int n_ma = 0, n_he = 0, n_ex = 0;
  if (grade_kind == 1) {
    n_ma = uint(2, 6);
  } else if (grade_kind == 2) {
    n_ma = uint(2, 6);
    n_he = uint(1, 3);
    n_ex = uint(1, 4);
  }
  const double ma_col[3] = {95, 20, 12};
  for (int i = 0; i < n_ma; ++i) {
    auto [y, x] = place(3);
    const double r = uni(1.0, 3.0);
    draw_blob(cv, &s.masks[0], retina, y, x, r, r, 0, ma_col, 0);
  }
  const double he_col[3] = {110, 25, 15};
  for (int i = 0; i < n_he; ++i) {
    auto [y, x] = place(12);
    const double r = uni(4.0, 12.0);
    draw_blob(cv, &s.masks[1], retina, y, x, r, r * uni(0.6, 1.0),
              uni(0, std::numbers::pi), he_col, 0);
  }
  const double hard_col[3] = {240, 220, 110}, soft_col[3] = {225, 215, 195};
  for (int i = 0; i < n_ex; ++i) {
    auto [y, x] = place(10);
    const double r = uni(3.0, 10.0);
    const bool soft = U(rng) < 0.35;
    draw_blob(cv, &s.masks[soft ? 3 : 2], retina, y, x, r, r * uni(0.6, 1.0),
              uni(0, std::numbers::pi), soft ? soft_col : hard_col,
              soft ? 1.5 : 0);
  }
  s.grade = (n_he + n_ex) > 0 ? 2 : n_ma > 0 ? 1 : 0;

  std::normal_distribution<double> noise(0.0, 2.0);
  s.raw.source_id = id;
  s.raw.pixels = ImageU8(frame, frame, 3);
  for (size_t i = 0; i < cv.rgb.data.size(); ++i) {
    const bool inside = retina.data[i / 3] != 0;
    const double v = cv.rgb.data[i] + (inside ? noise(rng) : 0.0);
    s.raw.pixels.data[i] =
        static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return s;
}

inline std::string synth_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth_%05d", i);
  return buf;
}

// Deterministic per seed. Exactly round(n * positive_fraction) images are
// grade 2 and round(n * mild_fraction) grade 1; the rest are lesion-free.
inline std::vector<SynthSample> synth_render(int n, std::uint64_t seed,
                                             const SynthOptions& opt = {}) {
  if (n < 1) throw InvalidArgument("synth: n must be >= 1");
  if (opt.frame < 64) throw InvalidArgument("synth: frame must be >= 64");
  const int n_pos = static_cast<int>(std::lround(n * opt.positive_fraction));
  const int n_mild = std::min(
      n - n_pos, static_cast<int>(std::lround(n * opt.mild_fraction)));
  std::vector<int> kinds(n, 0);
  for (int i = 0; i < n_pos; ++i) kinds[i] = 2;
  for (int i = 0; i < n_mild; ++i) kinds[n_pos + i] = 1;
  std::mt19937_64 rng(seed);
  std::shuffle(kinds.begin(), kinds.end(), rng);
  std::vector<SynthSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i)
    out.push_back(synth_render_one(kinds[i], rng(), opt.frame, synth_id(i)));
  return out;
}

// Full raw-frame masks merged to MA, HE, EX channels.
inline Mask merge_synth_masks(const SynthSample& s) {
  const int h = s.raw.pixels.height, w = s.raw.pixels.width;
  Mask m(h, w, kLesionChannels, 0);
  for (size_t p = 0; p < m.pixel_count(); ++p) {
    m.data[p * 3 + kMA] = s.masks[0].data[p];
    m.data[p * 3 + kHE] = s.masks[1].data[p];
    m.data[p * 3 + kEX] = s.masks[2].data[p] | s.masks[3].data[p];
  }
  return m;
}

// Runs the full preprocessing chain and maps masks into the frame.
inline LabeledExample synth_to_example(const SynthSample& s,
                                       const PreprocessOptions& popt) {
  LabeledExample ex;
  ex.image = preprocess(s.raw, popt);
  ex.y_rdr = binarize_rdr(s.grade);
  ex.lesion_masks =
      preprocess_masks(merge_synth_masks(s), ex.image.disk, ex.image.retina_mask);
  ex.has_masks = true;
  return ex;
}

inline DatasetSplit synth_generate(int n, std::uint64_t seed,
                                   const SynthOptions& opt = {},
                                   SplitRole role = SplitRole::kSegTrain) {
  PreprocessOptions popt;
  popt.frame = opt.frame;
  DatasetSplit split;
  split.role = role;
  for (const auto& s : synth_render(n, seed, opt))
    split.examples.push_back(synth_to_example(s, popt));
  return split;
}

inline DatasetSplit synth_generate(int n, std::uint64_t seed, int frame) {
  SynthOptions opt;
  opt.frame = frame;
  return synth_generate(n, seed, opt);
}

// Writes a data root: images/, masks/<folder>/ (one mask per image and
// folder, all-zero when the lesion is absent), manifest.csv, splits.csv.
// The last round(n * test_fraction) samples go to clf_test + seg_test, the
// rest to clf_train + seg_train.
inline void write_synth(const std::filesystem::path& out,
                        const std::vector<SynthSample>& samples,
                        double test_fraction = 0.0) {
  namespace fs = std::filesystem;
  fs::create_directories(out / "images");
  for (const char* f : kMaskFolders) fs::create_directories(out / "masks" / f);
  std::vector<GradeRecord> recs;
  const int n = static_cast<int>(samples.size());
  const int n_test = static_cast<int>(std::lround(n * test_fraction));
  std::ofstream splits(out / "splits.csv");
  if (!splits) throw IoError("cannot write splits.csv");
  splits << "source_id,role\n";
  for (int i = 0; i < n; ++i) {
    const auto& s = samples[i];
    const std::string rel = "images/" + s.raw.source_id + ".png";
    io::write_png(out / rel, s.raw.pixels);
    for (size_t f = 0; f < kMaskFolders.size(); ++f)
      io::write_mask_png(out / "masks" / kMaskFolders[f] /
                             (s.raw.source_id + ".png"),
                         s.masks[f]);
    recs.push_back({s.raw.source_id, rel, s.grade, true});
    const bool test = i >= n - n_test;
    splits << s.raw.source_id << ',' << (test ? "clf_test" : "clf_train") << '\n'
           << s.raw.source_id << ',' << (test ? "seg_test" : "seg_train") << '\n';
  }
  write_manifest(out / "manifest.csv", recs);
}

}  // namespace mtmil
