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

// Grade manifests, lesion-mask folders, rDR binarisation, the augmented
// segmentation pool, and on-disk dataset loading.
//
// Data-root layout:
//   manifest.csv                      source_id,image_path,icdr_grade,gradable
//   splits.csv        (optional)      source_id,role   (one row per role)
//   masks/{MA,HE,EX_HARD,EX_SOFT}/<source_id>.png   (optional, binary)
// image_path is relative to the data root unless absolute. Without
// splits.csv every record is clf_train, and also seg_train when masks/
// exists.

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mtmil/errors.hpp"
#include "mtmil/example.hpp"
#include "mtmil/png_io.hpp"
#include "mtmil/preproc.hpp"

namespace mtmil {

struct GradeRecord {
  std::string source_id;
  std::string image_path;
  int icdr_grade = 0;
  bool gradable = true;
};

enum class SplitRole { kClfTrain, kClfVal, kClfTest, kSegTrain, kSegTest };

inline const char* role_name(SplitRole r) {
  switch (r) {
    case SplitRole::kClfTrain: return "clf_train";
    case SplitRole::kClfVal: return "clf_val";
    case SplitRole::kClfTest: return "clf_test";
    case SplitRole::kSegTrain: return "seg_train";
    case SplitRole::kSegTest: return "seg_test";
  }
  return "?";
}

inline std::optional<SplitRole> parse_role(const std::string& s) {
  for (auto r : {SplitRole::kClfTrain, SplitRole::kClfVal, SplitRole::kClfTest,
                 SplitRole::kSegTrain, SplitRole::kSegTest})
    if (s == role_name(r)) return r;
  return std::nullopt;
}

inline bool is_seg_role(SplitRole r) {
  return r == SplitRole::kSegTrain || r == SplitRole::kSegTest;
}

struct DatasetSplit {
  SplitRole role = SplitRole::kClfTrain;
  std::vector<LabeledExample> examples;

  int size() const { return static_cast<int>(examples.size()); }
  bool empty() const { return examples.empty(); }
};

// ICDR grades 0-1 are non-referable, 2-4 referable.
inline int binarize_rdr(int icdr_grade) {
  if (icdr_grade < 0 || icdr_grade > 4)
    throw InvalidArgument("ICDR grade out of range: " + std::to_string(icdr_grade));
  return icdr_grade >= 2 ? 1 : 0;
}

namespace data_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "True" || s == "TRUE" || s == "yes") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0" || s == "False" || s == "FALSE" || s == "no") {
    out = false;
    return true;
  }
  return false;
}

}  // namespace data_detail

inline std::vector<GradeRecord> parse_manifest(std::istream& in,
                                               bool keep_ungradable = false) {
  using namespace data_detail;
  std::string line;
  int lineno = 0;
  if (!std::getline(in, line)) throw ParseError("manifest is empty", 1);
  ++lineno;
  const auto header = split_csv(line);
  const std::vector<std::string> expect{"source_id", "image_path", "icdr_grade",
                                        "gradable"};
  if (header != expect)
    throw ParseError(
        "manifest header must be source_id,image_path,icdr_grade,gradable",
        lineno);
  std::vector<GradeRecord> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 4) throw ParseError("expected 4 fields", lineno);
    GradeRecord r;
    r.source_id = cells[0];
    r.image_path = cells[1];
    if (r.source_id.empty()) throw ParseError("empty source_id", lineno);
    try {
      size_t pos = 0;
      r.icdr_grade = std::stoi(cells[2], &pos);
      if (pos != cells[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError("icdr_grade is not an integer", lineno);
    }
    if (r.icdr_grade < 0 || r.icdr_grade > 4)
      throw ParseError("icdr_grade must be in 0..4", lineno);
    if (!parse_bool(cells[3], r.gradable))
      throw ParseError("gradable must be true/false", lineno);
    if (r.gradable || keep_ungradable) out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<GradeRecord> load_manifest(
    const std::filesystem::path& csv_path, bool keep_ungradable = false) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open manifest " + csv_path.string());
  return parse_manifest(in, keep_ungradable);
}

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<GradeRecord>& recs) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "source_id,image_path,icdr_grade,gradable\n";
  for (const auto& r : recs)
    out << r.source_id << ',' << r.image_path << ',' << r.icdr_grade << ','
        << (r.gradable ? "true" : "false") << '\n';
}

inline constexpr std::array<const char*, 4> kMaskFolders = {"MA", "HE", "EX_HARD",
                                                            "EX_SOFT"};

// Loads MA, HE and EX (= EX_HARD OR EX_SOFT); a missing file is an empty
// channel. Every mask present must be `height` x `width`.
inline Mask load_lesion_masks(const std::filesystem::path& mask_root,
                              const std::string& source_id, int height,
                              int width) {
  Mask out(height, width, kLesionChannels, 0);
  for (size_t f = 0; f < kMaskFolders.size(); ++f) {
    const auto p = mask_root / kMaskFolders[f] / (source_id + ".png");
    if (!std::filesystem::exists(p)) continue;
    const Mask m = io::read_mask_png(p);
    if (m.height != height || m.width != width)
      throw ShapeError("lesion mask " + p.string() + " has the wrong shape");
    const int ch = f == 0 ? kMA : f == 1 ? kHE : kEX;
    for (size_t i = 0; i < m.pixel_count(); ++i)
      if (m.data[i]) out.data[i * kLesionChannels + ch] = 1;
  }
  return out;
}

inline Mask load_lesion_masks(const std::filesystem::path& mask_root,
                              const std::string& source_id, int frame = 512) {
  return load_lesion_masks(mask_root, source_id, frame, frame);
}

// ---- augmented segmentation pool ------------------------------------------

struct SegRecord {
  std::string source_id;
  std::string image_path;
  bool train = true;  // official train/test membership
};

struct PoolGradingRecord {
  GradeRecord record;
  bool train = true;
};

struct PoolMember {
  std::string source_id;
  std::string image_path;
  int y_rdr = 0;
  bool black_masks = false;  // lesion-free by grade, masks all zero
};

struct SegPool {
  std::vector<PoolMember> seg_train;
  std::vector<PoolMember> seg_test;
  size_t size() const { return seg_train.size() + seg_test.size(); }
};

// Annotated images are all referable (they show lesions beyond MA); grade-0
// images join with all-black masks. Any graded image above 0 is rejected.
inline SegPool build_idrid_pool(const std::vector<SegRecord>& seg_records,
                                const std::vector<PoolGradingRecord>& grading) {
  SegPool pool;
  for (const auto& s : seg_records) {
    PoolMember m{s.source_id, s.image_path, 1, false};
    (s.train ? pool.seg_train : pool.seg_test).push_back(std::move(m));
  }
  for (const auto& g : grading) {
    if (g.record.icdr_grade != 0)
      throw InvalidArgument("grading record " + g.record.source_id +
                            " has grade " + std::to_string(g.record.icdr_grade) +
                            "; only grade 0 may join the pool");
    PoolMember m{g.record.source_id, g.record.image_path, 0, true};
    (g.train ? pool.seg_train : pool.seg_test).push_back(std::move(m));
  }
  return pool;
}

// ---- loading ----------------------------------------------------------------

struct DataOptions {
  PreprocessOptions preprocess;
  // Images are already preprocessed frames with <stem>.mask.png siblings and
  // masks are in the frame.
  bool preprocessed = false;
  bool keep_ungradable = false;
};

struct Dataset {
  std::map<SplitRole, DatasetSplit> splits;
  std::vector<std::string> rejected;  // DiskNotFound

  const DatasetSplit* find(SplitRole r) const {
    auto it = splits.find(r);
    return it == splits.end() ? nullptr : &it->second;
  }
};

inline std::filesystem::path resolve(const std::filesystem::path& root,
                                     const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : root / path;
}

inline RawFundusImage load_raw(const std::filesystem::path& path,
                               std::string source_id) {
  return {io::read_png(path, 3), std::move(source_id)};
}

inline PreprocessedImage load_preprocessed(const std::filesystem::path& path,
                                           std::string source_id) {
  PreprocessedImage p;
  p.image = to_float(io::read_png(path, 3));
  auto mask_path = path;
  mask_path.replace_extension(".mask.png");
  p.retina_mask = io::read_mask_png(mask_path);
  if (p.image.height != p.image.width ||
      p.retina_mask.height != p.image.height ||
      p.retina_mask.width != p.image.width)
    throw ShapeError("preprocessed image and mask must be matching squares");
  p.source_id = std::move(source_id);
  const double f = p.image.height;
  p.disk = {(f - 1) / 2, (f - 1) / 2, f / 2};
  return p;
}

inline std::map<std::string, std::vector<SplitRole>> load_splits(
    const std::filesystem::path& csv) {
  using namespace data_detail;
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open " + csv.string());
  std::map<std::string, std::vector<SplitRole>> out;
  std::string line;
  int lineno = 0;
  if (!std::getline(in, line) || split_csv(line) !=
                                     std::vector<std::string>{"source_id", "role"})
    throw ParseError("splits header must be source_id,role", 1);
  ++lineno;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 2) throw ParseError("expected 2 fields", lineno);
    const auto role = parse_role(cells[1]);
    if (!role) throw ParseError("unknown role '" + cells[1] + "'", lineno);
    out[cells[0]].push_back(*role);
  }
  return out;
}

// Builds every split named by the data root. Preprocessing failures are
// recorded in `rejected` and the image is skipped.
inline Dataset load_dataset(const std::filesystem::path& root,
                            const DataOptions& opt = {}) {
  namespace fs = std::filesystem;
  const auto records = load_manifest(root / "manifest.csv", opt.keep_ungradable);
  const fs::path mask_root = root / "masks";
  const bool have_masks = fs::is_directory(mask_root);
  std::map<std::string, std::vector<SplitRole>> roles;
  if (fs::exists(root / "splits.csv")) roles = load_splits(root / "splits.csv");

  Dataset ds;
  for (const auto& rec : records) {
    std::vector<SplitRole> rs;
    if (!roles.empty()) {
      auto it = roles.find(rec.source_id);
      if (it == roles.end()) continue;
      rs = it->second;
    } else {
      rs.push_back(SplitRole::kClfTrain);
      if (have_masks) rs.push_back(SplitRole::kSegTrain);
    }
    bool need_masks = false;
    for (auto r : rs) need_masks |= is_seg_role(r);

    LabeledExample ex;
    ex.y_rdr = binarize_rdr(rec.icdr_grade);
    const fs::path img_path = resolve(root, rec.image_path);
    if (opt.preprocessed) {
      ex.image = load_preprocessed(img_path, rec.source_id);
      if (need_masks) {
        ex.lesion_masks = load_lesion_masks(mask_root, rec.source_id,
                                            ex.image.frame(), ex.image.frame());
        ex.has_masks = true;
      }
    } else {
      const RawFundusImage raw = load_raw(img_path, rec.source_id);
      try {
        ex.image = preprocess(raw, opt.preprocess);
      } catch (const DiskNotFound&) {
        ds.rejected.push_back(rec.source_id);
        continue;
      }
      if (need_masks) {
        const Mask raw_masks = load_lesion_masks(
            mask_root, rec.source_id, raw.pixels.height, raw.pixels.width);
        ex.lesion_masks =
            preprocess_masks(raw_masks, ex.image.disk, ex.image.retina_mask);
        ex.has_masks = true;
      }
    }
    if (ex.has_masks) {
      // Masks never extend past the retina.
      const Mask& rm = ex.image.retina_mask;
      for (size_t p = 0; p < rm.pixel_count(); ++p)
        if (!rm.data[p])
          for (int ch = 0; ch < kLesionChannels; ++ch)
            ex.lesion_masks.data[p * kLesionChannels + ch] = 0;
    }
    for (auto r : rs) {
      auto& split = ds.splits[r];
      split.role = r;
      LabeledExample copy = ex;
      if (!is_seg_role(r)) {
        copy.has_masks = need_masks && ex.has_masks;
        if (!copy.has_masks) copy.lesion_masks = Mask();
      }
      split.examples.push_back(std::move(copy));
    }
  }
  return ds;
}

// Materialises pool members through `load` (member -> LabeledExample with
// image); black-mask members get all-zero masks.
template <typename Loader>
DatasetSplit materialize_pool(const std::vector<PoolMember>& members,
                              SplitRole role, Loader&& load) {
  DatasetSplit split;
  split.role = role;
  for (const auto& m : members) {
    LabeledExample ex = load(m);
    ex.y_rdr = m.y_rdr;
    if (m.black_masks) {
      const int f = ex.image.frame();
      ex.lesion_masks = Mask(f, f, kLesionChannels, 0);
    }
    ex.has_masks = true;
    split.examples.push_back(std::move(ex));
  }
  return split;
}

}  // namespace mtmil
