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

#include <fstream>
#include <sstream>

#include "support.hpp"

namespace mtmil {
namespace {

namespace fs = std::filesystem;

TEST(Labels, BinarizeRdr) {
  EXPECT_EQ(binarize_rdr(0), 0);
  EXPECT_EQ(binarize_rdr(1), 0);
  EXPECT_EQ(binarize_rdr(2), 1);
  EXPECT_EQ(binarize_rdr(3), 1);
  EXPECT_EQ(binarize_rdr(4), 1);
  EXPECT_THROW(binarize_rdr(5), InvalidArgument);
  EXPECT_THROW(binarize_rdr(-1), InvalidArgument);
}

TEST(Manifest, DropsUngradable) {
  std::istringstream in(
      "source_id,image_path,icdr_grade,gradable\n"
      "a,a.png,0,true\n"
      "b,b.png,3,false\n"
      "c,c.png,2,true\n");
  const auto recs = parse_manifest(in);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].source_id, "a");
  EXPECT_EQ(recs[1].source_id, "c");
  EXPECT_EQ(recs[1].icdr_grade, 2);
  std::istringstream again(in.str());
  EXPECT_EQ(parse_manifest(again, true).size(), 3u);
}

TEST(Manifest, RejectsBadRows) {
  auto parse = [](const std::string& body) {
    std::istringstream in("source_id,image_path,icdr_grade,gradable\n" + body);
    return parse_manifest(in);
  };
  EXPECT_THROW(parse("a,a.png,5,true\n"), ParseError);
  EXPECT_THROW(parse("a,a.png,x,true\n"), ParseError);
  EXPECT_THROW(parse("a,a.png,1,maybe\n"), ParseError);
  EXPECT_THROW(parse("a,a.png,1\n"), ParseError);
  std::istringstream bad_header("id,path,grade,ok\n");
  EXPECT_THROW(parse_manifest(bad_header), ParseError);
}

TEST(Manifest, WriteLoadRoundTrip) {
  testing::TempDir dir("manifest");
  const std::vector<GradeRecord> recs{{"x", "x.png", 4, true}, {"y", "y.png", 1, false}};
  write_manifest(dir.path() / "m.csv", recs);
  const auto back = load_manifest(dir.path() / "m.csv", true);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].icdr_grade, 4);
  EXPECT_FALSE(back[1].gradable);
  EXPECT_THROW(load_manifest(dir.path() / "missing.csv"), IoError);
}

TEST(LesionMasks, ExudateUnion) {
  testing::TempDir dir("masks");
  for (const char* f : kMaskFolders) fs::create_directories(dir.path() / f);
  Mask hard = make_mask(16, 16), soft = make_mask(16, 16), ma = make_mask(16, 16);
  for (int i = 0; i < 10; ++i) hard.at(2, i) = 1;
  for (int i = 0; i < 7; ++i) soft.at(9, i) = 1;
  ma.at(0, 0) = 1;
  io::write_mask_png(dir.path() / "EX_HARD" / "img.png", hard);
  io::write_mask_png(dir.path() / "EX_SOFT" / "img.png", soft);
  io::write_mask_png(dir.path() / "MA" / "img.png", ma);
  const Mask m = load_lesion_masks(dir.path(), "img", 16);
  size_t n_ex = 0, n_ma = 0, n_he = 0;
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) {
      n_ex += m.at(r, c, kEX);
      n_ma += m.at(r, c, kMA);
      n_he += m.at(r, c, kHE);
      if (hard.at(r, c) || soft.at(r, c)) {
        ASSERT_EQ(m.at(r, c, kEX), 1);
      }
    }
  EXPECT_EQ(n_ex, 17u);
  EXPECT_EQ(n_ma, 1u);
  EXPECT_EQ(n_he, 0u);
}

TEST(LesionMasks, MissingFilesAreEmpty) {
  testing::TempDir dir("nomasks");
  const Mask m = load_lesion_masks(dir.path(), "nothing", 12);
  EXPECT_EQ(m.channels, kLesionChannels);
  EXPECT_EQ(count_nonzero(m), 0u);
}

TEST(LesionMasks, WrongShapeRejected) {
  testing::TempDir dir("shape");
  fs::create_directories(dir.path() / "HE");
  io::write_mask_png(dir.path() / "HE" / "img.png", make_mask(8, 8));
  EXPECT_THROW(load_lesion_masks(dir.path(), "img", 16), ShapeError);
}

TEST(SegPool, CountsAndLabels) {
  std::vector<SegRecord> seg;
  for (int i = 0; i < 81; ++i) seg.push_back({"seg" + std::to_string(i), "", i < 54});
  std::vector<PoolGradingRecord> grading;
  for (int i = 0; i < 167; ++i)
    grading.push_back({{"g" + std::to_string(i), "", 0, true}, i < 133});
  const SegPool pool = build_idrid_pool(seg, grading);
  EXPECT_EQ(pool.size(), 248u);
  EXPECT_EQ(pool.seg_train.size(), 187u);
  EXPECT_EQ(pool.seg_test.size(), 61u);
  int pos_train = 0, black_test = 0;
  for (const auto& m : pool.seg_train) {
    EXPECT_EQ(m.y_rdr == 1, !m.black_masks);
    pos_train += m.y_rdr;
  }
  for (const auto& m : pool.seg_test) black_test += m.black_masks;
  EXPECT_EQ(pos_train, 54);
  EXPECT_EQ(black_test, 34);
}

TEST(SegPool, RejectsNonzeroGrade) {
  const std::vector<PoolGradingRecord> grading{{{"g", "", 3, true}, true}};
  EXPECT_THROW(build_idrid_pool({}, grading), InvalidArgument);
}

TEST(SegPool, MaterializeGivesBlackMasks) {
  const std::vector<PoolMember> members{{"a", "", 1, false}, {"b", "", 0, true}};
  const DatasetSplit split = materialize_pool(members, SplitRole::kSegTrain, [](const PoolMember& m) {
    LabeledExample ex;
    ex.image = testing::random_frame(32, m.source_id == "a" ? 1 : 2);
    ex.lesion_masks = Mask(32, 32, kLesionChannels, 1);
    return ex;
  });
  ASSERT_EQ(split.size(), 2u);
  EXPECT_EQ(split.examples[0].y_rdr, 1);
  EXPECT_GT(count_nonzero(split.examples[0].lesion_masks), 0u);
  EXPECT_EQ(split.examples[1].y_rdr, 0);
  EXPECT_EQ(count_nonzero(split.examples[1].lesion_masks), 0u);
  EXPECT_TRUE(split.examples[1].has_masks);
}

TEST(Splits, RoleNamesRoundTrip) {
  for (auto r : {SplitRole::kClfTrain, SplitRole::kClfVal, SplitRole::kClfTest,
                 SplitRole::kSegTrain, SplitRole::kSegTest})
    EXPECT_EQ(parse_role(role_name(r)), r);
  EXPECT_FALSE(parse_role("nope").has_value());
}

TEST(LoadDataset, SynthRoundTrip) {
  testing::TempDir dir("dataset");
  SynthOptions so;
  so.frame = 128;
  so.mild_fraction = 0;
  const auto samples = synth_render(4, 11, so);
  write_synth(dir.path(), samples, 0.5);
  DataOptions opt;
  opt.preprocess.frame = 128;
  const Dataset ds = load_dataset(dir.path(), opt);
  EXPECT_TRUE(ds.rejected.empty());
  ASSERT_NE(ds.find(SplitRole::kClfTrain), nullptr);
  ASSERT_NE(ds.find(SplitRole::kSegTest), nullptr);
  EXPECT_EQ(ds.find(SplitRole::kClfTrain)->size(), 2u);
  EXPECT_EQ(ds.find(SplitRole::kSegTest)->size(), 2u);
  EXPECT_EQ(ds.find(SplitRole::kClfVal), nullptr);
  const auto& seg = ds.find(SplitRole::kSegTest)->examples;
  for (size_t i = 0; i < seg.size(); ++i) {
    const auto& s = samples[2 + i];
    EXPECT_EQ(seg[i].image.source_id, s.raw.source_id);
    EXPECT_EQ(seg[i].y_rdr, binarize_rdr(s.grade));
    EXPECT_TRUE(seg[i].has_masks);
    EXPECT_EQ(seg[i].image.frame(), 128);
    const bool any_lesion = count_nonzero(seg[i].lesion_masks) > 0;
    EXPECT_EQ(any_lesion, s.grade > 0);
  }
}

}  // namespace
}  // namespace mtmil
