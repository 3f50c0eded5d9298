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

// Test-time evaluation over grid bags: image-level ROC analysis for rDR and
// per-lesion patch IoU / mAP against frame-aligned masks.

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mtmil/datasets.hpp"
#include "mtmil/example.hpp"
#include "mtmil/losses.hpp"
#include "mtmil/metrics.hpp"
#include "mtmil/mil_net.hpp"
#include "mtmil/patch_bag.hpp"

namespace mtmil {

// Patch-level mAP of the multi-task model reported for the public IDRiD test
// split; kept as reference values, not as desk-scale targets.
inline constexpr std::array<double, kLesionChannels> kReferenceMap = {0.747, 0.722,
                                                                      0.842};

struct ThresholdSource {
  // Select per-lesion thresholds on a training split, or use one fixed value.
  bool from_train = true;
  double fixed = 0.5;

  static ThresholdSource parse(const std::string& s) {
    if (s == "train") return {true, 0.5};
    if (s.rfind("fixed:", 0) == 0) {
      double v = 0;
      try {
        size_t used = 0;
        v = std::stod(s.substr(6), &used);
        if (used != s.size() - 6) throw InvalidArgument("");
      } catch (const std::exception&) {
        throw InvalidArgument("bad threshold source: " + s);
      }
      if (!(v > 0 && v < 1)) throw InvalidArgument("fixed threshold must be in (0, 1)");
      return {false, v};
    }
    throw InvalidArgument("threshold source must be train or fixed:x, got " + s);
  }
  std::string str() const {
    return from_train ? "train" : "fixed:" + std::to_string(fixed);
  }
};

struct LesionReport {
  std::string lesion;
  double iou_positive_mean = 0;
  double iou_negative_mean = 0;
  std::size_t n_positive = 0;
  std::size_t n_negative = 0;
  double binarization_threshold = 0.5;
  std::optional<double> map_score;  // undefined without positive patches
  double reference_map_score = 0;
};

struct EvalReport {
  std::size_t n_images = 0;
  std::optional<RocReport> roc;  // absent when the labels have one class
  std::vector<LesionReport> segmentation;  // empty without masks
  std::string threshold_source = "train";
  std::vector<double> scores;
  std::vector<std::string> source_ids;
};

// Per-patch IoUs at every grid threshold, positive patches only, for one
// lesion channel. Threshold selection reads from this table.
struct GridIouTable {
  std::vector<std::array<double, 19>> rows;

  void add(std::span<const float> probs, std::span<const std::uint8_t> truth) {
    std::array<double, 19> r{};
    const auto grid = threshold_grid();
    for (size_t k = 0; k < grid.size(); ++k)
      r[k] = patch_iou(binarize(probs, grid[k]), truth);
    rows.push_back(r);
  }

  // Same rule as select_threshold: best mean IoU, ties to the lower value.
  double best_threshold() const {
    if (rows.empty()) throw InvalidArgument("select_threshold: no lesion-positive patches");
    const auto grid = threshold_grid();
    double best = -1, thr = grid.front();
    for (size_t k = 0; k < grid.size(); ++k) {
      double s = 0;
      for (const auto& r : rows) s += r[k];
      const double m = s / static_cast<double>(rows.size());
      if (m > best) {
        best = m;
        thr = grid[k];
      }
    }
    return thr;
  }
};

namespace eval_detail {

// Visits every grid patch of an image with its lesion probabilities and the
// matching ground-truth crop, channel by channel.
template <typename Fn>
double visit_image(const MilNet<float>& net, const LabeledExample& ex,
                   const PatchSpec& spec, bool decode, Fn&& fn) {
  const PatchBag bag = extract_grid(ex.image, spec);
  const auto res = net.forward_bag(bag, decode);
  if (decode && ex.has_masks) {
    const int d = spec.patch_size;
    const size_t plane = static_cast<size_t>(d) * d;
    std::vector<float> probs(plane);
    std::vector<std::uint8_t> truth(plane);
    for (int k = 0; k < bag.size(); ++k) {
      const PatchOrigin o = bag.patches[k].origin;
      const float* maps = res.lesion_maps.sample(k);
      for (int ch = 0; ch < kLesionChannels; ++ch) {
        std::copy(maps + ch * plane, maps + (ch + 1) * plane, probs.begin());
        for (int r = 0; r < d; ++r)
          for (int c = 0; c < d; ++c)
            truth[static_cast<size_t>(r) * d + c] =
                ex.lesion_masks.at(o.row + r, o.col + c, ch);
        fn(ch, std::span<const float>(probs), std::span<const std::uint8_t>(truth));
      }
    }
  }
  return static_cast<double>(res.rdr_prob);
}

}  // namespace eval_detail

// Mean per-pixel lesion BCE of inference-mode grid bags over the images of a
// split that carry masks; NaN when none do.
inline double split_pixel_ce(const MilNet<float>& net, const DatasetSplit& split,
                             const PatchSpec& spec) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& ex : split.examples) {
    if (!ex.has_masks) continue;
    eval_detail::visit_image(net, ex, spec, true, [&](int, auto probs, auto truth) {
      for (std::size_t i = 0; i < probs.size(); ++i)
        sum += bce(static_cast<double>(probs[i]), static_cast<double>(truth[i]));
      n += probs.size();
    });
  }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

// Per-lesion thresholds from the IoU-maximizing grid value over the
// lesion-positive patches of a training split. Channels without positive
// patches fall back to 0.5.
inline std::array<double, kLesionChannels> select_thresholds(
    const MilNet<float>& net, const DatasetSplit& train, const PatchSpec& spec) {
  std::array<GridIouTable, kLesionChannels> tables;
  for (const auto& ex : train.examples) {
    if (!ex.has_masks) continue;
    eval_detail::visit_image(net, ex, spec, true,
                             [&](int ch, auto probs, auto truth) {
                               if (any_positive(truth)) tables[ch].add(probs, truth);
                             });
  }
  std::array<double, kLesionChannels> thr{};
  for (int ch = 0; ch < kLesionChannels; ++ch)
    thr[ch] = tables[ch].rows.empty() ? 0.5 : tables[ch].best_threshold();
  return thr;
}

inline EvalReport evaluate(const MilNet<float>& net, const DatasetSplit& test,
                           const PatchSpec& spec,
                           const std::array<double, kLesionChannels>& thresholds,
                           const std::string& threshold_source = "train") {
  if (test.empty()) throw InvalidArgument("evaluate: empty split");
  EvalReport rep;
  rep.threshold_source = threshold_source;
  bool any_masks = false;
  for (const auto& ex : test.examples) any_masks = any_masks || ex.has_masks;
  std::array<std::vector<double>, kLesionChannels> ious;
  std::array<std::vector<std::uint8_t>, kLesionChannels> pos;
  std::vector<int> labels;
  for (const auto& ex : test.examples) {
    const double p = eval_detail::visit_image(
        net, ex, spec, any_masks, [&](int ch, auto probs, auto truth) {
          ious[ch].push_back(patch_iou(binarize(probs, thresholds[ch]), truth));
          pos[ch].push_back(any_positive(truth));
        });
    rep.scores.push_back(p);
    rep.source_ids.push_back(ex.image.source_id);
    labels.push_back(ex.y_rdr);
  }
  rep.n_images = test.examples.size();
  const auto n_pos = std::count(labels.begin(), labels.end(), 1);
  if (n_pos > 0 && n_pos < static_cast<long>(labels.size()))
    rep.roc = operating_points(rep.scores, labels);
  if (any_masks) {
    for (int ch = 0; ch < kLesionChannels; ++ch) {
      LesionReport lr;
      lr.lesion = kLesionNames[ch];
      lr.binarization_threshold = thresholds[ch];
      lr.reference_map_score = kReferenceMap[ch];
      double sp = 0, sn = 0;
      for (size_t i = 0; i < ious[ch].size(); ++i) {
        if (pos[ch][i]) {
          sp += ious[ch][i];
          ++lr.n_positive;
        } else {
          sn += ious[ch][i];
          ++lr.n_negative;
        }
      }
      if (lr.n_positive) {
        lr.iou_positive_mean = sp / static_cast<double>(lr.n_positive);
        lr.map_score = patch_map(ious[ch], pos[ch]);
      }
      if (lr.n_negative) lr.iou_negative_mean = sn / static_cast<double>(lr.n_negative);
      rep.segmentation.push_back(lr);
    }
  }
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  using nlohmann::json;
  auto num_or_null = [](double v, bool ok) { return ok ? json(v) : json(nullptr); };
  json j;
  j["n_images"] = r.n_images;
  if (r.roc) {
    const RocReport& c = *r.roc;
    j["auc"] = c.auc;
    j["sens_at_high_spec"] = c.sens_at_high_spec;
    j["spec_at_high_sens"] = c.spec_at_high_sens;
    j["thresholds"] = {
        {"high_spec", num_or_null(c.threshold_high_spec, c.high_spec_attainable)},
        {"high_sens", num_or_null(c.threshold_high_sens, c.high_sens_attainable)}};
    j["unattainable"] = {{"high_spec", !c.high_spec_attainable},
                         {"high_sens", !c.high_sens_attainable}};
    j["n_positive_images"] = c.n_positive;
    j["n_negative_images"] = c.n_negative;
  } else {
    j["auc"] = nullptr;
  }
  j["threshold_source"] = r.threshold_source;
  json seg = json::object();
  for (const auto& l : r.segmentation) {
    seg[l.lesion] = {{"iou_positive_mean", l.iou_positive_mean},
                     {"iou_negative_mean", l.iou_negative_mean},
                     {"n_positive", l.n_positive},
                     {"n_negative", l.n_negative},
                     {"binarization_threshold", l.binarization_threshold},
                     {"map_score", l.map_score ? json(*l.map_score) : json(nullptr)},
                     {"reference_map_score", l.reference_map_score}};
  }
  j["segmentation"] = seg;
  json per = json::array();
  for (size_t i = 0; i < r.scores.size(); ++i)
    per.push_back({{"source_id", r.source_ids[i]}, {"rdr_prob", r.scores[i]}});
  j["images"] = per;
  return j;
}

}  // namespace mtmil
