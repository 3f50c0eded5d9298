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

// Evaluation metrics: ROC AUC and operating points for rDR, patch IoU with
// the complement rule for lesion-free ground truth, binarization threshold
// selection and IoU-swept patch mAP.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "mtmil/errors.hpp"

namespace mtmil {

namespace metrics_detail {

template <typename L>
void check_scores(std::span<const double> scores, std::span<const L> labels,
                  std::size_t& n_pos, std::size_t& n_neg) {
  if (scores.size() != labels.size())
    throw ShapeError("scores and labels differ in length");
  n_pos = n_neg = 0;
  for (auto y : labels) {
    if (y != 0 && y != 1) throw InvalidArgument("labels must be 0 or 1");
    (y ? n_pos : n_neg)++;
  }
  if (n_pos == 0 || n_neg == 0)
    throw InvalidArgument("ROC analysis needs both classes");
}

}  // namespace metrics_detail

// Area under the ROC curve; tied scores contribute one half.
template <typename L>
double roc_auc(std::span<const double> scores, std::span<const L> labels) {
  std::size_t P, N;
  metrics_detail::check_scores(scores, labels, P, N);
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double area = 0, tp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double gp = 0, gn = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? gp : gn) += 1;
      ++j;
    }
    area += gn * (tp + 0.5 * gp);
    tp += gp;
    i = j;
  }
  return area / (static_cast<double>(P) * static_cast<double>(N));
}

inline double roc_auc(const std::vector<double>& scores,
                      const std::vector<int>& labels) {
  return roc_auc(std::span<const double>(scores), std::span<const int>(labels));
}

struct RocReport {
  double auc = 0;
  double sens_at_high_spec = 0;
  double spec_at_high_sens = 0;
  // Decision thresholds (positive iff score >= threshold); NaN if unattainable.
  double threshold_high_spec = std::numeric_limits<double>::quiet_NaN();
  double threshold_high_sens = std::numeric_limits<double>::quiet_NaN();
  bool high_spec_attainable = false;
  bool high_sens_attainable = false;
  std::size_t n_positive = 0, n_negative = 0;
};

struct RocPoint {
  double threshold, sensitivity, specificity;
};

// Candidate thresholds are the midpoints between consecutive distinct scores,
// visited from high to low.
template <typename L>
std::vector<RocPoint> roc_points(std::span<const double> scores,
                                 std::span<const L> labels) {
  std::size_t P, N;
  metrics_detail::check_scores(scores, labels, P, N);
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> pts;
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? tp : fp) += 1;
      ++j;
    }
    if (j < idx.size()) {
      const double thr = 0.5 * (scores[idx[i]] + scores[idx[j]]);
      pts.push_back({thr, tp / P, (N - fp) / N});
    }
    i = j;
  }
  return pts;
}

inline constexpr double kHighOperatingPoint = 0.9;

template <typename L>
RocReport operating_points(std::span<const double> scores,
                           std::span<const L> labels) {
  RocReport r;
  r.auc = roc_auc(scores, labels);
  for (auto y : labels) (y ? r.n_positive : r.n_negative)++;
  for (const RocPoint& p : roc_points(scores, labels)) {
    if (p.specificity > kHighOperatingPoint &&
        (!r.high_spec_attainable || p.sensitivity > r.sens_at_high_spec)) {
      r.high_spec_attainable = true;
      r.sens_at_high_spec = p.sensitivity;
      r.threshold_high_spec = p.threshold;
    }
    if (p.sensitivity > kHighOperatingPoint &&
        (!r.high_sens_attainable || p.specificity > r.spec_at_high_sens)) {
      r.high_sens_attainable = true;
      r.spec_at_high_sens = p.specificity;
      r.threshold_high_sens = p.threshold;
    }
  }
  return r;
}

inline RocReport operating_points(const std::vector<double>& scores,
                                  const std::vector<int>& labels) {
  return operating_points(std::span<const double>(scores),
                          std::span<const int>(labels));
}

// IoU of two binary masks of equal size. When the ground truth is empty the
// complements are compared, which reduces to 1 - |pred| / n.
inline double patch_iou(std::span<const std::uint8_t> pred,
                        std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw ShapeError("patch_iou: size mismatch");
  if (pred.empty()) throw ShapeError("patch_iou: empty masks");
  std::size_t inter = 0, uni = 0, n_true = 0, n_pred = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    inter += p && t;
    uni += p || t;
    n_true += t;
    n_pred += p;
  }
  if (n_true == 0)
    return 1.0 - static_cast<double>(n_pred) / static_cast<double>(pred.size());
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double patch_iou(const std::vector<std::uint8_t>& pred,
                        const std::vector<std::uint8_t>& truth) {
  return patch_iou(std::span<const std::uint8_t>(pred),
                   std::span<const std::uint8_t>(truth));
}

// The 0.05-step grid {0.05, ..., 0.95} shared by binarization and mAP.
inline std::vector<double> threshold_grid() {
  std::vector<double> g;
  for (int k = 1; k <= 19; ++k) g.push_back(k / 20.0);
  return g;
}

inline std::vector<std::uint8_t> binarize(std::span<const float> probs,
                                          double threshold) {
  std::vector<std::uint8_t> m(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i)
    m[i] = static_cast<double>(probs[i]) >= threshold;
  return m;
}

inline bool any_positive(std::span<const std::uint8_t> m) {
  return std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
}

// Mean IoU over lesion-positive patches at one threshold.
inline double mean_positive_iou(const std::vector<std::vector<float>>& probs,
                                const std::vector<std::vector<std::uint8_t>>& truths,
                                double threshold) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!any_positive(truths[i])) continue;
    s += patch_iou(binarize(probs[i], threshold), truths[i]);
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

// Grid threshold maximizing mean IoU over lesion-positive patches of one
// channel; ties go to the lower threshold.
inline double select_threshold(const std::vector<std::vector<float>>& probs,
                               const std::vector<std::vector<std::uint8_t>>& truths) {
  if (probs.size() != truths.size())
    throw ShapeError("select_threshold: length mismatch");
  const bool has_pos = std::any_of(truths.begin(), truths.end(), [](const auto& t) {
    return any_positive(t);
  });
  if (!has_pos) throw InvalidArgument("select_threshold: no lesion-positive patches");
  double best = -1, best_thr = 0;
  for (double thr : threshold_grid()) {
    const double v = mean_positive_iou(probs, truths, thr);
    if (v > best) {
      best = v;
      best_thr = thr;
    }
  }
  return best_thr;
}

struct PrPoint {
  double tau, precision, recall;
};

// One precision/recall point per IoU threshold. Positives at or above tau are
// true positives, below are false negatives; negatives at or above tau are
// true negatives, below are false positives.
inline std::vector<PrPoint> pr_points(std::span<const double> ious,
                                      std::span<const std::uint8_t> positive) {
  if (ious.size() != positive.size()) throw ShapeError("patch_map: length mismatch");
  std::vector<PrPoint> pts;
  for (double tau : threshold_grid()) {
    double tp = 0, fn = 0, fp = 0;
    for (std::size_t i = 0; i < ious.size(); ++i) {
      const bool hit = ious[i] >= tau;
      if (positive[i]) {
        (hit ? tp : fn) += 1;
      } else if (!hit) {
        fp += 1;
      }
    }
    if (tp + fn == 0) throw InvalidArgument("patch_map: no positive patches");
    pts.push_back({tau, tp + fp > 0 ? tp / (tp + fp) : 1.0, tp / (tp + fn)});
  }
  return pts;
}

// Trapezoidal area under precision vs recall, with the curve extended to
// recall 0 at the precision of its lowest-recall point.
inline double patch_map(std::span<const double> ious,
                        std::span<const std::uint8_t> positive) {
  auto pts = pr_points(ious, positive);
  std::stable_sort(pts.begin(), pts.end(), [](const PrPoint& a, const PrPoint& b) {
    if (a.recall != b.recall) return a.recall < b.recall;
    return a.tau > b.tau;
  });
  double area = 0, r0 = 0, p0 = pts.front().precision;
  for (const PrPoint& p : pts) {
    area += (p.recall - r0) * 0.5 * (p.precision + p0);
    r0 = p.recall;
    p0 = p.precision;
  }
  return area;
}

inline double patch_map(const std::vector<double>& ious,
                        const std::vector<std::uint8_t>& positive) {
  return patch_map(std::span<const double>(ious),
                   std::span<const std::uint8_t>(positive));
}

}  // namespace mtmil
