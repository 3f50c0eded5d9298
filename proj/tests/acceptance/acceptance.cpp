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

// Acceptance gate: one [PASS]/[FAIL] line per criterion; nonzero exit on any
// failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"

namespace {

using namespace mtmil;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// Reduced network and patch setup used by the training criteria.
TrainConfig desk_config() {
  TrainConfig cfg;
  cfg.frame = 128;
  cfg.patches.patch_size = 32;
  cfg.patches.k_train = 16;
  cfg.net.patch_size = 32;
  cfg.net.encoder_widths = {8, 16, 16, 32};
  cfg.net.embed_dim = 32;
  cfg.net.attention_dim = 16;
  cfg.learning_rate = 3e-3;
  cfg.clf_batch = 4;
  cfg.seg_batch = 4;
  cfg.epochs = 100000;
  cfg.validate_every = 100000;
  cfg.selection = Selection::kLast;
  return cfg;
}

MilNetConfig desk_net() { return desk_config().net; }

// ---- 1, 2: attention pooling ----------------------------------------------

Outcome permutation_invariance() {
  const auto t0 = Clock::now();
  const MilNet<float> net(desk_net(), 17);
  std::mt19937_64 rng(1);
  double worst_prob = 0, worst_alpha = 0;
  for (int b = 0; b < 100; ++b) {
    const int K = std::uniform_int_distribution<int>(1, 20)(rng);
    const PatchBag bag = testing::random_bag(K, 32, rng());
    std::vector<int> perm(K);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    PatchBag shuffled = bag;
    for (int k = 0; k < K; ++k) shuffled.patches[k] = bag.patches[perm[k]];
    const auto a = net.forward_bag(bag, false);
    const auto s = net.forward_bag(shuffled, false);
    worst_prob = std::max(worst_prob, std::abs(double(a.rdr_prob) - double(s.rdr_prob)));
    for (int k = 0; k < K; ++k)
      worst_alpha = std::max(worst_alpha, std::abs(double(s.alphas[k]) - double(a.alphas[perm[k]])));
  }
  const double t = seconds_since(t0);
  return {worst_prob < 1e-5 && worst_alpha < 1e-6 && t < 60,
          fmt("max |dprob| %.2e, max |dalpha| %.2e, %.1f s", worst_prob, worst_alpha, t)};
}

Outcome attention_simplex() {
  const MilNet<float> net(desk_net(), 18);
  std::mt19937_64 rng(2);
  double worst = 0;
  for (int b = 0; b < 100; ++b) {
    const int K = std::uniform_int_distribution<int>(1, 20)(rng);
    const auto r = net.forward_bag(testing::random_bag(K, 32, rng()), false);
    double s = 0;
    for (float a : r.alphas) s += a;
    worst = std::max(worst, std::abs(s - 1.0));
  }
  // Large attention logits stress the softmax.
  MilNet<float> hot(desk_net(), 19);
  for (auto& v : hot.params()[hot.params().find("att.w")].value) v *= 1e4f;
  for (int b = 0; b < 20; ++b) {
    const auto r = hot.forward_bag(testing::random_bag(1 + b, 32, rng()), false);
    double s = 0;
    for (float a : r.alphas) s += a;
    worst = std::max(worst, std::abs(s - 1.0));
  }
  bool single_exact = true;
  for (int b = 0; b < 10; ++b) {
    const auto r = net.forward_bag(testing::random_bag(1, 32, rng()), false);
    single_exact = single_exact && r.alphas.size() == 1 && r.alphas[0] == 1.0f;
  }
  return {worst < 1e-6 && single_exact,
          fmt("max |sum - 1| %.2e, K=1 exact: %s", worst, single_exact ? "yes" : "no")};
}

// ---- 3: gradients ----------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = Clock::now();
  MilNet<double> net(testing::tiny_net(16), 4);
  testing::smooth_operating_point(net, 4);
  const auto batch = testing::random_step_batch<double>(2, 3, 16, 3, 5);
  auto grads = net.params().zeros_like();
  loss_and_gradients(net, batch, TrainMode::kMultiTask, &grads);
  auto& P = net.params();
  std::vector<int> enc, dec;
  for (int i = 0; i < static_cast<int>(P.size()); ++i) {
    const std::string& n = P[i].name;
    if (n.rfind("enc.", 0) == 0 && n.rfind("enc.proj", 0) != 0) enc.push_back(i);
    if (n.rfind("dec.", 0) == 0) dec.push_back(i);
  }
  std::mt19937_64 rng(6);
  auto pick = [&](const std::vector<int>& v) {
    return v[std::uniform_int_distribution<size_t>(0, v.size() - 1)(rng)];
  };
  const double h = 1e-3;
  int checked = 0, failed = 0;
  double worst = 0;
  std::string worst_name;
  auto check = [&](int id) {
    auto& e = P[id];
    const size_t j = std::uniform_int_distribution<size_t>(0, e.value.size() - 1)(rng);
    const double orig = e.value[j];
    auto* none = static_cast<nn::ArrayStore<double>*>(nullptr);
    e.value[j] = orig + h;
    const double lp = loss_and_gradients(net, batch, TrainMode::kMultiTask, none).total;
    e.value[j] = orig - h;
    const double lm = loss_and_gradients(net, batch, TrainMode::kMultiTask, none).total;
    e.value[j] = orig;
    const double num = (lp - lm) / (2 * h), ana = grads[id].value[j];
    const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6});
    ++checked;
    if (rel >= 1e-3) ++failed;
    if (rel > worst) {
      worst = rel;
      worst_name = e.name;
    }
  };
  for (int k = 0; k < 8; ++k) {
    check(P.find("att.V"));
    check(P.find("att.w"));
    check(P.find("enc.proj.weight"));
    check(pick(enc));
    check(pick(dec));
  }
  const double t = seconds_since(t0);
  return {failed == 0 && checked >= 20 && t < 300,
          fmt("%d/%d within 1e-3, worst %.2e (%s), %.1f s", checked - failed, checked, worst,
              worst_name.c_str(), t)};
}

// ---- 4: metric oracles -----------------------------------------------------

double concordance_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        den += 1;
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return num / den;
}

double count_iou(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& t) {
  bool empty_truth = std::none_of(t.begin(), t.end(), [](auto v) { return v != 0; });
  std::vector<std::uint8_t> a = p, b = t;
  if (empty_truth)
    for (size_t i = 0; i < a.size(); ++i) {
      a[i] = !a[i];
      b[i] = !b[i];
    }
  int inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return static_cast<double>(inter) / uni;
}

double brute_force_map(const std::vector<double>& ious, const std::vector<std::uint8_t>& pos) {
  struct Pt {
    double tau, p, r;
  };
  std::vector<Pt> pts;
  for (int k = 1; k <= 19; ++k) {
    const double tau = k / 20.0;
    int tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < ious.size(); ++i) {
      if (pos[i] && ious[i] >= tau) ++tp;
      if (pos[i] && ious[i] < tau) ++fn;
      if (!pos[i] && ious[i] < tau) ++fp;
    }
    pts.push_back({tau, tp + fp ? double(tp) / (tp + fp) : 1.0, double(tp) / (tp + fn)});
  }
  std::sort(pts.begin(), pts.end(), [](const Pt& a, const Pt& b) {
    return a.r != b.r ? a.r < b.r : a.tau > b.tau;
  });
  double area = pts[0].r * pts[0].p;
  for (size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].r - pts[i - 1].r) * (pts[i].p + pts[i - 1].p) / 2;
  return area;
}

Outcome metric_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7);
  double auc_err = 0;
  for (int s = 0; s < 200; ++s) {
    const int n = std::uniform_int_distribution<int>(2, 120)(rng);
    const int levels = std::uniform_int_distribution<int>(2, 40)(rng);
    std::vector<double> sc(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      sc[i] = std::uniform_int_distribution<int>(0, levels)(rng) / double(levels);
      y[i] = std::bernoulli_distribution(0.4)(rng);
    }
    y[0] = 1;
    y[1] = 0;
    auc_err = std::max(auc_err, std::abs(roc_auc(sc, y) - concordance_auc(sc, y)));
  }
  int iou_mismatch = 0, empty_cases = 0;
  for (int s = 0; s < 500; ++s) {
    std::vector<std::uint8_t> p(64), t(64);
    const double dp = std::uniform_real_distribution<double>(0, 1)(rng);
    const double dt = s % 4 == 0 ? 0.0 : std::uniform_real_distribution<double>(0, 1)(rng);
    for (int i = 0; i < 64; ++i) {
      p[i] = std::bernoulli_distribution(dp)(rng);
      t[i] = std::bernoulli_distribution(dt)(rng);
    }
    if (std::none_of(t.begin(), t.end(), [](auto v) { return v != 0; })) ++empty_cases;
    const double oracle = count_iou(p, t);
    if (patch_iou(p, t) != oracle) ++iou_mismatch;
  }
  double map_err = 0;
  for (int s = 0; s < 50; ++s) {
    const int n = std::uniform_int_distribution<int>(5, 200)(rng);
    std::vector<double> ious(n);
    std::vector<std::uint8_t> pos(n);
    for (int i = 0; i < n; ++i) {
      ious[i] = s % 2 ? std::uniform_int_distribution<int>(0, 20)(rng) / 20.0
                      : std::uniform_real_distribution<double>(0, 1)(rng);
      pos[i] = std::bernoulli_distribution(0.5)(rng);
    }
    pos[0] = 1;
    map_err = std::max(map_err, std::abs(patch_map(ious, pos) - brute_force_map(ious, pos)));
  }
  const double t = seconds_since(t0);
  return {auc_err <= 1e-9 && iou_mismatch == 0 && empty_cases > 0 && map_err <= 1e-9 && t < 120,
          fmt("auc err %.1e, iou mismatches %d (%d empty-truth), map err %.1e, %.1f s", auc_err,
              iou_mismatch, empty_cases, map_err, t)};
}

// ---- 5: grid -----------------------------------------------------------------

Outcome grid_arithmetic() {
  const Mask full = make_mask(512, 512, 1);
  PatchSpec a, b;
  a.patch_size = b.patch_size = 64;
  a.overlap = 0.75;
  b.overlap = 0.5;
  const size_t na = grid_origins(full, a).size(), nb = grid_origins(full, b).size();
  return {na == 841 && nb == 225, fmt("t=0.75: %zu, t=0.5: %zu", na, nb)};
}

// ---- 6: preprocessing ---------------------------------------------------------

Outcome preprocessing_geometry() {
  std::mt19937_64 rng(8);
  double worst_center = 0, worst_radius = 0;
  for (int i = 0; i < 20; ++i) {
    const int h = std::uniform_int_distribution<int>(400, 700)(rng);
    const int w = std::uniform_int_distribution<int>(h, 1000)(rng);
    const double r = std::uniform_real_distribution<double>(0.3, 0.45)(rng) * h;
    const double cr = std::uniform_real_distribution<double>(r + 2, h - r - 2)(rng);
    const double cc = std::uniform_real_distribution<double>(r + 2, w - r - 2)(rng);
    const DiskGeometry g = detect_disk(testing::render_circle(h, w, cr, cc, r));
    worst_center = std::max(worst_center, std::hypot(g.center_row - cr, g.center_col - cc));
    worst_radius = std::max(worst_radius, std::abs(g.radius - r) / r);
  }
  PreprocessOptions opt;
  const auto p = preprocess(testing::render_circle(800, 1000, 400, 500, 350), opt);
  const double cov = static_cast<double>(count_nonzero(p.retina_mask)) /
                     static_cast<double>(p.retina_mask.pixel_count());
  const double target = std::numbers::pi / 4 * 0.95 * 0.95;
  double worst_offset = 0;
  for (float value : {0.0f, 90.0f, 255.0f}) {
    const auto disc = testing::render_circle(200, 200, 99.5, 99.5, 90);
    Mask mask = make_mask(200, 200);
    for (size_t q = 0; q < mask.pixel_count(); ++q) mask.data[q] = disc.pixels.data[q * 3] != 0;
    const ImageF out = normalize_color(ImageF(200, 200, 3, value), mask);
    for (size_t q = 0; q < mask.pixel_count(); ++q)
      if (mask.data[q])
        for (int ch = 0; ch < 3; ++ch)
          worst_offset = std::max(worst_offset, std::abs(double(out.data[q * 3 + ch]) - 128.0));
  }
  return {worst_center <= 2.0 && worst_radius <= 0.03 && std::abs(cov - target) <= 0.02 &&
              worst_offset < 1e-3,
          fmt("centre err %.2f px, radius err %.2f%%, coverage %.4f (target %.4f), "
              "max |v - offset| %.1e",
              worst_center, 100 * worst_radius, cov, target, worst_offset)};
}

// ---- 7: overfit ----------------------------------------------------------------

Outcome overfit_smoke() {
  const auto t0 = Clock::now();
  SynthOptions so;
  so.frame = 128;
  so.positive_fraction = 0.5;
  so.mild_fraction = 0;
  const DatasetSplit train_set = synth_generate(16, 7, so);
  int n_pos = 0;
  for (const auto& ex : train_set.examples) n_pos += ex.y_rdr;
  TrainConfig cfg = desk_config();
  cfg.max_steps = 200;
  cfg.seed = 1;
  TrainData data;
  data.seg_train = &train_set;
  const TrainResult r = train(cfg, data, nullptr);
  const EvalReport rep = evaluate(r.net, train_set, cfg.patches, {0.5, 0.5, 0.5});
  const double auc = rep.roc ? rep.roc->auc : 0.0;
  const double ce = split_pixel_ce(r.net, train_set, cfg.patches);
  const double t = seconds_since(t0);
  return {n_pos == 8 && r.steps == 200 && auc == 1.0 && ce < 0.1 && t < 600,
          fmt("%d positives, %lld steps, train AUC %.4f, pixel CE %.4f, %.1f s", n_pos,
              static_cast<long long>(r.steps), auc, ce, t)};
}

// ---- 8: multi-task direction --------------------------------------------------

Outcome multitask_direction() {
  const auto t0 = Clock::now();
  SynthOptions so;
  so.frame = 128;
  std::array<double, 3> sum_mt{}, sum_seg{};
  std::ostringstream per_seed;
  for (int seed = 1; seed <= 3; ++seed) {
    DatasetSplit train_set = synth_generate(64, 100 + seed, so);
    DatasetSplit test_set = synth_generate(32, 200 + seed, so, SplitRole::kSegTest);
    // Extra images with image-level labels only feed the classification stream.
    DatasetSplit clf_set = synth_generate(256, 300 + seed, so, SplitRole::kClfTrain);
    for (auto& ex : clf_set.examples) {
      ex.has_masks = false;
      ex.lesion_masks = Mask();
    }
    for (TrainMode mode : {TrainMode::kMultiTask, TrainMode::kSegOnly}) {
      TrainConfig cfg = desk_config();
      cfg.mode = mode;
      cfg.seed = seed;
      cfg.max_steps = 300;
      TrainData data;
      data.seg_train = &train_set;
      if (mode == TrainMode::kMultiTask) data.clf_train = &clf_set;
      const TrainResult r = train(cfg, data, nullptr);
      const auto thr = select_thresholds(r.net, train_set, cfg.patches);
      const EvalReport rep = evaluate(r.net, test_set, cfg.patches, thr);
      auto& acc = mode == TrainMode::kMultiTask ? sum_mt : sum_seg;
      per_seed << " s" << seed << (mode == TrainMode::kMultiTask ? "/mt" : "/seg");
      for (int ch = 0; ch < 3; ++ch) {
        const double m = rep.segmentation[ch].map_score.value_or(0.0);
        acc[ch] += m;
        per_seed << ' ' << fmt("%.3f", m);
      }
    }
  }
  int wins = 0;
  std::string means;
  for (int ch = 0; ch < 3; ++ch) {
    wins += sum_mt[ch] >= sum_seg[ch];
    means += fmt(" %s %.3f vs %.3f;", kLesionNames[ch], sum_mt[ch] / 3, sum_seg[ch] / 3);
  }
  const double t = seconds_since(t0);
  std::cout << "  per-run mAP (MA HE EX):" << per_seed.str() << '\n';
  return {wins >= 2, fmt("multi_task vs seg_only mean mAP:%s %d/3 channels, %.1f s",
                         means.c_str(), wins, t)};
}

// ---- 9: stitching ---------------------------------------------------------------

Outcome stitching() {
  const int f = 64, d = 16;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u;
  PatchSpec spec;
  spec.patch_size = d;
  spec.overlap = 0.0;
  BagForwardResult<float> r;
  r.origins = grid_origins(make_mask(f, f, 1), spec);
  r.lesion_maps = nn::Tensor<float>(static_cast<int>(r.origins.size()), 3, d, d);
  Image<float> src(f, f, 3);
  for (auto& v : src.data) v = u(rng);
  for (size_t k = 0; k < r.origins.size(); ++k)
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < d; ++y)
        for (int x = 0; x < d; ++x)
          r.lesion_maps.at(static_cast<int>(k), ch, y, x) =
              src.at(r.origins[k].row + y, r.origins[k].col + x, ch);
  const auto m = stitch_lesion_maps(r, f);
  size_t mismatches = 0;
  for (size_t i = 0; i < src.data.size(); ++i) mismatches += m.data[i] != double(src.data[i]);

  BagForwardResult<float> two;
  two.origins = {{0, 0}, {0, 8}};
  two.lesion_maps = nn::Tensor<float>(2, 1, 16, 16);
  std::fill(two.lesion_maps.sample(0), two.lesion_maps.sample(1), 0.2f);
  std::fill(two.lesion_maps.sample(1), two.lesion_maps.sample(1) + 256, 0.6f);
  const auto s = stitch_lesion_maps(two, 32);
  const double expect = (double(0.2f) + double(0.6f)) / 2;
  bool two_ok = true;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 24; ++x) {
      const double want = x < 8 ? double(0.2f) : x < 16 ? expect : double(0.6f);
      two_ok = two_ok && s.at(y, x) == want;
    }
  two_ok = two_ok && s.at(20, 4) == 0.0 && std::abs(expect - 0.4) < 1e-7;
  return {mismatches == 0 && two_ok,
          fmt("tiling mismatches %zu, two-patch overlap %s (%.7f)", mismatches,
              two_ok ? "exact" : "wrong", s.at(4, 12))};
}

// ---- 10: pool --------------------------------------------------------------------

Outcome pool_logic() {
  std::vector<SegRecord> seg;
  for (int i = 0; i < 81; ++i) seg.push_back({"idrid_seg_" + std::to_string(i), "", i < 54});
  std::vector<PoolGradingRecord> grading;
  for (int i = 0; i < 167; ++i)
    grading.push_back({{"idrid_grade_" + std::to_string(i), "", 0, true}, i < 133});
  const SegPool pool = build_idrid_pool(seg, grading);
  bool labels_ok = true;
  for (const auto* part : {&pool.seg_train, &pool.seg_test})
    for (const auto& m : *part) {
      const bool annotated = m.source_id.rfind("idrid_seg_", 0) == 0;
      labels_ok = labels_ok && m.y_rdr == (annotated ? 1 : 0) && m.black_masks == !annotated;
    }
  bool rejects = false;
  try {
    build_idrid_pool({}, {{{"g", "", 2, true}, true}});
  } catch (const InvalidArgument&) {
    rejects = true;
  }
  return {pool.size() == 248 && pool.seg_train.size() == 187 && pool.seg_test.size() == 61 &&
              labels_ok && rejects,
          fmt("pool %zu, train %zu, test %zu, labels %s", pool.size(), pool.seg_train.size(),
              pool.seg_test.size(), labels_ok ? "exact" : "wrong")};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all = {
      {1, "permutation invariance", permutation_invariance},
      {2, "attention simplex", attention_simplex},
      {3, "gradient check", gradient_check},
      {4, "metric oracles", metric_oracles},
      {5, "grid arithmetic", grid_arithmetic},
      {6, "preprocessing geometry", preprocessing_geometry},
      {7, "overfit smoke test", overfit_smoke},
      {8, "multi-task direction", multitask_direction},
      {9, "stitching", stitching},
      {10, "segmentation pool", pool_logic},
  };
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << c.id << ". " << c.name << ": " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
