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

// Joint classification + segmentation training.
//
// One step draws a classification batch (images without masks) and a
// segmentation batch (mask-bearing images). The total loss sums the bag BCE
// on the first batch, the bag BCE on the second batch and the per-pixel BCE
// of the decoder on the second batch, unweighted. Patches of both batches go
// through the encoder together, so batch-norm statistics are shared.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mtmil/adam.hpp"
#include "mtmil/augment.hpp"
#include "mtmil/datasets.hpp"
#include "mtmil/example.hpp"
#include "mtmil/losses.hpp"
#include "mtmil/metrics.hpp"
#include "mtmil/mil_net.hpp"
#include "mtmil/patch_bag.hpp"

namespace mtmil {

enum class TrainMode { kMultiTask, kClfOnly, kSegOnly };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kMultiTask: return "multi_task";
    case TrainMode::kClfOnly: return "clf_only";
    case TrainMode::kSegOnly: return "seg_only";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "multi_task") return TrainMode::kMultiTask;
  if (s == "clf_only") return TrainMode::kClfOnly;
  if (s == "seg_only") return TrainMode::kSegOnly;
  throw InvalidArgument("unknown training mode: " + s);
}

// Which loss terms a mode optimizes.
struct ActiveTerms {
  bool bce_clf, bce_seg_set, pixel_ce;
};

inline ActiveTerms active_terms(TrainMode m) {
  switch (m) {
    case TrainMode::kMultiTask: return {true, true, true};
    case TrainMode::kClfOnly: return {true, false, false};
    case TrainMode::kSegOnly: return {false, false, true};
  }
  return {false, false, false};
}

enum class Selection { kBestValAuc, kLast };

struct TrainConfig {
  double learning_rate = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 60;
  int clf_batch = 8;  // images per step
  int seg_batch = 4;  // images per step
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kMultiTask;
  AugmentRanges augmentation;
  int validation_size = 3000;
  int validate_every = 1;  // epochs; the last epoch is always validated
  std::int64_t max_steps = 0;  // 0 = no cap
  Selection selection = Selection::kBestValAuc;
  PatchSpec patches;
  MilNetConfig net;
  int frame = 512;

  void validate() const {
    if (!(learning_rate > 0)) throw InvalidArgument("learning_rate must be > 0");
    if (!(adam_beta1 > 0 && adam_beta1 < 1) || !(adam_beta2 > 0 && adam_beta2 < 1))
      throw InvalidArgument("Adam betas must be in (0, 1)");
    if (!(adam_eps > 0)) throw InvalidArgument("adam_eps must be > 0");
    if (epochs < 0) throw InvalidArgument("epochs must be >= 0");
    if (clf_batch < 1 || seg_batch < 1) throw InvalidArgument("batch sizes must be >= 1");
    if (validation_size < 0) throw InvalidArgument("validation_size must be >= 0");
    if (validate_every < 1) throw InvalidArgument("validate_every must be >= 1");
    if (max_steps < 0) throw InvalidArgument("max_steps must be >= 0");
    if (patches.patch_size != net.patch_size)
      throw InvalidArgument("patch size differs between patch spec and network");
    patches.validate(frame);
    net.validate();
  }

  AdamOptions adam() const {
    return {learning_rate, adam_beta1, adam_beta2, adam_eps};
  }
};

// A bag ready for the network: (K, 3, d, d) model-range pixels and, for
// mask-bearing images, (K, C, d, d) binary targets.
template <typename T>
struct TrainBag {
  nn::Tensor<T> patches;
  int label = 0;
  nn::Tensor<T> targets;

  bool has_targets() const { return !targets.data.empty(); }
};

template <typename T>
struct StepBatch {
  std::vector<TrainBag<T>> clf;
  std::vector<TrainBag<T>> seg;
};

struct LossBreakdown {
  double bce_clf = 0;
  double bce_seg_set = 0;
  double pixel_ce = 0;
  double total = 0;
};

template <typename T>
TrainBag<T> make_train_bag(const PatchBag& bag, int label, const Mask* lesions) {
  TrainBag<T> tb;
  tb.patches = bag_to_tensor<T>(bag);
  tb.label = label;
  if (lesions) {
    const int K = bag.size(), d = tb.patches.h, C = lesions->channels;
    tb.targets = nn::Tensor<T>(K, C, d, d);
    for (int k = 0; k < K; ++k) {
      const PatchOrigin o = bag.patches[k].origin;
      T* dst = tb.targets.sample(k);
      for (int ch = 0; ch < C; ++ch)
        for (int r = 0; r < d; ++r)
          for (int c = 0; c < d; ++c)
            dst[(static_cast<size_t>(ch) * d + r) * d + c] =
                lesions->at(o.row + r, o.col + c, ch) ? T(1) : T(0);
    }
  }
  return tb;
}

// Forward + backward of the total loss over one step batch. Gradients are
// accumulated into `grads` when provided; batch-norm statistics of the
// training-mode pass are appended to `stats`.
template <typename T>
LossBreakdown loss_and_gradients(const MilNet<T>& net, const StepBatch<T>& batch,
                                 TrainMode mode, nn::ArrayStore<T>* grads,
                                 std::vector<net::BnObservation<T>>* stats = nullptr) {
  using Tensor = nn::Tensor<T>;
  const ActiveTerms on = active_terms(mode);
  const bool use_clf = on.bce_clf && !batch.clf.empty();
  const bool use_seg = (on.bce_seg_set || on.pixel_ce) && !batch.seg.empty();
  LossBreakdown out;
  if (!use_clf && !use_seg) return out;

  struct Span {
    const TrainBag<T>* bag;
    int begin, count;
  };
  std::vector<Span> clf_spans, seg_spans;
  int n = 0;
  const int d = net.config().patch_size;
  if (use_clf)
    for (const auto& b : batch.clf) {
      clf_spans.push_back({&b, n, b.patches.n});
      n += b.patches.n;
    }
  const int seg_begin = n;
  if (use_seg)
    for (const auto& b : batch.seg) {
      if (on.pixel_ce && !b.has_targets())
        throw InvalidArgument("segmentation bag without targets");
      seg_spans.push_back({&b, n, b.patches.n});
      n += b.patches.n;
    }
  const int n_seg = n - seg_begin;

  Tensor x(n, 3, d, d);
  for (const auto* spans : {&clf_spans, &seg_spans})
    for (const auto& s : *spans)
      std::copy(s.bag->patches.data.begin(), s.bag->patches.data.end(),
                x.sample(s.begin));

  net::ForwardContext<T> ctx{true, stats};
  net::EncoderTrace<T> etr;
  EncodedBatch<T> enc = net.encode_batch(x, ctx, grads ? &etr : nullptr);
  Tensor dh(n, net.config().embed_dim, 1, 1);

  auto bag_terms = [&](const std::vector<Span>& spans, double& loss_out) {
    if (spans.empty()) return;
    const double inv = 1.0 / static_cast<double>(spans.size());
    double s = 0;
    for (const auto& sp : spans) {
      const auto t = net.bag_head(enc.h, sp.begin, sp.count);
      s += bce(static_cast<double>(t.prob), sp.bag->label);
      if (grads) {
        const T dlogit = static_cast<T>(
            bce_dlogit(static_cast<double>(t.prob), sp.bag->label) * inv);
        net.bag_head_backward(t, enc.h, dlogit, *grads, dh);
      }
    }
    loss_out = s * inv;
  };
  if (use_clf) bag_terms(clf_spans, out.bce_clf);
  if (use_seg && on.bce_seg_set) bag_terms(seg_spans, out.bce_seg_set);

  std::array<Tensor, 4> dskips;
  if (use_seg && on.pixel_ce) {
    std::array<Tensor, 4> skips;
    for (int i = 0; i < 4; ++i)
      skips[i] = nn::slice_batch(enc.skips[i], seg_begin, n);
    Tensor h_seg = nn::slice_batch(enc.h, seg_begin, n);
    net::DecoderTrace<T> dtr;
    Tensor probs = net.decode_batch(h_seg, skips, ctx, grads ? &dtr : nullptr);
    Tensor targets(n_seg, probs.c, d, d);
    for (const auto& sp : seg_spans) {
      if (sp.bag->targets.c != probs.c) throw ShapeError("target channel mismatch");
      std::copy(sp.bag->targets.data.begin(), sp.bag->targets.data.end(),
                targets.sample(sp.begin - seg_begin));
    }
    out.pixel_ce = segmentation_loss(probs, targets);
    if (grads) {
      const double inv = 1.0 / static_cast<double>(probs.data.size());
      Tensor dlogits(probs.n, probs.c, probs.h, probs.w);
      for (size_t i = 0; i < probs.data.size(); ++i)
        dlogits.data[i] = static_cast<T>(
            bce_dlogit(static_cast<double>(probs.data[i]),
                       static_cast<double>(targets.data[i])) * inv);
      Tensor dh_seg;
      std::array<Tensor, 4> dskips_seg;
      net.decode_backward(dtr, dlogits, *grads, dh_seg, dskips_seg);
      // Rows of the segmentation slice already hold the attention gradient.
      T* dst = dh.sample(seg_begin);
      for (size_t i = 0; i < dh_seg.data.size(); ++i) dst[i] += dh_seg.data[i];
      for (int i = 0; i < 4; ++i) {
        dskips[i] = Tensor(n, enc.skips[i].c, enc.skips[i].h, enc.skips[i].w);
        std::copy(dskips_seg[i].data.begin(), dskips_seg[i].data.end(),
                  dskips[i].sample(seg_begin));
      }
    }
  }
  out.total = out.bce_clf + out.bce_seg_set + out.pixel_ce;
  if (!std::isfinite(out.total)) {
    std::ostringstream msg;
    msg << "non-finite loss: bce_clf=" << out.bce_clf
        << " bce_seg_set=" << out.bce_seg_set << " pixel_ce=" << out.pixel_ce;
    throw NonFiniteError(msg.str());
  }
  if (grads) net.encode_backward(etr, dh, dskips, *grads);
  return out;
}

// Exponential moving average of batch statistics into the running buffers,
// with the unbiased variance estimate.
template <typename T>
void update_running_stats(MilNet<T>& net,
                          const std::vector<net::BnObservation<T>>& stats) {
  const double m = net.config().bn_momentum;
  for (const auto& o : stats) {
    T* rm = net.buffers().data(o.run_mean);
    T* rv = net.buffers().data(o.run_var);
    const double unbias = o.count > 1 ? o.count / (o.count - 1) : 1.0;
    for (size_t c = 0; c < o.mean.size(); ++c) {
      rm[c] = static_cast<T>((1 - m) * rm[c] + m * o.mean[c]);
      rv[c] = static_cast<T>((1 - m) * rv[c] + m * o.var[c] * unbias);
    }
  }
}

template <typename T>
LossBreakdown train_step(MilNet<T>& net, Adam<T>& opt, const StepBatch<T>& batch,
                         TrainMode mode) {
  auto grads = net.params().zeros_like();
  std::vector<net::BnObservation<T>> stats;
  const LossBreakdown lb = loss_and_gradients(net, batch, mode, &grads, &stats);
  if (!grads.all_finite()) {
    std::string bad;
    for (const auto& e : grads) {
      for (T v : e.value)
        if (!std::isfinite(static_cast<double>(v))) {
          bad = e.name;
          break;
        }
      if (!bad.empty()) break;
    }
    throw NonFiniteError("non-finite gradient in " + bad);
  }
  opt.step(net.params(), grads);
  update_running_stats(net, stats);
  return lb;
}

// rDR probability of one preprocessed image from its grid bag.
template <typename T>
double predict_rdr(const MilNet<T>& net, const PreprocessedImage& img,
                   const PatchSpec& spec) {
  return static_cast<double>(net.forward_bag(extract_grid(img, spec), false).rdr_prob);
}

// Validation AUC over a split; nullopt when the split has a single class.
template <typename T>
std::optional<double> split_auc(const MilNet<T>& net,
                                const std::vector<const LabeledExample*>& set,
                                const PatchSpec& spec) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto* ex : set) {
    scores.push_back(predict_rdr(net, ex->image, spec));
    labels.push_back(ex->y_rdr);
  }
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<long>(labels.size())) return std::nullopt;
  return roc_auc(scores, labels);
}

struct EpochLog {
  int epoch = 0;
  std::int64_t step = 0;
  LossBreakdown mean_loss;
  std::optional<double> val_auc;
};

struct TrainResult {
  MilNet<float> net;
  int best_epoch = 0;  // 0 = initialization
  std::optional<double> best_val_auc;
  std::int64_t steps = 0;
  std::vector<EpochLog> history;
};

// Training inputs. Either stream may be absent depending on the mode; when
// multi-task training has no separate classification set the mask-bearing
// set feeds both streams.
struct TrainData {
  const DatasetSplit* clf_train = nullptr;
  const DatasetSplit* clf_val = nullptr;
  const DatasetSplit* seg_train = nullptr;
};

inline void write_epoch_json(std::ostream& os, const EpochLog& e) {
  os << "{\"epoch\":" << e.epoch << ",\"step\":" << e.step
     << ",\"bce_clf\":" << e.mean_loss.bce_clf
     << ",\"bce_seg_set\":" << e.mean_loss.bce_seg_set
     << ",\"pixel_ce\":" << e.mean_loss.pixel_ce
     << ",\"total\":" << e.mean_loss.total << ",\"val_auc\":";
  if (e.val_auc) {
    os << *e.val_auc;
  } else {
    os << "null";
  }
  os << "}\n";
}

namespace train_detail {

// Endless shuffled pass over a set of examples.
class Stream {
 public:
  Stream(std::vector<const LabeledExample*> items, std::mt19937_64& rng)
      : items_(std::move(items)), rng_(rng) {
    reshuffle();
  }
  const LabeledExample& next() {
    if (pos_ == items_.size()) reshuffle();
    return *items_[pos_++];
  }
  size_t size() const { return items_.size(); }

 private:
  void reshuffle() {
    std::shuffle(items_.begin(), items_.end(), rng_);
    pos_ = 0;
  }
  std::vector<const LabeledExample*> items_;
  std::mt19937_64& rng_;
  size_t pos_ = 0;
};

inline std::vector<const LabeledExample*> pointers(const DatasetSplit& s) {
  std::vector<const LabeledExample*> v;
  for (const auto& e : s.examples) v.push_back(&e);
  return v;
}

inline TrainBag<float> draw_bag(const LabeledExample& ex, const TrainConfig& cfg,
                                bool with_targets, std::mt19937_64& rng) {
  const std::uint64_t aug_seed = rng(), bag_seed = rng();
  LabeledExample aug = augment(ex, cfg.augmentation, aug_seed);
  PatchBag bag;
  try {
    bag = extract_random(aug.image, cfg.patches, bag_seed);
  } catch (const EmptyBag&) {
    // The transform pushed too much of the retina out of frame.
    aug = ex;
    bag = extract_random(aug.image, cfg.patches, bag_seed);
  }
  const bool targets = with_targets && aug.has_masks;
  return make_train_bag<float>(bag, aug.y_rdr, targets ? &aug.lesion_masks : nullptr);
}

}  // namespace train_detail

inline TrainResult train(const TrainConfig& cfg, const TrainData& data,
                         std::ostream* log = nullptr) {
  using namespace train_detail;
  cfg.validate();
  const ActiveTerms on = active_terms(cfg.mode);
  const DatasetSplit* clf_src = data.clf_train;
  if (on.bce_clf && (!clf_src || clf_src->empty())) clf_src = data.seg_train;
  if (on.bce_clf && (!clf_src || clf_src->empty()))
    throw InvalidArgument("training needs a non-empty classification split");
  const bool need_seg = on.bce_seg_set || on.pixel_ce;
  if (need_seg && (!data.seg_train || data.seg_train->empty()))
    throw InvalidArgument("training needs a non-empty segmentation split");
  if (need_seg)
    for (const auto& e : data.seg_train->examples)
      if (!e.has_masks) throw InvalidArgument("segmentation split entry without masks");

  std::mt19937_64 rng(cfg.seed);
  TrainResult res{MilNet<float>(cfg.net, cfg.seed), 0, std::nullopt, 0, {}};

  // Validation set: the explicit split, else a random carve-out of the
  // classification training set, else the training set itself.
  std::vector<const LabeledExample*> clf_items, val_items;
  if (clf_src) clf_items = pointers(*clf_src);
  if (data.clf_val && !data.clf_val->empty()) {
    val_items = pointers(*data.clf_val);
  } else if (on.bce_clf && cfg.validation_size > 0 &&
             static_cast<size_t>(cfg.validation_size) < clf_items.size() &&
             clf_src != data.seg_train) {
    std::shuffle(clf_items.begin(), clf_items.end(), rng);
    val_items.assign(clf_items.begin(), clf_items.begin() + cfg.validation_size);
    clf_items.erase(clf_items.begin(), clf_items.begin() + cfg.validation_size);
  } else {
    val_items = clf_src ? pointers(*clf_src) : pointers(*data.seg_train);
  }
  const bool select_best =
      cfg.selection == Selection::kBestValAuc && cfg.mode != TrainMode::kSegOnly;

  if (cfg.epochs == 0) return res;

  std::optional<Stream> clf_stream, seg_stream;
  if (on.bce_clf) clf_stream.emplace(clf_items, rng);
  if (need_seg) seg_stream.emplace(pointers(*data.seg_train), rng);
  const size_t lead = clf_stream ? clf_stream->size() : seg_stream->size();
  const int lead_batch = clf_stream ? cfg.clf_batch : cfg.seg_batch;
  const std::int64_t steps_per_epoch =
      std::max<std::int64_t>(1, (static_cast<std::int64_t>(lead) + lead_batch - 1) /
                                    lead_batch);

  Adam<float> opt(res.net.params(), cfg.adam());
  MilNet<float>& net = res.net;
  std::optional<MilNet<float>> best;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog el;
    el.epoch = epoch;
    std::int64_t n_steps = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      if (cfg.max_steps > 0 && res.steps >= cfg.max_steps) break;
      StepBatch<float> batch;
      if (clf_stream)
        for (int i = 0; i < cfg.clf_batch; ++i)
          batch.clf.push_back(draw_bag(clf_stream->next(), cfg, false, rng));
      if (seg_stream)
        for (int i = 0; i < cfg.seg_batch; ++i)
          batch.seg.push_back(draw_bag(seg_stream->next(), cfg, true, rng));
      const LossBreakdown lb = train_step(net, opt, batch, cfg.mode);
      el.mean_loss.bce_clf += lb.bce_clf;
      el.mean_loss.bce_seg_set += lb.bce_seg_set;
      el.mean_loss.pixel_ce += lb.pixel_ce;
      el.mean_loss.total += lb.total;
      ++n_steps;
      ++res.steps;
    }
    if (n_steps > 0) {
      const double inv = 1.0 / static_cast<double>(n_steps);
      el.mean_loss.bce_clf *= inv;
      el.mean_loss.bce_seg_set *= inv;
      el.mean_loss.pixel_ce *= inv;
      el.mean_loss.total *= inv;
    }
    el.step = res.steps;
    const bool finished =
        epoch == cfg.epochs || (cfg.max_steps > 0 && res.steps >= cfg.max_steps);
    if (select_best && (finished || epoch % cfg.validate_every == 0)) {
      el.val_auc = split_auc(net, val_items, cfg.patches);
      // Ties go to the later epoch.
      if (el.val_auc && (!res.best_val_auc || *el.val_auc >= *res.best_val_auc)) {
        res.best_val_auc = el.val_auc;
        res.best_epoch = epoch;
        best = net;
      }
    }
    res.history.push_back(el);
    if (log) {
      write_epoch_json(*log, el);
      log->flush();
    }
    if (finished) break;
  }
  if (best) {
    res.net = std::move(*best);
  } else {
    res.best_epoch = res.history.empty() ? 0 : res.history.back().epoch;
  }
  return res;
}

}  // namespace mtmil
