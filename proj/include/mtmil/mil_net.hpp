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

// Multi-task MIL network: a residual patch encoder, additive-attention
// pooling, a bag classifier and a U-shaped lesion decoder that reuses the
// encoder's stage outputs as skip connections.
//
// Encoder topology (ResNet-18 style, four 2x downsamplings so that the
// bottleneck of a d x d patch is d/16 x d/16):
//   stem conv(k, stride 2) + BN + ReLU                       -> d/2
//   stage i: blocks_per_stage basic blocks, first block of
//            stages 2..4 has stride 2                        -> skip_i
//   global average pool -> affine projection to M          -> h
// Decoder:
//   affine(h) -> ReLU -> w4 x d/16 x d/16
//   [concat skip_4] block -> up -> [concat skip_3] block -> up -> ...
//   -> up -> block at d -> 1x1 conv -> sigmoid (3 independent channels)

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "mtmil/errors.hpp"
#include "mtmil/nn/ops.hpp"
#include "mtmil/nn/params.hpp"
#include "mtmil/nn/tensor.hpp"
#include "mtmil/patch_bag.hpp"

namespace mtmil {

struct MilNetConfig {
  int patch_size = 64;      // d
  int embed_dim = 128;      // M
  int attention_dim = 32;   // L
  int lesion_channels = 3;  // MA, HE, EX
  std::array<int, 4> encoder_widths{64, 128, 256, 512};
  int blocks_per_stage = 2;
  int stem_kernel = 7;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  void validate() const {
    if (embed_dim < 1 || attention_dim < 1)
      throw InvalidArgument("embed_dim and attention_dim must be >= 1");
    if (patch_size < 16 || patch_size % 16 != 0)
      throw InvalidArgument("patch_size must be a positive multiple of 16");
    if (lesion_channels < 1) throw InvalidArgument("lesion_channels must be >= 1");
    for (int w : encoder_widths)
      if (w < 1) throw InvalidArgument("encoder widths must be >= 1");
    if (blocks_per_stage < 1) throw InvalidArgument("blocks_per_stage must be >= 1");
    if (stem_kernel < 1 || stem_kernel % 2 == 0)
      throw InvalidArgument("stem_kernel must be odd");
  }

  bool operator==(const MilNetConfig&) const = default;
};

namespace net {

template <typename T>
using Tensor = nn::Tensor<T>;

struct ConvBnLayer {
  nn::ConvGeom geom;
  int weight = -1;
  int gamma = -1, beta = -1;
  int run_mean = -1, run_var = -1;  // buffer ids
  bool relu = true;
};

struct BasicBlock {
  ConvBnLayer a, b;
  bool has_down = false;
  ConvBnLayer down;
};

struct LinearLayer {
  int in = 0, out = 0;
  int weight = -1, bias = -1;
};

struct DecoderBlock {
  ConvBnLayer a, b;
};

template <typename T>
struct ConvBnTrace {
  Tensor<T> x;
  nn::BatchNormCache<T> bn;
  Tensor<T> y;
};

template <typename T>
struct BlockTrace {
  ConvBnTrace<T> a, b, down;
  Tensor<T> out;
};

template <typename T>
struct EncoderTrace {
  ConvBnTrace<T> stem;
  std::vector<BlockTrace<T>> blocks;  // stage-major
  Tensor<T> pooled;
  int last_h = 0, last_w = 0;
};

template <typename T>
struct DecoderTrace {
  Tensor<T> h;
  Tensor<T> bottleneck;  // post-ReLU, reshaped to (n, w4, s, s)
  std::array<ConvBnTrace<T>, 5> a, b;  // index = level (0 is full resolution)
  Tensor<T> head_in;
  Tensor<T> probs;
};

// Batch-norm statistics observed in a training forward pass.
template <typename T>
struct BnObservation {
  int run_mean = -1, run_var = -1;
  std::vector<T> mean, var;  // biased batch variance
  double count = 0;
};

template <typename T>
struct ForwardContext {
  bool train = false;
  std::vector<BnObservation<T>>* stats = nullptr;
};

}  // namespace net

// h_k plus the four stage outputs (spatial d/2, d/4, d/8, d/16) used as skips.
template <typename T>
struct PatchEncoding {
  std::vector<T> h;
  std::array<nn::Tensor<T>, 4> skips;
};

// Batched encoder output: h is (n, M, 1, 1).
template <typename T>
struct EncodedBatch {
  nn::Tensor<T> h;
  std::array<nn::Tensor<T>, 4> skips;
};

template <typename T>
struct AttentionResult {
  std::vector<T> alphas;
  std::vector<T> z;
};

// Cached intermediates of one bag's attention + classifier pass.
template <typename T>
struct BagHeadTrace {
  int begin = 0, count = 0;
  std::vector<T> u;  // count x L, tanh(V h_k)
  std::vector<T> alphas;
  std::vector<T> z;
  T logit = 0;
  T prob = 0;
};

template <typename T>
struct BagForwardResult {
  std::vector<T> alphas;
  std::vector<T> z;
  T rdr_prob = 0;
  nn::Tensor<T> lesion_maps;  // (K, 3, d, d), values in [0, 1]
  std::vector<PatchOrigin> origins;
};

// Rescales [0, 255] interleaved pixels to the [-1, 1] NCHW model range.
template <typename T>
void write_patch_tensor(const ImageF& px, nn::Tensor<T>& out, int index) {
  T* dst = out.sample(index);
  const size_t plane = static_cast<size_t>(px.height) * px.width;
  for (size_t p = 0; p < plane; ++p)
    for (int ch = 0; ch < 3; ++ch)
      dst[ch * plane + p] =
          static_cast<T>(px.data[p * 3 + ch]) / T(127.5) - T(1);
}

template <typename T>
nn::Tensor<T> bag_to_tensor(const PatchBag& bag, int begin = 0, int end = -1) {
  if (end < 0) end = bag.size();
  if (begin >= end) throw InvalidArgument("bag_to_tensor: empty range");
  const int d = bag.patches[begin].pixels.height;
  nn::Tensor<T> t(end - begin, 3, d, d);
  for (int k = begin; k < end; ++k) {
    const auto& px = bag.patches[k].pixels;
    if (px.height != d || px.width != d || px.channels != 3)
      throw ShapeError("bag_to_tensor: inconsistent patch shape");
    write_patch_tensor(px, t, k - begin);
  }
  return t;
}

// Numerically safe softmax (max subtraction), summed in index order.
template <typename T>
std::vector<T> softmax(const std::vector<T>& logits) {
  std::vector<T> a(logits.size());
  if (logits.empty()) return a;
  T mx = logits[0];
  for (T v : logits) mx = std::max(mx, v);
  T s = 0;
  for (size_t k = 0; k < logits.size(); ++k) {
    a[k] = std::exp(logits[k] - mx);
    s += a[k];
  }
  for (auto& v : a) v /= s;
  return a;
}

template <typename T>
class MilNet {
 public:
  using Store = nn::ArrayStore<T>;
  using Tensor = nn::Tensor<T>;

  explicit MilNet(const MilNetConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    build();
    initialize(seed);
  }

  const MilNetConfig& config() const { return cfg_; }
  Store& params() { return params_; }
  const Store& params() const { return params_; }
  Store& buffers() { return buffers_; }
  const Store& buffers() const { return buffers_; }

  // Conv layers He-uniform, linear layers Xavier-uniform, BN gamma 1 / beta 0,
  // running stats (0, 1); the decoder head and classifier bias start at zero.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (int i = 0; i < params_.size(); ++i) {
      auto& e = params_[i];
      const std::string& n = e.name;
      auto ends_with = [&](const char* s) {
        const std::string suf(s);
        return n.size() >= suf.size() &&
               n.compare(n.size() - suf.size(), suf.size(), suf) == 0;
      };
      if (ends_with(".gamma")) {
        std::fill(e.value.begin(), e.value.end(), T(1));
      } else if (ends_with(".beta") || ends_with(".bias")) {
        std::fill(e.value.begin(), e.value.end(), T(0));
      } else if (n == "dec.head.weight") {
        std::fill(e.value.begin(), e.value.end(), T(0));
      } else if (n.find(".conv") != std::string::npos ||
                 n.find(".down") != std::string::npos ||
                 n == "enc.stem.weight") {
        nn::he_uniform(e.value, e.shape[1], rng);
      } else if (e.shape.size() == 2) {
        nn::xavier_uniform(e.value, e.shape[1], e.shape[0], rng);
      } else {
        nn::xavier_uniform(e.value, static_cast<int>(e.value.size()), 1, rng);
      }
    }
    for (auto& b : buffers_) {
      const bool is_var = b.name.size() >= 4 &&
                          b.name.compare(b.name.size() - 4, 4, ".var") == 0;
      std::fill(b.value.begin(), b.value.end(), is_var ? T(1) : T(0));
    }
  }

  // ---- batched building blocks ---------------------------------------------

  EncodedBatch<T> encode_batch(const Tensor& x, net::ForwardContext<T> ctx,
                               net::EncoderTrace<T>* tr = nullptr) const {
    const int d = cfg_.patch_size;
    nn::require_shape(x, 3, d, d, "encode");
    EncodedBatch<T> out;
    Tensor cur = conv_bn(stem_, x, ctx, tr ? &tr->stem : nullptr);
    if (tr) tr->blocks.resize(stages_.size() * cfg_.blocks_per_stage);
    int bi = 0;
    for (size_t s = 0; s < stages_.size(); ++s) {
      for (const auto& blk : stages_[s]) {
        cur = block(blk, cur, ctx, tr ? &tr->blocks[bi] : nullptr);
        ++bi;
      }
      out.skips[s] = cur;
    }
    Tensor pooled = nn::global_avg_pool(cur);
    if (tr) {
      tr->pooled = pooled;
      tr->last_h = cur.h;
      tr->last_w = cur.w;
    }
    out.h = nn::linear_forward(params_.data(proj_.weight),
                               params_.data(proj_.bias), proj_.in, proj_.out,
                               pooled);
    return out;
  }

  // dh is (n, M, 1, 1); dskips entries may be empty (no decoder gradient).
  void encode_backward(const net::EncoderTrace<T>& tr, const Tensor& dh,
                       const std::array<Tensor, 4>& dskips,
                       Store& grads) const {
    Tensor dpooled = nn::linear_backward(
        params_.data(proj_.weight), proj_.in, proj_.out, tr.pooled, dh,
        grads.data(proj_.weight), grads.data(proj_.bias));
    Tensor dcur = nn::global_avg_pool_backward(dpooled, tr.last_h, tr.last_w);
    int bi = static_cast<int>(tr.blocks.size()) - 1;
    for (int s = static_cast<int>(stages_.size()) - 1; s >= 0; --s) {
      if (!dskips[s].data.empty()) nn::add_inplace(dcur, dskips[s]);
      for (int j = static_cast<int>(stages_[s].size()) - 1; j >= 0; --j, --bi)
        dcur = block_backward(stages_[s][j], tr.blocks[bi], dcur, grads);
    }
    conv_bn_backward(stem_, tr.stem, dcur, grads, false);
  }

  // Returns per-pixel probabilities (n, C, d, d); logits optional.
  Tensor decode_batch(const Tensor& h, const std::array<Tensor, 4>& skips,
                      net::ForwardContext<T> ctx,
                      net::DecoderTrace<T>* tr = nullptr) const {
    const int s16 = cfg_.patch_size / 16;
    const int w4 = cfg_.encoder_widths[3];
    for (int i = 0; i < 4; ++i) {
      const int side = cfg_.patch_size >> (i + 1);
      if (skips[i].n != h.n)
        throw ShapeError("decode: skip batch mismatch");
      nn::require_shape(skips[i], cfg_.encoder_widths[i], side, side, "decode skip");
    }
    Tensor b = nn::linear_forward(params_.data(bottleneck_.weight),
                                  params_.data(bottleneck_.bias),
                                  bottleneck_.in, bottleneck_.out, h);
    b.c = w4;
    b.h = s16;
    b.w = s16;
    nn::relu_inplace(b);
    if (tr) {
      tr->h = h;
      tr->bottleneck = b;
    }
    Tensor x = nn::concat_channels(b, skips[3]);
    x = dec_block(4, x, ctx, tr);
    for (int level = 3; level >= 1; --level) {
      x = nn::concat_channels(nn::upsample2x(x), skips[level - 1]);
      x = dec_block(level, x, ctx, tr);
    }
    x = nn::upsample2x(x);
    x = dec_block(0, x, ctx, tr);
    Tensor logits = nn::conv2d_forward(head_.geom, params_.data(head_.weight),
                                       params_.data(head_bias_), x);
    for (auto& v : logits.data) v = nn::sigmoid(v);
    if (tr) {
      tr->head_in = std::move(x);
      tr->probs = logits;
    }
    return logits;
  }

  // dlogits: gradient w.r.t. the pre-sigmoid head output.
  void decode_backward(const net::DecoderTrace<T>& tr, const Tensor& dlogits,
                       Store& grads, Tensor& dh,
                       std::array<Tensor, 4>& dskips) const {
    Tensor dx = nn::conv2d_backward(head_.geom, params_.data(head_.weight),
                                    tr.head_in, dlogits,
                                    grads.data(head_.weight),
                                    grads.data(head_bias_));
    dx = dec_block_backward(0, tr, dx, grads);
    dx = nn::upsample2x_backward(dx);
    for (int level = 1; level <= 3; ++level) {
      Tensor dcat = dec_block_backward(level, tr, dx, grads);
      Tensor dup;
      nn::split_channels(dcat, dcat.c - cfg_.encoder_widths[level - 1], dup,
                         dskips[level - 1]);
      dx = nn::upsample2x_backward(dup);
    }
    Tensor dcat = dec_block_backward(4, tr, dx, grads);
    Tensor db;
    nn::split_channels(dcat, cfg_.encoder_widths[3], db, dskips[3]);
    nn::relu_backward_inplace(tr.bottleneck, db);
    db.c = bottleneck_.out;
    db.h = 1;
    db.w = 1;
    dh = nn::linear_backward(params_.data(bottleneck_.weight), bottleneck_.in,
                             bottleneck_.out, tr.h, db,
                             grads.data(bottleneck_.weight),
                             grads.data(bottleneck_.bias));
  }

  // Attention pooling and classifier over rows [begin, begin + count) of h.
  BagHeadTrace<T> bag_head(const Tensor& h, int begin, int count) const {
    const int M = cfg_.embed_dim, L = cfg_.attention_dim;
    if (count < 1) throw InvalidArgument("attention needs at least one instance");
    const T* V = params_.data(att_V_);
    const T* w = params_.data(att_w_);
    BagHeadTrace<T> t;
    t.begin = begin;
    t.count = count;
    t.u.assign(static_cast<size_t>(count) * L, T(0));
    std::vector<T> scores(count);
    for (int k = 0; k < count; ++k) {
      const T* hk = h.sample(begin + k);
      for (int m = 0; m < M; ++m)
        if (!std::isfinite(static_cast<double>(hk[m])))
          throw NonFiniteError("attention: non-finite instance embedding");
      T s = 0;
      for (int l = 0; l < L; ++l) {
        T a = 0;
        for (int m = 0; m < M; ++m) a += V[l * M + m] * hk[m];
        const T u = std::tanh(a);
        t.u[static_cast<size_t>(k) * L + l] = u;
        s += w[l] * u;
      }
      scores[k] = s;
    }
    t.alphas = softmax(scores);
    t.z.assign(M, T(0));
    for (int k = 0; k < count; ++k) {
      const T* hk = h.sample(begin + k);
      for (int m = 0; m < M; ++m) t.z[m] += t.alphas[k] * hk[m];
    }
    t.logit = classifier_logit(t.z);
    t.prob = nn::sigmoid(t.logit);
    return t;
  }

  // Accumulates parameter gradients and adds dL/dh_k into dh rows.
  void bag_head_backward(const BagHeadTrace<T>& t, const Tensor& h, T dlogit,
                         Store& grads, Tensor& dh) const {
    const int M = cfg_.embed_dim, L = cfg_.attention_dim;
    const T* V = params_.data(att_V_);
    const T* w = params_.data(att_w_);
    const T* c = params_.data(clf_.weight);
    T* gV = grads.data(att_V_);
    T* gw = grads.data(att_w_);
    T* gc = grads.data(clf_.weight);
    grads.data(clf_.bias)[0] += dlogit;
    std::vector<T> dz(M);
    for (int m = 0; m < M; ++m) {
      gc[m] += dlogit * t.z[m];
      dz[m] = dlogit * c[m];
    }
    std::vector<T> dalpha(t.count);
    T weighted = 0;
    for (int k = 0; k < t.count; ++k) {
      const T* hk = h.sample(t.begin + k);
      T s = 0;
      for (int m = 0; m < M; ++m) s += dz[m] * hk[m];
      dalpha[k] = s;
      weighted += t.alphas[k] * s;
    }
    std::vector<T> dpre(L);
    for (int k = 0; k < t.count; ++k) {
      const T* hk = h.sample(t.begin + k);
      T* dhk = dh.sample(t.begin + k);
      const T ds = t.alphas[k] * (dalpha[k] - weighted);
      for (int m = 0; m < M; ++m) dhk[m] += t.alphas[k] * dz[m];
      for (int l = 0; l < L; ++l) {
        const T u = t.u[static_cast<size_t>(k) * L + l];
        gw[l] += ds * u;
        dpre[l] = ds * w[l] * (T(1) - u * u);
      }
      for (int l = 0; l < L; ++l) {
        if (dpre[l] == T(0)) continue;
        for (int m = 0; m < M; ++m) {
          gV[l * M + m] += dpre[l] * hk[m];
          dhk[m] += V[l * M + m] * dpre[l];
        }
      }
    }
  }

  T classifier_logit(const std::vector<T>& z) const {
    const T* c = params_.data(clf_.weight);
    T s = params_.data(clf_.bias)[0];
    for (int m = 0; m < cfg_.embed_dim; ++m) s += c[m] * z[m];
    return s;
  }

  // ---- single-patch / single-bag inference API ------------------------------

  PatchEncoding<T> encode_patch(const ImageF& pixels) const {
    const int d = cfg_.patch_size;
    if (pixels.height != d || pixels.width != d || pixels.channels != 3)
      throw ShapeError("encode_patch: patch must be d x d x 3");
    Tensor x(1, 3, d, d);
    write_patch_tensor(pixels, x, 0);
    EncodedBatch<T> e = encode_batch(x, {});
    PatchEncoding<T> out;
    out.h = e.h.data;
    out.skips = std::move(e.skips);
    return out;
  }

  AttentionResult<T> attend(const std::vector<std::vector<T>>& H) const {
    if (H.empty()) throw InvalidArgument("attend: empty bag");
    Tensor h(static_cast<int>(H.size()), cfg_.embed_dim, 1, 1);
    for (size_t k = 0; k < H.size(); ++k) {
      if (static_cast<int>(H[k].size()) != cfg_.embed_dim)
        throw ShapeError("attend: embedding length mismatch");
      std::copy(H[k].begin(), H[k].end(), h.sample(static_cast<int>(k)));
    }
    auto t = bag_head(h, 0, h.n);
    return {std::move(t.alphas), std::move(t.z)};
  }

  T classify(const std::vector<T>& z) const {
    if (static_cast<int>(z.size()) != cfg_.embed_dim)
      throw ShapeError("classify: z length mismatch");
    for (T v : z)
      if (!std::isfinite(static_cast<double>(v)))
        throw NonFiniteError("classify: non-finite z");
    return nn::sigmoid(classifier_logit(z));
  }

  // (1, C, d, d) lesion probabilities for one encoded patch.
  Tensor decode_patch(const PatchEncoding<T>& enc) const {
    if (static_cast<int>(enc.h.size()) != cfg_.embed_dim)
      throw ShapeError("decode_patch: h length mismatch");
    Tensor h(1, cfg_.embed_dim, 1, 1);
    h.data = enc.h;
    return decode_batch(h, enc.skips, {});
  }

  // Inference over a whole bag; patches are processed in chunks so memory
  // stays bounded for dense test-time grids.
  BagForwardResult<T> forward_bag(const PatchBag& bag, bool decode = true,
                                  int chunk = 64) const {
    if (bag.patches.empty()) throw EmptyBag("forward_bag: empty bag");
    const int K = bag.size(), d = cfg_.patch_size;
    Tensor h(K, cfg_.embed_dim, 1, 1);
    BagForwardResult<T> r;
    if (decode) r.lesion_maps = Tensor(K, cfg_.lesion_channels, d, d);
    for (int b = 0; b < K; b += chunk) {
      const int e = std::min(K, b + chunk);
      Tensor x = bag_to_tensor<T>(bag, b, e);
      nn::require_shape(x, 3, d, d, "forward_bag");
      EncodedBatch<T> enc = encode_batch(x, {});
      std::copy(enc.h.data.begin(), enc.h.data.end(), h.sample(b));
      if (decode) {
        Tensor maps = decode_batch(enc.h, enc.skips, {});
        std::copy(maps.data.begin(), maps.data.end(), r.lesion_maps.sample(b));
      }
    }
    auto t = bag_head(h, 0, K);
    r.alphas = std::move(t.alphas);
    r.z = std::move(t.z);
    r.rdr_prob = t.prob;
    r.origins = bag.origins();
    return r;
  }

 private:
  void build() {
    const auto& w = cfg_.encoder_widths;
    stem_ = conv_bn_layer("enc.stem", 3, w[0], cfg_.stem_kernel, 2, true);
    int cin = w[0];
    for (int s = 0; s < 4; ++s) {
      std::vector<net::BasicBlock> blocks;
      for (int j = 0; j < cfg_.blocks_per_stage; ++j) {
        const int stride = (s > 0 && j == 0) ? 2 : 1;
        const std::string p =
            "enc.s" + std::to_string(s + 1) + ".b" + std::to_string(j);
        net::BasicBlock blk;
        blk.a = conv_bn_layer(p + ".conv1", cin, w[s], 3, stride, true);
        blk.b = conv_bn_layer(p + ".conv2", w[s], w[s], 3, 1, false);
        if (stride != 1 || cin != w[s]) {
          blk.has_down = true;
          blk.down = conv_bn_layer(p + ".down", cin, w[s], 1, stride, false);
        }
        blocks.push_back(blk);
        cin = w[s];
      }
      stages_[s] = std::move(blocks);
    }
    proj_ = linear_layer("enc.proj", w[3], cfg_.embed_dim);
    att_V_ = params_.add("att.V", {cfg_.attention_dim, cfg_.embed_dim});
    att_w_ = params_.add("att.w", {cfg_.attention_dim});
    clf_ = linear_layer("clf", cfg_.embed_dim, 1);

    const int s16 = cfg_.patch_size / 16;
    bottleneck_ = linear_layer("dec.bottleneck", cfg_.embed_dim,
                               w[3] * s16 * s16);
    // Output widths per decoder level (level 0 is full resolution).
    const std::array<int, 5> out{w[0], w[0], w[0], w[1], w[2]};
    // Level l in 1..3 concatenates the upsampled level l+1 output with the
    // stage-l skip; level 4 concatenates the bottleneck with skip 4.
    const std::array<int, 5> in{out[1], out[2] + w[0], out[3] + w[1],
                                out[4] + w[2], 2 * w[3]};
    for (int l = 0; l < 5; ++l) {
      const std::string p = "dec.l" + std::to_string(l);
      dec_[l].a = conv_bn_layer(p + ".conv1", in[l], out[l], 3, 1, true);
      dec_[l].b = conv_bn_layer(p + ".conv2", out[l], out[l], 3, 1, true);
    }
    head_.geom = {out[0], cfg_.lesion_channels, 1, 1, 0};
    head_.weight = params_.add("dec.head.weight",
                               {cfg_.lesion_channels, out[0]});
    head_bias_ = params_.add("dec.head.bias", {cfg_.lesion_channels});
  }

  net::ConvBnLayer conv_bn_layer(const std::string& name, int cin, int cout,
                                 int k, int stride, bool relu) {
    net::ConvBnLayer l;
    l.geom = {cin, cout, k, stride, k / 2};
    l.weight = params_.add(name + ".weight", {cout, cin * k * k});
    l.gamma = params_.add(name + ".bn.gamma", {cout});
    l.beta = params_.add(name + ".bn.beta", {cout});
    l.run_mean = buffers_.add(name + ".bn.mean", {cout});
    l.run_var = buffers_.add(name + ".bn.var", {cout}, T(1));
    l.relu = relu;
    return l;
  }

  net::LinearLayer linear_layer(const std::string& name, int in, int out) {
    net::LinearLayer l;
    l.in = in;
    l.out = out;
    l.weight = params_.add(name + ".weight", {out, in});
    l.bias = params_.add(name + ".bias", {out});
    return l;
  }

  Tensor conv_bn(const net::ConvBnLayer& l, const Tensor& x,
                 net::ForwardContext<T> ctx, net::ConvBnTrace<T>* tr) const {
    Tensor y = nn::conv2d_forward<T>(l.geom, params_.data(l.weight), nullptr, x);
    const T eps = static_cast<T>(cfg_.bn_eps);
    if (ctx.train) {
      nn::BatchNormCache<T> cache;
      y = nn::batchnorm_forward_train(y, params_.data(l.gamma),
                                      params_.data(l.beta), eps, &cache);
      if (ctx.stats)
        ctx.stats->push_back({l.run_mean, l.run_var, cache.mean, cache.var,
                              static_cast<double>(y.n) * y.plane()});
      if (tr) tr->bn = std::move(cache);
    } else {
      y = nn::batchnorm_forward_infer(y, params_.data(l.gamma),
                                      params_.data(l.beta),
                                      buffers_.data(l.run_mean),
                                      buffers_.data(l.run_var), eps);
    }
    if (l.relu) nn::relu_inplace(y);
    if (tr) {
      tr->x = x;
      if (l.relu) tr->y = y;
    }
    return y;
  }

  Tensor conv_bn_backward(const net::ConvBnLayer& l,
                          const net::ConvBnTrace<T>& tr, Tensor dy,
                          Store& grads, bool need_dx = true) const {
    if (l.relu) nn::relu_backward_inplace(tr.y, dy);
    Tensor dpre = nn::batchnorm_backward(tr.bn, params_.data(l.gamma), dy,
                                         grads.data(l.gamma),
                                         grads.data(l.beta));
    return nn::conv2d_backward<T>(l.geom, params_.data(l.weight), tr.x, dpre,
                                  grads.data(l.weight), nullptr, need_dx);
  }

  Tensor block(const net::BasicBlock& b, const Tensor& x,
               net::ForwardContext<T> ctx, net::BlockTrace<T>* tr) const {
    Tensor y = conv_bn(b.a, x, ctx, tr ? &tr->a : nullptr);
    y = conv_bn(b.b, y, ctx, tr ? &tr->b : nullptr);
    if (b.has_down) {
      nn::add_inplace(y, conv_bn(b.down, x, ctx, tr ? &tr->down : nullptr));
    } else {
      nn::add_inplace(y, x);
    }
    nn::relu_inplace(y);
    if (tr) tr->out = y;
    return y;
  }

  Tensor block_backward(const net::BasicBlock& b, const net::BlockTrace<T>& tr,
                        Tensor dy, Store& grads) const {
    nn::relu_backward_inplace(tr.out, dy);
    Tensor dmid = conv_bn_backward(b.b, tr.b, dy, grads);
    Tensor dx = conv_bn_backward(b.a, tr.a, std::move(dmid), grads);
    if (b.has_down) {
      nn::add_inplace(dx, conv_bn_backward(b.down, tr.down, dy, grads));
    } else {
      nn::add_inplace(dx, dy);
    }
    return dx;
  }

  Tensor dec_block(int level, const Tensor& x, net::ForwardContext<T> ctx,
                   net::DecoderTrace<T>* tr) const {
    Tensor y = conv_bn(dec_[level].a, x, ctx, tr ? &tr->a[level] : nullptr);
    return conv_bn(dec_[level].b, y, ctx, tr ? &tr->b[level] : nullptr);
  }

  Tensor dec_block_backward(int level, const net::DecoderTrace<T>& tr,
                            Tensor dy, Store& grads) const {
    Tensor d = conv_bn_backward(dec_[level].b, tr.b[level], std::move(dy), grads);
    return conv_bn_backward(dec_[level].a, tr.a[level], std::move(d), grads);
  }

  MilNetConfig cfg_;
  Store params_;
  Store buffers_;
  net::ConvBnLayer stem_;
  std::array<std::vector<net::BasicBlock>, 4> stages_;
  net::LinearLayer proj_;
  int att_V_ = -1, att_w_ = -1;
  net::LinearLayer clf_;
  net::LinearLayer bottleneck_;
  std::array<net::DecoderBlock, 5> dec_;
  struct {
    nn::ConvGeom geom;
    int weight = -1;
  } head_;
  int head_bias_ = -1;
};

// Copies parameters and buffers between networks of identical configuration
// but possibly different scalar types.
template <typename To, typename From>
MilNet<To> cast_net(const MilNet<From>& src) {
  MilNet<To> out(src.config());
  for (int i = 0; i < src.params().size(); ++i)
    for (size_t j = 0; j < src.params()[i].value.size(); ++j)
      out.params()[i].value[j] = static_cast<To>(src.params()[i].value[j]);
  for (int i = 0; i < src.buffers().size(); ++i)
    for (size_t j = 0; j < src.buffers()[i].value.size(); ++j)
      out.buffers()[i].value[j] = static_cast<To>(src.buffers()[i].value[j]);
  return out;
}

}  // namespace mtmil
