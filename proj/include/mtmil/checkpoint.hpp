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

// Versioned binary checkpoint.
//
//   magic    8 bytes  "MTMILCK\0"
//   version  u32
//   length   u64      payload byte count
//   payload
//   checksum u64      FNV-1a over the payload
//
// Payload (little-endian): model config text, training metadata, then named
// f32 arrays (kind 0 = parameter, 1 = buffer) with their shapes.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mtmil/config.hpp"
#include "mtmil/errors.hpp"
#include "mtmil/mil_net.hpp"

namespace mtmil {

inline constexpr std::array<char, 8> kCheckpointMagic = {'M', 'T', 'M', 'I',
                                                         'L', 'C', 'K', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  int epoch = 0;
  std::int64_t step = 0;
  std::optional<double> val_auc;
};

struct Checkpoint {
  MilNet<float> net;
  PatchSpec patches;
  int frame = 512;
  CheckpointMeta meta;
};

namespace ckpt_detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
      std::reverse(b, b + sizeof(T));
    out_.append(reinterpret_cast<const char*>(b), sizeof(T));
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  const std::string& bytes() const { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, b_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
      std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("truncated checkpoint payload");
  }
  const std::string& b_;
  size_t pos_ = 0;
};

inline void write_store(Writer& w, const nn::ArrayStore<float>& s, std::uint8_t kind) {
  for (const auto& e : s) {
    w.put<std::uint8_t>(kind);
    w.str(e.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) w.put<std::int32_t>(d);
    for (float v : e.value) w.put<float>(v);
  }
}

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const MilNet<float>& net, const PatchSpec& patches,
                                        int frame, const CheckpointMeta& meta) {
  using namespace ckpt_detail;
  Writer p;
  p.str(model_config_text(net.config(), patches, frame));
  p.put<std::int32_t>(meta.epoch);
  p.put<std::int64_t>(meta.step);
  p.put<std::uint8_t>(meta.val_auc ? 1 : 0);
  p.put<double>(meta.val_auc.value_or(0.0));
  p.put<std::uint32_t>(
      static_cast<std::uint32_t>(net.params().size() + net.buffers().size()));
  write_store(p, net.params(), 0);
  write_store(p, net.buffers(), 1);

  Writer out;
  std::string bytes(kCheckpointMagic.begin(), kCheckpointMagic.end());
  out.put<std::uint32_t>(kCheckpointVersion);
  out.put<std::uint64_t>(p.bytes().size());
  bytes += out.bytes();
  bytes += p.bytes();
  Writer tail;
  tail.put<std::uint64_t>(fnv1a(p.bytes()));
  bytes += tail.bytes();
  return bytes;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  using namespace ckpt_detail;
  const size_t head = kCheckpointMagic.size() + 4 + 8;
  if (bytes.size() < head + 8 ||
      !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw CheckpointError("not a checkpoint file");
  Reader h(bytes.substr(kCheckpointMagic.size(), 12));
  const auto version = h.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto len = h.get<std::uint64_t>();
  if (len != bytes.size() - head - 8) throw CheckpointError("checkpoint length mismatch");
  const std::string payload = bytes.substr(head, len);
  Reader t(bytes.substr(head + len));
  if (t.get<std::uint64_t>() != fnv1a(payload))
    throw CheckpointError("checkpoint checksum mismatch");

  Reader r(payload);
  TrainConfig tc;
  std::istringstream cfg_text(r.str());
  try {
    apply_config(parse_key_values(cfg_text), tc);
    tc.net.validate();
    tc.patches.validate(tc.frame);
  } catch (const Error& e) {
    throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
  }
  Checkpoint ck{MilNet<float>(tc.net), tc.patches, tc.frame, {}};
  ck.meta.epoch = r.get<std::int32_t>();
  ck.meta.step = r.get<std::int64_t>();
  const bool has_auc = r.get<std::uint8_t>() != 0;
  const double auc = r.get<double>();
  if (has_auc) ck.meta.val_auc = auc;
  const auto n = r.get<std::uint32_t>();
  if (n != static_cast<std::uint32_t>(ck.net.params().size() + ck.net.buffers().size()))
    throw CheckpointError("checkpoint array count does not match the model");
  std::vector<bool> filled(n, false);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto kind = r.get<std::uint8_t>();
    if (kind > 1) throw CheckpointError("bad array kind");
    auto& store = kind == 0 ? ck.net.params() : ck.net.buffers();
    const std::string name = r.str();
    const int id = store.find(name);
    if (id < 0) throw CheckpointError("unknown array " + name);
    const size_t slot = kind == 0 ? id : ck.net.params().size() + id;
    if (filled[slot]) throw CheckpointError("duplicate array " + name);
    filled[slot] = true;
    const auto nd = r.get<std::uint32_t>();
    std::vector<int> shape(nd);
    for (auto& d : shape) d = r.get<std::int32_t>();
    if (shape != store[id].shape) throw CheckpointError("shape mismatch for " + name);
    for (auto& v : store[id].value) v = r.get<float>();
  }
  if (!r.done()) throw CheckpointError("trailing bytes in checkpoint payload");
  if (!ck.net.params().all_finite() || !ck.net.buffers().all_finite())
    throw CheckpointError("non-finite values in checkpoint");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const MilNet<float>& net,
                            const PatchSpec& patches, int frame,
                            const CheckpointMeta& meta) {
  const std::string bytes = serialize_checkpoint(net, patches, frame, meta);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace mtmil
