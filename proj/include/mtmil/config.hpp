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

// Flat `key = value` configuration text. Lines starting with '#' and blank
// lines are ignored. Keys mirror TrainConfig; nested settings use a dotted
// prefix (net., patch., augment.).

#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mtmil/errors.hpp"
#include "mtmil/train.hpp"

namespace mtmil {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !is.eof())
    throw InvalidArgument("bad value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidArgument("bad boolean for " + key + ": '" + v + "'");
}

inline std::array<int, 4> parse_widths(const std::string& key, const std::string& v) {
  std::array<int, 4> w{};
  std::istringstream is(v);
  std::string item;
  int n = 0;
  while (std::getline(is, item, ',')) {
    if (n == 4) throw InvalidArgument(key + " needs exactly 4 widths");
    w[n++] = parse_number<int>(key, trim(item));
  }
  if (n != 4) throw InvalidArgument(key + " needs exactly 4 widths");
  return w;
}

}  // namespace config_detail

inline KeyValues parse_key_values(std::istream& is) {
  KeyValues kv;
  std::map<std::string, int> seen;
  std::string line;
  int no = 0;
  while (std::getline(is, line)) {
    ++no;
    const std::string t = config_detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", no);
    std::string key = config_detail::trim(t.substr(0, eq));
    std::string val = config_detail::trim(t.substr(eq + 1));
    if (key.empty()) throw ParseError("empty key", no);
    if (seen.count(key)) throw ParseError("duplicate key " + key, no);
    seen[key] = no;
    kv.emplace_back(std::move(key), std::move(val));
  }
  return kv;
}

inline KeyValues load_key_values(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot read config " + p.string());
  return parse_key_values(is);
}

// Applies settings in order; unknown keys are an error.
inline void apply_config(const KeyValues& kv, TrainConfig& cfg) {
  using namespace config_detail;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto num = [](auto& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) {
      field = parse_number<std::remove_reference_t<decltype(field)>>(k, v);
    };
  };
  auto flag = [](bool& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) {
      field = parse_bool(k, v);
    };
  };
  AugmentRanges& a = cfg.augmentation;
  const std::map<std::string, Setter> setters = {
      {"learning_rate", num(cfg.learning_rate)},
      {"adam_beta1", num(cfg.adam_beta1)},
      {"adam_beta2", num(cfg.adam_beta2)},
      {"adam_eps", num(cfg.adam_eps)},
      {"epochs", num(cfg.epochs)},
      {"clf_batch", num(cfg.clf_batch)},
      {"seg_batch", num(cfg.seg_batch)},
      {"seed", num(cfg.seed)},
      {"mode", [&](const std::string&, const std::string& v) { cfg.mode = parse_mode(v); }},
      {"validation_size", num(cfg.validation_size)},
      {"validate_every", num(cfg.validate_every)},
      {"max_steps", num(cfg.max_steps)},
      {"selection",
       [&](const std::string& k, const std::string& v) {
         if (v == "best_val_auc") {
           cfg.selection = Selection::kBestValAuc;
         } else if (v == "last") {
           cfg.selection = Selection::kLast;
         } else {
           throw InvalidArgument("bad value for " + k + ": " + v);
         }
       }},
      {"frame", num(cfg.frame)},
      {"augment",
       [&](const std::string& k, const std::string& v) {
         if (!parse_bool(k, v)) a = AugmentRanges::identity();
       }},
      {"augment.shift", num(a.max_shift_fraction)},
      {"augment.scale_min", num(a.scale_min)},
      {"augment.scale_max", num(a.scale_max)},
      {"augment.rotation", num(a.max_rotation_deg)},
      {"augment.hflip", flag(a.hflip)},
      {"augment.vflip", flag(a.vflip)},
      {"augment.brightness", num(a.brightness)},
      {"augment.contrast", num(a.contrast)},
      {"augment.saturation", num(a.saturation)},
      {"augment.hue", num(a.hue)},
      {"patch.size",
       [&](const std::string& k, const std::string& v) {
         cfg.patches.patch_size = parse_number<int>(k, v);
         cfg.net.patch_size = cfg.patches.patch_size;
       }},
      {"patch.overlap", num(cfg.patches.overlap)},
      {"patch.k_train", num(cfg.patches.k_train)},
      {"patch.content_threshold", num(cfg.patches.content_threshold)},
      {"patch.pool_stride", num(cfg.patches.pool_stride)},
      {"net.embed_dim", num(cfg.net.embed_dim)},
      {"net.attention_dim", num(cfg.net.attention_dim)},
      {"net.lesion_channels", num(cfg.net.lesion_channels)},
      {"net.encoder_widths",
       [&](const std::string& k, const std::string& v) {
         cfg.net.encoder_widths = parse_widths(k, v);
       }},
      {"net.blocks_per_stage", num(cfg.net.blocks_per_stage)},
      {"net.stem_kernel", num(cfg.net.stem_kernel)},
      {"net.bn_momentum", num(cfg.net.bn_momentum)},
      {"net.bn_eps", num(cfg.net.bn_eps)},
  };
  for (const auto& [k, v] : kv) {
    auto it = setters.find(k);
    if (it == setters.end()) throw InvalidArgument("unknown config key: " + k);
    it->second(k, v);
  }
}

// Model-defining settings, as stored in checkpoints.
inline std::string model_config_text(const MilNetConfig& n, const PatchSpec& p,
                                     int frame) {
  std::ostringstream os;
  os.precision(17);
  os << "frame = " << frame << '\n'
     << "patch.size = " << p.patch_size << '\n'
     << "patch.overlap = " << p.overlap << '\n'
     << "patch.k_train = " << p.k_train << '\n'
     << "patch.content_threshold = " << p.content_threshold << '\n'
     << "patch.pool_stride = " << p.pool_stride << '\n'
     << "net.embed_dim = " << n.embed_dim << '\n'
     << "net.attention_dim = " << n.attention_dim << '\n'
     << "net.lesion_channels = " << n.lesion_channels << '\n'
     << "net.encoder_widths = " << n.encoder_widths[0] << ',' << n.encoder_widths[1]
     << ',' << n.encoder_widths[2] << ',' << n.encoder_widths[3] << '\n'
     << "net.blocks_per_stage = " << n.blocks_per_stage << '\n'
     << "net.stem_kernel = " << n.stem_kernel << '\n'
     << "net.bn_momentum = " << n.bn_momentum << '\n'
     << "net.bn_eps = " << n.bn_eps << '\n';
  return os.str();
}

}  // namespace mtmil
