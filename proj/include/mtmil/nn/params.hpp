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

#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtmil/errors.hpp"

namespace mtmil::nn {

// Named arrays. Learnable parameters and non-learnable buffers (batch-norm
// running statistics) live in separate stores with the same layout.
template <typename T>
class ArrayStore {
 public:
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::vector<T> value;
  };

  int add(std::string name, std::vector<int> shape, T fill = T(0)) {
    if (index_.count(name)) throw InvalidArgument("duplicate array " + name);
    const size_t n = std::accumulate(shape.begin(), shape.end(), size_t{1},
                                     [](size_t a, int b) { return a * b; });
    const int id = static_cast<int>(entries_.size());
    index_.emplace(name, id);
    entries_.push_back({std::move(name), std::move(shape),
                        std::vector<T>(n, fill)});
    return id;
  }

  int size() const { return static_cast<int>(entries_.size()); }
  Entry& operator[](int i) { return entries_[i]; }
  const Entry& operator[](int i) const { return entries_[i]; }
  T* data(int i) { return entries_[i].value.data(); }
  const T* data(int i) const { return entries_[i].value.data(); }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  // Zero-valued store with an identical layout (used for gradients).
  ArrayStore zeros_like() const {
    ArrayStore out;
    for (const auto& e : entries_) out.add(e.name, e.shape);
    return out;
  }

  void fill(T v) {
    for (auto& e : entries_) std::fill(e.value.begin(), e.value.end(), v);
  }

  template <typename U>
  ArrayStore<U> cast() const {
    ArrayStore<U> out;
    for (const auto& e : entries_) {
      const int id = out.add(e.name, e.shape);
      for (size_t j = 0; j < e.value.size(); ++j)
        out[id].value[j] = static_cast<U>(e.value[j]);
    }
    return out;
  }

  bool all_finite() const {
    for (const auto& e : entries_)
      for (T v : e.value)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

template <typename T>
void he_uniform(std::vector<T>& v, int fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& x : v) x = static_cast<T>(u(rng));
}

template <typename T>
void xavier_uniform(std::vector<T>& v, int fan_in, int fan_out,
                    std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& x : v) x = static_cast<T>(u(rng));
}

}  // namespace mtmil::nn
