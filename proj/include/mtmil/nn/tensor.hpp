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

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "mtmil/errors.hpp"

namespace mtmil::nn {

// Dense NCHW tensor. Vectors are stored as (n, c, 1, 1).
template <typename T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T{})
      : n(n_), c(c_), h(h_), w(w_),
        data(static_cast<size_t>(n_) * c_ * h_ * w_, fill) {}

  size_t size() const { return data.size(); }
  size_t sample_size() const { return static_cast<size_t>(c) * h * w; }
  size_t plane() const { return static_cast<size_t>(h) * w; }

  T* sample(int i) { return data.data() + i * sample_size(); }
  const T* sample(int i) const { return data.data() + i * sample_size(); }

  T& at(int i, int ch, int y, int x) {
    return data[((static_cast<size_t>(i) * c + ch) * h + y) * w + x];
  }
  const T& at(int i, int ch, int y, int x) const {
    return data[((static_cast<size_t>(i) * c + ch) * h + y) * w + x];
  }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator==(const Tensor& o) const = default;
};

// Rows [begin, end) along the batch axis.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& t, int begin, int end) {
  Tensor<T> out(end - begin, t.c, t.h, t.w);
  std::copy(t.data.begin() + begin * t.sample_size(),
            t.data.begin() + end * t.sample_size(), out.data.begin());
  return out;
}

template <typename T>
void require_shape(const Tensor<T>& t, int c, int h, int w, const char* what) {
  if (t.c != c || t.h != h || t.w != w)
    throw ShapeError(std::string(what) + ": unexpected tensor shape");
}

}  // namespace mtmil::nn
