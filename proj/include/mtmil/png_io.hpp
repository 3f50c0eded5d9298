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

#include <png.h>

#include <cstring>
#include <filesystem>
#include <string>

#include "mtmil/errors.hpp"
#include "mtmil/image.hpp"

namespace mtmil::io {

// Reads an 8-bit PNG as RGB (channels = 3) or grayscale (channels = 1).
inline ImageU8 read_png(const std::filesystem::path& path, int channels = 3) {
  if (channels != 1 && channels != 3)
    throw InvalidArgument("read_png: channels must be 1 or 3");
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw IoError("cannot read PNG '" + path.string() + "': " + img.message);
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  ImageU8 out(static_cast<int>(img.height), static_cast<int>(img.width),
              channels);
  if (!png_image_finish_read(&img, nullptr, out.data.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG '" + path.string() + "': " + img.message);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const ImageU8& im) {
  if (im.channels != 1 && im.channels != 3)
    throw InvalidArgument("write_png: channels must be 1 or 3");
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, im.data.data(),
                               0, nullptr))
    throw IoError("cannot write PNG '" + path.string() + "': " + img.message);
}

// Binary masks are stored as 0/255 grayscale.
inline void write_mask_png(const std::filesystem::path& path, const Mask& m) {
  ImageU8 g(m.height, m.width, 1);
  for (size_t i = 0; i < m.data.size(); ++i) g.data[i] = m.data[i] ? 255 : 0;
  write_png(path, g);
}

inline Mask read_mask_png(const std::filesystem::path& path) {
  ImageU8 g = read_png(path, 1);
  for (auto& v : g.data) v = v >= 128 ? 1 : 0;
  return g;
}

}  // namespace mtmil::io
