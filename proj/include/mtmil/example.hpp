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

#include <string>

#include "mtmil/image.hpp"
#include "mtmil/preproc.hpp"

namespace mtmil {

enum LesionChannel : int { kMA = 0, kHE = 1, kEX = 2 };
inline constexpr int kLesionChannels = 3;
inline constexpr const char* kLesionNames[kLesionChannels] = {"MA", "HE", "EX"};

// A preprocessed image with its rDR label and, optionally, frame-aligned
// lesion masks (channels MA, HE, EX).
struct LabeledExample {
  PreprocessedImage image;
  int y_rdr = 0;
  Mask lesion_masks;  // frame x frame x 3 when has_masks
  bool has_masks = false;

  void validate() const {
    if (has_masks != !lesion_masks.empty())
      throw InvalidArgument("lesion masks present iff has_masks");
    if (y_rdr != 0 && y_rdr != 1) throw InvalidArgument("y_rdr must be 0 or 1");
    if (has_masks) {
      const Mask& rm = image.retina_mask;
      if (lesion_masks.height != rm.height || lesion_masks.width != rm.width ||
          lesion_masks.channels != kLesionChannels)
        throw ShapeError("lesion masks must match the frame with 3 channels");
      for (int r = 0; r < rm.height; ++r)
        for (int c = 0; c < rm.width; ++c)
          if (!rm.at(r, c))
            for (int ch = 0; ch < kLesionChannels; ++ch)
              if (lesion_masks.at(r, c, ch))
                throw InvalidArgument("lesion pixel outside the retina mask");
    }
  }
};

}  // namespace mtmil
