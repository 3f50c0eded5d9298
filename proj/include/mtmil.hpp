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

// Umbrella header for the mtmil library.

#include "mtmil/adam.hpp"
#include "mtmil/augment.hpp"
#include "mtmil/checkpoint.hpp"
#include "mtmil/config.hpp"
#include "mtmil/datasets.hpp"
#include "mtmil/errors.hpp"
#include "mtmil/evaluate.hpp"
#include "mtmil/example.hpp"
#include "mtmil/heatmap.hpp"
#include "mtmil/image.hpp"
#include "mtmil/losses.hpp"
#include "mtmil/metrics.hpp"
#include "mtmil/mil_net.hpp"
#include "mtmil/patch_bag.hpp"
#include "mtmil/png_io.hpp"
#include "mtmil/preproc.hpp"
#include "mtmil/synth.hpp"
#include "mtmil/train.hpp"
