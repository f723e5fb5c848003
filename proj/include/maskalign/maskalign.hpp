// Copyright 2026 The MaskAlign Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "maskalign/alignment.hpp"
#include "maskalign/attention_map.hpp"
#include "maskalign/checkpoint.hpp"
#include "maskalign/config.hpp"
#include "maskalign/cost.hpp"
#include "maskalign/data.hpp"
#include "maskalign/error.hpp"
#include "maskalign/masking.hpp"
#include "maskalign/model_io.hpp"
#include "maskalign/nn.hpp"
#include "maskalign/ops.hpp"
#include "maskalign/optim.hpp"
#include "maskalign/tensor.hpp"
#include "maskalign/train.hpp"
#include "maskalign/vit.hpp"
