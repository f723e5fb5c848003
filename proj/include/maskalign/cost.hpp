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

// Analytic cost model for three pretraining paradigms, plus a wall-clock
// measurement of the student forward at full and visible token counts.
//
// Per transformer block over n tokens of width D with MLP ratio m, counted
// in multiply-accumulates:
//   linear    = (4 + 2m) n D^2    (qkv 3nD^2, proj nD^2, MLP 2m nD^2)
//   attention = 2 n^2 D           (QK^T and AV)
// Token counts include the [CLS] token; the forward ratio counts patch
// tokens only.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "maskalign/error.hpp"
#include "maskalign/masking.hpp"
#include "maskalign/vit.hpp"

namespace maskalign {

enum class Paradigm { kInpainting, kDecoder, kAlignment };

inline Paradigm parse_paradigm(const std::string& s) {
  if (s == "inpainting") return Paradigm::kInpainting;
  if (s == "decoder") return Paradigm::kDecoder;
  if (s == "alignment") return Paradigm::kAlignment;
  throw UsageError("unknown paradigm '" + s + "' (expected inpainting, decoder or alignment)");
}

inline const char* paradigm_name(Paradigm p) {
  switch (p) {
    case Paradigm::kInpainting: return "inpainting";
    case Paradigm::kDecoder: return "decoder";
    case Paradigm::kAlignment: return "alignment";
  }
  return "?";
}

struct CostDims {
  ViTConfig encoder;
  std::size_t decoder_dim = 512;
  std::size_t decoder_depth = 8;
  /// Adaptor projections applied per step by the alignment paradigm.
  std::size_t adaptors = 6;
  std::size_t teacher_dim = 96;
};

struct CostReport {
  Paradigm paradigm = Paradigm::kAlignment;
  double mask_ratio = 0.0;
  std::size_t num_patches = 0;
  std::size_t patch_tokens = 0;    // patch tokens entering the encoder
  std::size_t encoder_tokens = 0;  // including [CLS]
  std::size_t decoder_tokens = 0;
  double forward_ratio = 1.0;
  double attention_flops = 0.0;
  double linear_flops = 0.0;
  double extra_flops = 0.0;  // decoder or adaptor projections
  double total_flops = 0.0;
  double full_attention_flops = 0.0;
  double full_total_flops = 0.0;
  double attention_ratio = 1.0;
  double total_ratio = 1.0;
  // Wall-clock of the student forward; zero when not measured.
  double seconds_full = 0.0;
  double seconds_visible = 0.0;
  double empirical_ratio = 0.0;
};

inline double block_linear_macs(double n, double d, double mlp_ratio) { return (4.0 + 2.0 * mlp_ratio) * n * d * d; }
inline double block_attention_macs(double n, double d) { return 2.0 * n * n * d; }

/// Analytic counts only.
inline CostReport analytic_cost(const CostDims& dims, double mask_ratio, Paradigm paradigm) {
  dims.encoder.validate();
  if (dims.decoder_dim == 0 || dims.decoder_depth == 0 || dims.teacher_dim == 0) {
    throw ConfigError("cost model dims must be positive");
  }
  const auto& e = dims.encoder;
  CostReport r;
  r.paradigm = paradigm;
  r.mask_ratio = mask_ratio;
  r.num_patches = e.num_patches();
  const std::size_t visible = visible_count(r.num_patches, mask_ratio);
  r.patch_tokens = paradigm == Paradigm::kInpainting ? r.num_patches : visible;
  r.encoder_tokens = r.patch_tokens + 1;
  r.forward_ratio = static_cast<double>(r.patch_tokens) / static_cast<double>(r.num_patches);

  const double d = static_cast<double>(e.embed_dim), m = static_cast<double>(e.mlp_ratio);
  const double depth = static_cast<double>(e.depth);
  const double n = static_cast<double>(r.encoder_tokens), n_full = static_cast<double>(r.num_patches + 1);
  r.attention_flops = depth * block_attention_macs(n, d);
  r.linear_flops = depth * block_linear_macs(n, d, m);
  r.full_attention_flops = depth * block_attention_macs(n_full, d);
  r.full_total_flops = r.full_attention_flops + depth * block_linear_macs(n_full, d, m);

  if (paradigm == Paradigm::kDecoder) {
    r.decoder_tokens = r.num_patches + 1;
    const double dd = static_cast<double>(dims.decoder_dim), nd = static_cast<double>(r.decoder_tokens);
    r.extra_flops = static_cast<double>(dims.decoder_depth) *
                        (block_linear_macs(nd, dd, m) + block_attention_macs(nd, dd)) +
                    n * d * dd;  // encoder-to-decoder projection
  } else if (paradigm == Paradigm::kAlignment) {
    r.extra_flops = static_cast<double>(dims.adaptors) * n * d * static_cast<double>(dims.teacher_dim);
  }
  r.total_flops = r.attention_flops + r.linear_flops + r.extra_flops;
  r.attention_ratio = r.attention_flops / r.full_attention_flops;
  r.total_ratio = r.total_flops / r.full_total_flops;
  return r;
}

/// Median wall-clock seconds of an eval-mode forward over `patch_tokens`
/// visible patches (plus [CLS]) for a batch of one image.
inline double time_student_forward(const ViT<float>& vit, std::size_t patch_tokens, std::size_t repeats,
                                   std::mt19937_64& rng) {
  const auto& cfg = vit.config;
  Tape<float>::Paused no_record;
  std::normal_distribution<float> nd(0.0f, 1.0f);
  Tensor<float> patches({1, cfg.num_patches(), cfg.patch_dim()});
  for (auto& v : patches.data()) v = nd(rng);
  std::vector<std::vector<std::size_t>> idx(1, std::vector<std::size_t>(patch_tokens));
  std::iota(idx[0].begin(), idx[0].end(), std::size_t{0});
  std::vector<double> times;
  for (std::size_t k = 0; k < repeats + 1; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    auto out = encoder_forward(vit, embed(vit, patches, idx), ForwardMode{}, 0.0);
    const auto t1 = std::chrono::steady_clock::now();
    if (out.tokens() != patch_tokens + 1) throw ContractError("time_student_forward: unexpected token count");
    if (k > 0) times.push_back(std::chrono::duration<double>(t1 - t0).count());  // first run warms caches
  }
  std::nth_element(times.begin(), times.begin() + static_cast<long>(times.size() / 2), times.end());
  return times[times.size() / 2];
}

/// Analytic report plus the measured student-forward ratio.
inline CostReport bench_cost(const CostDims& dims, double mask_ratio, Paradigm paradigm, std::size_t repeats = 7,
                             std::uint64_t seed = 0) {
  CostReport r = analytic_cost(dims, mask_ratio, paradigm);
  std::mt19937_64 rng(seed);
  ViT<float> vit = ViT<float>::init(dims.encoder, rng);
  r.seconds_full = time_student_forward(vit, r.num_patches, repeats, rng);
  r.seconds_visible = time_student_forward(vit, r.patch_tokens, repeats, rng);
  r.empirical_ratio = r.seconds_visible / r.seconds_full;
  return r;
}

inline std::string cost_csv_header() {
  return "paradigm,mask_ratio,num_patches,patch_tokens,encoder_tokens,decoder_tokens,forward_ratio,"
         "attention_flops,linear_flops,extra_flops,total_flops,attention_ratio,total_ratio,"
         "seconds_full,seconds_visible,empirical_ratio";
}

inline std::string cost_csv_row(const CostReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%.4f,%zu,%zu,%zu,%zu,%.6f,%.6g,%.6g,%.6g,%.6g,%.6f,%.6f,%.6g,%.6g,%.6f",
                paradigm_name(r.paradigm), r.mask_ratio, r.num_patches, r.patch_tokens, r.encoder_tokens,
                r.decoder_tokens, r.forward_ratio, r.attention_flops, r.linear_flops, r.extra_flops, r.total_flops,
                r.attention_ratio, r.total_ratio, r.seconds_full, r.seconds_visible, r.empirical_ratio);
  return buf;
}

}  // namespace maskalign
