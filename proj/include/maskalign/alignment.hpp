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

// Feature alignment between a masked student and an intact-image teacher.
//
// Every student block output x_i passes through its own adaptor A_i (student
// dim -> teacher dim). In dynamic mode a learnable S x K matrix W mixes the
// adapted features into one prediction per target level:
//
//     pred_j = sum_i W[i][j] * A_i(x_i),   j = 0..K-1
//
// The targets are the last K teacher blocks, read at the student's visible
// patch positions and normalised per level. Layer-wise mode skips W and
// pairs student block S-K+j with target level j. The loss is smooth-L1,
// averaged over every element of every level.

#pragma once

#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "maskalign/error.hpp"
#include "maskalign/masking.hpp"
#include "maskalign/nn.hpp"
#include "maskalign/ops.hpp"
#include "maskalign/tensor.hpp"
#include "maskalign/vit.hpp"

namespace maskalign {

enum class AlignMode { kDynamic, kLayerwise };
enum class AdaptorKind { kLinear, kMlp };
enum class TargetNorm { kLayerNorm, kBatchNorm, kNone };

struct AlignmentConfig {
  AlignMode mode = AlignMode::kDynamic;
  std::size_t top_k = 3;
  AdaptorKind adaptor = AdaptorKind::kLinear;
  bool include_cls = false;
  TargetNorm normalize = TargetNorm::kLayerNorm;

  void validate(std::size_t student_depth, std::size_t teacher_depth) const {
    if (top_k < 1) throw ConfigError("top_k must be at least 1");
    if (top_k > teacher_depth) {
      throw ConfigError("top_k " + std::to_string(top_k) + " exceeds teacher depth " +
                        std::to_string(teacher_depth));
    }
    if (top_k > student_depth) {
      throw ConfigError("top_k " + std::to_string(top_k) + " exceeds student depth " +
                        std::to_string(student_depth));
    }
  }
};

/// A_i: one linear map, or linear-GELU-linear with hidden size = input dim.
template <typename T>
struct Adaptor {
  AdaptorKind kind = AdaptorKind::kLinear;
  LinearParams<T> fc1;
  LinearParams<T> fc2;  // MLP only

  static Adaptor init(AdaptorKind kind, std::size_t in, std::size_t out, std::mt19937_64& rng) {
    Adaptor a;
    a.kind = kind;
    if (kind == AdaptorKind::kLinear) {
      a.fc1 = LinearParams<T>::init(in, out, rng);
    } else {
      a.fc1 = LinearParams<T>::init(in, in, rng);
      a.fc2 = LinearParams<T>::init(in, out, rng);
    }
    return a;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (kind == AdaptorKind::kLinear) return fc1(x);
    return fc2(gelu(fc1(x)));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    fc1.visit(prefix + ".fc1", f);
    if (kind == AdaptorKind::kMlp) fc2.visit(prefix + ".fc2", f);
  }
};

template <typename T>
struct AlignmentHead {
  AlignmentConfig config;
  std::size_t student_dim = 0;
  std::size_t teacher_dim = 0;
  std::vector<Adaptor<T>> adaptors;  // one per student block
  Tensor<T> mix;                     // W, [S x K]; dynamic mode only

  std::size_t student_depth() const { return adaptors.size(); }

  /// W starts as the layer-wise pairing: W[i][j] = 1 iff i = S-K+j.
  static AlignmentHead init(const AlignmentConfig& cfg, std::size_t student_depth, std::size_t student_dim,
                            std::size_t teacher_depth, std::size_t teacher_dim, std::mt19937_64& rng) {
    cfg.validate(student_depth, teacher_depth);
    AlignmentHead h;
    h.config = cfg;
    h.student_dim = student_dim;
    h.teacher_dim = teacher_dim;
    for (std::size_t i = 0; i < student_depth; ++i)
      h.adaptors.push_back(Adaptor<T>::init(cfg.adaptor, student_dim, teacher_dim, rng));
    if (cfg.mode == AlignMode::kDynamic) {
      h.mix = Tensor<T>({student_depth, cfg.top_k}, T(0), true);
      set_one_hot_mix(h);
    }
    return h;
  }

  static void set_one_hot_mix(AlignmentHead& h) {
    const std::size_t S = h.student_depth(), K = h.config.top_k;
    auto w = h.mix.data();
    std::fill(w.begin(), w.end(), T(0));
    for (std::size_t j = 0; j < K; ++j) w[(S - K + j) * K + j] = T(1);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    const std::string p = prefix.empty() ? "" : prefix + ".";
    for (std::size_t i = 0; i < adaptors.size(); ++i) adaptors[i].visit(p + "adaptors." + std::to_string(i), f);
    if (mix.defined()) f(p + "mix", mix);
  }

  NamedTensors<T> named_parameters() { return collect_named<T>(*this, ""); }

  template <typename U>
  AlignmentHead<U> cast() {
    AlignmentHead<U> out;
    out.config = config;
    out.student_dim = student_dim;
    out.teacher_dim = teacher_dim;
    for (const auto& a : adaptors) {
      Adaptor<U> b;
      b.kind = a.kind;
      out.adaptors.push_back(b);
    }
    std::vector<Tensor<T>> values;
    visit("", [&](const std::string&, Tensor<T>& t) { values.push_back(t); });
    std::size_t i = 0;
    for (auto& a : out.adaptors) {
      a.fc1.weight = values[i++].template cast<U>(true);
      a.fc1.bias = values[i++].template cast<U>(true);
      if (a.kind == AdaptorKind::kMlp) {
        a.fc2.weight = values[i++].template cast<U>(true);
        a.fc2.bias = values[i++].template cast<U>(true);
      }
    }
    if (mix.defined()) out.mix = values[i++].template cast<U>(true);
    return out;
  }
};

/// Student rows that take part in alignment: every row when [CLS] is
/// aligned, otherwise patch rows only.
template <typename T>
Tensor<T> aligned_student_rows(const Tensor<T>& block_out, bool include_cls) {
  if (include_cls) return block_out;
  std::vector<std::size_t> rows(block_out.dim(1) - 1);
  std::iota(rows.begin(), rows.end(), std::size_t{1});
  return gather_rows_shared(block_out, std::span<const std::size_t>(rows));
}

/// Predictions for the K target levels, each [B x n x teacher_dim].
template <typename T>
std::vector<Tensor<T>> adapt_and_mix(const std::vector<Tensor<T>>& per_block, const AlignmentHead<T>& head) {
  const std::size_t S = head.student_depth(), K = head.config.top_k;
  if (per_block.size() != S) {
    throw ContractError("adapt_and_mix: " + std::to_string(per_block.size()) + " feature maps for " +
                        std::to_string(S) + " adaptors");
  }
  for (const auto& x : per_block) {
    if (x.shape() != per_block[0].shape()) throw ContractError("adapt_and_mix: feature maps differ in shape");
  }
  std::vector<Tensor<T>> preds;
  if (head.config.mode == AlignMode::kLayerwise) {
    for (std::size_t j = 0; j < K; ++j) preds.push_back(head.adaptors[S - K + j](per_block[S - K + j]));
    return preds;
  }
  if (!head.mix.defined() || head.mix.shape() != Shape{S, K}) {
    throw ContractError("adapt_and_mix: dynamic mode needs an S x K mixing matrix");
  }
  std::vector<Tensor<T>> adapted;
  adapted.reserve(S);
  for (std::size_t i = 0; i < S; ++i) adapted.push_back(head.adaptors[i](per_block[i]));
  const Shape level_shape = adapted[0].shape();
  const std::size_t m = adapted[0].numel();
  Tensor<T> stacked = reshape(stack(adapted), {S, m});
  Tensor<T> mixed = matmul(permute(head.mix, {1, 0}), stacked);  // [K x m]
  Shape full{K};
  full.insert(full.end(), level_shape.begin(), level_shape.end());
  mixed = reshape(mixed, full);
  for (std::size_t j = 0; j < K; ++j) preds.push_back(select(mixed, j));
  return preds;
}

template <typename T>
struct TargetSet {
  std::vector<Tensor<T>> levels;  // K maps [B x n x teacher_dim]
};

/// Per-level target normalisation without learnable scale or shift.
template <typename T>
Tensor<T> normalize_level(const Tensor<T>& x, TargetNorm norm) {
  const T eps = static_cast<T>(kNormEps);
  switch (norm) {
    case TargetNorm::kLayerNorm:
      return layernorm(x, -1, eps);
    case TargetNorm::kBatchNorm: {
      // Each channel over every token in the batch.
      const std::size_t d = x.shape().back();
      Tensor<T> flat = reshape(x, {x.numel() / d, d});
      return reshape(layernorm(flat, 0, eps), x.shape());
    }
    case TargetNorm::kNone:
      return x;
  }
  return x;
}

/// Teacher rows at the visible positions (plus [CLS] when aligned) of the
/// last K teacher blocks, normalised and detached.
template <typename T>
TargetSet<T> normalize_targets(const std::vector<Tensor<T>>& teacher_levels, const std::vector<MaskPlan>& plans,
                               const AlignmentConfig& cfg) {
  const std::size_t depth = teacher_levels.size(), K = cfg.top_k;
  if (K < 1 || K > depth) {
    throw ConfigError("top_k " + std::to_string(K) + " exceeds teacher depth " + std::to_string(depth));
  }
  const std::size_t batch = teacher_levels.front().dim(0);
  if (plans.size() != batch) {
    throw ContractError("normalize_targets: " + std::to_string(plans.size()) + " plans for batch of " +
                        std::to_string(batch));
  }
  std::vector<std::vector<std::size_t>> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (teacher_levels.front().dim(1) != plans[b].n_total + 1) {
      throw ContractError("normalize_targets: teacher features must cover the intact image");
    }
    if (cfg.include_cls) rows[b].push_back(0);
    for (auto v : plans[b].visible_idx) rows[b].push_back(v + 1);
  }
  typename Tape<T>::Paused no_record;
  TargetSet<T> out;
  for (std::size_t j = 0; j < K; ++j) {
    const Tensor<T>& level = teacher_levels[depth - K + j];
    out.levels.push_back(normalize_level(gather_rows(level.detach(), rows), cfg.normalize).detach());
  }
  return out;
}

/// Mean smooth-L1 over all elements of all levels.
template <typename T>
Tensor<T> alignment_loss(const std::vector<Tensor<T>>& preds, const TargetSet<T>& targets) {
  if (preds.empty() || preds.size() != targets.levels.size()) {
    throw ContractError("alignment_loss: " + std::to_string(preds.size()) + " predictions for " +
                        std::to_string(targets.levels.size()) + " target levels");
  }
  for (std::size_t j = 0; j < preds.size(); ++j) {
    if (preds[j].shape() != targets.levels[j].shape()) {
      throw ContractError("alignment_loss: level " + std::to_string(j) + " prediction " +
                          to_string(preds[j].shape()) + " vs target " + to_string(targets.levels[j].shape()));
    }
  }
  if (preds.size() == 1) return smooth_l1(preds[0], targets.levels[0]);
  Tensor<T> target;
  {
    typename Tape<T>::Paused no_record;
    target = stack(targets.levels);
  }
  return smooth_l1(stack(preds), target);
}

/// Full alignment objective for one batch: student ran on visible tokens,
/// teacher on the intact image.
template <typename T>
Tensor<T> maskalign_step(const EncoderOutput<T>& student, const EncoderOutput<T>& teacher,
                         const std::vector<MaskPlan>& plans, const AlignmentHead<T>& head) {
  const std::size_t batch = student.per_block.front().dim(0);
  if (plans.size() != batch) throw ContractError("maskalign_step: one plan per image required");
  for (const auto& p : plans) {
    if (student.tokens() != p.n_visible() + 1) {
      throw ContractError("maskalign_step: student saw " + std::to_string(student.tokens()) +
                          " tokens but the plan keeps " + std::to_string(p.n_visible()) + " patches");
    }
  }
  std::vector<Tensor<T>> rows;
  rows.reserve(student.per_block.size());
  for (const auto& x : student.per_block) rows.push_back(aligned_student_rows(x, head.config.include_cls));
  auto preds = adapt_and_mix(rows, head);
  auto targets = normalize_targets(teacher.per_block, plans, head.config);
  return alignment_loss(preds, targets);
}

}  // namespace maskalign
