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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "maskalign/error.hpp"
#include "maskalign/ops.hpp"
#include "maskalign/tensor.hpp"

namespace maskalign {

enum class MaskType { kRandom, kAttentive };
enum class AttentiveMode { kTopK, kStochastic };

/// Visible/masked partition of one image's patch indices.
struct MaskPlan {
  std::size_t n_total = 0;
  double ratio = 0.0;
  std::vector<std::size_t> visible_idx;  // strictly increasing
  std::vector<std::size_t> masked_idx;   // strictly increasing

  std::size_t n_visible() const { return visible_idx.size(); }
};

/// round-half-up of N (1 - r). Ratios such as 0.9 are not exact in binary,
/// so N (1 - r) can land a few ulps below an exact half; the slack keeps
/// those cases rounding up.
inline std::size_t visible_count(std::size_t n, double ratio) {
  if (!(ratio >= 0.0) || ratio >= 1.0) {
    throw ConfigError("mask ratio must lie in [0, 1), got " + std::to_string(ratio));
  }
  const double exact = static_cast<double>(n) * (1.0 - ratio);
  const auto keep = static_cast<std::size_t>(std::floor(exact + 0.5 + 1e-9 * std::max(1.0, exact)));
  if (keep < 1) {
    throw ConfigError("mask ratio " + std::to_string(ratio) + " leaves no visible patch out of " +
                      std::to_string(n));
  }
  return keep;
}

/// Builds a plan from an arbitrary visible set (sorted and checked here).
inline MaskPlan make_plan(std::size_t n, double ratio, std::vector<std::size_t> visible) {
  std::sort(visible.begin(), visible.end());
  if (std::adjacent_find(visible.begin(), visible.end()) != visible.end()) {
    throw ContractError("make_plan: duplicate visible index");
  }
  if (!visible.empty() && visible.back() >= n) throw IndexError("make_plan: visible index out of range");
  MaskPlan plan;
  plan.n_total = n;
  plan.ratio = ratio;
  plan.masked_idx.reserve(n - visible.size());
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (j < visible.size() && visible[j] == i) {
      ++j;
    } else {
      plan.masked_idx.push_back(i);
    }
  }
  plan.visible_idx = std::move(visible);
  return plan;
}

/// Uniform sample of round(N(1-r)) indices without replacement.
inline MaskPlan random_mask(std::size_t n, double ratio, std::mt19937_64& rng) {
  const std::size_t keep = visible_count(n, ratio);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Partial Fisher-Yates: the first `keep` slots are a uniform sample.
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(keep);
  return make_plan(n, ratio, std::move(order));
}

/// [CLS]-to-patch attention averaged over heads, from one image's
/// attention [heads x (N+1) x (N+1)].
template <typename T>
std::vector<double> cls_attention_scores(const Tensor<T>& attention) {
  if (attention.ndim() != 3 || attention.dim(1) != attention.dim(2) || attention.dim(1) < 2) {
    throw ContractError("cls_attention_scores: expected [heads x (N+1) x (N+1)], got " +
                        to_string(attention.shape()));
  }
  const std::size_t heads = attention.dim(0), n1 = attention.dim(1);
  std::vector<double> scores(n1 - 1, 0.0);
  auto p = attention.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 1; i < n1; ++i) scores[i - 1] += static_cast<double>(p[h * n1 * n1 + i]);
  for (auto& s : scores) s /= static_cast<double>(heads);
  return scores;
}

/// Keeps the round(N(1-r)) highest-scoring patches (topk, ties to the lower
/// index) or samples that many without replacement with probability
/// proportional to the score (stochastic).
inline MaskPlan attentive_mask_from_scores(std::size_t n, double ratio, std::span<const double> scores,
                                           AttentiveMode mode, std::mt19937_64& rng) {
  if (scores.size() != n) {
    throw ContractError("attentive_mask: " + std::to_string(scores.size()) + " scores for " +
                        std::to_string(n) + " patches");
  }
  const std::size_t keep = visible_count(n, ratio);
  std::vector<std::size_t> chosen;
  if (mode == AttentiveMode::kTopK) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    chosen.assign(order.begin(), order.begin() + static_cast<long>(keep));
  } else {
    std::vector<double> weight(scores.begin(), scores.end());
    for (auto& w : weight) w = std::max(w, 0.0);
    std::vector<bool> taken(n, false);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t draw = 0; draw < keep; ++draw) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i]) total += weight[i];
      std::size_t pick = n;
      if (total > 0.0) {
        double target = u(rng) * total;
        for (std::size_t i = 0; i < n; ++i) {
          if (taken[i] || weight[i] <= 0.0) continue;
          pick = i;
          target -= weight[i];
          if (target < 0.0) break;
        }
      } else {
        // No mass left: fall back to uniform over the remaining indices.
        std::vector<std::size_t> rest;
        for (std::size_t i = 0; i < n; ++i)
          if (!taken[i]) rest.push_back(i);
        std::uniform_int_distribution<std::size_t> any(0, rest.size() - 1);
        pick = rest[any(rng)];
      }
      taken[pick] = true;
      chosen.push_back(pick);
    }
  }
  return make_plan(n, ratio, std::move(chosen));
}

template <typename T>
MaskPlan attentive_mask(std::size_t n, double ratio, const Tensor<T>& teacher_attention, AttentiveMode mode,
                        std::mt19937_64& rng) {
  const auto scores = cls_attention_scores(teacher_attention);
  return attentive_mask_from_scores(n, ratio, scores, mode, rng);
}

/// Rows of a [N x d] tensor at the plan's visible indices, ascending.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& rows, const MaskPlan& plan) {
  if (rows.ndim() != 2 || rows.dim(0) != plan.n_total) {
    throw ContractError("apply_mask: " + to_string(rows.shape()) + " rows for a plan over " +
                        std::to_string(plan.n_total) + " patches");
  }
  return gather_rows(rows, std::span<const std::size_t>(plan.visible_idx));
}

}  // namespace maskalign
