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

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "maskalign/error.hpp"
#include "maskalign/nn.hpp"
#include "maskalign/tensor.hpp"

namespace maskalign {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// One AdamW update of a flat parameter buffer. `step` is 1-based.
/// Decoupled decay is applied first: w <- w (1 - lr wd).
inline void adamw_step(std::span<float> param, std::span<const float> grad, std::span<float> m,
                       std::span<float> v, std::size_t step, double lr, double wd, double beta1, double beta2,
                       double eps) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adamw_step: state does not match parameter size");
  }
  if (step == 0) throw ContractError("adamw_step: step is 1-based");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * wd;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = beta1 * m[i] + (1.0 - beta1) * g;
    const double vi = beta2 * v[i] + (1.0 - beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    double w = static_cast<double>(param[i]) * decay;
    w -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
    param[i] = static_cast<float>(w);
  }
}

/// A trainable tensor with its learning-rate multiplier and decay flag.
struct ParamEntry {
  std::string name;
  Tensor<float> param;
  double lr_scale = 1.0;
  bool decay = true;
};

/// Biases, norm parameters, [CLS] and position tables, and the alignment
/// mixing matrix are not decayed.
inline bool default_decay(const std::string& name, const Tensor<float>& t) {
  if (t.ndim() <= 1) return false;
  for (const char* key : {"cls_token", "pos_", "mix"}) {
    if (name.find(key) != std::string::npos) return false;
  }
  return true;
}

inline std::vector<ParamEntry> make_param_entries(const NamedTensors<float>& named, const std::string& prefix = "") {
  std::vector<ParamEntry> out;
  for (const auto& [name, t] : named) out.push_back({prefix + name, t, 1.0, default_decay(name, t)});
  return out;
}

class AdamW {
 public:
  AdamW(std::vector<ParamEntry> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.param.numel(), 0.0f);
      v_.emplace_back(p.param.numel(), 0.0f);
    }
  }

  /// Parameters without a gradient this step are left untouched.
  void step(double lr) {
    ++steps_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.param.has_grad()) continue;
      adamw_step(p.param.data(), p.param.grad(), m_[i], v_[i], steps_, lr * p.lr_scale,
                 p.decay ? cfg_.weight_decay : 0.0, cfg_.beta1, cfg_.beta2, cfg_.eps);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.param.clear_grad();
  }

  const std::vector<ParamEntry>& params() const { return params_; }
  std::size_t steps() const { return steps_; }

 private:
  std::vector<ParamEntry> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::size_t steps_ = 0;
};

/// Number of warm-up steps for a schedule.
inline std::size_t warmup_steps(std::size_t total_steps, double warmup_fraction) {
  return static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(total_steps) + 1e-9));
}

/// Linear warm-up from 0 to base_lr, then half-cosine decay to 0.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double warmup_fraction, double base_lr) {
  if (step >= total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(total_steps) + ")");
  }
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
    throw ContractError("cosine_lr: warmup fraction must lie in [0, 1)");
  }
  const std::size_t warm = warmup_steps(total_steps, warmup_fraction);
  if (step < warm) return base_lr * static_cast<double>(step) / static_cast<double>(warm);
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// decay^(num_layers + 1 - layer_id); id 0 is the patch embedding and
/// num_layers + 1 the classifier head.
inline double layerwise_lr_scale(std::size_t layer_id, std::size_t num_layers, double decay) {
  if (layer_id > num_layers + 1) {
    throw ContractError("layerwise_lr_scale: layer id " + std::to_string(layer_id) + " outside [0, " +
                        std::to_string(num_layers + 1) + "]");
  }
  return std::pow(decay, static_cast<double>(num_layers + 1 - layer_id));
}

/// Layer id of an encoder parameter name ("blocks.3.*" -> 4, embeddings -> 0,
/// final norm and head -> num_layers + 1).
inline std::size_t layer_id_for(const std::string& name, std::size_t num_layers) {
  if (name.rfind("patch_embed", 0) == 0 || name.rfind("cls_token", 0) == 0 || name.rfind("pos_", 0) == 0) {
    return 0;
  }
  if (name.rfind("blocks.", 0) == 0) {
    const auto dot = name.find('.', 7);
    return static_cast<std::size_t>(std::stoul(name.substr(7, dot - 7))) + 1;
  }
  return num_layers + 1;
}

}  // namespace maskalign
