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

// Conversions between models and checkpoints, and the frozen teacher.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskalign/alignment.hpp"
#include "maskalign/checkpoint.hpp"
#include "maskalign/error.hpp"
#include "maskalign/nn.hpp"
#include "maskalign/vit.hpp"

namespace maskalign {

inline constexpr const char* kVitConfigTensor = "config.vit";
inline constexpr const char* kAlignConfigTensor = "config.align";

namespace detail {

template <typename T>
std::vector<std::uint32_t> u32_shape(const Tensor<T>& t) {
  return {t.shape().begin(), t.shape().end()};
}

inline void add_named(Checkpoint& ckpt, const NamedTensors<float>& params) {
  for (const auto& [name, t] : params) {
    ckpt.add(name, u32_shape(t), std::vector<float>(t.data().begin(), t.data().end()));
  }
}

/// Copies every parameter of `module` from checkpoint tensors of the same
/// name and shape.
template <typename Module>
void load_named(Module& module, const Checkpoint& ckpt, const std::string& prefix) {
  module.visit(prefix, [&](const std::string& name, Tensor<float>& t) {
    const NamedArray& a = ckpt.at(name);
    if (Shape(a.shape.begin(), a.shape.end()) != t.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        to_string(Shape(a.shape.begin(), a.shape.end())) + ", model expects " +
                        to_string(t.shape()));
    }
    std::copy(a.data.begin(), a.data.end(), t.data().begin());
  });
}

inline std::size_t config_value(const NamedArray& a, std::size_t i) {
  if (i >= a.data.size()) throw FormatError("config tensor '" + a.name + "' is too short");
  const float v = a.data[i];
  if (!(v >= 0.0f)) throw FormatError("config tensor '" + a.name + "' holds an invalid value");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

/// Writes the encoder (and an optional classifier head) with a config echo
/// tensor: [image_h, image_w, channels, patch_size, embed_dim, depth,
/// num_heads, mlp_ratio].
inline Checkpoint vit_to_checkpoint(ViT<float>& vit, LinearParams<float>* head = nullptr) {
  const auto& c = vit.config;
  Checkpoint ckpt;
  ckpt.add(kVitConfigTensor, {8},
           {float(c.image_h), float(c.image_w), float(c.channels), float(c.patch_size), float(c.embed_dim),
            float(c.depth), float(c.num_heads), float(c.mlp_ratio)});
  detail::add_named(ckpt, vit.named_parameters());
  if (head) detail::add_named(ckpt, collect_named<float>(*head, "head"));
  return ckpt;
}

inline ViTConfig vit_config_from_checkpoint(const Checkpoint& ckpt) {
  const NamedArray& a = ckpt.at(kVitConfigTensor);
  ViTConfig c;
  c.image_h = detail::config_value(a, 0);
  c.image_w = detail::config_value(a, 1);
  c.channels = detail::config_value(a, 2);
  c.patch_size = detail::config_value(a, 3);
  c.embed_dim = detail::config_value(a, 4);
  c.depth = detail::config_value(a, 5);
  c.num_heads = detail::config_value(a, 6);
  c.mlp_ratio = detail::config_value(a, 7);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config echo is invalid: ") + e.what());
  }
  return c;
}

inline ViT<float> vit_from_checkpoint(const Checkpoint& ckpt) {
  ViT<float> vit = ViT<float>::zeros(vit_config_from_checkpoint(ckpt));
  detail::load_named(vit, ckpt, "");
  return vit;
}

inline bool checkpoint_has_head(const Checkpoint& ckpt) { return ckpt.find("head.weight") != nullptr; }

inline LinearParams<float> head_from_checkpoint(const Checkpoint& ckpt) {
  const NamedArray& w = ckpt.at("head.weight");
  if (w.shape.size() != 2) throw FormatError("head.weight must be 2-D");
  auto head = LinearParams<float>::zeros(w.shape[0], w.shape[1]);
  detail::load_named(head, ckpt, "head");
  return head;
}

inline Checkpoint alignment_head_to_checkpoint(AlignmentHead<float>& head) {
  const auto& c = head.config;
  Checkpoint ckpt;
  ckpt.add(kAlignConfigTensor, {8},
           {float(static_cast<int>(c.mode)), float(c.top_k), float(static_cast<int>(c.adaptor)),
            c.include_cls ? 1.0f : 0.0f, float(static_cast<int>(c.normalize)), float(head.student_dim),
            float(head.teacher_dim), float(head.student_depth())});
  detail::add_named(ckpt, head.named_parameters());
  return ckpt;
}

inline AlignmentHead<float> alignment_head_from_checkpoint(const Checkpoint& ckpt) {
  const NamedArray& a = ckpt.at(kAlignConfigTensor);
  AlignmentConfig c;
  const auto mode = detail::config_value(a, 0);
  const auto adaptor = detail::config_value(a, 2);
  const auto norm = detail::config_value(a, 4);
  if (mode > 1 || adaptor > 1 || norm > 2) throw FormatError("alignment config echo is invalid");
  c.mode = static_cast<AlignMode>(mode);
  c.top_k = detail::config_value(a, 1);
  c.adaptor = static_cast<AdaptorKind>(adaptor);
  c.include_cls = detail::config_value(a, 3) != 0;
  c.normalize = static_cast<TargetNorm>(norm);
  const std::size_t ds = detail::config_value(a, 5), dt = detail::config_value(a, 6);
  const std::size_t depth = detail::config_value(a, 7);
  std::mt19937_64 unused(0);
  auto head = AlignmentHead<float>::init(c, depth, ds, c.top_k, dt, unused);
  detail::load_named(head, ckpt, "");
  return head;
}

/// Frozen, eval-mode encoder supplying alignment targets and attention.
/// Parameters never require a gradient, so no pass through it is recorded.
class FrozenTeacher {
 public:
  explicit FrozenTeacher(ViT<float> vit) : vit_(std::move(vit)) { vit_.set_trainable(false); }

  static FrozenTeacher load(const std::string& path) {
    return FrozenTeacher(vit_from_checkpoint(load_checkpoint(path)));
  }

  const ViTConfig& config() const { return vit_.config; }
  const ViT<float>& model() const { return vit_; }

  /// Intact-image forward for a batch of [C x H x W] images.
  EncoderOutput<float> forward(std::span<const float> images, std::size_t batch) const {
    Tape<float>::Paused no_record;
    const Tensor<float> patches = patchify_batch<float>(images, batch, vit_.config);
    return encoder_forward(vit_, embed_all(vit_, patches), ForwardMode{false, nullptr}, 0.0);
  }

  bool any_parameter_has_grad() const {
    bool any = false;
    const_cast<ViT<float>&>(vit_).visit("", [&](const std::string&, Tensor<float>& t) {
      any = any || t.has_grad() || t.requires_grad();
    });
    return any;
  }

 private:
  ViT<float> vit_;
};

inline EncoderOutput<float> teacher_forward(const FrozenTeacher& teacher, std::span<const float> images,
                                            std::size_t batch) {
  return teacher.forward(images, batch);
}

}  // namespace maskalign
