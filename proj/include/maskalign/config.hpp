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

// Run configuration: flat `key = value` files with `#` comments, merged
// with command-line overrides. Every key has a per-command default, so the
// resolved configuration is always complete.

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "maskalign/cost.hpp"
#include "maskalign/error.hpp"
#include "maskalign/train.hpp"
#include "maskalign/vit.hpp"

namespace maskalign {

inline const std::vector<std::string>& run_commands() {
  static const std::vector<std::string> c{"train-teacher", "pretrain", "probe", "finetune", "export-attn", "bench-cost"};
  return c;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

class RunConfig {
 public:
  /// Complete defaults for `command`.
  static RunConfig defaults(const std::string& command) {
    TrainConfig t;
    if (command == "train-teacher") t = TrainConfig::teacher_defaults();
    else if (command == "pretrain") t = TrainConfig::pretrain_defaults();
    else if (command == "probe") t = TrainConfig::probe_defaults();
    else if (command == "finetune") t = TrainConfig::finetune_defaults();
    else if (command != "export-attn" && command != "bench-cost") throw UsageError("unknown command '" + command + "'");

    const ViTConfig v;
    const CostDims cd;
    RunConfig rc;
    rc.command_ = command;
    auto& m = rc.values_;
    m["data_dir"] = "";
    m["output"] = "";
    m["teacher"] = "";
    m["checkpoint"] = "";
    m["trace"] = "";
    m["image_index"] = "0";
    m["train_subset"] = "5000";
    m["val_subset"] = "1000";
    m["test_subset"] = "10000";
    m["seed"] = "0";
    m["epochs"] = std::to_string(t.epochs);
    m["batch_size"] = std::to_string(t.batch_size);
    m["base_lr"] = detail::format_double(t.base_lr);
    m["weight_decay"] = detail::format_double(t.weight_decay);
    m["beta1"] = detail::format_double(t.beta1);
    m["beta2"] = detail::format_double(t.beta2);
    m["warmup_fraction"] = detail::format_double(t.warmup_fraction);
    m["mask_ratio"] = detail::format_double(t.mask_ratio);
    m["mask_type"] = "attentive";
    m["attentive_mode"] = "topk";
    m["align_mode"] = "dynamic";
    m["top_k"] = std::to_string(t.align.top_k);
    m["adaptor"] = "linear";
    m["include_cls"] = "false";
    m["target_norm"] = "layernorm";
    m["drop_path_rate"] = detail::format_double(t.drop_path_rate);
    m["layer_decay"] = detail::format_double(t.layer_decay);
    m["equal_compute"] = "false";
    m["augment"] = "true";
    m["probe_pool"] = "cls";
    m["image_size"] = std::to_string(v.image_h);
    m["patch_size"] = std::to_string(v.patch_size);
    m["embed_dim"] = std::to_string(v.embed_dim);
    m["depth"] = std::to_string(v.depth);
    m["num_heads"] = std::to_string(v.num_heads);
    m["mlp_ratio"] = std::to_string(v.mlp_ratio);
    m["paradigm"] = "alignment";
    m["decoder_dim"] = std::to_string(cd.decoder_dim);
    m["decoder_depth"] = std::to_string(cd.decoder_depth);
    m["repeats"] = "7";
    return rc;
  }

  const std::string& command() const { return command_; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) {
    if (!has(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// Applies `key = value` lines; `#` starts a comment.
  void apply_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string body = detail::trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      const std::string key = detail::trim(std::string_view(body).substr(0, eq));
      const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
      if (!has(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
      values_[key] = value;
    }
  }

  void apply_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    apply_text(ss.str(), path);
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const std::string& s = str(key);
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
    }
    return v;
  }

  std::uint64_t integer(const std::string& key) const {
    const std::string& s = str(key);
    std::uint64_t v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + s + "'");
    }
    return v;
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(integer(key)); }

  bool flag(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "' expects true or false, got '" + s + "'");
  }

  std::string choice(const std::string& key, const std::vector<std::string>& allowed) const {
    const std::string& s = str(key);
    for (const auto& a : allowed)
      if (a == s) return s;
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    throw ConfigError("config key '" + key + "' must be one of {" + list + "}, got '" + s + "'");
  }

  /// Every key with its final value, one `key = value` per line, sorted.
  std::string resolved_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  ViTConfig vit_config() const {
    ViTConfig c;
    c.image_h = c.image_w = size("image_size");
    c.patch_size = size("patch_size");
    c.embed_dim = size("embed_dim");
    c.depth = size("depth");
    c.num_heads = size("num_heads");
    c.mlp_ratio = size("mlp_ratio");
    c.drop_path_rate = real("drop_path_rate");
    c.validate();
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.seed = integer("seed");
    t.epochs = size("epochs");
    t.batch_size = size("batch_size");
    t.base_lr = real("base_lr");
    t.weight_decay = real("weight_decay");
    t.beta1 = real("beta1");
    t.beta2 = real("beta2");
    t.warmup_fraction = real("warmup_fraction");
    t.mask_ratio = real("mask_ratio");
    t.mask_type = choice("mask_type", {"attentive", "random"}) == "random" ? MaskType::kRandom : MaskType::kAttentive;
    t.attentive_mode = choice("attentive_mode", {"topk", "stochastic"}) == "stochastic" ? AttentiveMode::kStochastic
                                                                                        : AttentiveMode::kTopK;
    t.align.mode = choice("align_mode", {"dynamic", "layerwise"}) == "layerwise" ? AlignMode::kLayerwise
                                                                                 : AlignMode::kDynamic;
    t.align.top_k = size("top_k");
    t.align.adaptor = choice("adaptor", {"linear", "mlp"}) == "mlp" ? AdaptorKind::kMlp : AdaptorKind::kLinear;
    t.align.include_cls = flag("include_cls");
    const std::string norm = choice("target_norm", {"layernorm", "batchnorm", "none"});
    t.align.normalize = norm == "layernorm"   ? TargetNorm::kLayerNorm
                        : norm == "batchnorm" ? TargetNorm::kBatchNorm
                                              : TargetNorm::kNone;
    t.drop_path_rate = real("drop_path_rate");
    t.layer_decay = real("layer_decay");
    t.equal_compute = flag("equal_compute");
    t.augment = flag("augment");
    t.probe_pool = choice("probe_pool", {"cls", "mean"}) == "mean" ? ProbePool::kMeanPatch : ProbePool::kCls;
    t.validate();
    return t;
  }

  CostDims cost_dims() const {
    CostDims d;
    d.encoder = vit_config();
    d.decoder_dim = size("decoder_dim");
    d.decoder_depth = size("decoder_depth");
    const TrainConfig t = train_config();
    d.adaptors = t.align.mode == AlignMode::kDynamic ? d.encoder.depth : t.align.top_k;
    d.teacher_dim = d.encoder.embed_dim;
    return d;
  }

 private:
  std::string command_;
  std::map<std::string, std::string> values_;
};

}  // namespace maskalign
