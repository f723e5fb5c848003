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

// Vision transformer encoder that runs on any subset of patch tokens.
//
// Token layout everywhere is [B x (n+1) x D]: row 0 is the [CLS] token and
// rows 1..n are patch tokens in the order of the index list they were
// embedded from. Blocks are pre-norm; every block output is kept so that
// alignment heads can read intermediate features.

#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "maskalign/error.hpp"
#include "maskalign/nn.hpp"
#include "maskalign/ops.hpp"
#include "maskalign/tensor.hpp"

namespace maskalign {

struct ViTConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 96;
  std::size_t depth = 6;
  std::size_t num_heads = 3;
  std::size_t mlp_ratio = 4;
  double drop_path_rate = 0.0;

  std::size_t grid_h() const { return image_h / patch_size; }
  std::size_t grid_w() const { return image_w / patch_size; }
  std::size_t num_patches() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_hidden() const { return embed_dim * mlp_ratio; }

  void validate() const {
    if (patch_size == 0 || image_h == 0 || image_w == 0 || channels == 0) {
      throw ConfigError("image and patch dimensions must be positive");
    }
    if (image_h % patch_size != 0 || image_w % patch_size != 0) {
      throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " is not divisible by patch size " + std::to_string(patch_size));
    }
    if (embed_dim == 0 || depth == 0 || num_heads == 0 || mlp_ratio == 0) {
      throw ConfigError("embed_dim, depth, num_heads and mlp_ratio must be positive");
    }
    if (embed_dim % num_heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by " +
                        std::to_string(num_heads) + " heads");
    }
    if (embed_dim % 4 != 0) {
      throw ConfigError("embed_dim must be a multiple of 4 for 2-D sin-cos position tables");
    }
    if (drop_path_rate < 0.0 || drop_path_rate > 1.0) {
      throw ConfigError("drop_path_rate must lie in [0, 1]");
    }
  }

  bool operator==(const ViTConfig&) const = default;
};

/// Splits one image [C x H x W] into [N x (P*P*C)] rows in raster patch
/// order; each row is laid out (py, px, c).
inline std::vector<float> patchify(std::span<const float> image, const ViTConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.channels, H = cfg.image_h, W = cfg.image_w, P = cfg.patch_size;
  if (image.size() != C * H * W) {
    throw DimensionError("patchify: image has " + std::to_string(image.size()) + " values, expected " +
                         std::to_string(C * H * W));
  }
  std::vector<float> out(image.size());
  const std::size_t gw = cfg.grid_w(), pd = cfg.patch_dim();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t patch = (y / P) * gw + x / P;
        const std::size_t within = ((y % P) * P + x % P) * C + c;
        out[patch * pd + within] = image[(c * H + y) * W + x];
      }
  return out;
}

inline std::vector<float> unpatchify(std::span<const float> patches, const ViTConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.channels, H = cfg.image_h, W = cfg.image_w, P = cfg.patch_size;
  if (patches.size() != C * H * W) {
    throw DimensionError("unpatchify: got " + std::to_string(patches.size()) + " values, expected " +
                         std::to_string(C * H * W));
  }
  std::vector<float> out(patches.size());
  const std::size_t gw = cfg.grid_w(), pd = cfg.patch_dim();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t patch = (y / P) * gw + x / P;
        const std::size_t within = ((y % P) * P + x % P) * C + c;
        out[(c * H + y) * W + x] = patches[patch * pd + within];
      }
  return out;
}

/// Patchifies a contiguous batch of images into a [B x N x P*P*C] tensor.
template <typename T>
Tensor<T> patchify_batch(std::span<const float> images, std::size_t batch, const ViTConfig& cfg) {
  const std::size_t per = cfg.channels * cfg.image_h * cfg.image_w;
  if (images.size() != batch * per) {
    throw DimensionError("patchify_batch: " + std::to_string(images.size()) + " values for " +
                         std::to_string(batch) + " images");
  }
  std::vector<T> out;
  out.reserve(images.size());
  for (std::size_t b = 0; b < batch; ++b) {
    auto p = patchify(images.subspan(b * per, per), cfg);
    out.insert(out.end(), p.begin(), p.end());
  }
  return Tensor<T>::from({batch, cfg.num_patches(), cfg.patch_dim()}, std::move(out));
}

/// Fixed 2-D sine-cosine position table, [N+1 x D] with an all-zero [CLS]
/// row first. The first D/2 columns encode the column coordinate and the
/// last D/2 the row coordinate.
template <typename T>
Tensor<T> sincos_position_table(std::size_t dim, std::size_t grid_h, std::size_t grid_w) {
  if (dim % 4 != 0) throw ConfigError("position table dim must be a multiple of 4");
  const std::size_t quarter = dim / 4;
  Tensor<T> table({grid_h * grid_w + 1, dim});
  auto p = table.data();
  auto encode = [&](T* dst, double pos) {
    for (std::size_t i = 0; i < quarter; ++i) {
      const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
      dst[i] = static_cast<T>(std::sin(pos * omega));
      dst[i + quarter] = static_cast<T>(std::cos(pos * omega));
    }
  };
  for (std::size_t gy = 0; gy < grid_h; ++gy)
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      T* row = p.data() + (1 + gy * grid_w + gx) * dim;
      encode(row, static_cast<double>(gx));
      encode(row + dim / 2, static_cast<double>(gy));
    }
  return table;
}

template <typename T>
struct BlockParams {
  NormParams<T> norm1;
  LinearParams<T> qkv;
  LinearParams<T> proj;
  NormParams<T> norm2;
  LinearParams<T> fc1;
  LinearParams<T> fc2;

  static BlockParams zeros(const ViTConfig& c) {
    const std::size_t d = c.embed_dim;
    return {NormParams<T>::identity(d), LinearParams<T>::zeros(d, 3 * d), LinearParams<T>::zeros(d, d),
            NormParams<T>::identity(d), LinearParams<T>::zeros(d, c.mlp_hidden()),
            LinearParams<T>::zeros(c.mlp_hidden(), d)};
  }
  static BlockParams init(const ViTConfig& c, std::mt19937_64& rng) {
    const std::size_t d = c.embed_dim;
    return {NormParams<T>::identity(d), LinearParams<T>::init(d, 3 * d, rng),
            LinearParams<T>::init(d, d, rng), NormParams<T>::identity(d),
            LinearParams<T>::init(d, c.mlp_hidden(), rng), LinearParams<T>::init(c.mlp_hidden(), d, rng)};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(prefix + ".norm1", f);
    qkv.visit(prefix + ".attn.qkv", f);
    proj.visit(prefix + ".attn.proj", f);
    norm2.visit(prefix + ".norm2", f);
    fc1.visit(prefix + ".mlp.fc1", f);
    fc2.visit(prefix + ".mlp.fc2", f);
  }
};

/// Encoder parameters. The position table is fixed and never trained.
template <typename T>
struct ViT {
  ViTConfig config;
  LinearParams<T> patch_embed;
  Tensor<T> cls_token;
  Tensor<T> pos_table;
  std::vector<BlockParams<T>> blocks;
  NormParams<T> norm;

  /// Correctly shaped parameters: zero weights, identity norms.
  static ViT zeros(const ViTConfig& cfg) {
    cfg.validate();
    ViT v;
    v.config = cfg;
    v.patch_embed = LinearParams<T>::zeros(cfg.patch_dim(), cfg.embed_dim);
    v.cls_token = Tensor<T>({cfg.embed_dim}, T(0), true);
    v.pos_table = sincos_position_table<T>(cfg.embed_dim, cfg.grid_h(), cfg.grid_w());
    for (std::size_t i = 0; i < cfg.depth; ++i) v.blocks.push_back(BlockParams<T>::zeros(cfg));
    v.norm = NormParams<T>::identity(cfg.embed_dim);
    return v;
  }

  /// Truncated-normal(0.02) projections and [CLS], zero biases.
  static ViT init(const ViTConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    ViT v = zeros(cfg);
    v.patch_embed = LinearParams<T>::init(cfg.patch_dim(), cfg.embed_dim, rng);
    trunc_normal_(v.cls_token, 0.02, rng);
    for (auto& b : v.blocks) b = BlockParams<T>::init(cfg, rng);
    return v;
  }

  /// Visits learnable parameters in a fixed order.
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    const std::string p = prefix.empty() ? "" : prefix + ".";
    patch_embed.visit(p + "patch_embed", f);
    f(p + "cls_token", cls_token);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(p + "blocks." + std::to_string(i), f);
    norm.visit(p + "norm", f);
  }

  NamedTensors<T> named_parameters() { return collect_named<T>(*this, ""); }

  void set_trainable(bool on) {
    visit("", [on](const std::string&, Tensor<T>& t) { t.set_requires_grad(on); });
  }

  template <typename U>
  ViT<U> cast() {
    ViT<U> out = ViT<U>::zeros(config);
    copy_parameters<T, U>(*this, out);
    return out;
  }

  ViT clone() { return cast<T>(); }
};

template <typename T>
struct EncoderOutput {
  /// Output of every block (before the final norm), each [B x (n+1) x D].
  std::vector<Tensor<T>> per_block;
  /// Final block's attention weights, [B x heads x (n+1) x (n+1)].
  Tensor<T> last_attention;
  /// Final LayerNorm applied to the last block output, for heads.
  Tensor<T> final_norm;

  std::size_t tokens() const { return per_block.front().dim(1); }
};

/// Gathers visible patch rows, projects them, adds the matching position
/// embeddings and prepends [CLS]. patches: [B x N x P*P*C].
template <typename T>
Tensor<T> embed(const ViT<T>& vit, const Tensor<T>& patches,
                const std::vector<std::vector<std::size_t>>& visible_idx) {
  const auto& cfg = vit.config;
  if (patches.ndim() != 3 || patches.dim(1) != cfg.num_patches() || patches.dim(2) != cfg.patch_dim()) {
    throw DimensionError("embed: patches " + to_string(patches.shape()) + " do not match config");
  }
  Tensor<T> visible = gather_rows(patches, visible_idx);
  Tensor<T> tokens = vit.patch_embed(visible);

  const std::size_t batch = tokens.dim(0), n = tokens.dim(1), d = cfg.embed_dim;
  Tensor<T> pos({batch, n, d});
  auto table = vit.pos_table.data();
  auto pp = pos.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(table.begin() + (visible_idx[b][r] + 1) * d, d, pp.begin() + (b * n + r) * d);
  tokens = add(tokens, pos);

  Tensor<T> cls_pos = Tensor<T>::from({d}, std::vector<T>(table.begin(), table.begin() + d));
  return prepend_token(tokens, add(vit.cls_token, cls_pos));
}

/// Embeds every patch (the intact image).
template <typename T>
Tensor<T> embed_all(const ViT<T>& vit, const Tensor<T>& patches) {
  std::vector<std::size_t> all(vit.config.num_patches());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::vector<std::size_t>> idx(patches.dim(0), all);
  return embed(vit, patches, idx);
}

/// Per-sample stochastic depth on a residual branch: each sample's branch
/// is zeroed with probability p, survivors scaled by 1/(1-p). Identity when
/// not training or p == 0.
template <typename T>
Tensor<T> drop_path(const Tensor<T>& branch, double p, bool train, std::mt19937_64* rng) {
  if (!train || p <= 0.0) return branch;
  if (!rng) throw ContractError("drop_path: training with p > 0 needs an rng");
  const std::size_t batch = branch.dim(0);
  std::vector<T> factors(batch, T(0));
  if (p < 1.0) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (auto& f : factors) f = u(*rng) < 1.0 - p ? keep_scale : T(0);
  }
  return scale_samples(branch, std::span<const T>(factors));
}

struct ForwardMode {
  bool train = false;
  std::mt19937_64* rng = nullptr;
};

/// One pre-norm block. When attention_out is given it receives the softmax
/// weights [B x heads x n x n].
template <typename T>
Tensor<T> block_forward(const BlockParams<T>& blk, const ViTConfig& cfg, const Tensor<T>& x,
                        ForwardMode mode, double drop_path_rate, Tensor<T>* attention_out = nullptr) {
  if (x.ndim() != 3 || x.dim(2) != cfg.embed_dim) {
    throw DimensionError("block_forward: tokens " + to_string(x.shape()) + " vs embed_dim " +
                         std::to_string(cfg.embed_dim));
  }
  const std::size_t batch = x.dim(0), n = x.dim(1), d = cfg.embed_dim;
  const std::size_t heads = cfg.num_heads, hd = cfg.head_dim();

  Tensor<T> h = blk.norm1(x);
  Tensor<T> qkv = reshape(blk.qkv(h), {batch, n, 3, heads, hd});
  qkv = permute(qkv, {2, 0, 3, 1, 4});  // [3 x B x heads x n x hd]
  Tensor<T> q = select(qkv, 0), k = select(qkv, 1), v = select(qkv, 2);
  Tensor<T> scores = scale(batched_matmul(q, k, true), static_cast<T>(1.0 / std::sqrt(double(hd))));
  Tensor<T> attn = softmax(scores, -1);
  if (attention_out) *attention_out = attn;
  Tensor<T> ctx = permute(batched_matmul(attn, v), {0, 2, 1, 3});  // [B x n x heads x hd]
  Tensor<T> out = blk.proj(reshape(ctx, {batch, n, d}));
  Tensor<T> y = add(x, drop_path(out, drop_path_rate, mode.train, mode.rng));

  Tensor<T> m = blk.fc2(gelu(blk.fc1(blk.norm2(y))));
  return add(y, drop_path(m, drop_path_rate, mode.train, mode.rng));
}

/// Drop-path rate of block i, increasing linearly from 0 to the configured
/// rate at the last block.
inline double block_drop_path_rate(const ViTConfig& cfg, double rate, std::size_t block) {
  if (cfg.depth <= 1) return rate;
  return rate * static_cast<double>(block) / static_cast<double>(cfg.depth - 1);
}

template <typename T>
EncoderOutput<T> encoder_forward(const ViT<T>& vit, const Tensor<T>& tokens, ForwardMode mode = {},
                                 double drop_path_rate = -1.0) {
  const auto& cfg = vit.config;
  if (tokens.ndim() != 3 || tokens.dim(2) != cfg.embed_dim) {
    throw DimensionError("encoder_forward: tokens " + to_string(tokens.shape()) + " vs embed_dim " +
                         std::to_string(cfg.embed_dim));
  }
  const double rate = drop_path_rate < 0.0 ? cfg.drop_path_rate : drop_path_rate;
  EncoderOutput<T> out;
  Tensor<T> x = tokens;
  for (std::size_t i = 0; i < vit.blocks.size(); ++i) {
    const bool last = i + 1 == vit.blocks.size();
    x = block_forward(vit.blocks[i], cfg, x, mode, block_drop_path_rate(cfg, rate, i),
                      last ? &out.last_attention : nullptr);
    out.per_block.push_back(x);
  }
  out.final_norm = vit.norm(x);
  return out;
}

/// [CLS] row of the final-normed output, [B x D].
template <typename T>
Tensor<T> cls_feature(const EncoderOutput<T>& out) {
  const std::vector<std::size_t> first{0};
  Tensor<T> cls = gather_rows_shared(out.final_norm, std::span<const std::size_t>(first));
  return reshape(cls, {out.final_norm.dim(0), out.final_norm.dim(2)});
}

/// Mean of the patch-token rows of the final-normed output, [B x D].
template <typename T>
Tensor<T> mean_patch_feature(const EncoderOutput<T>& out) {
  std::vector<std::size_t> rows(out.final_norm.dim(1) - 1);
  std::iota(rows.begin(), rows.end(), std::size_t{1});
  Tensor<T> patches = gather_rows_shared(out.final_norm, std::span<const std::size_t>(rows));
  return mean_axis(patches, 1);
}

}  // namespace maskalign
