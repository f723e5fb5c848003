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

// Training loops: supervised teacher, masked alignment pretraining, linear
// probing and fine-tuning. All randomness comes from std::mt19937_64 streams
// derived from TrainConfig::seed, so a single-threaded run is reproducible
// bit for bit.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "maskalign/alignment.hpp"
#include "maskalign/checkpoint.hpp"
#include "maskalign/data.hpp"
#include "maskalign/error.hpp"
#include "maskalign/masking.hpp"
#include "maskalign/model_io.hpp"
#include "maskalign/optim.hpp"
#include "maskalign/vit.hpp"

namespace maskalign {

enum class ProbePool { kCls, kMeanPatch };

struct TrainConfig {
  double base_lr = 1.5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  std::size_t batch_size = 128;
  std::size_t epochs = 20;
  double warmup_fraction = 0.1;
  double mask_ratio = 0.7;
  MaskType mask_type = MaskType::kAttentive;
  AttentiveMode attentive_mode = AttentiveMode::kTopK;
  AlignmentConfig align;
  double drop_path_rate = 0.1;
  std::uint64_t seed = 0;
  double layer_decay = 0.6;
  /// Scale pretraining iterations by (1 - 0.7) / (1 - r) so every mask
  /// ratio sees the same number of student tokens as r = 0.7.
  bool equal_compute = false;
  bool augment = true;
  ProbePool probe_pool = ProbePool::kCls;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) throw ConfigError("warmup_fraction must lie in [0, 1)");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (base_lr < 0.0 || weight_decay < 0.0) throw ConfigError("learning rate and weight decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (drop_path_rate < 0.0 || drop_path_rate > 1.0) throw ConfigError("drop_path_rate must lie in [0, 1]");
    if (mask_ratio < 0.0 || mask_ratio >= 1.0) throw ConfigError("mask_ratio must lie in [0, 1)");
  }

  /// Desk-scale supervised teacher recipe.
  static TrainConfig teacher_defaults() {
    TrainConfig c;
    c.base_lr = 1e-3;
    c.batch_size = 64;
    c.epochs = 30;
    c.drop_path_rate = 0.1;
    c.beta2 = 0.999;
    return c;
  }
  /// Desk-scale alignment pretraining recipe.
  static TrainConfig pretrain_defaults() { return TrainConfig{}; }
  static TrainConfig probe_defaults() {
    TrainConfig c;
    c.base_lr = 5e-3;
    c.weight_decay = 1e-4;
    c.batch_size = 256;
    c.epochs = 50;
    c.beta2 = 0.999;
    c.drop_path_rate = 0.0;
    return c;
  }
  static TrainConfig finetune_defaults() {
    TrainConfig c;
    c.base_lr = 3e-4;
    c.layer_decay = 0.6;
    c.drop_path_rate = 0.2;
    c.batch_size = 64;
    c.epochs = 20;
    c.warmup_fraction = 0.05;
    c.beta2 = 0.999;
    return c;
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> accuracy;
};

struct TraceRow {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "step,lr,loss\n";
  char buf[96];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", r.step, r.lr, r.loss);
    out << buf;
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

namespace detail {

/// Independent, reproducible random streams for one run.
struct RunStreams {
  std::mt19937_64 init;
  std::mt19937_64 order;
  std::mt19937_64 augment;
  std::mt19937_64 drop_path;
  std::mt19937_64 mask;

  explicit RunStreams(std::uint64_t seed) {
    std::seed_seq seq{seed, std::uint64_t{0x6d61736b616c6e}};
    std::vector<std::uint64_t> s(5);
    std::vector<std::uint32_t> raw(10);
    seq.generate(raw.begin(), raw.end());
    for (std::size_t i = 0; i < 5; ++i) s[i] = (std::uint64_t(raw[2 * i]) << 32) | raw[2 * i + 1];
    init.seed(s[0]);
    order.seed(s[1]);
    augment.seed(s[2]);
    drop_path.seed(s[3]);
    mask.seed(s[4]);
  }
};

inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

inline void check_finite(double loss, std::size_t step, double lr, const char* phase) {
  if (!std::isfinite(loss)) {
    throw NumericError(std::string(phase) + ": non-finite loss at step " + std::to_string(step) +
                       " (lr " + std::to_string(lr) + ")");
  }
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

/// Walks a dataset in reshuffled epochs, one batch of indices at a time.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch, std::mt19937_64& rng) : n_(n), batch_(batch), rng_(rng) {}

  std::vector<std::size_t> next() {
    if (pos_ >= order_.size()) {
      order_ = shuffled(n_, rng_);
      pos_ = 0;
    }
    const std::size_t end = std::min(pos_ + batch_, order_.size());
    std::vector<std::size_t> idx(order_.begin() + static_cast<long>(pos_), order_.begin() + static_cast<long>(end));
    pos_ = end;
    return idx;
  }

 private:
  std::size_t n_, batch_;
  std::mt19937_64& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Logits [B x classes] from the final-normed [CLS] token.
inline Tensor<float> classify(const ViT<float>& vit, const LinearParams<float>& head, std::span<const float> images,
                              std::size_t batch, ForwardMode mode, double drop_path_rate = 0.0) {
  Tensor<float> patches = patchify_batch<float>(images, batch, vit.config);
  auto out = encoder_forward(vit, embed_all(vit, patches), mode, drop_path_rate);
  return head(cls_feature(out));
}

inline double evaluate_accuracy(const ViT<float>& vit, const LinearParams<float>& head, const Dataset& data,
                                std::size_t batch_size = 256) {
  Tape<float>::Paused no_record;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t b = std::min(batch_size, data.size() - start);
    std::span<const float> imgs(data.images.data() + start * kCifarPixels, b * kCifarPixels);
    Tensor<float> logits = classify(vit, head, imgs, b, ForwardMode{}, 0.0);
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < b; ++i) {
      auto row = logits.data().subspan(i * classes, classes);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (pred == data.labels[start + i]) ++correct;
    }
  }
  return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

struct TeacherResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  double val_accuracy = 0.0;
};

/// Supervised classification of a ViT on labelled images; the result is a
/// teacher checkpoint with its classifier head.
inline TeacherResult train_teacher(const ViTConfig& model_cfg, const TrainConfig& cfg, const Dataset& train,
                                   const Dataset& val, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  model_cfg.validate();
  if (train.size() == 0) throw ConfigError("train_teacher: empty training set");
  detail::RunStreams rs(cfg.seed);
  ViT<float> vit = ViT<float>::init(model_cfg, rs.init);
  auto head = LinearParams<float>::init(model_cfg.embed_dim, kCifarClasses, rs.init);

  auto entries = make_param_entries(vit.named_parameters());
  for (auto& e : make_param_entries(collect_named<float>(head, "head"))) entries.push_back(e);
  AdamW opt(std::move(entries), {cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  const std::size_t per_epoch = detail::steps_per_epoch(train.size(), cfg.batch_size);
  const std::size_t total = per_epoch * cfg.epochs;
  detail::BatchStream stream(train.size(), cfg.batch_size, rs.order);
  TeacherResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t s = 0; s < per_epoch; ++s, ++step) {
      const auto idx = stream.next();
      ImageBatch batch = make_batch(train, idx, cfg.augment ? &rs.augment : nullptr);
      const double lr = cosine_lr(step, total, cfg.warmup_fraction, cfg.base_lr);
      Tape<float> tape;
      double loss_value;
      {
        Tape<float>::Recording rec(tape);
        Tensor<float> logits = classify(vit, head, batch.images, batch.size(),
                                        ForwardMode{true, &rs.drop_path}, cfg.drop_path_rate);
        Tensor<float> loss = cross_entropy(logits, std::span<const int>(batch.labels));
        loss_value = loss.item();
        detail::check_finite(loss_value, step, lr, "train-teacher");
        tape.backward(loss);
        const std::size_t classes = logits.dim(1);
        for (std::size_t i = 0; i < batch.size(); ++i) {
          auto row = logits.data().subspan(i * classes, classes);
          if (std::max_element(row.begin(), row.end()) - row.begin() == batch.labels[i]) ++correct;
        }
      }
      opt.step(lr);
      opt.zero_grad();
      loss_sum += loss_value * static_cast<double>(batch.size());
      seen += batch.size();
    }
    EpochLog log{epoch, loss_sum / static_cast<double>(seen), static_cast<double>(correct) / static_cast<double>(seen)};
    if (val.size()) log.accuracy = evaluate_accuracy(vit, head, val);
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.val_accuracy = val.size() ? evaluate_accuracy(vit, head, val) : 0.0;
  result.checkpoint = vit_to_checkpoint(vit, &head);
  return result;
}

struct PretrainResult {
  Checkpoint student;
  Checkpoint alignment_head;
  std::vector<TraceRow> trace;
  std::vector<double> epoch_losses;
  std::size_t total_steps = 0;
  /// Token count seen by the student in the last step ([CLS] included).
  std::size_t student_tokens = 0;
  std::size_t teacher_tokens = 0;
};

/// Iterations for a mask ratio under the equal-compute protocol.
inline std::size_t equal_compute_steps(std::size_t base_steps, double mask_ratio) {
  return static_cast<std::size_t>(
      std::llround(static_cast<double>(base_steps) * (1.0 - 0.7) / (1.0 - mask_ratio)));
}

/// Builds one mask plan per image.
inline std::vector<MaskPlan> plan_masks(const TrainConfig& cfg, std::size_t n_patches, const EncoderOutput<float>& teacher,
                                        std::size_t batch, std::mt19937_64& rng) {
  std::vector<MaskPlan> plans;
  plans.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (cfg.mask_type == MaskType::kRandom) {
      plans.push_back(random_mask(n_patches, cfg.mask_ratio, rng));
    } else {
      const auto& attn = teacher.last_attention;
      const std::size_t heads = attn.dim(1), n1 = attn.dim(2);
      const std::size_t per = heads * n1 * n1;
      Tensor<float> one = Tensor<float>::from(
          {heads, n1, n1}, std::vector<float>(attn.data().begin() + static_cast<long>(b * per),
                                              attn.data().begin() + static_cast<long>((b + 1) * per)));
      plans.push_back(attentive_mask(n_patches, cfg.mask_ratio, one, cfg.attentive_mode, rng));
    }
  }
  return plans;
}

/// Masked feature-alignment pretraining of a fresh student against a frozen
/// teacher. The student only ever embeds and attends over visible patches.
inline PretrainResult pretrain(const ViTConfig& student_cfg, const TrainConfig& cfg, const FrozenTeacher& teacher,
                               const Dataset& train, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  student_cfg.validate();
  const ViTConfig& tcfg = teacher.config();
  if (tcfg.image_h != student_cfg.image_h || tcfg.image_w != student_cfg.image_w ||
      tcfg.patch_size != student_cfg.patch_size || tcfg.channels != student_cfg.channels) {
    throw ConfigError("student and teacher must share image size, channels and patch size");
  }
  cfg.align.validate(student_cfg.depth, tcfg.depth);
  if (train.size() == 0) throw ConfigError("pretrain: empty training set");

  detail::RunStreams rs(cfg.seed);
  ViT<float> student = ViT<float>::init(student_cfg, rs.init);
  auto head = AlignmentHead<float>::init(cfg.align, student_cfg.depth, student_cfg.embed_dim, tcfg.depth,
                                         tcfg.embed_dim, rs.init);
  auto entries = make_param_entries(student.named_parameters());
  for (auto& e : make_param_entries(head.named_parameters(), "align.")) entries.push_back(e);
  AdamW opt(std::move(entries), {cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  const std::size_t n_patches = student_cfg.num_patches();
  const std::size_t n_keep = visible_count(n_patches, cfg.mask_ratio);
  const std::size_t per_epoch = detail::steps_per_epoch(train.size(), cfg.batch_size);
  std::size_t total = per_epoch * cfg.epochs;
  if (cfg.equal_compute) total = std::max<std::size_t>(1, equal_compute_steps(total, cfg.mask_ratio));

  detail::BatchStream stream(train.size(), cfg.batch_size, rs.order);
  PretrainResult result;
  result.total_steps = total;
  double epoch_sum = 0.0;
  std::size_t epoch_seen = 0, epoch = 0;
  for (std::size_t step = 0; step < total; ++step) {
    const auto idx = stream.next();
    ImageBatch batch = make_batch(train, idx, cfg.augment ? &rs.augment : nullptr);
    const std::size_t B = batch.size();
    const double lr = cosine_lr(step, total, cfg.warmup_fraction, cfg.base_lr);

    // One teacher pass serves both attentive masking and the targets.
    EncoderOutput<float> tout = teacher.forward(batch.images, B);
    auto plans = plan_masks(cfg, n_patches, tout, B, rs.mask);

    Tape<float> tape;
    double loss_value;
    {
      Tape<float>::Recording rec(tape);
      std::vector<std::vector<std::size_t>> visible;
      visible.reserve(B);
      for (const auto& p : plans) visible.push_back(p.visible_idx);
      Tensor<float> patches = patchify_batch<float>(batch.images, B, student_cfg);
      Tensor<float> tokens = embed(student, patches, visible);
      auto sout = encoder_forward(student, tokens, ForwardMode{true, &rs.drop_path}, cfg.drop_path_rate);

      // Nothing is ever computed for masked positions on the student side.
      const Shape expected_attn{B, student_cfg.num_heads, n_keep + 1, n_keep + 1};
      if (sout.last_attention.shape() != expected_attn) {
        throw ContractError("pretrain: student attention " + to_string(sout.last_attention.shape()) +
                            " covers more than the visible tokens");
      }
      result.student_tokens = sout.tokens();
      result.teacher_tokens = tout.tokens();

      Tensor<float> loss = maskalign_step(sout, tout, plans, head);
      loss_value = loss.item();
      detail::check_finite(loss_value, step, lr, "pretrain");
      tape.backward(loss);
    }
    opt.step(lr);
    opt.zero_grad();
    result.trace.push_back({step, lr, loss_value});
    epoch_sum += loss_value * static_cast<double>(B);
    epoch_seen += B;
    if ((step + 1) % per_epoch == 0 || step + 1 == total) {
      EpochLog log{epoch++, epoch_sum / static_cast<double>(epoch_seen), std::nullopt};
      result.epoch_losses.push_back(log.mean_loss);
      if (on_epoch) on_epoch(log);
      epoch_sum = 0.0;
      epoch_seen = 0;
    }
  }
  result.student = vit_to_checkpoint(student);
  result.alignment_head = alignment_head_to_checkpoint(head);
  return result;
}

/// Frozen-backbone features for every image, [n x D] row-major.
inline std::vector<float> extract_features(const ViT<float>& vit, const Dataset& data, ProbePool pool,
                                           std::size_t batch_size = 256) {
  Tape<float>::Paused no_record;
  std::vector<float> feats;
  feats.reserve(data.size() * vit.config.embed_dim);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t b = std::min(batch_size, data.size() - start);
    std::span<const float> imgs(data.images.data() + start * kCifarPixels, b * kCifarPixels);
    Tensor<float> patches = patchify_batch<float>(imgs, b, vit.config);
    auto out = encoder_forward(vit, embed_all(vit, patches), ForwardMode{}, 0.0);
    Tensor<float> f = pool == ProbePool::kCls ? cls_feature(out) : mean_patch_feature(out);
    feats.insert(feats.end(), f.data().begin(), f.data().end());
  }
  return feats;
}

struct ProbeResult {
  double accuracy = 0.0;
  double train_accuracy = 0.0;
};

/// Trains only a linear classifier on frozen features. Features are
/// standardised with training-set statistics (an affine-free batch norm).
inline ProbeResult linear_probe(const ViT<float>& backbone, const Dataset& train, const Dataset& test,
                                const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t d = backbone.config.embed_dim;
  auto ftrain = extract_features(backbone, train, cfg.probe_pool);
  auto ftest = extract_features(backbone, test, cfg.probe_pool);

  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < train.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += ftrain[i * d + j];
  for (auto& m : mu) m /= static_cast<double>(train.size());
  for (std::size_t i = 0; i < train.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (ftrain[i * d + j] - mu[j]) * (ftrain[i * d + j] - mu[j]);
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(train.size()) + kNormEps);
  auto standardize = [&](std::vector<float>& f) {
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>((f[i] - mu[i % d]) / sd[i % d]);
  };
  standardize(ftrain);
  standardize(ftest);

  detail::RunStreams rs(cfg.seed);
  auto head = LinearParams<float>::init(d, kCifarClasses, rs.init);
  AdamW opt(make_param_entries(collect_named<float>(head, "head")), {cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});
  const std::size_t per_epoch = detail::steps_per_epoch(train.size(), cfg.batch_size);
  const std::size_t total = per_epoch * cfg.epochs;
  detail::BatchStream stream(train.size(), cfg.batch_size, rs.order);
  for (std::size_t step = 0; step < total; ++step) {
    const auto idx = stream.next();
    std::vector<float> x;
    std::vector<int> y;
    x.reserve(idx.size() * d);
    for (auto i : idx) {
      x.insert(x.end(), ftrain.begin() + static_cast<long>(i * d), ftrain.begin() + static_cast<long>((i + 1) * d));
      y.push_back(train.labels[i]);
    }
    Tape<float> tape;
    {
      Tape<float>::Recording rec(tape);
      Tensor<float> loss = cross_entropy(head(Tensor<float>::from({idx.size(), d}, std::move(x))),
                                         std::span<const int>(y));
      detail::check_finite(loss.item(), step, 0.0, "linear-probe");
      tape.backward(loss);
    }
    opt.step(cosine_lr(step, total, cfg.warmup_fraction, cfg.base_lr));
    opt.zero_grad();
  }

  auto accuracy = [&](const std::vector<float>& f, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    Tape<float>::Paused no_record;
    Tensor<float> logits = head(Tensor<float>::from({data.size(), d}, f));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      auto row = logits.data().subspan(i * kCifarClasses, kCifarClasses);
      if (std::max_element(row.begin(), row.end()) - row.begin() == data.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
  };
  return {accuracy(ftest, test), accuracy(ftrain, train)};
}

/// Optimizer entries for fine-tuning: each encoder parameter's learning rate
/// is scaled by layerwise_lr_scale of its layer id.
inline std::vector<ParamEntry> finetune_param_entries(ViT<float>& vit, LinearParams<float>& head, double layer_decay) {
  const std::size_t layers = vit.config.depth;
  auto entries = make_param_entries(vit.named_parameters());
  for (auto& e : make_param_entries(collect_named<float>(head, "head"))) entries.push_back(e);
  for (auto& e : entries) e.lr_scale = layerwise_lr_scale(layer_id_for(e.name, layers), layers, layer_decay);
  return entries;
}

struct FinetuneResult {
  double accuracy = 0.0;
  std::vector<EpochLog> log;
  Checkpoint checkpoint;
};

/// End-to-end classification from a pretrained encoder (alignment head
/// already discarded) with layer-wise lr decay and drop path.
inline FinetuneResult finetune(const ViT<float>& pretrained, const Dataset& train, const Dataset& test,
                               const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  detail::RunStreams rs(cfg.seed);
  ViT<float> vit = const_cast<ViT<float>&>(pretrained).clone();
  vit.set_trainable(true);
  auto head = LinearParams<float>::init(vit.config.embed_dim, kCifarClasses, rs.init);
  AdamW opt(finetune_param_entries(vit, head, cfg.layer_decay), {cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  const std::size_t per_epoch = detail::steps_per_epoch(train.size(), cfg.batch_size);
  const std::size_t total = per_epoch * cfg.epochs;
  detail::BatchStream stream(train.size(), cfg.batch_size, rs.order);
  FinetuneResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t s = 0; s < per_epoch; ++s, ++step) {
      const auto idx = stream.next();
      ImageBatch batch = make_batch(train, idx, cfg.augment ? &rs.augment : nullptr);
      const double lr = cosine_lr(step, total, cfg.warmup_fraction, cfg.base_lr);
      Tape<float> tape;
      double loss_value;
      {
        Tape<float>::Recording rec(tape);
        Tensor<float> logits = classify(vit, head, batch.images, batch.size(),
                                        ForwardMode{true, &rs.drop_path}, cfg.drop_path_rate);
        Tensor<float> loss = cross_entropy(logits, std::span<const int>(batch.labels));
        loss_value = loss.item();
        detail::check_finite(loss_value, step, lr, "finetune");
        tape.backward(loss);
      }
      opt.step(lr);
      opt.zero_grad();
      loss_sum += loss_value * static_cast<double>(batch.size());
      seen += batch.size();
    }
    EpochLog log{epoch, loss_sum / static_cast<double>(seen), std::nullopt};
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.accuracy = evaluate_accuracy(vit, head, test);
  result.checkpoint = vit_to_checkpoint(vit, &head);
  return result;
}

}  // namespace maskalign
