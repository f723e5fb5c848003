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

// The whole pipeline on a synthetic CIFAR-format surrogate: supervised
// teacher, alignment pretraining, probing against a random encoder,
// fine-tuning and attention export, all through on-disk binaries and
// checkpoints.

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "maskalign/maskalign.hpp"
#include "support/synthetic_cifar.hpp"

namespace maskalign {
namespace {

namespace fs = std::filesystem;

ViTConfig small_vit() {
  ViTConfig c;
  c.embed_dim = 48;
  c.num_heads = 3;
  c.depth = 3;
  return c;
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "maskalign_pipeline";
    fs::remove_all(dir_);
    testing::write_synthetic_cifar_dir((dir_ / "data").string(), 240, 400, 5);
    for (int i = 1; i <= 5; ++i)
      train_.append(load_cifar10_file((dir_ / "data" / ("data_batch_" + std::to_string(i) + ".bin")).string()));
    test_ = load_cifar10_file((dir_ / "data" / "test_batch.bin").string());
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static inline fs::path dir_;
  static inline Dataset train_, test_;
};

TrainConfig probe_config() {
  TrainConfig c = TrainConfig::probe_defaults();
  c.epochs = 30;
  return c;
}

TEST_F(Pipeline, TeacherPretrainProbeFinetune) {
  TrainConfig tcfg = TrainConfig::teacher_defaults();
  tcfg.epochs = 10;
  auto teacher_run = train_teacher(small_vit(), tcfg, train_, test_);
  std::printf("teacher val accuracy %.3f\n", teacher_run.val_accuracy);
  EXPECT_GT(teacher_run.val_accuracy, 0.4);
  const auto teacher_path = (dir_ / "teacher.ckpt").string();
  save_checkpoint(teacher_path, teacher_run.checkpoint);
  const FrozenTeacher teacher = FrozenTeacher::load(teacher_path);

  // Probing the supervised teacher recovers its own head accuracy; a
  // standardised probe trained longer may exceed it.
  const double teacher_probe = linear_probe(teacher.model(), train_, test_, probe_config()).accuracy;
  std::printf("teacher probe %.3f\n", teacher_probe);
  EXPECT_GE(teacher_probe, teacher_run.val_accuracy - 0.03);

  TrainConfig pcfg = TrainConfig::pretrain_defaults();
  pcfg.epochs = 10;
  pcfg.batch_size = 64;
  pcfg.base_lr = 1e-3;
  auto pre = pretrain(small_vit(), pcfg, teacher, train_);
  for (std::size_t e = 0; e < pre.epoch_losses.size(); ++e) {
    std::printf("pretrain epoch %zu loss %.5f\n", e + 1, pre.epoch_losses[e]);
    if (e > 0) {
      EXPECT_LT(pre.epoch_losses[e], pre.epoch_losses[e - 1]) << "epoch " << e + 1;
    }
  }
  EXPECT_EQ(pre.student_tokens, 20u);
  EXPECT_EQ(pre.teacher_tokens, 65u);
  EXPECT_EQ(checkpoint_hash(load_checkpoint(teacher_path)), checkpoint_hash(teacher_run.checkpoint));
  const auto student_path = (dir_ / "student.ckpt").string();
  save_checkpoint(student_path, pre.student);
  const ViT<float> student = vit_from_checkpoint(load_checkpoint(student_path));

  std::mt19937_64 rng(0);
  const double rnd_acc = linear_probe(ViT<float>::init(small_vit(), rng), train_, test_, probe_config()).accuracy;
  const double pre_acc = linear_probe(student, train_, test_, probe_config()).accuracy;
  std::printf("probe pretrained %.3f random %.3f\n", pre_acc, rnd_acc);
  EXPECT_GT(rnd_acc, 0.1);
  EXPECT_GT(pre_acc, 0.1);

  TrainConfig fcfg = TrainConfig::finetune_defaults();
  fcfg.epochs = 10;
  auto ft = finetune(student, train_, test_, fcfg);
  std::printf("finetune accuracy %.3f\n", ft.accuracy);
  EXPECT_GE(ft.accuracy, pre_acc);

  const auto map = attention_map(student, test_.image(0));
  const auto pgm = (dir_ / "attn.pgm").string();
  write_pgm(pgm, map.image);
  EXPECT_EQ(read_pgm(pgm), map.image);
}

}  // namespace
}  // namespace maskalign
