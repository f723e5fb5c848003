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

#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "maskalign/ops.hpp"
#include "support/gradcheck.hpp"

namespace maskalign {
namespace {

using testing::Fn;
using testing::grad_check;
using testing::random_tensor;
using testing::weighted_sum;

constexpr double kOpTolerance = 1e-4;
constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

void expect_op_grads(const Fn& f, const std::vector<Tensor<double>>& inputs, std::uint64_t seed) {
  const auto r = grad_check(f, inputs);
  EXPECT_LT(r.max_rel_error, kOpTolerance) << "seed " << seed << ", input " << r.worst_input;
}

class OpGrad : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGrad, Matmul) {
  std::mt19937_64 rng(GetParam());
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
  expect_op_grads([&](const auto& in) { return weighted_sum(matmul(in[0], in[1]), GetParam()); }, {a, b},
                  GetParam());
}

TEST_P(OpGrad, BatchedMatmul) {
  std::mt19937_64 rng(GetParam());
  auto a = random_tensor({2, 3, 3, 4}, rng), b = random_tensor({2, 3, 4, 2}, rng);
  expect_op_grads([&](const auto& in) { return weighted_sum(batched_matmul(in[0], in[1]), GetParam()); },
                  {a, b}, GetParam());
}

TEST_P(OpGrad, BatchedMatmulTransposed) {
  std::mt19937_64 rng(GetParam());
  auto a = random_tensor({2, 5, 4}, rng), b = random_tensor({2, 3, 4}, rng);
  expect_op_grads([&](const auto& in) { return weighted_sum(batched_matmul(in[0], in[1], true), GetParam()); },
                  {a, b}, GetParam());
}

TEST_P(OpGrad, Linear) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({2, 3, 4}, rng), w = random_tensor({4, 6}, rng), b = random_tensor({6}, rng);
  expect_op_grads([&](const auto& in) { return weighted_sum(linear(in[0], in[1], in[2]), GetParam()); },
                  {x, w, b}, GetParam());
}

TEST_P(OpGrad, AddMulScale) {
  std::mt19937_64 rng(GetParam());
  auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  expect_op_grads(
      [&](const auto& in) { return weighted_sum(scale(add(mul(in[0], in[1]), in[0]), 0.7), GetParam()); },
      {a, b}, GetParam());
}

TEST_P(OpGrad, ScaleSamples) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({3, 2, 4}, rng);
  const std::vector<double> f{0.0, 1.25, 2.0};
  expect_op_grads([&](const auto& in) { return weighted_sum(scale_samples(in[0], std::span(f)), GetParam()); },
                  {x}, GetParam());
}

TEST_P(OpGrad, Gelu) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({4, 5}, rng, 2.0);
  expect_op_grads([&](const auto& in) { return weighted_sum(gelu(in[0]), GetParam()); }, {x}, GetParam());
}

TEST_P(OpGrad, SoftmaxLastAxis) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({2, 3, 5}, rng, 2.0);
  expect_op_grads([&](const auto& in) { return weighted_sum(softmax(in[0], -1), GetParam()); }, {x},
                  GetParam());
}

TEST_P(OpGrad, SoftmaxMiddleAxis) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({2, 4, 3}, rng, 2.0);
  expect_op_grads([&](const auto& in) { return weighted_sum(softmax(in[0], 1), GetParam()); }, {x}, GetParam());
}

TEST_P(OpGrad, LayerNormAffine) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({3, 4, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  expect_op_grads([&](const auto& in) { return weighted_sum(layernorm(in[0], -1, 1e-6, in[1], in[2]), GetParam()); },
                  {x, g, b}, GetParam());
}

TEST_P(OpGrad, LayerNormAxisZero) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({7, 3}, rng);
  expect_op_grads([&](const auto& in) { return weighted_sum(layernorm(in[0], 0, 1e-6), GetParam()); }, {x},
                  GetParam());
}

TEST_P(OpGrad, GatherRows) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({6, 3}, rng);
  const std::vector<std::size_t> idx{4, 0, 4, 2};
  expect_op_grads([&](const auto& in) { return weighted_sum(gather_rows(in[0], std::span(idx)), GetParam()); },
                  {x}, GetParam());
}

TEST_P(OpGrad, GatherRowsBatched) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({2, 5, 3}, rng);
  const std::vector<std::vector<std::size_t>> idx{{1, 3}, {4, 0}};
  expect_op_grads([&](const auto& in) { return weighted_sum(gather_rows(in[0], idx), GetParam()); }, {x},
                  GetParam());
}

TEST_P(OpGrad, PrependToken) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({2, 3, 4}, rng), t = random_tensor({4}, rng);
  expect_op_grads([&](const auto& in) { return weighted_sum(prepend_token(in[0], in[1]), GetParam()); }, {x, t},
                  GetParam());
}

TEST_P(OpGrad, ReshapePermuteSelect) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({2, 3, 4}, rng);
  expect_op_grads(
      [&](const auto& in) {
        auto p = permute(reshape(in[0], {2, 3, 2, 2}), {2, 0, 3, 1});
        return weighted_sum(select(p, 1), GetParam());
      },
      {x}, GetParam());
}

TEST_P(OpGrad, Stack) {
  std::mt19937_64 rng(GetParam());
  auto a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
  expect_op_grads([&](const auto& in) { return weighted_sum(stack(std::vector{in[0], in[1], in[0]}), GetParam()); },
                  {a, b}, GetParam());
}

TEST_P(OpGrad, SumMeanMeanAxis) {
  std::mt19937_64 rng(GetParam());
  auto x = random_tensor({3, 4, 2}, rng);
  expect_op_grads(
      [&](const auto& in) { return add(mean(in[0]), weighted_sum(mean_axis(in[0], 1), GetParam())); }, {x},
      GetParam());
}

TEST_P(OpGrad, SmoothL1) {
  std::mt19937_64 rng(GetParam());
  auto p = random_tensor({3, 5}, rng, 1.5);
  auto t = random_tensor({3, 5}, rng, 1.5, false);
  // Keep every difference away from the kinks at |d| = 1 so the central
  // difference stays on one branch.
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double d = p.data()[i] - t.data()[i];
    if (std::abs(std::abs(d) - 1.0) < 1e-3) p.data()[i] += 0.01;
  }
  expect_op_grads([&](const auto& in) { return smooth_l1(in[0], in[1]); }, {p, t}, GetParam());
}

TEST_P(OpGrad, CrossEntropy) {
  std::mt19937_64 rng(GetParam());
  auto logits = random_tensor({4, 5}, rng, 2.0);
  const std::vector<int> labels{0, 3, 4, 1};
  expect_op_grads([&](const auto& in) { return cross_entropy(in[0], std::span<const int>(labels)); }, {logits},
                  GetParam());
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGrad, ::testing::ValuesIn(kSeeds));

TEST(OpGradTape, SharedInputAccumulatesOverPaths) {
  Tensor<double> x = Tensor<double>::from({2}, {1.5, -2.0}, true);
  Tape<double> tape;
  {
    Tape<double>::Recording rec(tape);
    tape.backward(sum(mul(x, x)));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
}

TEST(OpGradTape, TargetsGetNoGradient) {
  Tensor<double> p = Tensor<double>::from({2}, {0.0, 3.0}, true);
  Tensor<double> t = Tensor<double>::from({2}, {0.5, 0.0}, true);
  Tape<double> tape;
  {
    Tape<double>::Recording rec(tape);
    tape.backward(smooth_l1(p, t));
  }
  EXPECT_TRUE(p.has_grad());
  EXPECT_FALSE(t.has_grad());
}

}  // namespace
}  // namespace maskalign
