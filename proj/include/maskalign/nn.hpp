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

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "maskalign/ops.hpp"
#include "maskalign/tensor.hpp"

namespace maskalign {

inline constexpr double kNormEps = 1e-6;

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Fills t with N(0, std) samples truncated to [-2 std, 2 std].
template <typename T>
void trunc_normal_(Tensor<T>& t, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  for (auto& v : t.data()) {
    double s;
    do {
      s = dist(rng);
    } while (s < -2.0 * std || s > 2.0 * std);
    v = static_cast<T>(s);
  }
}

/// y = x W + b with W stored [in x out].
template <typename T>
struct LinearParams {
  Tensor<T> weight;
  Tensor<T> bias;

  static LinearParams zeros(std::size_t in, std::size_t out) {
    return {Tensor<T>({in, out}, T(0), true), Tensor<T>({out}, T(0), true)};
  }
  static LinearParams init(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    auto p = zeros(in, out);
    trunc_normal_(p.weight, 0.02, rng);
    return p;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

/// LayerNorm scale and shift.
template <typename T>
struct NormParams {
  Tensor<T> scale;
  Tensor<T> shift;

  static NormParams identity(std::size_t dim) {
    return {Tensor<T>({dim}, T(1), true), Tensor<T>({dim}, T(0), true)};
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    return layernorm(x, -1, static_cast<T>(kNormEps), scale, shift);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", scale);
    f(prefix + ".bias", shift);
  }
};

/// Collects (name, handle) pairs from anything with visit(prefix, f).
template <typename T, typename Module>
NamedTensors<T> collect_named(Module& m, const std::string& prefix) {
  NamedTensors<T> out;
  m.visit(prefix, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

/// Copies parameter values (cast to U) from src into an identically shaped
/// module dst. Both are visited in the same order.
template <typename T, typename U, typename SrcModule, typename DstModule>
void copy_parameters(SrcModule& src, DstModule& dst) {
  std::vector<Tensor<T>> values;
  src.visit("", [&](const std::string&, Tensor<T>& t) { values.push_back(t); });
  std::size_t i = 0;
  dst.visit("", [&](const std::string& name, Tensor<U>& t) {
    if (i >= values.size() || values[i].shape() != t.shape()) {
      throw ContractError("copy_parameters: structure mismatch at " + name);
    }
    t = values[i++].template cast<U>(t.requires_grad());
  });
}

}  // namespace maskalign
