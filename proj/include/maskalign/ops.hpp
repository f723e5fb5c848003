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

// Differentiable tensor operations. Every op computes its forward value
// eagerly and, when recording, appends a backward rule to the active tape.
// Broadcasting is limited to the trailing-vector cases the model needs
// (linear bias, layernorm affine, per-sample scaling).

#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "maskalign/error.hpp"
#include "maskalign/tensor.hpp"

namespace maskalign {

namespace detail {

/// Row-major C (+)= op(A) * op(B), C is m x n, inner dimension k.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat> C(c, M, N);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += CMap(a, M, K) * CMap(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += CMap(a, M, K) * CMap(b, N, K).transpose();
  } else if (trans_a && !trans_b) {
    C.noalias() += CMap(a, K, M).transpose() * CMap(b, K, N);
  } else {
    C.noalias() += CMap(a, K, M).transpose() * CMap(b, N, K).transpose();
  }
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": null tensor");
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

/// Accumulates `delta` into t's gradient when t takes one.
template <typename T>
void accumulate(const Tensor<T>& t, std::span<const T> delta) {
  if (!wants_grad(t)) return;
  auto g = t.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

inline std::size_t normalize_axis(long axis, std::size_t ndim, const char* op) {
  long a = axis < 0 ? axis + static_cast<long>(ndim) : axis;
  if (a < 0 || a >= static_cast<long>(ndim)) {
    throw ContractError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                        std::to_string(ndim));
  }
  return static_cast<std::size_t>(a);
}

/// outer x len x inner factorisation of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// [m x k] . [k x n] -> [m x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_defined(a, "matmul");
  detail::require_defined(b, "matmul");
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> y({m, n});
  detail::gemm(false, false, m, n, k, a.data().data(), b.data().data(), y.data().data(), false);
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    tape->record({a, b}, y, [a, b, y, m, n, k]() mutable {
      auto dy = y.grad();
      if (detail::wants_grad(a)) {
        detail::gemm(false, true, m, k, n, dy.data(), b.data().data(), a.mutable_grad().data(), true);
      }
      if (detail::wants_grad(b)) {
        detail::gemm(true, false, k, n, m, a.data().data(), dy.data(), b.mutable_grad().data(), true);
      }
    });
  }
  return y;
}

/// Batched product over equal leading dims: [..., m, k] . [..., k, n], or
/// [..., m, k] . [..., n, k]^T when transpose_b.
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  detail::require_defined(a, "batched_matmul");
  detail::require_defined(b, "batched_matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() ||
      !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    throw DimensionError("batched_matmul: incompatible shapes " + to_string(sa) + " and " +
                         to_string(sb));
  }
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t bk = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (bk != k) {
    throw DimensionError("batched_matmul: inner dimensions differ in " + to_string(sa) + " and " +
                         to_string(sb));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> y(out_shape);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* py = y.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(false, transpose_b, m, n, k, pa + i * m * k, pb + i * k * n, py + i * m * n, false);
  }
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    tape->record({a, b}, y, [a, b, y, batch, m, n, k, transpose_b]() mutable {
      auto dy = y.grad();
      if (detail::wants_grad(a)) {
        T* ga = a.mutable_grad().data();
        for (std::size_t i = 0; i < batch; ++i) {
          // dA = dY . B^T (or dY . B when B was transposed)
          detail::gemm(false, !transpose_b, m, k, n, dy.data() + i * m * n,
                       b.data().data() + i * k * n, ga + i * m * k, true);
        }
      }
      if (detail::wants_grad(b)) {
        T* gb = b.mutable_grad().data();
        for (std::size_t i = 0; i < batch; ++i) {
          if (transpose_b) {
            // B is [n x k]: dB = dY^T . A
            detail::gemm(true, false, n, k, m, dy.data() + i * m * n, a.data().data() + i * m * k,
                         gb + i * k * n, true);
          } else {
            detail::gemm(true, false, k, n, m, a.data().data() + i * m * k, dy.data() + i * m * n,
                         gb + i * k * n, true);
          }
        }
      }
    });
  }
  return y;
}

/// x [..., in] . weight [in x out] + bias [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_defined(x, "linear");
  detail::require_defined(weight, "linear");
  if (weight.ndim() != 2 || x.ndim() < 1 || x.shape().back() != weight.dim(0)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  const std::size_t in = weight.dim(0), out = weight.dim(1);
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out)) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Tensor<T> y(out_shape);
  T* py = y.data().data();
  if (bias.defined()) {
    const T* pb = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(pb, pb + out, py + r * out);
  }
  detail::gemm(false, false, rows, out, in, x.data().data(), weight.data().data(), py,
               bias.defined());
  if (auto* tape = detail::recording_tape<T>(x, weight, bias)) {
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    tape->record(std::move(inputs), y, [x, weight, bias, y, rows, in, out]() mutable {
      auto dy = y.grad();
      if (detail::wants_grad(x)) {
        detail::gemm(false, true, rows, in, out, dy.data(), weight.data().data(),
                     x.mutable_grad().data(), true);
      }
      if (detail::wants_grad(weight)) {
        detail::gemm(true, false, in, out, rows, x.data().data(), dy.data(),
                     weight.mutable_grad().data(), true);
      }
      if (detail::wants_grad(bias)) {
        auto gb = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < out; ++j) gb[j] += dy[r * out + j];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_defined(a, "add");
  detail::require_defined(b, "add");
  detail::require_same_shape(a, b, "add");
  Tensor<T> y(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto py = y.data();
  for (std::size_t i = 0; i < py.size(); ++i) py[i] = pa[i] + pb[i];
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    tape->record({a, b}, y, [a, b, y]() mutable {
      auto dy = y.grad();
      detail::accumulate(a, dy);
      detail::accumulate(b, dy);
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_defined(a, "mul");
  detail::require_defined(b, "mul");
  detail::require_same_shape(a, b, "mul");
  Tensor<T> y(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto py = y.data();
  for (std::size_t i = 0; i < py.size(); ++i) py[i] = pa[i] * pb[i];
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    tape->record({a, b}, y, [a, b, y]() mutable {
      auto dy = y.grad();
      if (detail::wants_grad(a)) {
        auto ga = a.mutable_grad();
        auto pb = b.data();
        for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * pb[i];
      }
      if (detail::wants_grad(b)) {
        auto gb = b.mutable_grad();
        auto pa = a.data();
        for (std::size_t i = 0; i < dy.size(); ++i) gb[i] += dy[i] * pa[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  detail::require_defined(x, "scale");
  Tensor<T> y(x.shape());
  auto px = x.data();
  auto py = y.data();
  for (std::size_t i = 0; i < py.size(); ++i) py[i] = px[i] * factor;
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y, factor]() mutable {
      auto dy = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i] * factor;
    });
  }
  return y;
}

/// Multiplies every slice x[b, ...] by factors[b]. The factors are constants
/// (drop-path keep masks), so only x receives a gradient.
template <typename T>
Tensor<T> scale_samples(const Tensor<T>& x, std::span<const T> factors) {
  detail::require_defined(x, "scale_samples");
  if (x.ndim() < 1 || factors.size() != x.dim(0)) {
    throw DimensionError("scale_samples: " + std::to_string(factors.size()) +
                         " factors for shape " + to_string(x.shape()));
  }
  const std::size_t per = x.numel() / x.dim(0);
  std::vector<T> f(factors.begin(), factors.end());
  Tensor<T> y(x.shape());
  auto px = x.data();
  auto py = y.data();
  for (std::size_t b = 0; b < f.size(); ++b)
    for (std::size_t i = 0; i < per; ++i) py[b * per + i] = px[b * per + i] * f[b];
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y, f, per]() mutable {
      auto dy = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t b = 0; b < f.size(); ++b)
        for (std::size_t i = 0; i < per; ++i) gx[b * per + i] += dy[b * per + i] * f[b];
    });
  }
  return y;
}

/// Gaussian error linear unit, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  detail::require_defined(x, "gelu");
  static constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kBeta = T(0.044715);
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using CMap = Eigen::Map<const Arr>;
  // Eigen's packet tanh is vectorised; scalar std::tanh is far slower.
  auto inner = [](const CMap& v) { return (kAlpha * (v + kBeta * v.cube())).tanh(); };
  Tensor<T> y(x.shape());
  const auto n = static_cast<Eigen::Index>(x.numel());
  const CMap vx(x.data().data(), n);
  Eigen::Map<Arr>(y.data().data(), n) = T(0.5) * vx * (T(1) + inner(vx));
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y, n, inner]() mutable {
      const CMap v(x.data().data(), n);
      const CMap dy(y.grad().data(), n);
      Eigen::Map<Arr> gx(x.mutable_grad().data(), n);
      const Arr t = inner(v);
      const Arr dt = (T(1) - t.square()) * kAlpha * (T(1) + T(3) * kBeta * v.square());
      gx += dy * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
    });
  }
  return y;
}

/// Softmax along `axis`, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, long axis = -1) {
  detail::require_defined(x, "softmax");
  const std::size_t ax = detail::normalize_axis(axis, x.ndim(), "softmax");
  const auto s = detail::split_at(x.shape(), ax);
  Tensor<T> y(x.shape());
  auto px = x.data();
  auto py = y.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = px[base];
      for (std::size_t j = 1; j < s.len; ++j) mx = std::max(mx, px[base + j * s.inner]);
      T total = 0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const T e = std::exp(px[base + j * s.inner] - mx);
        py[base + j * s.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < s.len; ++j) py[base + j * s.inner] *= inv;
    }
  }
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y, s]() mutable {
      auto dy = y.grad();
      auto py = y.data();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.len * s.inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < s.len; ++j) {
            const std::size_t idx = base + j * s.inner;
            dot += dy[idx] * py[idx];
          }
          for (std::size_t j = 0; j < s.len; ++j) {
            const std::size_t idx = base + j * s.inner;
            gx[idx] += py[idx] * (dy[idx] - dot);
          }
        }
      }
    });
  }
  return y;
}

/// Normalises each slice along `axis` to zero mean and unit (biased)
/// variance, then applies the optional per-position scale and bias, which
/// have shape [x.shape[axis]].
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, long axis, T eps, const Tensor<T>& gamma = {},
                    const Tensor<T>& beta = {}) {
  detail::require_defined(x, "layernorm");
  if (!(eps > T(0))) throw ContractError("layernorm: eps must be positive");
  const std::size_t ax = detail::normalize_axis(axis, x.ndim(), "layernorm");
  const auto s = detail::split_at(x.shape(), ax);
  for (const auto* p : {&gamma, &beta}) {
    if (p->defined() && (p->ndim() != 1 || p->dim(0) != s.len)) {
      throw DimensionError("layernorm: affine parameter " + to_string(p->shape()) +
                           " does not match normalised length " + std::to_string(s.len));
    }
  }
  const std::size_t slices = s.outer * s.inner;
  Tensor<T> y(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(slices);
  auto px = x.data();
  auto py = y.data();
  const T* pg = gamma.defined() ? gamma.data().data() : nullptr;
  const T* pbeta = beta.defined() ? beta.data().data() : nullptr;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mean = 0;
      for (std::size_t j = 0; j < s.len; ++j) mean += px[base + j * s.inner];
      mean /= T(s.len);
      T var = 0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const T d = px[base + j * s.inner] - mean;
        var += d * d;
      }
      var /= T(s.len);
      const T r = T(1) / std::sqrt(var + eps);
      rstd[o * s.inner + in] = r;
      for (std::size_t j = 0; j < s.len; ++j) {
        const std::size_t idx = base + j * s.inner;
        const T h = (px[idx] - mean) * r;
        xhat[idx] = h;
        T v = h;
        if (pg) v *= pg[j];
        if (pbeta) v += pbeta[j];
        py[idx] = v;
      }
    }
  }
  if (auto* tape = detail::recording_tape<T>(x, gamma, beta)) {
    std::vector<Tensor<T>> inputs{x};
    if (gamma.defined()) inputs.push_back(gamma);
    if (beta.defined()) inputs.push_back(beta);
    tape->record(std::move(inputs), y,
                 [x, gamma, beta, y, s, xhat = std::move(xhat), rstd = std::move(rstd)]() mutable {
                   auto dy = y.grad();
                   const T* pg = gamma.defined() ? gamma.data().data() : nullptr;
                   T* gg = detail::wants_grad(gamma) ? gamma.mutable_grad().data() : nullptr;
                   T* gb = detail::wants_grad(beta) ? beta.mutable_grad().data() : nullptr;
                   T* gx = detail::wants_grad(x) ? x.mutable_grad().data() : nullptr;
                   const T n = T(s.len);
                   for (std::size_t o = 0; o < s.outer; ++o) {
                     for (std::size_t in = 0; in < s.inner; ++in) {
                       const std::size_t base = o * s.len * s.inner + in;
                       T sum_d = 0, sum_dh = 0;
                       for (std::size_t j = 0; j < s.len; ++j) {
                         const std::size_t idx = base + j * s.inner;
                         const T d = pg ? dy[idx] * pg[j] : dy[idx];
                         sum_d += d;
                         sum_dh += d * xhat[idx];
                         if (gg) gg[j] += dy[idx] * xhat[idx];
                         if (gb) gb[j] += dy[idx];
                       }
                       if (!gx) continue;
                       const T r = rstd[o * s.inner + in];
                       for (std::size_t j = 0; j < s.len; ++j) {
                         const std::size_t idx = base + j * s.inner;
                         const T d = pg ? dy[idx] * pg[j] : dy[idx];
                         gx[idx] += r / n * (n * d - sum_d - xhat[idx] * sum_dh);
                       }
                     }
                   }
                 });
  }
  return y;
}

/// Rows of x [n x d] at idx, in idx order. Backward scatters into the
/// source rows.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx) {
  detail::require_defined(x, "gather_rows");
  if (x.ndim() != 2) throw DimensionError("gather_rows: expected [n x d], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (idx.empty()) throw IndexError("gather_rows: empty index list");
  for (auto i : idx) {
    if (i >= n) {
      throw IndexError("gather_rows: index " + std::to_string(i) + " out of range for " +
                       std::to_string(n) + " rows");
    }
  }
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  Tensor<T> y({rows.size(), d});
  auto px = x.data();
  auto py = y.data();
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(px.begin() + rows[r] * d, d, py.begin() + r * d);
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y, rows, d]() mutable {
      auto dy = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) gx[rows[r] * d + j] += dy[r * d + j];
    });
  }
  return y;
}

/// Batched gather: x [B x n x d], one index list per batch item, all of the
/// same length. Output [B x k x d].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& idx) {
  detail::require_defined(x, "gather_rows");
  if (x.ndim() != 3) throw DimensionError("gather_rows: expected [B x n x d], got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (idx.size() != batch) {
    throw DimensionError("gather_rows: " + std::to_string(idx.size()) + " index lists for batch of " +
                         std::to_string(batch));
  }
  const std::size_t k = idx.empty() ? 0 : idx[0].size();
  if (k == 0) throw IndexError("gather_rows: empty index list");
  for (const auto& list : idx) {
    if (list.size() != k) throw DimensionError("gather_rows: ragged index lists");
    for (auto i : list) {
      if (i >= n) {
        throw IndexError("gather_rows: index " + std::to_string(i) + " out of range for " +
                         std::to_string(n) + " rows");
      }
    }
  }
  Tensor<T> y({batch, k, d});
  auto px = x.data();
  auto py = y.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < k; ++r)
      std::copy_n(px.begin() + (b * n + idx[b][r]) * d, d, py.begin() + (b * k + r) * d);
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y, idx, n, k, d]() mutable {
      auto dy = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t b = 0; b < idx.size(); ++b)
        for (std::size_t r = 0; r < k; ++r)
          for (std::size_t j = 0; j < d; ++j) gx[(b * n + idx[b][r]) * d + j] += dy[(b * k + r) * d + j];
    });
  }
  return y;
}

/// Same index list for every batch item of x [B x n x d].
template <typename T>
Tensor<T> gather_rows_shared(const Tensor<T>& x, std::span<const std::size_t> idx) {
  detail::require_defined(x, "gather_rows");
  if (x.ndim() != 3) throw DimensionError("gather_rows: expected [B x n x d], got " + to_string(x.shape()));
  std::vector<std::vector<std::size_t>> lists(x.dim(0), std::vector<std::size_t>(idx.begin(), idx.end()));
  return gather_rows(x, lists);
}

/// [B x n x D] with `token` [D] prepended to every item -> [B x (n+1) x D].
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
  detail::require_defined(x, "prepend_token");
  detail::require_defined(token, "prepend_token");
  if (x.ndim() != 3 || token.ndim() != 1 || token.dim(0) != x.dim(2)) {
    throw DimensionError("prepend_token: token " + to_string(token.shape()) + " vs tokens " +
                         to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  Tensor<T> y({batch, n + 1, d});
  auto px = x.data();
  auto pt = token.data();
  auto py = y.data();
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(pt.begin(), pt.end(), py.begin() + b * (n + 1) * d);
    std::copy_n(px.begin() + b * n * d, n * d, py.begin() + (b * (n + 1) + 1) * d);
  }
  if (auto* tape = detail::recording_tape<T>(x, token)) {
    tape->record({x, token}, y, [x, token, y, batch, n, d]() mutable {
      auto dy = y.grad();
      if (detail::wants_grad(token)) {
        auto gt = token.mutable_grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t j = 0; j < d; ++j) gt[j] += dy[b * (n + 1) * d + j];
      }
      if (detail::wants_grad(x)) {
        auto gx = x.mutable_grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < n * d; ++i) gx[b * n * d + i] += dy[(b * (n + 1) + 1) * d + i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require_defined(x, "reshape");
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor<T> y = Tensor<T>::from(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y]() mutable { detail::accumulate(x, y.grad()); });
  }
  return y;
}

/// Output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  detail::require_defined(x, "permute");
  const std::size_t nd = x.ndim();
  if (perm.size() != nd) throw ContractError("permute: permutation rank mismatch");
  std::vector<bool> seen(nd, false);
  for (auto p : perm) {
    if (p >= nd || seen[p]) throw ContractError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  // Stride in the input for a unit step along each output axis.
  std::vector<std::size_t> step(nd);
  for (std::size_t i = 0; i < nd; ++i) step[i] = in_strides[perm[i]];

  Tensor<T> y(out_shape);
  std::vector<std::size_t> src_of(y.numel());
  {
    std::vector<std::size_t> counter(nd, 0);
    std::size_t src = 0;
    for (std::size_t dst = 0; dst < src_of.size(); ++dst) {
      src_of[dst] = src;
      for (std::size_t ax = nd; ax-- > 0;) {
        ++counter[ax];
        src += step[ax];
        if (counter[ax] < out_shape[ax]) break;
        src -= step[ax] * out_shape[ax];
        counter[ax] = 0;
      }
    }
  }
  auto px = x.data();
  auto py = y.data();
  for (std::size_t i = 0; i < py.size(); ++i) py[i] = px[src_of[i]];
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y, src_of = std::move(src_of)]() mutable {
      auto dy = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) gx[src_of[i]] += dy[i];
    });
  }
  return y;
}

/// x[index] along the leading axis.
template <typename T>
Tensor<T> select(const Tensor<T>& x, std::size_t index) {
  detail::require_defined(x, "select");
  if (x.ndim() < 2) throw DimensionError("select: need rank >= 2, got " + to_string(x.shape()));
  if (index >= x.dim(0)) {
    throw IndexError("select: index " + std::to_string(index) + " out of range for " +
                     to_string(x.shape()));
  }
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t per = numel(out_shape);
  Tensor<T> y = Tensor<T>::from(
      out_shape, std::vector<T>(x.data().begin() + index * per, x.data().begin() + (index + 1) * per));
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y, index, per]() mutable {
      auto dy = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < per; ++i) gx[index * per + i] += dy[i];
    });
  }
  return y;
}

/// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("stack: no inputs");
  for (const auto& p : parts) {
    detail::require_defined(p, "stack");
    detail::require_same_shape(parts[0], p, "stack");
  }
  Shape out_shape{parts.size()};
  out_shape.insert(out_shape.end(), parts[0].shape().begin(), parts[0].shape().end());
  const std::size_t per = parts[0].numel();
  Tensor<T> y(out_shape);
  auto py = y.data();
  for (std::size_t i = 0; i < parts.size(); ++i)
    std::copy(parts[i].data().begin(), parts[i].data().end(), py.begin() + i * per);
  bool any = false;
  for (const auto& p : parts) any = any || detail::wants_grad(p);
  Tape<T>* tape = Tape<T>::active();
  if (tape && any) {
    tape->record(parts, y, [parts, y, per]() mutable {
      auto dy = y.grad();
      for (std::size_t i = 0; i < parts.size(); ++i)
        detail::accumulate(parts[i], dy.subspan(i * per, per));
    });
  }
  return y;
}

/// Sum of all elements, as a scalar tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  detail::require_defined(x, "sum");
  T total = 0;
  for (auto v : x.data()) total += v;
  Tensor<T> y = Tensor<T>::scalar(total);
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y]() mutable {
      const T g = y.grad()[0];
      auto gx = x.mutable_grad();
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

/// Mean along one axis; the axis is removed from the shape.
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, long axis) {
  detail::require_defined(x, "mean_axis");
  const std::size_t ax = detail::normalize_axis(axis, x.ndim(), "mean_axis");
  const auto s = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  Tensor<T> y(out_shape);
  auto px = x.data();
  auto py = y.data();
  const T inv = T(1) / T(s.len);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.len; ++j)
      for (std::size_t in = 0; in < s.inner; ++in)
        py[o * s.inner + in] += px[(o * s.len + j) * s.inner + in] * inv;
  if (auto* tape = detail::recording_tape<T>(x)) {
    tape->record({x}, y, [x, y, s, inv]() mutable {
      auto dy = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.len; ++j)
          for (std::size_t in = 0; in < s.inner; ++in)
            gx[(o * s.len + j) * s.inner + in] += dy[o * s.inner + in] * inv;
    });
  }
  return y;
}

/// Elementwise smooth-L1 value for a difference d.
template <typename T>
constexpr T smooth_l1_value(T d) {
  const T a = d < T(0) ? -d : d;
  return a <= T(1) ? T(0.5) * d * d : a - T(0.5);
}

/// d/dd of smooth_l1_value.
template <typename T>
constexpr T smooth_l1_slope(T d) {
  if (d > T(1)) return T(1);
  if (d < T(-1)) return T(-1);
  return d;
}

/// Mean smooth-L1 between pred and target. The target is a constant: it
/// never receives a gradient.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_defined(pred, "smooth_l1");
  detail::require_defined(target, "smooth_l1");
  if (pred.shape() != target.shape()) {
    throw ContractError("smooth_l1: prediction " + to_string(pred.shape()) + " vs target " +
                        to_string(target.shape()));
  }
  auto pp = pred.data();
  auto pt = target.data();
  T total = 0;
  for (std::size_t i = 0; i < pp.size(); ++i) total += smooth_l1_value(pp[i] - pt[i]);
  const T inv = T(1) / T(pp.size());
  Tensor<T> y = Tensor<T>::scalar(total * inv);
  if (auto* tape = detail::recording_tape<T>(pred)) {
    Tensor<T> fixed = target;
    tape->record({pred}, y, [pred, fixed, y, inv]() mutable {
      const T g = y.grad()[0] * inv;
      auto gp = pred.mutable_grad();
      auto pp = pred.data();
      auto pt = fixed.data();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * smooth_l1_slope(pp[i] - pt[i]);
    });
  }
  return y;
}

/// Mean cross-entropy of logits [B x C] against class ids.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_defined(logits, "cross_entropy");
  if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw IndexError("cross_entropy: label " + std::to_string(l) + " out of range");
    }
  }
  std::vector<T> probs(logits.numel());
  auto pl = logits.data();
  T total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = pl.data() + b * classes;
    T mx = *std::max_element(row, row + classes);
    T z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - lse);
    total += lse - row[labels[b]];
  }
  Tensor<T> y = Tensor<T>::scalar(total / T(batch));
  if (auto* tape = detail::recording_tape<T>(logits)) {
    std::vector<int> lab(labels.begin(), labels.end());
    tape->record({logits}, y, [logits, y, probs = std::move(probs), lab, batch, classes]() mutable {
      const T g = y.grad()[0] / T(batch);
      auto gl = logits.mutable_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < classes; ++c) {
          const T target = static_cast<std::size_t>(lab[b]) == c ? T(1) : T(0);
          gl[b * classes + c] += g * (probs[b * classes + c] - target);
        }
      }
    });
  }
  return y;
}

}  // namespace maskalign
