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

// Dense row-major tensors and the reverse-mode differentiation tape.
//
// A Tensor is a cheap handle; copies alias the same storage. Operations in
// ops.hpp record onto the thread's active Tape (see Tape::Recording) whenever
// at least one input requires a gradient. Without an active tape nothing is
// recorded, which is how inference and frozen-teacher passes run.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "maskalign/error.hpp"

namespace maskalign {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
class Tape;

namespace detail {

inline constexpr std::size_t kNoRecord = std::numeric_limits<std::size_t>::max();

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::optional<std::vector<T>> grad;
  bool requires_grad = false;
  // Producer record on a tape, if any.
  std::uint64_t tape_id = 0;
  std::size_t record = kNoRecord;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  /// Null handle; most operations reject it. Exists so aggregates of
  /// parameters can be default-constructed.
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<detail::Storage<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimension must be positive, got " + to_string(shape));
    }
    impl_->data.assign(maskalign::numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (maskalign::numel(shape) != data.size()) {
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           to_string(shape));
    }
    Tensor t(std::move(shape), T(0), requires_grad);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }

  /// Turning gradients off also drops any existing grad buffer.
  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) impl_->grad.reset();
  }

  bool has_grad() const { return impl_->grad.has_value(); }

  std::span<const T> grad() const {
    if (!impl_->grad) throw ContractError("tensor has no gradient buffer");
    return *impl_->grad;
  }

  /// Gradient buffer, allocated as zeros on first use.
  std::span<T> mutable_grad() const {
    if (!impl_->requires_grad) throw ContractError("tensor does not require grad");
    if (!impl_->grad) impl_->grad.emplace(impl_->data.size(), T(0));
    return *impl_->grad;
  }

  void zero_grad() {
    if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), T(0));
  }
  void clear_grad() { impl_->grad.reset(); }

  bool on_tape() const { return impl_->record != detail::kNoRecord; }

  /// Same values in fresh storage, off the tape, no grad.
  Tensor detach() const { return from(shape(), impl_->data, false); }

  Tensor clone() const {
    Tensor t = from(shape(), impl_->data, impl_->requires_grad);
    return t;
  }

  template <typename U>
  Tensor<U> cast(bool requires_grad) const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>::from(shape(), std::move(out), requires_grad);
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape<T>;
  std::shared_ptr<detail::Storage<T>> impl_;
};

/// Ordered list of operation records. Records are appended in execution
/// order, so the list is topologically sorted by construction and a reverse
/// sweep visits each record exactly once.
template <typename T>
class Tape {
 public:
  struct Record {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ~Tape() {
    if (active_slot() == this) active_slot() = nullptr;
    clear();
  }

  /// Makes a tape the thread's recording target for the guard's lifetime.
  class Recording {
   public:
    explicit Recording(Tape& tape) : previous_(active_slot()) { active_slot() = &tape; }
    ~Recording() { active_slot() = previous_; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

  /// Suspends recording, e.g. for a frozen teacher pass inside a step.
  class Paused {
   public:
    Paused() : previous_(active_slot()) { active_slot() = nullptr; }
    ~Paused() { active_slot() = previous_; }
    Paused(const Paused&) = delete;
    Paused& operator=(const Paused&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active() { return active_slot(); }

  void record(std::vector<Tensor<T>> inputs, Tensor<T>& output, std::function<void()> backward) {
    for (const auto& in : inputs) {
      if (in.impl_->record != detail::kNoRecord &&
          (in.impl_->tape_id != id_ || in.impl_->record >= records_.size())) {
        throw ContractError("operation input was produced on a different tape");
      }
    }
    output.impl_->requires_grad = true;
    output.impl_->tape_id = id_;
    output.impl_->record = records_.size();
    records_.push_back(Record{std::move(inputs), output, std::move(backward)});
  }

  /// Seeds dLoss/dLoss = 1 and runs every reachable record's rule once, in
  /// reverse order. Leaf gradients accumulate (sum over paths and calls).
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("null")));
    }
    if (loss.impl_->tape_id != id_ || loss.impl_->record >= records_.size()) {
      throw ContractError("loss is not on this tape");
    }
    Tensor<T> seed = loss;
    auto g = seed.mutable_grad();
    g[0] += T(1);
    for (std::size_t i = loss.impl_->record + 1; i-- > 0;) {
      Record& r = records_[i];
      if (!r.output.has_grad()) continue;
      r.backward();
    }
  }

  std::size_t size() const { return records_.size(); }
  const Record& at(std::size_t i) const { return records_.at(i); }

  /// Drops all records (and the activations they keep alive).
  void clear() {
    for (auto& r : records_) {
      r.output.impl_->record = detail::kNoRecord;
      r.output.impl_->tape_id = 0;
    }
    records_.clear();
  }

 private:
  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }
  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  std::uint64_t id_;
  std::vector<Record> records_;
};

namespace detail {

/// The tape to record on, or null when no input needs a gradient.
template <typename T, typename... Ts>
Tape<T>* recording_tape(const Ts&... inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  bool any = ((inputs.defined() && inputs.requires_grad()) || ...);
  return any ? tape : nullptr;
}

template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

}  // namespace detail

}  // namespace maskalign
