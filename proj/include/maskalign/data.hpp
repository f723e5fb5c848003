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

// CIFAR-10 binary batches and the crop/flip augmentation.
//
// A record is 3073 bytes: one label byte followed by 3 x 32 x 32 pixel
// bytes (R plane, G plane, B plane, each row-major). Pixels are scaled to
// [0, 1] and normalised with mean 0.5 and std 0.5, i.e. v = b / 127.5 - 1.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "maskalign/checkpoint.hpp"
#include "maskalign/error.hpp"

namespace maskalign {

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarChannels = 3;
inline constexpr std::size_t kCifarPixels = kCifarChannels * kCifarSide * kCifarSide;  // 3072
inline constexpr std::size_t kCifarRecord = kCifarPixels + 1;                           // 3073
inline constexpr std::size_t kCifarClasses = 10;

inline float normalize_pixel(std::uint8_t b) { return (static_cast<float>(b) / 255.0f - 0.5f) / 0.5f; }

/// Images stored contiguously as [count x 3 x 32 x 32].
struct Dataset {
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const float> image(std::size_t i) const { return {images.data() + i * kCifarPixels, kCifarPixels}; }

  /// First n items (or all of them when n >= size()).
  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    Dataset d;
    d.images.assign(images.begin(), images.begin() + static_cast<long>(n * kCifarPixels));
    d.labels.assign(labels.begin(), labels.begin() + static_cast<long>(n));
    return d;
  }

  void append(const Dataset& other) {
    images.insert(images.end(), other.images.begin(), other.images.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }
};

/// A batch as consumed by the training loops.
struct ImageBatch {
  std::vector<float> images;  // [B x C x H x W]
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

inline Dataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() % kCifarRecord != 0) {
    throw FormatError(origin + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                      std::to_string(kCifarRecord));
  }
  const std::size_t count = bytes.size() / kCifarRecord;
  Dataset d;
  d.images.resize(count * kCifarPixels);
  d.labels.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= kCifarClasses) {
      throw FormatError(origin + ": record " + std::to_string(r) + " has label " + std::to_string(rec[0]));
    }
    d.labels[r] = rec[0];
    float* dst = d.images.data() + r * kCifarPixels;
    for (std::size_t i = 0; i < kCifarPixels; ++i) dst[i] = normalize_pixel(rec[1 + i]);
  }
  return d;
}

inline Dataset load_cifar10_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing CIFAR-10 batch file '" + path + "'");
  return parse_cifar10(read_file_bytes(path), path);
}

struct CifarSplits {
  Dataset train;
  Dataset test;
};

/// Reads data_batch_1..5.bin and test_batch.bin from `dir`.
inline CifarSplits load_cifar10(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("CIFAR-10 directory '" + dir + "' does not exist");
  CifarSplits s;
  for (int i = 1; i <= 5; ++i) {
    s.train.append(load_cifar10_file((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string()));
  }
  s.test = load_cifar10_file((fs::path(dir) / "test_batch.bin").string());
  return s;
}

/// Writes records in the same binary layout; pixel values are quantised back
/// to bytes. Used for fixtures and synthetic stand-in data.
inline void write_cifar10_file(const std::string& path, std::span<const std::uint8_t> labels,
                               std::span<const std::uint8_t> pixels) {
  if (pixels.size() != labels.size() * kCifarPixels) throw DimensionError("write_cifar10_file: size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out.put(static_cast<char>(labels[r]));
    out.write(reinterpret_cast<const char*>(pixels.data() + r * kCifarPixels),
              static_cast<std::streamsize>(kCifarPixels));
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

/// One draw of the augmentation: crop origin inside the 40 x 40 padded
/// image, and whether to mirror horizontally.
struct AugmentParams {
  std::size_t offset_y = 4;
  std::size_t offset_x = 4;
  bool flip = false;
};

inline constexpr std::size_t kAugmentPad = 4;

inline AugmentParams sample_augment(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> offset(0, 2 * kAugmentPad);
  std::bernoulli_distribution coin(0.5);
  AugmentParams p;
  p.offset_y = offset(rng);
  p.offset_x = offset(rng);
  p.flip = coin(rng);
  return p;
}

/// Reflect-pads by 4, crops 32 x 32 at the given offset, then optionally
/// mirrors. Offset (4, 4) without flip is the identity.
inline std::vector<float> augment_with(std::span<const float> image, const AugmentParams& p) {
  if (image.size() != kCifarPixels) throw DimensionError("augment: expected a 3 x 32 x 32 image");
  if (p.offset_y > 2 * kAugmentPad || p.offset_x > 2 * kAugmentPad) {
    throw ContractError("augment: crop offset outside the padded image");
  }
  const long n = static_cast<long>(kCifarSide);
  auto reflect = [n](long i) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  std::vector<float> out(kCifarPixels);
  for (std::size_t c = 0; c < kCifarChannels; ++c)
    for (long y = 0; y < n; ++y)
      for (long x = 0; x < n; ++x) {
        const long sy = reflect(y + static_cast<long>(p.offset_y) - static_cast<long>(kAugmentPad));
        const long cx = p.flip ? n - 1 - x : x;
        const long sx = reflect(cx + static_cast<long>(p.offset_x) - static_cast<long>(kAugmentPad));
        out[(c * kCifarSide + static_cast<std::size_t>(y)) * kCifarSide + static_cast<std::size_t>(x)] =
            image[(c * kCifarSide + static_cast<std::size_t>(sy)) * kCifarSide + static_cast<std::size_t>(sx)];
      }
  return out;
}

inline std::vector<float> augment(std::span<const float> image, std::mt19937_64& rng) {
  return augment_with(image, sample_augment(rng));
}

/// Gathers items `order[begin, begin+count)` into a batch, augmenting each
/// when `rng` is given.
inline ImageBatch make_batch(const Dataset& data, std::span<const std::size_t> order, std::mt19937_64* rng) {
  ImageBatch b;
  b.images.reserve(order.size() * kCifarPixels);
  for (auto i : order) {
    if (rng) {
      auto img = augment(data.image(i), *rng);
      b.images.insert(b.images.end(), img.begin(), img.end());
    } else {
      auto img = data.image(i);
      b.images.insert(b.images.end(), img.begin(), img.end());
    }
    b.labels.push_back(data.labels[i]);
  }
  return b;
}

}  // namespace maskalign
