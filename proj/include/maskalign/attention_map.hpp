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

// [CLS] attention maps of the last block, written as binary PGM (P5).

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "maskalign/error.hpp"
#include "maskalign/masking.hpp"
#include "maskalign/vit.hpp"

namespace maskalign {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

inline std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  if (img.pixels.size() != img.width * img.height) throw DimensionError("encode_pgm: pixel count mismatch");
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

/// Parses the subset written by encode_pgm (maxval 255, no comments).
inline GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    if (t.empty()) throw FormatError("PGM header truncated");
    return t;
  };
  if (token() != "P5") throw FormatError("not a binary PGM (P5) file");
  GrayImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw FormatError("PGM maxval must be 255");
  } catch (const std::logic_error&) {
    throw FormatError("malformed PGM header");
  }
  ++pos;  // the single whitespace byte before the raster
  if (bytes.size() < pos || bytes.size() - pos != img.width * img.height) {
    throw FormatError("PGM raster size does not match header");
  }
  img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.end());
  return img;
}

/// Linear scaling min -> 0, max -> 255 with rounding. A constant map has
/// no contrast and becomes all zeros; `degenerate` reports that case.
inline GrayImage scale_to_gray(std::span<const double> values, std::size_t width, std::size_t height,
                               bool* degenerate = nullptr) {
  if (values.size() != width * height) throw DimensionError("scale_to_gray: value count mismatch");
  GrayImage img{width, height, std::vector<std::uint8_t>(values.size(), 0)};
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const bool flat = values.empty() || !(*hi > *lo);
  if (degenerate) *degenerate = flat;
  if (flat) return img;
  for (std::size_t i = 0; i < values.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - *lo) / (*hi - *lo)));
  }
  return img;
}

struct AttentionMap {
  std::vector<double> scores;  // [CLS] -> patch attention, mean over heads
  GrayImage image;
  bool degenerate = false;
};

/// Eval forward on one intact image; returns the head-averaged [CLS]
/// attention of the last block on the patch grid.
inline AttentionMap attention_map(const ViT<float>& vit, std::span<const float> image) {
  Tape<float>::Paused no_record;
  const auto& cfg = vit.config;
  Tensor<float> patches = patchify_batch<float>(image, 1, cfg);
  auto out = encoder_forward(vit, embed_all(vit, patches), ForwardMode{}, 0.0);
  const auto& a = out.last_attention;
  Tensor<float> one = reshape(a, {a.dim(1), a.dim(2), a.dim(3)});
  AttentionMap m;
  m.scores = cls_attention_scores(one);
  m.image = scale_to_gray(m.scores, cfg.grid_w(), cfg.grid_h(), &m.degenerate);
  return m;
}

inline void write_pgm(const std::string& path, const GrayImage& img) {
  const auto bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_pgm(bytes);
}

}  // namespace maskalign
