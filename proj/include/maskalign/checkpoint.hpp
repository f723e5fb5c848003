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

// Named-tensor checkpoint file.
//
// Layout, all integers little-endian:
//
//   "MALN"            4 bytes magic
//   u32 version       currently 1
//   u32 tensor_count
//   per tensor:
//     u16 name_len, name bytes (UTF-8)
//     u8  ndim, ndim x u32 dims
//     prod(dims) x f32 (IEEE-754 bits, little-endian)

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "maskalign/error.hpp"

namespace maskalign {

inline constexpr char kCheckpointMagic[4] = {'M', 'A', 'L', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<NamedArray> tensors;

  void add(std::string name, std::vector<std::uint32_t> shape, std::vector<float> data) {
    if (find(name)) throw ContractError("checkpoint already holds a tensor named '" + name + "'");
    NamedArray a{std::move(name), std::move(shape), std::move(data)};
    if (a.numel() != a.data.size()) {
      throw DimensionError("checkpoint tensor '" + a.name + "' data does not match its shape");
    }
    tensors.push_back(std::move(a));
  }

  const NamedArray* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  const NamedArray& at(std::string_view name) const {
    if (const auto* t = find(name)) return *t;
    throw FormatError("checkpoint has no tensor named '" + std::string(name) + "'");
  }

  /// Bit-level equality (NaN payloads included).
  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    if (a.version != b.version || a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
      const auto& x = a.tensors[i];
      const auto& y = b.tensors[i];
      if (x.name != y.name || x.shape != y.shape || x.data.size() != y.data.size()) return false;
      if (!x.data.empty() && std::memcmp(x.data.data(), y.data.data(), x.data.size() * sizeof(float)) != 0) {
        return false;
      }
    }
    return true;
  }
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>((v >> s) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CorruptionError(std::string("checkpoint truncated while reading ") + what);
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return take(1, what)[0]; }
  std::uint16_t u16(const char* what) {
    auto s = take(2, what);
    return static_cast<std::uint16_t>(s[0] | (s[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    return static_cast<std::uint32_t>(s[0]) | (static_cast<std::uint32_t>(s[1]) << 8) |
           (static_cast<std::uint32_t>(s[2]) << 16) | (static_cast<std::uint32_t>(s[3]) << 24);
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, ckpt.version);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xffff) throw ContractError("tensor name too long: " + t.name.substr(0, 32) + "...");
    if (t.shape.size() > 0xff) throw ContractError("tensor '" + t.name + "' has too many dimensions");
    if (t.numel() != t.data.size()) throw DimensionError("tensor '" + t.name + "' data does not match its shape");
    detail::put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_u32(out, d);
    for (float v : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  in.take(4, "magic");
  Checkpoint ckpt;
  ckpt.version = in.u32("version");
  if (ckpt.version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  const std::uint32_t count = in.u32("tensor count");
  std::unordered_set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray t;
    const std::uint16_t len = in.u16("name length");
    auto name = in.take(len, "name");
    t.name.assign(name.begin(), name.end());
    if (!names.insert(t.name).second) throw CorruptionError("duplicate tensor name '" + t.name + "'");
    const std::uint8_t ndim = in.u8("rank");
    std::uint64_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const std::uint32_t dim = in.u32("dims");
      if (dim == 0) throw CorruptionError("tensor '" + t.name + "' has a zero dimension");
      t.shape.push_back(dim);
      n *= dim;
    }
    if (n * 4 > in.remaining()) {
      throw CorruptionError("checkpoint truncated inside tensor '" + t.name + "'");
    }
    auto raw = in.take(static_cast<std::size_t>(n) * 4, "tensor data");
    t.data.resize(static_cast<std::size_t>(n));
    for (std::size_t k = 0; k < t.data.size(); ++k) {
      const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * k]) |
                                 (static_cast<std::uint32_t>(raw[4 * k + 1]) << 8) |
                                 (static_cast<std::uint32_t>(raw[4 * k + 2]) << 16) |
                                 (static_cast<std::uint32_t>(raw[4 * k + 3]) << 24);
      t.data[k] = std::bit_cast<float>(bits);
    }
    ckpt.tensors.push_back(std::move(t));
  }
  if (in.remaining() != 0) throw CorruptionError("trailing bytes after last tensor");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  } catch (const CorruptionError& e) {
    throw CorruptionError(path + ": " + e.what());
  } catch (const VersionError& e) {
    throw VersionError(path + ": " + e.what());
  }
}

/// Hash of the encoded bytes; equal checkpoints hash equal.
inline std::size_t checkpoint_hash(const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  return std::hash<std::string_view>{}(
      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace maskalign
