// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vaguide/error.hpp"

namespace vaguide::io {

// Little-endian byte buffer writer.
class ByteWriter {
 public:
  void bytes(std::span<const std::byte> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str(std::string_view s) { bytes(std::as_bytes(std::span(s.data(), s.size()))); }
  void u16(std::uint16_t v) { uint_le(v, 2); }
  void u32(std::uint32_t v) { uint_le(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> v) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(std::as_bytes(v));
    } else {
      for (float x : v) f32(x);
    }
  }

  std::size_t size() const { return buf_.size(); }
  const std::vector<std::byte> &data() const { return buf_; }
  std::span<const std::byte> tail(std::size_t from) const { return std::span(buf_).subspan(from); }

 private:
  void uint_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFFU));
  }
  std::vector<std::byte> buf_;
};

// Bounds-checked little-endian reader; overruns raise ErrorCode::truncated.
class ByteReader {
 public:
  ByteReader(std::span<const std::byte> data, std::string context) : data_(data), context_(std::move(context)) {}

  std::span<const std::byte> bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(std::size_t n) {
    auto b = bytes(n);
    return std::string(reinterpret_cast<const char *>(b.data()), n);
  }
  std::uint16_t u16() { return static_cast<std::uint16_t>(uint_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint_le(4)); }
  float f32() { return std::bit_cast<float>(u32()); }
  void f32s(std::span<float> out) {
    auto b = bytes(out.size() * sizeof(float));
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), b.data(), b.size());
    } else {
      for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t v = 0;
        for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(b[4 * i + k]) << (8 * k);
        out[i] = std::bit_cast<float>(v);
      }
    }
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  const std::string &context() const { return context_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining())
      fail(ErrorCode::truncated, context_ + ": truncated payload (need " + std::to_string(n) + " bytes at offset " +
                                     std::to_string(pos_) + ", have " + std::to_string(remaining()) + ")");
  }
  std::uint64_t uint_le(int n) {
    auto b = bytes(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
  std::string context_;
};

std::vector<std::byte> read_file(const std::filesystem::path &path);
void write_file(const std::filesystem::path &path, std::span<const std::byte> data);

}  // namespace vaguide::io
