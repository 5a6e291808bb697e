// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "genq/common/error.hpp"

namespace genq::io {

/// Appends fixed-width little-endian values to a byte buffer.
class ByteWriter {
 public:
  void magic(std::string_view tag) { bytes_.append(tag); }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    const U raw = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bytes_.push_back(static_cast<char>((raw >> (8 * i)) & 0xffU));
    }
  }

  template <typename T>
  void put_all(std::span<const T> values) {
    for (const T& v : values) {
      put(v);
    }
  }

  void raw(std::string_view data) { bytes_.append(data); }

  [[nodiscard]] const std::string& bytes() const noexcept { return bytes_; }
  [[nodiscard]] std::string take() noexcept { return std::move(bytes_); }

 private:
  std::string bytes_;
};

/// Bounds-checked little-endian reader; every overrun is a FormatError.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data, std::string_view what = "file")
      : data_(data), what_(what) {}

  void expect_magic(std::string_view tag) {
    if (take(tag.size()) != tag) {
      throw FormatError(std::string(what_) + ": bad magic, expected '" + std::string(tag) + "'");
    }
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    const std::string_view chunk = take(sizeof(T));
    U raw = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      raw |= static_cast<U>(static_cast<std::uint8_t>(chunk[i])) << (8 * i);
    }
    return std::bit_cast<T>(raw);
  }

  template <typename T>
  std::vector<T> get_array(std::size_t count) {
    if (count > remaining() / sizeof(T)) {
      throw FormatError(std::string(what_) + ": truncated payload");
    }
    std::vector<T> out(count);
    for (auto& v : out) {
      v = get<T>();
    }
    return out;
  }

  std::string_view take(std::size_t n) {
    if (n > remaining()) {
      throw FormatError(std::string(what_) + ": truncated at offset " + std::to_string(pos_));
    }
    const std::string_view chunk = data_.substr(pos_, n);
    pos_ += n;
    return chunk;
  }

  [[nodiscard]] bool at_end() const noexcept { return pos_ == data_.size(); }
  [[nodiscard]] std::size_t remaining() const noexcept { return data_.size() - pos_; }
  [[nodiscard]] std::size_t position() const noexcept { return pos_; }
  [[nodiscard]] std::string_view peek(std::size_t n) const noexcept { return data_.substr(pos_, n); }

 private:
  std::string_view data_;
  std::string_view what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

/// FNV-1a over a byte string; used for model fingerprints in reports.
std::uint64_t fnv1a(std::string_view bytes) noexcept;

}  // namespace genq::io
