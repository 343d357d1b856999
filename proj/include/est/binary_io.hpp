#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "est/errors.hpp"

namespace est::io {

// Little-endian append-only encoder.
class ByteWriter {
 public:
  void bytes(std::string_view raw) { buffer_.insert(buffer_.end(), raw.begin(), raw.end()); }

  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    buffer_.insert(buffer_.end(), raw, raw + sizeof(T));
  }

  template <typename T>
  void put_array(std::span<const T> values) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::endian::native == std::endian::little) {
      const auto* raw = reinterpret_cast<const unsigned char*>(values.data());
      buffer_.insert(buffer_.end(), raw, raw + values.size_bytes());
    } else {
      for (const T& v : values) put(v);
    }
  }

  std::vector<unsigned char>& buffer() noexcept { return buffer_; }

 private:
  std::vector<unsigned char> buffer_;
};

// Bounds-checked little-endian decoder. Every failure reports the offset at
// which the missing or invalid field starts.
class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> data) : data_(data) {}

  std::size_t offset() const noexcept { return offset_; }
  std::size_t remaining() const noexcept { return data_.size() - offset_; }

  void require(std::size_t count, const std::string& what) const {
    if (remaining() < count) {
      throw FormatError("truncated " + what + ": need " + std::to_string(count) + " bytes, have " +
                            std::to_string(remaining()),
                        offset_);
    }
  }

  std::string bytes(std::size_t count, const std::string& what) {
    require(count, what);
    std::string out(reinterpret_cast<const char*>(data_.data() + offset_), count);
    offset_ += count;
    return out;
  }

  template <typename T>
  T get(const std::string& what) {
    require(sizeof(T), what);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, data_.data() + offset_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    T value;
    std::memcpy(&value, raw, sizeof(T));
    offset_ += sizeof(T);
    return value;
  }

  template <typename T>
  void get_array(std::span<T> out, const std::string& what) {
    require(out.size_bytes(), what);
    std::memcpy(out.data(), data_.data() + offset_, out.size_bytes());
    if constexpr (std::endian::native == std::endian::big) {
      auto* raw = reinterpret_cast<unsigned char*>(out.data());
      for (std::size_t i = 0; i < out.size(); ++i) std::reverse(raw + i * sizeof(T), raw + (i + 1) * sizeof(T));
    }
    offset_ += out.size_bytes();
  }

 private:
  std::span<const unsigned char> data_;
  std::size_t offset_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes);

}  // namespace est::io
