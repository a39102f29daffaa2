#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "agglom3d/errors.hpp"

namespace agglom3d::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

// Append-only little-endian byte sink.
class ByteWriter {
 public:
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_span(std::span<const T> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    bytes_.insert(bytes_.end(), p, p + values.size_bytes());
  }

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked reader. Every failure reports the byte offset it stopped at.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  void expect_magic(std::string_view m) {
    require(m.size(), "magic");
    if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0) {
      throw FormatError("bad magic, expected '" + std::string(m) + "'", pos_);
    }
    pos_ += m.size();
  }

  void expect_version(std::uint32_t version) {
    const std::size_t at = pos_;
    const auto v = get<std::uint32_t>();
    if (v != version) {
      throw FormatError("unsupported version " + std::to_string(v) + ", expected " +
                            std::to_string(version),
                        at);
    }
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    require(sizeof(T), "scalar");
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  std::vector<T> get_vector(std::size_t count) {
    require(count * sizeof(T), "array");
    std::vector<T> out(count);
    std::memcpy(out.data(), data_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
    return out;
  }

  std::size_t offset() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }

  void expect_end() const {
    if (!at_end()) {
      throw FormatError("trailing bytes: file has " + std::to_string(data_.size()) +
                            " bytes, expected " + std::to_string(pos_),
                        pos_);
    }
  }

 private:
  void require(std::size_t n, const char* what) const {
    if (pos_ + n > data_.size()) {
      throw FormatError(std::string("truncated ") + what + ": expected length " +
                            std::to_string(pos_ + n) + " bytes, actual length " +
                            std::to_string(data_.size()),
                        pos_);
    }
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

// FNV-1a 64 content digest, rendered as 16 hex digits.
inline std::string digest(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kHex[h & 0xF];
  return out;
}

inline std::string digest_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return digest(bytes);
}

}  // namespace agglom3d::io
