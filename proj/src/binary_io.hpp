#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "convivit/errors.hpp"
#include "convivit/tensor.hpp"

namespace convivit {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading " + path.string());
  return bytes;
}

// Little-endian encoder.
class BinaryWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void floats(std::span<const float> values) {
    buf_.reserve(buf_.size() + values.size() * 4);
    for (float f : values) u32(std::bit_cast<std::uint32_t>(f));
  }
  void string(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

  void write_file(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("failed writing " + path.string());
  }

 private:
  std::vector<std::uint8_t> buf_;
};

// Little-endian decoder; every read names the section it expects so a
// truncated file reports what is missing.
class BinaryReader {
 public:
  BinaryReader(std::vector<std::uint8_t> bytes, std::string source)
      : buf_(std::move(bytes)), source_(std::move(source)) {}

  void need(std::size_t n, const std::string& section) const {
    if (buf_.size() - pos_ < n) {
      throw IoError(source_ + ": truncated file, missing " + section);
    }
  }
  void expect_magic(const char* magic, const std::string& kind) {
    const auto n = std::strlen(magic);
    need(n, "magic");
    if (std::memcmp(buf_.data() + pos_, magic, n) != 0) {
      throw IoError(source_ + ": bad magic, not a " + kind + " file");
    }
    pos_ += n;
  }
  std::uint32_t u32(const std::string& section) {
    need(4, section);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string string(std::uint32_t n, const std::string& section) {
    need(n, section);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  /// Element count of `shape`, rejecting products that overflow or exceed the file.
  std::size_t checked_count(const Shape& shape, const std::string& section) const {
    std::uint64_t n = 1;
    for (auto d : shape) {
      if (d <= 0 || n > (std::uint64_t{1} << 40) / static_cast<std::uint64_t>(d)) {
        throw IoError(source_ + ": extent overflow in " + section);
      }
      n *= static_cast<std::uint64_t>(d);
    }
    return static_cast<std::size_t>(n);
  }
  std::vector<float> floats(std::size_t n, const std::string& section) {
    if (n > (buf_.size() - pos_) / 4) throw IoError(source_ + ": truncated file, missing " + section);
    std::vector<float> out(n);
    for (auto& f : out) f = std::bit_cast<float>(u32(section));
    return out;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::string source_;
};

}  // namespace convivit
