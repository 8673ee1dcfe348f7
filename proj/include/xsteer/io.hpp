#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace xsteer::io {

/// Writes to "<path>.tmp" and renames over `path`. Parent directories are
/// created as needed.
void write_file_atomic(const std::string& path, std::string_view contents);

std::string read_file(const std::string& path);

/// Throws naming `path` when it does not exist.
void require_file(const std::string& path);

/// Little-endian byte writer/reader for the binary artifact formats.
class ByteWriter {
 public:
  void magic(std::string_view m) { buf_.append(m); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void str(std::string_view s);  // u32 length prefix
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}
  void expect_magic(std::string_view m);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  bool at_end() const { return pos_ == data_.size(); }

 private:
  const char* take(std::size_t n);
  std::string data_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace xsteer::io
