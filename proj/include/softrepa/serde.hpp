#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace softrepa {

// Little-endian binary reader/writer over an in-memory buffer plus file
// helpers. All on-disk artifacts go through these so the byte layout is
// platform independent.

class ByteWriter {
 public:
  void u8(std::uint8_t v);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void bytes(const void* p, std::size_t n);
  void str(const std::string& s);  // u32 length + payload

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> buf) : buf_(std::move(buf)) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  void bytes(void* p, std::size_t n);
  std::string str();

  std::size_t pos() const { return pos_; }
  std::size_t size() const { return buf_.size(); }
  bool exhausted() const { return pos_ == buf_.size(); }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32(const std::uint8_t* p, std::size_t n, std::uint32_t seed = 0);

// Whole-file helpers; throw io_error on missing/unreadable paths.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// Locale-independent shortest-roundtrip float formatting for CSV/JSON output.
std::string fmt_float(double v);

}  // namespace softrepa
