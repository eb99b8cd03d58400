#pragma once

// Little-endian framing shared by the SSNM / SSDS / SSAD container files:
//   4-byte magic | u32 version | u64 header length | JSON header | payload

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "subnetscope/error.hpp"

namespace subnetscope::io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::size_t size() const { return bytes_.size(); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw TruncatedError("truncated file: need " + std::to_string(n) + " bytes for " + std::string(what) +
                           ", " + std::to_string(remaining()) + " available");
    }
  }

  std::string_view take(std::size_t n, std::string_view what) {
    need(n, what);
    std::string_view s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32(std::string_view what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }

  std::uint32_t u32_be(std::string_view what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }

  std::uint64_t u64(std::string_view what) {
    auto s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }

  float f32_at(std::size_t offset) const {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes_[offset + static_cast<std::size_t>(i)]);
    float f;
    std::memcpy(&f, &v, sizeof f);
    return f;
  }

  unsigned char byte_at(std::size_t offset) const { return static_cast<unsigned char>(bytes_[offset]); }

  void seek(std::size_t p) { pos_ = p; }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

/// Writes magic, version and header; caller appends the payload.
inline std::string begin_container(std::string_view magic, std::uint32_t version, const std::string& header) {
  std::string out(magic);
  put_u32(out, version);
  put_u64(out, header.size());
  out += header;
  return out;
}

/// Validates magic and version and returns the JSON header text; the reader
/// is left at the start of the payload.
inline std::string open_container(Reader& r, std::string_view magic, std::uint32_t version) {
  auto m = r.take(magic.size(), "magic");
  if (m != magic) throw BadMagicError("bad magic: expected '" + std::string(magic) + "'");
  const std::uint32_t v = r.u32("version");
  if (v != version) {
    throw VersionMismatchError("version mismatch: file has " + std::to_string(v) + ", expected " +
                               std::to_string(version));
  }
  const std::uint64_t len = r.u64("header length");
  return std::string(r.take(static_cast<std::size_t>(len), "header"));
}

}  // namespace subnetscope::io
