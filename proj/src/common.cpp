#include "musicssl/common.hpp"

#include <bit>
#include <cstdio>

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace musicssl {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    auto n = static_cast<std::size_t>(in.gcount());
    h = fnv1a64(std::as_bytes(std::span(buf.data(), n)), h);
  }
  return h;
}

BinaryWriter::BinaryWriter(const std::filesystem::path& path)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw DataError("cannot write " + path.string());
}

void BinaryWriter::bytes(const void* data, std::size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out_) throw DataError("write failed: " + path_.string());
}

void BinaryWriter::u32(std::uint32_t v) { bytes(&v, 4); }
void BinaryWriter::u64(std::uint64_t v) { bytes(&v, 8); }
void BinaryWriter::f32(float v) { bytes(&v, 4); }
void BinaryWriter::f32s(std::span<const float> v) { bytes(v.data(), v.size_bytes()); }

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void BinaryWriter::close() {
  out_.close();
  if (!out_) throw DataError("close failed: " + path_.string());
}

BinaryReader::BinaryReader(const std::filesystem::path& path)
    : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw DataError("cannot open " + path.string());
}

void BinaryReader::bytes(void* data, std::size_t n) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n)
    throw DataError("truncated file: " + path_.string());
}

void BinaryReader::expect_magic(std::string_view m) {
  std::string got(m.size(), '\0');
  bytes(got.data(), got.size());
  if (got != m)
    throw DataError("bad magic in " + path_.string() + " (expected " +
                    std::string(m) + ")");
}

std::uint8_t BinaryReader::u8() {
  std::uint8_t v;
  bytes(&v, 1);
  return v;
}

std::uint32_t BinaryReader::u32() {
  std::uint32_t v;
  bytes(&v, 4);
  return v;
}

std::uint64_t BinaryReader::u64() {
  std::uint64_t v;
  bytes(&v, 8);
  return v;
}

float BinaryReader::f32() {
  float v;
  bytes(&v, 4);
  return v;
}

std::vector<float> BinaryReader::f32s(std::size_t n) {
  std::vector<float> v(n);
  bytes(v.data(), n * sizeof(float));
  return v;
}

std::string BinaryReader::str() {
  auto n = u32();
  if (n > (1u << 28)) throw DataError("corrupt string length in " + path_.string());
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

bool BinaryReader::at_end() { return in_.peek() == std::char_traits<char>::eof(); }

}  // namespace musicssl
