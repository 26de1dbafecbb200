#pragma once

#include <fstream>

#include "linbp/tensor.hpp"

namespace linbp {

// Raw tensor file: magic "LBPT" | u8 version (=1) | u32le ndim | u32le dims
// | f32le data. Used by the attack CLI to persist adversarial batches.

constexpr uint8_t kTensorFileVersion = 1;

inline void save_tensor(const Tensor& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  auto put_u32 = [&f](uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    f.write(b, 4);
  };
  f.write("LBPT", 4);
  f.put(static_cast<char>(kTensorFileVersion));
  put_u32(static_cast<uint32_t>(t.ndim()));
  for (int d : t.shape) put_u32(static_cast<uint32_t>(d));
  for (float v : t.data) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(bits);
  }
  if (!f) throw IoError("write failed for " + path);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open " + path);
  const std::streamsize len = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> buf(static_cast<size_t>(len));
  if (len > 0 && !f.read(reinterpret_cast<char*>(buf.data()), len))
    throw IoError("short read on " + path);
  if (buf.size() < 9 || std::memcmp(buf.data(), "LBPT", 4) != 0)
    throw FormatError(path + ": missing LBPT magic");
  if (buf[4] != kTensorFileVersion)
    throw VersionError(path + ": tensor file version " + std::to_string(buf[4]) +
                       ", this build reads version " + std::to_string(kTensorFileVersion));
  auto get_u32 = [&buf](size_t off) {
    return static_cast<uint32_t>(buf[off]) | (static_cast<uint32_t>(buf[off + 1]) << 8) |
           (static_cast<uint32_t>(buf[off + 2]) << 16) | (static_cast<uint32_t>(buf[off + 3]) << 24);
  };
  const uint32_t ndim = get_u32(5);
  size_t pos = 9;
  if (buf.size() < pos + 4ull * ndim) throw IntegrityError(path + ": truncated dims");
  std::vector<int> shape;
  for (uint32_t i = 0; i < ndim; ++i, pos += 4) shape.push_back(static_cast<int>(get_u32(pos)));
  Tensor t(shape);
  if (buf.size() != pos + 4ull * t.numel())
    throw IntegrityError(path + ": payload holds " + std::to_string((buf.size() - pos) / 4) +
                         " floats, shape needs " + std::to_string(t.numel()));
  for (size_t i = 0; i < t.numel(); ++i, pos += 4) {
    const uint32_t bits = get_u32(pos);
    std::memcpy(&t.data[i], &bits, 4);
  }
  return t;
}

}  // namespace linbp
