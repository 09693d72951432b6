#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "fose/core/tensor.hpp"

namespace fose {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Array container: magic "FOSEARR1", four LE u32 dims (N,C,H,W), then raw
// little-endian float32 payload. In-memory tensors are double; storage is f32.
inline constexpr char kArrMagic[8] = {'F', 'O', 'S', 'E', 'A', 'R', 'R', '1'};

inline void write_array(const std::string& path, const Tensor& t) {
  if (t.ndim() != 4) throw IoError("write_array: expected 4-D tensor, got " + shape_str(t.shape()));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_array: cannot open " + path);
  f.write(kArrMagic, 8);
  for (int i = 0; i < 4; ++i) {
    uint32_t d = (uint32_t)t.dim(i);
    f.write(reinterpret_cast<const char*>(&d), 4);
  }
  std::vector<float> buf((size_t)t.numel());
  for (int64_t i = 0; i < t.numel(); ++i) buf[(size_t)i] = (float)t[i];
  f.write(reinterpret_cast<const char*>(buf.data()), (std::streamsize)(buf.size() * 4));
  if (!f) throw IoError("write_array: short write to " + path);
}

inline Tensor read_array(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_array: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kArrMagic, 8) != 0)
    throw IoError("read_array: bad magic in " + path);
  Shape s(4);
  for (int i = 0; i < 4; ++i) {
    uint32_t d = 0;
    f.read(reinterpret_cast<char*>(&d), 4);
    s[(size_t)i] = (int)d;
  }
  if (!f) throw IoError("read_array: truncated header in " + path);
  Tensor t(s);
  std::vector<float> buf((size_t)t.numel());
  f.read(reinterpret_cast<char*>(buf.data()), (std::streamsize)(buf.size() * 4));
  if (!f) throw IoError("read_array: truncated payload in " + path);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = (double)buf[(size_t)i];
  return t;
}

}  // namespace fose
