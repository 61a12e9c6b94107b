#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "seamless/errors.hpp"
#include "seamless/tensor.hpp"

namespace seamless::archive {

// Little-endian host assumed; values are written in native byte order.

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
inline void write_i64(std::ostream& os, std::int64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("archive: truncated stream");
  return v;
}
inline std::int64_t read_i64(std::istream& is) {
  std::int64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("archive: truncated stream");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_i64(os, static_cast<std::int64_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::istream& is) {
  const std::int64_t n = read_i64(is);
  if (n < 0 || n > (std::int64_t{1} << 32)) throw IoError("archive: corrupt string length");
  std::string s(static_cast<std::size_t>(n), '\0');
  if (!is.read(s.data(), n)) throw IoError("archive: truncated string");
  return s;
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }
inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
  char got[4] = {};
  if (!is.read(got, 4) || std::string(got, 4) != std::string(magic, 4)) {
    throw IoError(what + ": bad magic, not a " + std::string(magic, 4) + " file");
  }
}

using TensorMap = std::map<std::string, Tensor>;

inline void write_tensors(std::ostream& os, const TensorMap& tensors) {
  write_i64(os, static_cast<std::int64_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_string(os, name);
    const Shape s = t.shape();
    for (int d : {s.n, s.c, s.h, s.w}) write_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
}

inline TensorMap read_tensors(std::istream& is) {
  TensorMap out;
  const std::int64_t count = read_i64(is);
  if (count < 0) throw IoError("archive: corrupt tensor count");
  for (std::int64_t i = 0; i < count; ++i) {
    std::string name = read_string(is);
    Shape s;
    s.n = static_cast<int>(read_u32(is));
    s.c = static_cast<int>(read_u32(is));
    s.h = static_cast<int>(read_u32(is));
    s.w = static_cast<int>(read_u32(is));
    Tensor t(s);
    if (!is.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw IoError("archive: truncated tensor '" + name + "'");
    }
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

/// Standalone named-tensor file ("SWTS"), used for external backbone weights.
inline void save_weights(const std::string& path, const TensorMap& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write weights file " + path);
  write_magic(os, "SWTS");
  write_u32(os, 1);
  write_tensors(os, tensors);
  if (!os) throw IoError("failed writing weights file " + path);
}

inline TensorMap load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open weights file " + path);
  expect_magic(is, "SWTS", path);
  if (read_u32(is) != 1) throw IoError(path + ": unsupported weights version");
  return read_tensors(is);
}

}  // namespace seamless::archive
