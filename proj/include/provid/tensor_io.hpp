#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "provid/tensor.hpp"

namespace provid {

// PVT1 binary tensor file:
//   bytes 0-3   magic 'P' 'V' 'T' '1'
//   byte  4     dtype: 0 = 32-bit float, 1 = 64-bit float
//   byte  5     rank r (at most 8)
//   bytes 6-7   zero
//   r x u64     little-endian extents
//   payload     row-major IEEE-754, little-endian

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

template <class T>
void save_pvt1(const Tensor<T>& t, const std::string& path,
               Dtype dtype = sizeof(T) == 4 ? Dtype::f32 : Dtype::f64) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_pvt1: cannot open " + path);
  const char magic[4] = {'P', 'V', 'T', '1'};
  os.write(magic, 4);
  const unsigned char head[4] = {static_cast<unsigned char>(dtype),
                                 static_cast<unsigned char>(t.rank()), 0, 0};
  os.write(reinterpret_cast<const char*>(head), 4);
  for (std::size_t d : t.dims()) detail::write_u64_le(os, d);
  if (dtype == Dtype::f32) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const float v = static_cast<float>(t[i]);
      os.write(reinterpret_cast<const char*>(&v), 4);
    }
  } else {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double v = static_cast<double>(t[i]);
      os.write(reinterpret_cast<const char*>(&v), 8);
    }
  }
  if (!os) throw IoError("save_pvt1: write failed for " + path);
}

template <class T>
Tensor<T> load_pvt1(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_pvt1: cannot open " + path);
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PVT1", 4) != 0) {
    throw IoError("load_pvt1: bad magic in " + path);
  }
  unsigned char head[4] = {};
  is.read(reinterpret_cast<char*>(head), 4);
  if (!is) throw IoError("load_pvt1: truncated header in " + path);
  if (head[0] != 0 && head[0] != 1) {
    throw IoError("load_pvt1: unknown dtype code " + std::to_string(head[0]));
  }
  const Dtype dtype = static_cast<Dtype>(head[0]);
  const std::size_t rank = head[1];
  if (rank > 8) throw IoError("load_pvt1: rank " + std::to_string(rank) + " exceeds 8");

  std::vector<std::size_t> dims(rank);
  std::size_t numel = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint64_t d = detail::read_u64_le(is);
    if (!is || d == 0) throw IoError("load_pvt1: bad extent in " + path);
    dims[i] = static_cast<std::size_t>(d);
    numel *= dims[i];
  }

  std::vector<T> values(numel);
  const std::size_t elem = dtype == Dtype::f32 ? 4 : 8;
  for (std::size_t i = 0; i < numel; ++i) {
    char buf[8];
    is.read(buf, static_cast<std::streamsize>(elem));
    if (!is) throw IoError("load_pvt1: payload shorter than header promises in " + path);
    if (dtype == Dtype::f32) {
      float v;
      std::memcpy(&v, buf, 4);
      values[i] = static_cast<T>(v);
    } else {
      double v;
      std::memcpy(&v, buf, 8);
      values[i] = static_cast<T>(v);
    }
  }
  is.peek();
  if (!is.eof()) throw IoError("load_pvt1: payload longer than header promises in " + path);
  return Tensor<T>::from_values(std::move(dims), std::move(values));
}

/// Reads a CSV of reals, one sample per row, into an N x F tensor.
template <class T>
Tensor<T> load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("load_csv: cannot open " + path);
  std::vector<T> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(static_cast<T>(std::stod(cell)));
      ++c;
    }
    if (rows == 0) {
      cols = c;
    } else if (c != cols) {
      throw IoError("load_csv: row " + std::to_string(rows) + " has " + std::to_string(c) +
                    " columns, expected " + std::to_string(cols));
    }
    ++rows;
  }
  if (rows == 0) throw IoError("load_csv: no rows in " + path);
  return Tensor<T>::from_values({rows, cols}, std::move(values));
}

/// Loads either a PVT1 tensor or a CSV matrix, judged by the file magic.
template <class T>
Tensor<T> load_tensor_auto(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path);
  char magic[4] = {};
  probe.read(magic, 4);
  probe.close();
  if (std::memcmp(magic, "PVT1", 4) == 0) return load_pvt1<T>(path);
  return load_csv<T>(path);
}

}  // namespace provid
