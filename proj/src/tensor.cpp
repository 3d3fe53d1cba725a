#include "esanet/tensor.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace esanet {

std::string Shape::str() const {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "(%lld,%lld,%lld,%lld)", static_cast<long long>(n),
                static_cast<long long>(c), static_cast<long long>(h), static_cast<long long>(w));
  return buf;
}

namespace {

constexpr char kMagic[4] = {'E', 'S', 'T', 'N'};

template <typename T>
constexpr uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace

template <typename T>
void save_tensor(const Tensor<T>& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(kMagic, 4);
  const uint8_t head[4] = {1, dtype_code<T>(), 4, 0};
  f.write(reinterpret_cast<const char*>(head), 4);
  const Shape& s = t.shape();
  const uint32_t ext[4] = {static_cast<uint32_t>(s.n), static_cast<uint32_t>(s.c),
                           static_cast<uint32_t>(s.h), static_cast<uint32_t>(s.w)};
  f.write(reinterpret_cast<const char*>(ext), sizeof(ext));
  f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!f) throw std::runtime_error("write failed: " + path);
}

namespace {

struct FileHeader {
  uint8_t version, dtype, ndim;
  uint32_t ext[4];
};

FileHeader read_header(std::ifstream& f, const std::string& path) {
  char magic[4];
  uint8_t head[4];
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(head), 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a tensor container file: " + path);
  if (head[0] != 1) throw std::runtime_error("unsupported container version in " + path);
  if (head[1] > 1) throw std::runtime_error("unsupported dtype code in " + path);
  if (head[2] < 1 || head[2] > 4) throw std::runtime_error("unsupported ndim in " + path);
  FileHeader h{head[0], head[1], head[2], {1, 1, 1, 1}};
  // ndim extents fill the trailing axes of an NCHW shape.
  uint32_t raw[4];
  f.read(reinterpret_cast<char*>(raw), h.ndim * sizeof(uint32_t));
  if (!f) throw std::runtime_error("truncated tensor container: " + path);
  for (int i = 0; i < h.ndim; ++i) h.ext[4 - h.ndim + i] = raw[i];
  return h;
}

}  // namespace

int tensor_file_dtype(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  return read_header(f, path).dtype;
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  FileHeader h = read_header(f, path);
  if (h.dtype != dtype_code<T>())
    throw std::runtime_error("dtype mismatch loading " + path + " (file code " +
                             std::to_string(h.dtype) + ")");
  Shape s{h.ext[0], h.ext[1], h.ext[2], h.ext[3]};
  Tensor<T> t(s);
  f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!f) throw std::runtime_error("truncated tensor container: " + path);
  return t;
}

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, T lo, T hi) {
  Tensor<T> t(s);
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
  return t;
}

template void save_tensor<float>(const Tensor<float>&, const std::string&);
template void save_tensor<double>(const Tensor<double>&, const std::string&);
template Tensor<float> load_tensor<float>(const std::string&);
template Tensor<double> load_tensor<double>(const std::string&);
template Tensor<float> random_tensor<float>(Shape, Rng&, float, float);
template Tensor<double> random_tensor<double>(Shape, Rng&, double, double);

}  // namespace esanet
