#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "esanet/common.hpp"

namespace esanet {

// Extents of a dense rank-4 array, (batch, channels, height, width).
struct Shape {
  int64_t n = 1;
  int64_t c = 1;
  int64_t h = 1;
  int64_t w = 1;

  int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Dense NCHW tensor, contiguous row-major. Element (n,c,h,w) lives at
// ((n*C + c)*H + h)*W + w. Scalar is float or double.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(check_numel(s), fill) {}
  Tensor(Shape s, std::vector<T> data) : shape_(s), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_.numel())
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_.str());
  }

  static Tensor full(Shape s, T v) { return Tensor(s, v); }

  // Per-channel vector (gamma, bias, ...) as a (1,C,1,1) tensor.
  static Tensor channel_vector(std::vector<T> v) {
    Shape s{1, static_cast<int64_t>(v.size()), 1, 1};
    return Tensor(s, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return shape_.numel(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator()(int64_t n, int64_t c, int64_t h, int64_t w) { return data_[index(n, c, h, w)]; }
  const T& operator()(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[index(n, c, h, w)];
  }
  T& operator[](int64_t i) { return data_[i]; }
  const T& operator[](int64_t i) const { return data_[i]; }

  int64_t index(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  // Start of the (n,c) plane, H*W contiguous values.
  T* plane(int64_t n, int64_t c) { return data_.data() + (n * shape_.c + c) * shape_.h * shape_.w; }
  const T* plane(int64_t n, int64_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.h * shape_.w;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static int64_t check_numel(const Shape& s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
      throw ConfigError("tensor extents must be >= 1, got " + s.str());
    return s.numel();
  }

  Shape shape_;
  std::vector<T> data_;
};

// Tensor container file ("ESTN"): magic, u8 version=1, u8 dtype (0=f32, 1=f64),
// u8 ndim, u8 reserved, ndim little-endian u32 extents, raw little-endian data.
// Rank-4 tensors are always written with ndim=4.
template <typename T>
void save_tensor(const Tensor<T>& t, const std::string& path);

template <typename T>
Tensor<T> load_tensor(const std::string& path);

// dtype code stored in `path` (0=f32, 1=f64); throws on a non-ESTN file.
int tensor_file_dtype(const std::string& path);

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, T lo = T(-1), T hi = T(1));

}  // namespace esanet
