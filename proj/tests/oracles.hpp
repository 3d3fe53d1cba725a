#pragma once

// Independent reference implementations used as test oracles. These stay
// deliberately naive (nested loops, per-element scalar math) and must not
// call into the engine kernels they check.

#include <algorithm>
#include <cmath>
#include <type_traits>
#include <vector>

#include "esanet/ops.hpp"
#include "esanet/tensor.hpp"

namespace oracle {

using esanet::ConvSpec;
using esanet::Shape;
using esanet::Tensor;

template <typename T>
T pad_read(const Tensor<T>& x, int64_t n, int64_t c, int64_t h, int64_t w) {
  const Shape& s = x.shape();
  if (h < 0 || h >= s.h || w < 0 || w >= s.w) return T(0);
  return x(n, c, h, w);
}

// Seven nested loops, accumulation over (ci, kh, kw) per output element.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w,
                 std::type_identity_t<const Tensor<T>*> bias, const ConvSpec& sp) {
  const Shape os = esanet::conv_out_shape(x.shape(), sp);
  Tensor<T> y(os);
  const int64_t cin_g = sp.in_channels / sp.groups;
  const int64_t cout_g = sp.out_channels / sp.groups;
  for (int64_t n = 0; n < os.n; ++n)
    for (int64_t co = 0; co < os.c; ++co)
      for (int64_t ho = 0; ho < os.h; ++ho)
        for (int64_t wo = 0; wo < os.w; ++wo) {
          T acc = 0;
          const int64_t g = co / cout_g;
          for (int64_t ci = 0; ci < cin_g; ++ci)
            for (int kh = 0; kh < sp.kernel_h; ++kh)
              for (int kw = 0; kw < sp.kernel_w; ++kw)
                acc += pad_read(x, n, g * cin_g + ci, ho * sp.stride_h - sp.pad_h + kh,
                                wo * sp.stride_w - sp.pad_w + kw) *
                       w(co, ci, kh, kw);
          if (bias) acc += (*bias)[co];
          y(n, co, ho, wo) = acc;
        }
  return y;
}

template <typename T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const Tensor<T>& mean, const Tensor<T>& var, T eps) {
  Tensor<T> y(x.shape());
  const Shape& s = x.shape();
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t h = 0; h < s.h; ++h)
        for (int64_t w = 0; w < s.w; ++w)
          y(n, c, h, w) =
              gamma[c] * (x(n, c, h, w) - mean[c]) / std::sqrt(var[c] + eps) + beta[c];
  return y;
}

// Two-pass per-channel statistics over (N,H,W).
template <typename T>
void batch_stats(const Tensor<T>& x, std::vector<T>& mean, std::vector<T>& var) {
  const Shape& s = x.shape();
  mean.assign(s.c, T(0));
  var.assign(s.c, T(0));
  const T m = static_cast<T>(s.n * s.h * s.w);
  for (int64_t c = 0; c < s.c; ++c) {
    T sum = 0;
    for (int64_t n = 0; n < s.n; ++n)
      for (int64_t h = 0; h < s.h; ++h)
        for (int64_t w = 0; w < s.w; ++w) sum += x(n, c, h, w);
    mean[c] = sum / m;
    T sq = 0;
    for (int64_t n = 0; n < s.n; ++n)
      for (int64_t h = 0; h < s.h; ++h)
        for (int64_t w = 0; w < s.w; ++w) {
          const T d = x(n, c, h, w) - mean[c];
          sq += d * d;
        }
    var[c] = sq / m;
  }
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int wh, int ww, int sh, int sw, int ph = 0, int pw = 0) {
  const Shape os = esanet::pool_out_shape(x.shape(), wh, ww, sh, sw, ph, pw);
  Tensor<T> y(os);
  for (int64_t n = 0; n < os.n; ++n)
    for (int64_t c = 0; c < os.c; ++c)
      for (int64_t ho = 0; ho < os.h; ++ho)
        for (int64_t wo = 0; wo < os.w; ++wo) {
          T best = -std::numeric_limits<T>::infinity();
          for (int r = 0; r < wh; ++r)
            for (int q = 0; q < ww; ++q) {
              const int64_t ih = ho * sh - ph + r, iw = wo * sw - pw + q;
              if (ih < 0 || ih >= x.shape().h || iw < 0 || iw >= x.shape().w) continue;
              best = std::max(best, x(n, c, ih, iw));
            }
          y(n, c, ho, wo) = best;
        }
  return y;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int wh, int ww, int sh, int sw) {
  const Shape os = esanet::pool_out_shape(x.shape(), wh, ww, sh, sw, 0, 0);
  Tensor<T> y(os);
  for (int64_t n = 0; n < os.n; ++n)
    for (int64_t c = 0; c < os.c; ++c)
      for (int64_t ho = 0; ho < os.h; ++ho)
        for (int64_t wo = 0; wo < os.w; ++wo) {
          T sum = 0;
          for (int r = 0; r < wh; ++r)
            for (int q = 0; q < ww; ++q) sum += x(n, c, ho * sh + r, wo * sw + q);
          y(n, c, ho, wo) = sum / static_cast<T>(wh * ww);
        }
  return y;
}

// Half-pixel bilinear sampling of a single output pixel.
template <typename T>
T bilinear_at(const Tensor<T>& x, int64_t n, int64_t c, int64_t oh, int64_t ow, int fh, int fw) {
  const Shape& s = x.shape();
  auto tap = [](int64_t d, int f, int64_t extent, int64_t& i0, int64_t& i1, double& t) {
    double src = (static_cast<double>(d) + 0.5) / f - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(extent - 1));
    i0 = static_cast<int64_t>(src);
    i1 = std::min(i0 + 1, extent - 1);
    t = src - static_cast<double>(i0);
  };
  int64_t h0, h1, w0, w1;
  double th, tw;
  tap(oh, fh, s.h, h0, h1, th);
  tap(ow, fw, s.w, w0, w1, tw);
  const double v00 = x(n, c, h0, w0), v01 = x(n, c, h0, w1);
  const double v10 = x(n, c, h1, w0), v11 = x(n, c, h1, w1);
  const double top = v00 + tw * (v01 - v00);
  const double bot = v10 + tw * (v11 - v10);
  return static_cast<T>(top + th * (bot - top));
}

// max |a-b| / max(max|b|, floor): scaled infinity-norm relative error.
template <typename T, typename U>
double rel_error(const Tensor<T>& a, const Tensor<U>& b, double floor = 1e-6) {
  double max_diff = 0, max_mag = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    max_diff = std::max(max_diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    max_mag = std::max(max_mag, std::abs(static_cast<double>(b[i])));
  }
  return max_diff / std::max(max_mag, floor);
}

}  // namespace oracle
