#include "esanet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace esanet {

const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kBatchNorm: return "batchnorm";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kMaxPool: return "maxpool";
    case OpKind::kAvgPool: return "avgpool";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kNearestUpsample: return "nearest_upsample";
    case OpKind::kBilinearUpsample: return "bilinear_upsample";
    case OpKind::kAdd: return "add";
    case OpKind::kConcat: return "concat";
    case OpKind::kScaleChannels: return "scale_channels";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kWeightedSum: return "weighted_sum";
  }
  return "?";
}

OpKind op_kind_from_name(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(OpKind::kWeightedSum); ++k) {
    OpKind kind = static_cast<OpKind>(k);
    if (name == op_kind_name(kind)) return kind;
  }
  throw ConfigError("unknown op kind: " + name);
}

void ConvSpec::validate() const {
  if (in_channels < 1 || out_channels < 1 || groups < 1)
    throw ConfigError("conv spec: channels and groups must be >= 1");
  if (in_channels % groups != 0 || out_channels % groups != 0)
    throw ConfigError("conv spec: in/out channels must be divisible by groups (" +
                      std::to_string(in_channels) + "," + std::to_string(out_channels) + "," +
                      std::to_string(groups) + ")");
  if (kernel_h < 1 || kernel_w < 1 || stride_h < 1 || stride_w < 1)
    throw ConfigError("conv spec: kernel and stride must be >= 1");
  if (pad_h < 0 || pad_w < 0) throw ConfigError("conv spec: negative padding");
}

Shape conv_out_shape(const Shape& in, const ConvSpec& spec) {
  spec.validate();
  if (in.c != spec.in_channels)
    throw ConfigError("conv input has " + std::to_string(in.c) + " channels, spec expects " +
                      std::to_string(spec.in_channels));
  const int64_t oh = (in.h + 2 * spec.pad_h - spec.kernel_h) / spec.stride_h + 1;
  const int64_t ow = (in.w + 2 * spec.pad_w - spec.kernel_w) / spec.stride_w + 1;
  if (in.h + 2 * spec.pad_h < spec.kernel_h || in.w + 2 * spec.pad_w < spec.kernel_w || oh < 1 ||
      ow < 1)
    throw ConfigError("conv output extent not positive for input " + in.str());
  return Shape{in.n, spec.out_channels, oh, ow};
}

Shape pool_out_shape(const Shape& in, int wh, int ww, int sh, int sw, int ph, int pw) {
  if (wh < 1 || ww < 1 || sh < 1 || sw < 1) throw ConfigError("pool window/stride must be >= 1");
  if (ph < 0 || pw < 0 || ph >= wh || pw >= ww)
    throw ConfigError("pool padding must satisfy 0 <= pad < window");
  const int64_t oh = (in.h + 2 * ph - wh) / sh + 1;
  const int64_t ow = (in.w + 2 * pw - ww) / sw + 1;
  if (in.h + 2 * ph < wh || in.w + 2 * pw < ww || oh < 1 || ow < 1)
    throw ConfigError("pool output extent not positive for input " + in.str());
  return Shape{in.n, in.c, oh, ow};
}

namespace ops {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<Mat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const Mat<T>>;

// Fixed GEMM row-block size. The work decomposition depends on shapes only,
// never on the worker count, so results are reproducible at any thread count.
constexpr int64_t kRowBlock = 64;

template <typename T>
inline T apply_act(T v, Activation act) {
  return act == Activation::kRelu ? (v > T(0) ? v : T(0)) : v;
}

void check_channel_vector(const Shape& s, int64_t c, const char* what) {
  if (s.numel() != c || s.c != c)
    throw ConfigError(std::string(what) + " must be a (1," + std::to_string(c) +
                      ",1,1) vector, got " + s.str());
}

// Writes the patch matrix for one sample: row k = (ci*kh + r)*kw + q holds the
// input value under kernel tap (ci,r,q) for each output pixel, zero where the
// tap falls into padding. Row k starts at col + k*row_stride.
template <typename T>
void im2col_sample(const Tensor<T>& x, int64_t n, const ConvSpec& s, int64_t ho_n, int64_t wo_n,
                   int64_t c0, int64_t c_count, T* col, int64_t row_stride) {
  const int64_t H = x.shape().h, W = x.shape().w;
  T* dst = col;
  for (int64_t ci = c0; ci < c0 + c_count; ++ci) {
    const T* src_plane = x.plane(n, ci);
    for (int r = 0; r < s.kernel_h; ++r) {
      for (int q = 0; q < s.kernel_w; ++q, dst += row_stride) {
        int64_t lo = 0, hi = wo_n;
        if (s.pad_w - q > 0) lo = (s.pad_w - q + s.stride_w - 1) / s.stride_w;
        hi = std::min<int64_t>(hi, (W + s.pad_w - q + s.stride_w - 1) / s.stride_w);
        for (int64_t ho = 0; ho < ho_n; ++ho) {
          T* out_row = dst + ho * wo_n;
          const int64_t ih = ho * s.stride_h - s.pad_h + r;
          if (ih < 0 || ih >= H || hi <= lo) {
            std::fill(out_row, out_row + wo_n, T(0));
            continue;
          }
          std::fill(out_row, out_row + lo, T(0));
          const T* src = src_plane + ih * W + (lo * s.stride_w - s.pad_w + q);
          if (s.stride_w == 1) {
            std::memcpy(out_row + lo, src, static_cast<size_t>(hi - lo) * sizeof(T));
          } else {
            for (int64_t wo = lo; wo < hi; ++wo) out_row[wo] = src[(wo - lo) * s.stride_w];
          }
          std::fill(out_row + hi, out_row + wo_n, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col_sample: accumulates patch-matrix gradients back into dx.
template <typename T>
void col2im_sample(Tensor<T>& dx, int64_t n, const ConvSpec& s, int64_t ho_n, int64_t wo_n,
                   int64_t c0, int64_t c_count, const T* col, int64_t row_stride) {
  const int64_t H = dx.shape().h, W = dx.shape().w;
  const T* src_col = col;
  for (int64_t ci = c0; ci < c0 + c_count; ++ci) {
    T* dst_plane = dx.plane(n, ci);
    for (int r = 0; r < s.kernel_h; ++r) {
      for (int q = 0; q < s.kernel_w; ++q, src_col += row_stride) {
        int64_t lo = 0, hi = wo_n;
        if (s.pad_w - q > 0) lo = (s.pad_w - q + s.stride_w - 1) / s.stride_w;
        hi = std::min<int64_t>(hi, (W + s.pad_w - q + s.stride_w - 1) / s.stride_w);
        if (hi <= lo) continue;
        for (int64_t ho = 0; ho < ho_n; ++ho) {
          const int64_t ih = ho * s.stride_h - s.pad_h + r;
          if (ih < 0 || ih >= H) continue;
          const T* src = src_col + ho * wo_n;
          T* dst = dst_plane + ih * W + (lo * s.stride_w - s.pad_w + q);
          for (int64_t wo = lo; wo < hi; ++wo) dst[(wo - lo) * s.stride_w] += src[wo];
        }
      }
    }
  }
}

template <typename T>
void conv_validate(const Tensor<T>& w, const Tensor<T>* bias, const ConvSpec& spec) {
  if (!(w.shape() == spec.weight_shape()))
    throw ConfigError("conv weight shape " + w.shape().str() + " does not match spec " +
                      spec.weight_shape().str());
  if ((bias != nullptr) != spec.has_bias)
    throw ConfigError("conv bias presence does not match spec.has_bias");
  if (bias) check_channel_vector(bias->shape(), spec.out_channels, "conv bias");
}

template <typename T>
void add_bias_act(Tensor<T>& y, const Tensor<T>* bias, Activation act) {
  if (!bias && act == Activation::kNone) return;
  const Shape& s = y.shape();
  const int64_t plane = s.h * s.w;
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < s.n; ++n) {
    for (int64_t c = 0; c < s.c; ++c) {
      T* p = y.plane(n, c);
      const T b = bias ? (*bias)[c] : T(0);
      for (int64_t i = 0; i < plane; ++i) p[i] = apply_act(p[i] + b, act);
    }
  }
}

// im2col + GEMM path, groups == 1. Output sample slices are (Cout x Ho*Wo)
// row-major, so GEMM results land directly in place.
template <typename T>
Tensor<T> conv2d_gemm(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                      const ConvSpec& spec, Activation act) {
  const Shape os = conv_out_shape(x.shape(), spec);
  const int64_t N = os.n, M = spec.out_channels, P = os.h * os.w;
  const int64_t K = spec.in_channels * spec.kernel_h * spec.kernel_w;
  Tensor<T> y(os);
  const bool direct_view =
      spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride_h == 1 && spec.stride_w == 1 &&
      spec.pad_h == 0 && spec.pad_w == 0;

  std::vector<T> col;
  if (!direct_view) {
    col.resize(static_cast<size_t>(N) * K * P);
#pragma omp parallel for
    for (int64_t n = 0; n < N; ++n)
      im2col_sample(x, n, spec, os.h, os.w, 0, spec.in_channels, col.data() + n * K * P, P);
  }

  MapConstMat<T> wm(w.data(), M, K);
  const int64_t blocks = (M + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t b = 0; b < blocks; ++b) {
      const int64_t r0 = b * kRowBlock;
      const int64_t rows = std::min(kRowBlock, M - r0);
      const T* cp = direct_view ? x.plane(n, 0) : col.data() + n * K * P;
      MapConstMat<T> cm(cp, K, P);
      MapMat<T> ym(y.plane(n, 0), M, P);
      ym.middleRows(r0, rows).noalias() = wm.middleRows(r0, rows) * cm;
    }
  }
  add_bias_act(y, bias, act);
  return y;
}

}  // namespace

template <typename T>
Tensor<T> conv2d_direct(const Tensor<T>& x, const Tensor<T>& w,
                        std::type_identity_t<const Tensor<T>*> bias, const ConvSpec& spec,
                        Activation act) {
  conv_validate(w, bias, spec);
  const Shape os = conv_out_shape(x.shape(), spec);
  Tensor<T> y(os);
  const int64_t cin_g = spec.in_channels / spec.groups;
  const int64_t cout_g = spec.out_channels / spec.groups;
  const int64_t H = x.shape().h, W = x.shape().w;
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < os.n; ++n) {
    for (int64_t co = 0; co < os.c; ++co) {
      const int64_t g = co / cout_g;
      for (int64_t ho = 0; ho < os.h; ++ho) {
        for (int64_t wo = 0; wo < os.w; ++wo) {
          T acc = 0;
          for (int64_t ci = 0; ci < cin_g; ++ci) {
            const T* xp = x.plane(n, g * cin_g + ci);
            const T* wp = &w(co, ci, 0, 0);
            for (int r = 0; r < spec.kernel_h; ++r) {
              const int64_t ih = ho * spec.stride_h - spec.pad_h + r;
              if (ih < 0 || ih >= H) continue;
              for (int q = 0; q < spec.kernel_w; ++q) {
                const int64_t iw = wo * spec.stride_w - spec.pad_w + q;
                if (iw < 0 || iw >= W) continue;
                acc += xp[ih * W + iw] * wp[r * spec.kernel_w + q];
              }
            }
          }
          if (bias) acc += (*bias)[co];
          y(n, co, ho, wo) = apply_act(acc, act);
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w,
                 std::type_identity_t<const Tensor<T>*> bias, const ConvSpec& spec,
                 Activation act) {
  // f64 stays on the direct kernel so accumulation order matches the
  // reference loop ordering exactly.
  if constexpr (std::is_same_v<T, double>) {
    return conv2d_direct(x, w, bias, spec, act);
  } else {
    conv_validate(w, bias, spec);
    if (spec.groups == 1) return conv2d_gemm(x, w, bias, spec, act);
    return conv2d_direct(x, w, bias, spec, act);
  }
}

template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_y, const Tensor<T>& w, const Shape& x_shape,
                                const ConvSpec& spec) {
  const Shape os = conv_out_shape(x_shape, spec);
  if (!(grad_y.shape() == os))
    throw ConfigError("grad_y shape " + grad_y.shape().str() + " does not match conv output " +
                      os.str());
  Tensor<T> dx(x_shape, T(0));
  const int64_t N = os.n, M = spec.out_channels, P = os.h * os.w;
  if (spec.groups == 1) {
    const int64_t K = spec.in_channels * spec.kernel_h * spec.kernel_w;
    std::vector<T> dcol(static_cast<size_t>(N) * K * P);
    MapConstMat<T> wm(w.data(), M, K);
    const int64_t blocks = (K + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for collapse(2)
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t b = 0; b < blocks; ++b) {
        const int64_t r0 = b * kRowBlock;
        const int64_t rows = std::min(kRowBlock, K - r0);
        MapConstMat<T> gym(grad_y.plane(n, 0), M, P);
        MapMat<T> dcm(dcol.data() + n * K * P, K, P);
        dcm.middleRows(r0, rows).noalias() = wm.middleCols(r0, rows).transpose() * gym;
      }
    }
#pragma omp parallel for
    for (int64_t n = 0; n < N; ++n)
      col2im_sample(dx, n, spec, os.h, os.w, 0, spec.in_channels, dcol.data() + n * K * P, P);
    return dx;
  }
  // Grouped path: scatter per (n, group); each task owns that group's input channels.
  const int64_t cin_g = spec.in_channels / spec.groups;
  const int64_t cout_g = spec.out_channels / spec.groups;
  const int64_t H = x_shape.h, W = x_shape.w;
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t g = 0; g < spec.groups; ++g) {
      for (int64_t col = 0; col < cout_g; ++col) {
        const int64_t co = g * cout_g + col;
        const T* gp = grad_y.plane(n, co);
        for (int64_t ho = 0; ho < os.h; ++ho) {
          for (int64_t wo = 0; wo < os.w; ++wo) {
            const T gv = gp[ho * os.w + wo];
            for (int64_t ci = 0; ci < cin_g; ++ci) {
              T* xp = dx.plane(n, g * cin_g + ci);
              const T* wp = &w(co, ci, 0, 0);
              for (int r = 0; r < spec.kernel_h; ++r) {
                const int64_t ih = ho * spec.stride_h - spec.pad_h + r;
                if (ih < 0 || ih >= H) continue;
                for (int q = 0; q < spec.kernel_w; ++q) {
                  const int64_t iw = wo * spec.stride_w - spec.pad_w + q;
                  if (iw < 0 || iw >= W) continue;
                  xp[ih * W + iw] += gv * wp[r * spec.kernel_w + q];
                }
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& grad_y, const Tensor<T>& x,
                                 const ConvSpec& spec) {
  const Shape os = conv_out_shape(x.shape(), spec);
  if (!(grad_y.shape() == os)) throw ConfigError("grad_y shape mismatch in conv weight grad");
  Tensor<T> dw(spec.weight_shape(), T(0));
  const int64_t N = os.n, M = spec.out_channels, P = os.h * os.w;
  if (spec.groups == 1) {
    const int64_t K = spec.in_channels * spec.kernel_h * spec.kernel_w;
    // Gather grad_y as (M, N*P) and the patches as (K, N*P); one reduction
    // GEMM keeps the accumulation order independent of the worker count.
    std::vector<T> gy(static_cast<size_t>(M) * N * P);
    std::vector<T> col(static_cast<size_t>(K) * N * P);
#pragma omp parallel for
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t co = 0; co < M; ++co)
        std::memcpy(gy.data() + co * N * P + n * P, grad_y.plane(n, co),
                    static_cast<size_t>(P) * sizeof(T));
      im2col_sample(x, n, spec, os.h, os.w, 0, spec.in_channels, col.data() + n * P, N * P);
    }
    MapConstMat<T> gym(gy.data(), M, N * P);
    MapConstMat<T> cm(col.data(), K, N * P);
    MapMat<T> dwm(dw.data(), M, K);
    const int64_t blocks = (M + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for
    for (int64_t b = 0; b < blocks; ++b) {
      const int64_t r0 = b * kRowBlock;
      const int64_t rows = std::min(kRowBlock, M - r0);
      dwm.middleRows(r0, rows).noalias() = gym.middleRows(r0, rows) * cm.transpose();
    }
    return dw;
  }
  const int64_t cin_g = spec.in_channels / spec.groups;
  const int64_t cout_g = spec.out_channels / spec.groups;
  const int64_t H = x.shape().h, W = x.shape().w;
#pragma omp parallel for
  for (int64_t co = 0; co < M; ++co) {
    const int64_t g = co / cout_g;
    for (int64_t n = 0; n < N; ++n) {
      const T* gp = grad_y.plane(n, co);
      for (int64_t ci = 0; ci < cin_g; ++ci) {
        const T* xp = x.plane(n, g * cin_g + ci);
        T* wp = &dw(co, ci, 0, 0);
        for (int64_t ho = 0; ho < os.h; ++ho) {
          for (int64_t wo = 0; wo < os.w; ++wo) {
            const T gv = gp[ho * os.w + wo];
            for (int r = 0; r < spec.kernel_h; ++r) {
              const int64_t ih = ho * spec.stride_h - spec.pad_h + r;
              if (ih < 0 || ih >= H) continue;
              for (int q = 0; q < spec.kernel_w; ++q) {
                const int64_t iw = wo * spec.stride_w - spec.pad_w + q;
                if (iw < 0 || iw >= W) continue;
                wp[r * spec.kernel_w + q] += gv * xp[ih * W + iw];
              }
            }
          }
        }
      }
    }
  }
  return dw;
}

template <typename T>
Tensor<T> conv2d_backward_bias(const Tensor<T>& grad_y) {
  const Shape& s = grad_y.shape();
  Tensor<T> db(Shape{1, s.c, 1, 1}, T(0));
#pragma omp parallel for
  for (int64_t c = 0; c < s.c; ++c) {
    T acc = 0;
    for (int64_t n = 0; n < s.n; ++n) {
      const T* p = grad_y.plane(n, c);
      for (int64_t i = 0; i < s.h * s.w; ++i) acc += p[i];
    }
    db[c] = acc;
  }
  return db;
}

template <typename T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const Tensor<T>& mean, const Tensor<T>& var, T eps) {
  const int64_t C = x.shape().c;
  check_channel_vector(gamma.shape(), C, "batchnorm gamma");
  check_channel_vector(beta.shape(), C, "batchnorm beta");
  check_channel_vector(mean.shape(), C, "batchnorm mean");
  check_channel_vector(var.shape(), C, "batchnorm var");
  for (int64_t c = 0; c < C; ++c)
    if (var[c] + eps <= T(0))
      throw ConfigError("batchnorm: var + eps must be positive (channel " + std::to_string(c) +
                        ")");
  Tensor<T> y(x.shape());
  const int64_t plane = x.shape().h * x.shape().w;
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < x.shape().n; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T scale = gamma[c] / std::sqrt(var[c] + eps);
      const T shift = beta[c] - mean[c] * scale;
      const T* xp = x.plane(n, c);
      T* yp = y.plane(n, c);
      for (int64_t i = 0; i < plane; ++i) yp[i] = xp[i] * scale + shift;
    }
  }
  return y;
}

template <typename T>
BatchNormTrainResult<T> batchnorm_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                        const Tensor<T>& beta, const Tensor<T>& running_mean,
                                        const Tensor<T>& running_var, T eps, T momentum) {
  const Shape& s = x.shape();
  const int64_t C = s.c;
  check_channel_vector(gamma.shape(), C, "batchnorm gamma");
  check_channel_vector(beta.shape(), C, "batchnorm beta");
  check_channel_vector(running_mean.shape(), C, "batchnorm running mean");
  check_channel_vector(running_var.shape(), C, "batchnorm running var");
  const int64_t m = s.n * s.h * s.w;
  if (m < 2)
    throw ConfigError("batchnorm_train: degenerate variance, needs >= 2 values per channel");

  BatchNormTrainResult<T> out{Tensor<T>(s), Tensor<T>(running_mean.shape()),
                              Tensor<T>(running_var.shape()), Tensor<T>(Shape{1, C, 1, 1}),
                              Tensor<T>(Shape{1, C, 1, 1})};
  const int64_t plane = s.h * s.w;
  // Two-pass statistics, serial per channel in (n,h,w) order.
#pragma omp parallel for
  for (int64_t c = 0; c < C; ++c) {
    T sum = 0;
    for (int64_t n = 0; n < s.n; ++n) {
      const T* xp = x.plane(n, c);
      for (int64_t i = 0; i < plane; ++i) sum += xp[i];
    }
    const T mu = sum / static_cast<T>(m);
    T sq = 0;
    for (int64_t n = 0; n < s.n; ++n) {
      const T* xp = x.plane(n, c);
      for (int64_t i = 0; i < plane; ++i) {
        const T d = xp[i] - mu;
        sq += d * d;
      }
    }
    const T var = sq / static_cast<T>(m);
    out.batch_mean[c] = mu;
    out.batch_var[c] = var;
    out.running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
    out.running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
    const T scale = gamma[c] / std::sqrt(var + eps);
    const T shift = beta[c] - mu * scale;
    for (int64_t n = 0; n < s.n; ++n) {
      const T* xp = x.plane(n, c);
      T* yp = out.y.plane(n, c);
      for (int64_t i = 0; i < plane; ++i) yp[i] = xp[i] * scale + shift;
    }
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const int64_t n = x.numel();
#pragma omp parallel for
  for (int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const int64_t n = x.numel();
#pragma omp parallel for
  for (int64_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
  return y;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int wh, int ww, int sh, int sw, int ph, int pw) {
  const Shape os = pool_out_shape(x.shape(), wh, ww, sh, sw, ph, pw);
  Tensor<T> y(os);
  const int64_t H = x.shape().h, W = x.shape().w;
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < os.n; ++n) {
    for (int64_t c = 0; c < os.c; ++c) {
      const T* xp = x.plane(n, c);
      T* yp = y.plane(n, c);
      for (int64_t ho = 0; ho < os.h; ++ho) {
        for (int64_t wo = 0; wo < os.w; ++wo) {
          T best = -std::numeric_limits<T>::infinity();
          for (int r = 0; r < wh; ++r) {
            const int64_t ih = ho * sh - ph + r;
            if (ih < 0 || ih >= H) continue;
            for (int q = 0; q < ww; ++q) {
              const int64_t iw = wo * sw - pw + q;
              if (iw < 0 || iw >= W) continue;
              best = std::max(best, xp[ih * W + iw]);
            }
          }
          yp[ho * os.w + wo] = best;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int wh, int ww, int sh, int sw) {
  const Shape& is = x.shape();
  if (sh == wh && sw == ww && (is.h % wh != 0 || is.w % ww != 0))
    throw FactorViolation("avgpool window (" + std::to_string(wh) + "," + std::to_string(ww) +
                          ") does not divide input " + is.str());
  const Shape os = pool_out_shape(is, wh, ww, sh, sw, 0, 0);
  Tensor<T> y(os);
  const int64_t W = is.w;
  const T inv = T(1) / static_cast<T>(wh * ww);
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < os.n; ++n) {
    for (int64_t c = 0; c < os.c; ++c) {
      const T* xp = x.plane(n, c);
      T* yp = y.plane(n, c);
      for (int64_t ho = 0; ho < os.h; ++ho) {
        for (int64_t wo = 0; wo < os.w; ++wo) {
          T sum = 0;
          for (int r = 0; r < wh; ++r) {
            const T* row = xp + (ho * sh + r) * W + wo * sw;
            for (int q = 0; q < ww; ++q) sum += row[q];
          }
          yp[ho * os.w + wo] = sum * inv;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& s = x.shape();
  Tensor<T> y(Shape{s.n, s.c, 1, 1});
  const int64_t plane = s.h * s.w;
  const T inv = T(1) / static_cast<T>(plane);
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < s.n; ++n) {
    for (int64_t c = 0; c < s.c; ++c) {
      const T* xp = x.plane(n, c);
      T sum = 0;
      for (int64_t i = 0; i < plane; ++i) sum += xp[i];
      y(n, c, 0, 0) = sum * inv;
    }
  }
  return y;
}

template <typename T>
Tensor<T> nearest_upsample(const Tensor<T>& x, int fh, int fw) {
  if (fh < 1 || fw < 1) throw ConfigError("upsample factor must be >= 1");
  const Shape& is = x.shape();
  Tensor<T> y(Shape{is.n, is.c, is.h * fh, is.w * fw});
  const int64_t OW = is.w * fw;
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < is.n; ++n) {
    for (int64_t c = 0; c < is.c; ++c) {
      const T* xp = x.plane(n, c);
      T* yp = y.plane(n, c);
      for (int64_t oh = 0; oh < is.h * fh; ++oh) {
        const T* row = xp + (oh / fh) * is.w;
        T* out = yp + oh * OW;
        for (int64_t ow = 0; ow < OW; ++ow) out[ow] = row[ow / fw];
      }
    }
  }
  return y;
}

namespace {

struct LinearTap {
  int64_t i0, i1;
  double t;  // weight of i1
};

inline LinearTap linear_tap(int64_t d, int f, int64_t extent) {
  double s = (static_cast<double>(d) + 0.5) / f - 0.5;
  if (s < 0) s = 0;
  if (s > static_cast<double>(extent - 1)) s = static_cast<double>(extent - 1);
  const int64_t i0 = static_cast<int64_t>(s);
  const int64_t i1 = std::min(i0 + 1, extent - 1);
  return {i0, i1, s - static_cast<double>(i0)};
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int fh, int fw) {
  if (fh < 1 || fw < 1) throw ConfigError("upsample factor must be >= 1");
  const Shape& is = x.shape();
  const int64_t OH = is.h * fh, OW = is.w * fw;
  Tensor<T> y(Shape{is.n, is.c, OH, OW});
  std::vector<LinearTap> th(OH), tw(OW);
  for (int64_t d = 0; d < OH; ++d) th[d] = linear_tap(d, fh, is.h);
  for (int64_t d = 0; d < OW; ++d) tw[d] = linear_tap(d, fw, is.w);
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < is.n; ++n) {
    for (int64_t c = 0; c < is.c; ++c) {
      const T* xp = x.plane(n, c);
      T* yp = y.plane(n, c);
      for (int64_t oh = 0; oh < OH; ++oh) {
        const LinearTap& a = th[oh];
        const T* r0 = xp + a.i0 * is.w;
        const T* r1 = xp + a.i1 * is.w;
        const T ta = static_cast<T>(a.t);
        for (int64_t ow = 0; ow < OW; ++ow) {
          const LinearTap& b = tw[ow];
          const T tb = static_cast<T>(b.t);
          const T top = r0[b.i0] + tb * (r0[b.i1] - r0[b.i0]);
          const T bot = r1[b.i0] + tb * (r1[b.i1] - r1[b.i0]);
          yp[oh * OW + ow] = top + ta * (bot - top);
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y, Activation act) {
  if (!(x.shape() == y.shape()))
    throw ConfigError("add shape mismatch: " + x.shape().str() + " vs " + y.shape().str());
  Tensor<T> out(x.shape());
  const int64_t n = x.numel();
#pragma omp parallel for
  for (int64_t i = 0; i < n; ++i) out[i] = apply_act(x[i] + y[i], act);
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& xs) {
  if (xs.empty()) throw ConfigError("concat needs at least one tensor");
  const Shape& first = xs[0]->shape();
  int64_t C = 0;
  for (const auto* t : xs) {
    const Shape& s = t->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw ConfigError("concat N/H/W mismatch: " + s.str() + " vs " + first.str());
    C += s.c;
  }
  Tensor<T> y(Shape{first.n, C, first.h, first.w});
  const int64_t plane = first.h * first.w;
#pragma omp parallel for
  for (int64_t n = 0; n < first.n; ++n) {
    int64_t c_off = 0;
    for (const auto* t : xs) {
      std::memcpy(y.plane(n, c_off), t->plane(n, 0),
                  static_cast<size_t>(t->shape().c * plane) * sizeof(T));
      c_off += t->shape().c;
    }
  }
  return y;
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  const Shape& xs = x.shape();
  if (s.shape().n != xs.n || s.shape().c != xs.c || s.shape().h != 1 || s.shape().w != 1)
    throw ConfigError("scale_channels expects (N,C,1,1) gains, got " + s.shape().str() +
                      " for input " + xs.str());
  Tensor<T> y(xs);
  const int64_t plane = xs.h * xs.w;
#pragma omp parallel for collapse(2)
  for (int64_t n = 0; n < xs.n; ++n) {
    for (int64_t c = 0; c < xs.c; ++c) {
      const T g = s(n, c, 0, 0);
      const T* xp = x.plane(n, c);
      T* yp = y.plane(n, c);
      for (int64_t i = 0; i < plane; ++i) yp[i] = xp[i] * g;
    }
  }
  return y;
}

#define ESANET_INSTANTIATE_OPS(T)                                                                \
  template Tensor<T> conv2d_direct<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,     \
                                      const ConvSpec&, Activation);                             \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,            \
                               const ConvSpec&, Activation);                                    \
  template Tensor<T> conv2d_backward_input<T>(const Tensor<T>&, const Tensor<T>&, const Shape&, \
                                              const ConvSpec&);                                 \
  template Tensor<T> conv2d_backward_weight<T>(const Tensor<T>&, const Tensor<T>&,              \
                                               const ConvSpec&);                                \
  template Tensor<T> conv2d_backward_bias<T>(const Tensor<T>&);                                 \
  template Tensor<T> batchnorm_infer<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                        const Tensor<T>&, const Tensor<T>&, T);                 \
  template BatchNormTrainResult<T> batchnorm_train<T>(const Tensor<T>&, const Tensor<T>&,       \
                                                      const Tensor<T>&, const Tensor<T>&,       \
                                                      const Tensor<T>&, T, T);                  \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                 \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                              \
  template Tensor<T> maxpool2d<T>(const Tensor<T>&, int, int, int, int, int, int);              \
  template Tensor<T> avgpool2d<T>(const Tensor<T>&, int, int, int, int);                        \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                      \
  template Tensor<T> nearest_upsample<T>(const Tensor<T>&, int, int);                           \
  template Tensor<T> bilinear_upsample<T>(const Tensor<T>&, int, int);                          \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&, Activation);                    \
  template Tensor<T> concat_channels<T>(const std::vector<const Tensor<T>*>&);                  \
  template Tensor<T> scale_channels<T>(const Tensor<T>&, const Tensor<T>&);

ESANET_INSTANTIATE_OPS(float)
ESANET_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace esanet
