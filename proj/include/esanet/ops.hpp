#pragma once

#include <cstdint>
#include <initializer_list>
#include <type_traits>
#include <optional>
#include <string>
#include <vector>

#include "esanet/tensor.hpp"

namespace esanet {

// Every primitive the engine knows. Graph nodes and tape entries share these.
enum class OpKind : uint8_t {
  kInput,
  kConv2d,
  kBatchNorm,
  kRelu,
  kSigmoid,
  kMaxPool,
  kAvgPool,
  kGlobalAvgPool,
  kNearestUpsample,
  kBilinearUpsample,
  kAdd,
  kConcat,
  kScaleChannels,
  kSoftmaxCrossEntropy,
  kWeightedSum,
};

const char* op_kind_name(OpKind k);
OpKind op_kind_from_name(const std::string& name);

enum class Activation : uint8_t { kNone, kRelu };

struct ConvSpec {
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int kernel_h = 1, kernel_w = 1;
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int64_t groups = 1;
  bool has_bias = false;

  void validate() const;
  Shape weight_shape() const {
    return Shape{out_channels, in_channels / groups, kernel_h, kernel_w};
  }
  bool operator==(const ConvSpec&) const = default;
};

// floor((in + 2*pad - kernel)/stride) + 1 per axis; throws if < 1.
Shape conv_out_shape(const Shape& in, const ConvSpec& spec);
Shape pool_out_shape(const Shape& in, int wh, int ww, int sh, int sw, int ph, int pw);

namespace ops {

// Zero-padded direct convolution. Accumulation per output element runs over
// (ci, kh, kw) in that order; the f64 engine path keeps exactly this order.
template <typename T>
Tensor<T> conv2d_direct(const Tensor<T>& x, const Tensor<T>& w,
                        std::type_identity_t<const Tensor<T>*> bias, const ConvSpec& spec,
                        Activation act = Activation::kNone);

// Dispatching kernel: f32 uses an im2col+GEMM fast path for groups==1 and a
// direct depthwise path for groups==C; f64 always takes the direct kernel.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w,
                 std::type_identity_t<const Tensor<T>*> bias, const ConvSpec& spec,
                 Activation act = Activation::kNone);

// Gradients of conv2d wrt input, weight, and bias.
template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_y, const Tensor<T>& w, const Shape& x_shape,
                                const ConvSpec& spec);
template <typename T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& grad_y, const Tensor<T>& x, const ConvSpec& spec);
template <typename T>
Tensor<T> conv2d_backward_bias(const Tensor<T>& grad_y);

// y = gamma*(x - mean)/sqrt(var + eps) + beta, all per channel (1,C,1,1).
template <typename T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const Tensor<T>& mean, const Tensor<T>& var, T eps);

template <typename T>
struct BatchNormTrainResult {
  Tensor<T> y;
  Tensor<T> running_mean, running_var;  // (1-momentum)*running + momentum*batch
  Tensor<T> batch_mean, batch_var;      // biased variance over (N,H,W)
};

template <typename T>
BatchNormTrainResult<T> batchnorm_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                        const Tensor<T>& beta, const Tensor<T>& running_mean,
                                        const Tensor<T>& running_var, T eps, T momentum);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

// Padding cells (if any) never win the max; pad must be < window.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int wh, int ww, int sh, int sw, int ph = 0, int pw = 0);

// Unpadded mean pooling. When stride == window the window extents must divide
// the input extents (context-module contract); otherwise FactorViolation.
template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int wh, int ww, int sh, int sw);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

// y(n,c,h,w) = x(n,c,h/fh,w/fw), integer division.
template <typename T>
Tensor<T> nearest_upsample(const Tensor<T>& x, int fh, int fw);
template <typename T>
Tensor<T> nearest_upsample(const Tensor<T>& x, int f) {
  return nearest_upsample(x, f, f);
}

// Half-pixel sampling: source = (dst + 0.5)/f - 0.5, clamped to the edges.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int fh, int fw);
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int f) {
  return bilinear_upsample(x, f, f);
}

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y, Activation act = Activation::kNone);

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& xs);
template <typename T>
Tensor<T> concat_channels(std::initializer_list<const Tensor<T>*> xs) {
  return concat_channels(std::vector<const Tensor<T>*>(xs));
}

// x:(N,C,H,W) scaled by s:(N,C,1,1) per channel. SE gate application.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);

}  // namespace ops
}  // namespace esanet
