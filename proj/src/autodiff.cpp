#include "esanet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace esanet {

template <typename T>
typename Tape<T>::ValueId Tape<T>::push_value(Tensor<T> v, bool needs_grad) {
  values_.push_back(std::move(v));
  needs_grad_.push_back(needs_grad);
  is_leaf_.push_back(false);
  return static_cast<ValueId>(values_.size() - 1);
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  ValueId id = push_value(std::move(value), requires_grad);
  is_leaf_[id] = true;
  return id;
}

template <typename T>
void Tape<T>::accumulate(ValueId id, Tensor<T>&& g) {
  if (!has_grad_[id]) {
    grads_[id] = std::move(g);
    has_grad_[id] = true;
    return;
  }
  Tensor<T>& acc = grads_[id];
  const int64_t n = acc.numel();
  for (int64_t i = 0; i < n; ++i) acc[i] += g[i];
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::conv2d(ValueId x, ValueId w, ValueId b, const ConvSpec& spec) {
  const Tensor<T>* bias = b == kNoValue ? nullptr : &values_.at(b);
  Tensor<T> y = ops::conv2d(values_.at(x), values_.at(w), bias, spec);
  const bool ng = needs(x) || needs(w) || (b != kNoValue && needs(b));
  ValueId out = push_value(std::move(y), ng);
  std::vector<ValueId> ins{x, w};
  if (b != kNoValue) ins.push_back(b);
  entries_.push_back({OpKind::kConv2d, ins, out,
                      [x, w, b, spec](Tape& t, const Tensor<T>& gy) {
                        if (t.needs(x))
                          t.accumulate(x, ops::conv2d_backward_input(
                                              gy, t.values_[w], t.values_[x].shape(), spec));
                        if (t.needs(w))
                          t.accumulate(w, ops::conv2d_backward_weight(gy, t.values_[x], spec));
                        if (b != kNoValue && t.needs(b))
                          t.accumulate(b, ops::conv2d_backward_bias(gy));
                      }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::batchnorm_train(ValueId x, ValueId gamma, ValueId beta,
                                                   Tensor<T>& running_mean, Tensor<T>& running_var,
                                                   T eps, T momentum) {
  auto res = ops::batchnorm_train(values_.at(x), values_.at(gamma), values_.at(beta), running_mean,
                                  running_var, eps, momentum);
  running_mean = res.running_mean;
  running_var = res.running_var;
  ValueId mu = push_value(std::move(res.batch_mean), false);
  ValueId var = push_value(std::move(res.batch_var), false);
  const bool ng = needs(x) || needs(gamma) || needs(beta);
  ValueId out = push_value(std::move(res.y), ng);
  entries_.push_back(
      {OpKind::kBatchNorm, {x, gamma, beta}, out,
       [x, gamma, beta, mu, var, eps](Tape& t, const Tensor<T>& gy) {
         const Tensor<T>& xv = t.values_[x];
         const Tensor<T>& gammav = t.values_[gamma];
         const Tensor<T>& muv = t.values_[mu];
         const Tensor<T>& varv = t.values_[var];
         const Shape& s = xv.shape();
         const int64_t plane = s.h * s.w;
         const T m = static_cast<T>(s.n * plane);
         Tensor<T> dgamma(Shape{1, s.c, 1, 1}), dbeta(Shape{1, s.c, 1, 1});
         Tensor<T> dx = t.needs(x) ? Tensor<T>(s) : Tensor<T>();
         const bool want_dx = t.needs(x);
#pragma omp parallel for
         for (int64_t c = 0; c < s.c; ++c) {
           const T inv_std = T(1) / std::sqrt(varv[c] + eps);
           T sum_gy = 0, sum_gy_xhat = 0;
           for (int64_t n = 0; n < s.n; ++n) {
             const T* gp = gy.plane(n, c);
             const T* xp = xv.plane(n, c);
             for (int64_t i = 0; i < plane; ++i) {
               sum_gy += gp[i];
               sum_gy_xhat += gp[i] * (xp[i] - muv[c]) * inv_std;
             }
           }
           dbeta[c] = sum_gy;
           dgamma[c] = sum_gy_xhat;
           if (want_dx) {
             const T k = gammav[c] * inv_std;
             for (int64_t n = 0; n < s.n; ++n) {
               const T* gp = gy.plane(n, c);
               const T* xp = xv.plane(n, c);
               T* dp = dx.plane(n, c);
               for (int64_t i = 0; i < plane; ++i) {
                 const T xhat = (xp[i] - muv[c]) * inv_std;
                 dp[i] = k * (gp[i] - sum_gy / m - xhat * sum_gy_xhat / m);
               }
             }
           }
         }
         if (want_dx) t.accumulate(x, std::move(dx));
         if (t.needs(gamma)) t.accumulate(gamma, std::move(dgamma));
         if (t.needs(beta)) t.accumulate(beta, std::move(dbeta));
       }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::batchnorm_infer(ValueId x, ValueId gamma, ValueId beta,
                                                   const Tensor<T>& mean, const Tensor<T>& var,
                                                   T eps) {
  Tensor<T> y = ops::batchnorm_infer(values_.at(x), values_.at(gamma), values_.at(beta), mean, var,
                                     eps);
  ValueId mu = push_value(mean, false);
  ValueId vr = push_value(var, false);
  const bool ng = needs(x) || needs(gamma) || needs(beta);
  ValueId out = push_value(std::move(y), ng);
  entries_.push_back({OpKind::kBatchNorm, {x, gamma, beta}, out,
                      [x, gamma, beta, mu, vr, eps](Tape& t, const Tensor<T>& gy) {
                        const Tensor<T>& xv = t.values_[x];
                        const Tensor<T>& gammav = t.values_[gamma];
                        const Tensor<T>& muv = t.values_[mu];
                        const Tensor<T>& varv = t.values_[vr];
                        const Shape& s = xv.shape();
                        const int64_t plane = s.h * s.w;
                        Tensor<T> dgamma(Shape{1, s.c, 1, 1}, T(0));
                        Tensor<T> dbeta(Shape{1, s.c, 1, 1}, T(0));
                        Tensor<T> dx = t.needs(x) ? Tensor<T>(s) : Tensor<T>();
#pragma omp parallel for
                        for (int64_t c = 0; c < s.c; ++c) {
                          const T inv_std = T(1) / std::sqrt(varv[c] + eps);
                          T sg = 0, sb = 0;
                          for (int64_t n = 0; n < s.n; ++n) {
                            const T* gp = gy.plane(n, c);
                            const T* xp = xv.plane(n, c);
                            T* dp = t.needs(x) ? dx.plane(n, c) : nullptr;
                            for (int64_t i = 0; i < plane; ++i) {
                              sg += gp[i] * (xp[i] - muv[c]) * inv_std;
                              sb += gp[i];
                              if (dp) dp[i] = gp[i] * gammav[c] * inv_std;
                            }
                          }
                          dgamma[c] = sg;
                          dbeta[c] = sb;
                        }
                        if (t.needs(x)) t.accumulate(x, std::move(dx));
                        if (t.needs(gamma)) t.accumulate(gamma, std::move(dgamma));
                        if (t.needs(beta)) t.accumulate(beta, std::move(dbeta));
                      }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::relu(ValueId x) {
  ValueId out = push_value(ops::relu(values_.at(x)), needs(x));
  entries_.push_back({OpKind::kRelu, {x}, out, [x](Tape& t, const Tensor<T>& gy) {
                        if (!t.needs(x)) return;
                        const Tensor<T>& xv = t.values_[x];
                        Tensor<T> dx(xv.shape());
                        const int64_t n = xv.numel();
                        // subgradient at exactly 0 is 0
                        for (int64_t i = 0; i < n; ++i) dx[i] = xv[i] > T(0) ? gy[i] : T(0);
                        t.accumulate(x, std::move(dx));
                      }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::sigmoid(ValueId x) {
  ValueId out = push_value(ops::sigmoid(values_.at(x)), needs(x));
  entries_.push_back({OpKind::kSigmoid, {x}, out, [x, out](Tape& t, const Tensor<T>& gy) {
                        if (!t.needs(x)) return;
                        const Tensor<T>& yv = t.values_[out];
                        Tensor<T> dx(yv.shape());
                        for (int64_t i = 0; i < yv.numel(); ++i)
                          dx[i] = gy[i] * yv[i] * (T(1) - yv[i]);
                        t.accumulate(x, std::move(dx));
                      }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::maxpool(ValueId x, int wh, int ww, int sh, int sw, int ph,
                                           int pw) {
  ValueId out = push_value(ops::maxpool2d(values_.at(x), wh, ww, sh, sw, ph, pw), needs(x));
  entries_.push_back(
      {OpKind::kMaxPool, {x}, out, [x, out, wh, ww, sh, sw, ph, pw](Tape& t, const Tensor<T>& gy) {
         if (!t.needs(x)) return;
         const Tensor<T>& xv = t.values_[x];
         const Shape& os = t.values_[out].shape();
         const Shape& is = xv.shape();
         Tensor<T> dx(is, T(0));
         // gradient routes to the first maximal element in row-major window order
#pragma omp parallel for collapse(2)
         for (int64_t n = 0; n < os.n; ++n) {
           for (int64_t c = 0; c < os.c; ++c) {
             const T* xp = xv.plane(n, c);
             const T* gp = gy.plane(n, c);
             T* dp = dx.plane(n, c);
             for (int64_t ho = 0; ho < os.h; ++ho) {
               for (int64_t wo = 0; wo < os.w; ++wo) {
                 T best = -std::numeric_limits<T>::infinity();
                 int64_t best_idx = -1;
                 for (int r = 0; r < wh; ++r) {
                   const int64_t ih = ho * sh - ph + r;
                   if (ih < 0 || ih >= is.h) continue;
                   for (int q = 0; q < ww; ++q) {
                     const int64_t iw = wo * sw - pw + q;
                     if (iw < 0 || iw >= is.w) continue;
                     if (xp[ih * is.w + iw] > best) {
                       best = xp[ih * is.w + iw];
                       best_idx = ih * is.w + iw;
                     }
                   }
                 }
                 dp[best_idx] += gp[ho * os.w + wo];
               }
             }
           }
         }
         t.accumulate(x, std::move(dx));
       }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::avgpool(ValueId x, int wh, int ww, int sh, int sw) {
  ValueId out = push_value(ops::avgpool2d(values_.at(x), wh, ww, sh, sw), needs(x));
  entries_.push_back(
      {OpKind::kAvgPool, {x}, out, [x, out, wh, ww, sh, sw](Tape& t, const Tensor<T>& gy) {
         if (!t.needs(x)) return;
         const Shape& os = t.values_[out].shape();
         const Shape& is = t.values_[x].shape();
         Tensor<T> dx(is, T(0));
         const T inv = T(1) / static_cast<T>(wh * ww);
#pragma omp parallel for collapse(2)
         for (int64_t n = 0; n < os.n; ++n) {
           for (int64_t c = 0; c < os.c; ++c) {
             const T* gp = gy.plane(n, c);
             T* dp = dx.plane(n, c);
             for (int64_t ho = 0; ho < os.h; ++ho)
               for (int64_t wo = 0; wo < os.w; ++wo) {
                 const T g = gp[ho * os.w + wo] * inv;
                 for (int r = 0; r < wh; ++r)
                   for (int q = 0; q < ww; ++q)
                     dp[(ho * sh + r) * is.w + (wo * sw + q)] += g;
               }
           }
         }
         t.accumulate(x, std::move(dx));
       }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::global_avg_pool(ValueId x) {
  ValueId out = push_value(ops::global_avg_pool(values_.at(x)), needs(x));
  entries_.push_back({OpKind::kGlobalAvgPool, {x}, out, [x](Tape& t, const Tensor<T>& gy) {
                        if (!t.needs(x)) return;
                        const Shape& is = t.values_[x].shape();
                        Tensor<T> dx(is);
                        const T inv = T(1) / static_cast<T>(is.h * is.w);
                        for (int64_t n = 0; n < is.n; ++n)
                          for (int64_t c = 0; c < is.c; ++c) {
                            T* dp = dx.plane(n, c);
                            const T g = gy(n, c, 0, 0) * inv;
                            for (int64_t i = 0; i < is.h * is.w; ++i) dp[i] = g;
                          }
                        t.accumulate(x, std::move(dx));
                      }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::nearest_upsample(ValueId x, int fh, int fw) {
  ValueId out = push_value(ops::nearest_upsample(values_.at(x), fh, fw), needs(x));
  entries_.push_back(
      {OpKind::kNearestUpsample, {x}, out, [x, fh, fw](Tape& t, const Tensor<T>& gy) {
         if (!t.needs(x)) return;
         const Shape& is = t.values_[x].shape();
         const Shape& os = gy.shape();
         Tensor<T> dx(is, T(0));
         // adjoint of replication: sum over each fh x fw block
#pragma omp parallel for collapse(2)
         for (int64_t n = 0; n < is.n; ++n) {
           for (int64_t c = 0; c < is.c; ++c) {
             const T* gp = gy.plane(n, c);
             T* dp = dx.plane(n, c);
             for (int64_t oh = 0; oh < os.h; ++oh) {
               const int64_t ih = oh / fh;
               for (int64_t ow = 0; ow < os.w; ++ow) dp[ih * is.w + ow / fw] += gp[oh * os.w + ow];
             }
           }
         }
         t.accumulate(x, std::move(dx));
       }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::bilinear_upsample(ValueId x, int fh, int fw) {
  ValueId out = push_value(ops::bilinear_upsample(values_.at(x), fh, fw), needs(x));
  entries_.push_back(
      {OpKind::kBilinearUpsample, {x}, out, [x, fh, fw](Tape& t, const Tensor<T>& gy) {
         if (!t.needs(x)) return;
         const Shape& is = t.values_[x].shape();
         const Shape& os = gy.shape();
         Tensor<T> dx(is, T(0));
         auto tap = [](int64_t d, int f, int64_t extent, int64_t& i0, int64_t& i1, T& tt) {
           double s = (static_cast<double>(d) + 0.5) / f - 0.5;
           s = std::clamp(s, 0.0, static_cast<double>(extent - 1));
           i0 = static_cast<int64_t>(s);
           i1 = std::min(i0 + 1, extent - 1);
           tt = static_cast<T>(s - static_cast<double>(i0));
         };
#pragma omp parallel for collapse(2)
         for (int64_t n = 0; n < is.n; ++n) {
           for (int64_t c = 0; c < is.c; ++c) {
             const T* gp = gy.plane(n, c);
             T* dp = dx.plane(n, c);
             for (int64_t oh = 0; oh < os.h; ++oh) {
               int64_t h0, h1;
               T th;
               tap(oh, fh, is.h, h0, h1, th);
               for (int64_t ow = 0; ow < os.w; ++ow) {
                 int64_t w0, w1;
                 T tw;
                 tap(ow, fw, is.w, w0, w1, tw);
                 const T g = gp[oh * os.w + ow];
                 dp[h0 * is.w + w0] += g * (T(1) - th) * (T(1) - tw);
                 dp[h0 * is.w + w1] += g * (T(1) - th) * tw;
                 dp[h1 * is.w + w0] += g * th * (T(1) - tw);
                 dp[h1 * is.w + w1] += g * th * tw;
               }
             }
           }
         }
         t.accumulate(x, std::move(dx));
       }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::add(ValueId x, ValueId y) {
  ValueId out = push_value(ops::add(values_.at(x), values_.at(y)), needs(x) || needs(y));
  entries_.push_back({OpKind::kAdd, {x, y}, out, [x, y](Tape& t, const Tensor<T>& gy) {
                        if (t.needs(x)) t.accumulate(x, Tensor<T>(gy));
                        if (t.needs(y)) t.accumulate(y, Tensor<T>(gy));
                      }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::concat(const std::vector<ValueId>& xs) {
  std::vector<const Tensor<T>*> ptrs;
  bool ng = false;
  for (ValueId id : xs) {
    ptrs.push_back(&values_.at(id));
    ng = ng || needs(id);
  }
  ValueId out = push_value(ops::concat_channels(ptrs), ng);
  entries_.push_back({OpKind::kConcat, xs, out, [xs](Tape& t, const Tensor<T>& gy) {
                        int64_t c_off = 0;
                        for (ValueId id : xs) {
                          const Shape& s = t.values_[id].shape();
                          if (t.needs(id)) {
                            Tensor<T> dx(s);
                            for (int64_t n = 0; n < s.n; ++n)
                              std::memcpy(dx.plane(n, 0), gy.plane(n, c_off),
                                          static_cast<size_t>(s.c * s.h * s.w) * sizeof(T));
                            t.accumulate(id, std::move(dx));
                          }
                          c_off += s.c;
                        }
                      }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::scale_channels(ValueId x, ValueId s) {
  ValueId out = push_value(ops::scale_channels(values_.at(x), values_.at(s)), needs(x) || needs(s));
  entries_.push_back({OpKind::kScaleChannels, {x, s}, out, [x, s](Tape& t, const Tensor<T>& gy) {
                        const Tensor<T>& xv = t.values_[x];
                        const Tensor<T>& sv = t.values_[s];
                        const Shape& xs = xv.shape();
                        const int64_t plane = xs.h * xs.w;
                        if (t.needs(x)) {
                          Tensor<T> dx(xs);
                          for (int64_t n = 0; n < xs.n; ++n)
                            for (int64_t c = 0; c < xs.c; ++c) {
                              const T g = sv(n, c, 0, 0);
                              const T* gp = gy.plane(n, c);
                              T* dp = dx.plane(n, c);
                              for (int64_t i = 0; i < plane; ++i) dp[i] = gp[i] * g;
                            }
                          t.accumulate(x, std::move(dx));
                        }
                        if (t.needs(s)) {
                          Tensor<T> ds(sv.shape());
                          for (int64_t n = 0; n < xs.n; ++n)
                            for (int64_t c = 0; c < xs.c; ++c) {
                              const T* gp = gy.plane(n, c);
                              const T* xp = xv.plane(n, c);
                              T acc = 0;
                              for (int64_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
                              ds(n, c, 0, 0) = acc;
                            }
                          t.accumulate(s, std::move(ds));
                        }
                      }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::softmax_cross_entropy(ValueId logits, const Tensor<T>& labels,
                                                         const std::vector<T>& class_weights,
                                                         int void_label, bool* all_void) {
  const Tensor<T>& z = values_.at(logits);
  const Shape& s = z.shape();
  const int64_t C = s.c;
  if (labels.shape().n != s.n || labels.shape().c != 1 || labels.shape().h != s.h ||
      labels.shape().w != s.w)
    throw ConfigError("labels must be (N,1,H,W) matching logits, got " + labels.shape().str());
  if (static_cast<int64_t>(class_weights.size()) != C)
    throw ConfigError("class_weights length must equal channel count");
  for (T wgt : class_weights)
    if (!(wgt > T(0))) throw ConfigError("class_weights must be positive");

  // probs saved for the backward pass; scan is serial so the reduction order
  // is fixed regardless of thread count.
  Tensor<T> probs(s);
  const int64_t plane = s.h * s.w;
  int64_t scored = 0;
  double total = 0;
  for (int64_t n = 0; n < s.n; ++n) {
    for (int64_t p = 0; p < plane; ++p) {
      const T lab_raw = labels[n * plane + p];
      const int lab = static_cast<int>(lab_raw);
      if (lab != void_label && (lab < 0 || lab >= C))
        throw ConfigError("label " + std::to_string(lab) + " outside [0," + std::to_string(C) +
                          ") and not void");
      T zmax = -std::numeric_limits<T>::infinity();
      for (int64_t c = 0; c < C; ++c) zmax = std::max(zmax, z.plane(n, c)[p]);
      T denom = 0;
      for (int64_t c = 0; c < C; ++c) denom += std::exp(z.plane(n, c)[p] - zmax);
      const T lse = zmax + std::log(denom);
      for (int64_t c = 0; c < C; ++c) probs.plane(n, c)[p] = std::exp(z.plane(n, c)[p] - lse);
      if (lab == void_label) continue;
      ++scored;
      total += static_cast<double>(class_weights[lab]) *
               static_cast<double>(lse - z.plane(n, lab)[p]);
    }
  }
  if (all_void) *all_void = scored == 0;
  const T loss = scored == 0 ? T(0) : static_cast<T>(total / static_cast<double>(scored));

  ValueId probs_id = push_value(std::move(probs), false);
  ValueId labels_id = push_value(labels, false);
  ValueId out = push_value(Tensor<T>(Shape{1, 1, 1, 1}, loss), needs(logits));
  entries_.push_back(
      {OpKind::kSoftmaxCrossEntropy, {logits}, out,
       [logits, probs_id, labels_id, class_weights, void_label, scored](Tape& t,
                                                                        const Tensor<T>& gy) {
         if (!t.needs(logits) || scored == 0) return;
         const Tensor<T>& probs = t.values_[probs_id];
         const Tensor<T>& labels = t.values_[labels_id];
         const Shape& s = probs.shape();
         const int64_t plane = s.h * s.w;
         const T scale = gy[0] / static_cast<T>(scored);
         Tensor<T> dz(s, T(0));
#pragma omp parallel for
         for (int64_t n = 0; n < s.n; ++n) {
           for (int64_t p = 0; p < plane; ++p) {
             const int lab = static_cast<int>(labels[n * plane + p]);
             if (lab == void_label) continue;  // void pixels get exactly zero gradient
             const T wgt = class_weights[lab] * scale;
             for (int64_t c = 0; c < s.c; ++c) {
               const T onehot = c == lab ? T(1) : T(0);
               dz.plane(n, c)[p] = wgt * (probs.plane(n, c)[p] - onehot);
             }
           }
         }
         t.accumulate(logits, std::move(dz));
       }});
  return out;
}

template <typename T>
typename Tape<T>::ValueId Tape<T>::weighted_sum(ValueId x, Tensor<T> weights) {
  const Tensor<T>& xv = values_.at(x);
  if (!(weights.shape() == xv.shape()))
    throw ConfigError("weighted_sum weights shape mismatch");
  double acc = 0;
  for (int64_t i = 0; i < xv.numel(); ++i)
    acc += static_cast<double>(xv[i]) * static_cast<double>(weights[i]);
  ValueId w_id = push_value(std::move(weights), false);
  ValueId out = push_value(Tensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(acc)), needs(x));
  entries_.push_back({OpKind::kWeightedSum, {x}, out, [x, w_id](Tape& t, const Tensor<T>& gy) {
                        if (!t.needs(x)) return;
                        const Tensor<T>& w = t.values_[w_id];
                        Tensor<T> dx(w.shape());
                        for (int64_t i = 0; i < w.numel(); ++i) dx[i] = gy[0] * w[i];
                        t.accumulate(x, std::move(dx));
                      }});
  return out;
}

template <typename T>
std::map<typename Tape<T>::ValueId, Tensor<T>> Tape<T>::backward(ValueId root, T seed) {
  if (root < 0 || root >= static_cast<ValueId>(values_.size()))
    throw ConfigError("backward: unknown root value");
  if (values_[root].numel() != 1)
    throw ConfigError("backward: root must be scalar, got " + values_[root].shape().str());
  grads_.assign(values_.size(), Tensor<T>());
  has_grad_.assign(values_.size(), false);
  accumulate(root, Tensor<T>(Shape{1, 1, 1, 1}, seed));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!has_grad_[it->output] || !needs_grad_[it->output]) continue;
    it->grad_fn(*this, grads_[it->output]);
  }
  std::map<ValueId, Tensor<T>> out;
  for (ValueId id = 0; id < static_cast<ValueId>(values_.size()); ++id) {
    if (!is_leaf_[id] || !needs_grad_[id]) continue;
    out.emplace(id, has_grad_[id] ? std::move(grads_[id]) : Tensor<T>(values_[id].shape(), T(0)));
  }
  grads_.clear();
  has_grad_.clear();
  return out;
}

template <typename T>
double grad_check(
    const std::function<typename Tape<T>::ValueId(Tape<T>&, const std::vector<typename Tape<T>::ValueId>&)>& build,
    const std::vector<Tensor<T>>& inputs, int64_t max_coords, Rng& rng) {
  static_assert(std::is_same_v<T, double>, "gradient checks run in 64-bit");
  auto eval = [&](const std::vector<Tensor<T>>& ins) {
    Tape<T> tape;
    std::vector<typename Tape<T>::ValueId> ids;
    for (const auto& t : ins) ids.push_back(tape.leaf(t, true));
    auto root = build(tape, ids);
    return tape.value(root)[0];
  };

  // analytic gradients
  Tape<T> tape;
  std::vector<typename Tape<T>::ValueId> ids;
  for (const auto& t : inputs) ids.push_back(tape.leaf(t, true));
  auto root = build(tape, ids);
  auto grads = tape.backward(root);

  const T step = T(1e-5);
  double max_err = 0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<T>& grad = grads.at(ids[k]);
    const int64_t n = inputs[k].numel();
    std::vector<int64_t> coords;
    if (n <= max_coords) {
      coords.resize(n);
      for (int64_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (int64_t i = 0; i < max_coords; ++i) coords.push_back(rng.uniform_int(0, n - 1));
    }
    std::vector<Tensor<T>> work = inputs;
    for (int64_t idx : coords) {
      const T orig = work[k][idx];
      work[k][idx] = orig + step;
      const T fp = eval(work);
      work[k][idx] = orig - step;
      const T fm = eval(work);
      work[k][idx] = orig;
      const double numeric = static_cast<double>(fp - fm) / (2.0 * static_cast<double>(step));
      const double analytic = static_cast<double>(grad[idx]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      max_err = std::max(max_err, std::abs(analytic - numeric) / denom);
    }
  }
  return max_err;
}

template class Tape<float>;
template class Tape<double>;
template double grad_check<double>(
    const std::function<typename Tape<double>::ValueId(Tape<double>&,
                                                       const std::vector<typename Tape<double>::ValueId>&)>&,
    const std::vector<Tensor<double>>&, int64_t, Rng&);

}  // namespace esanet
