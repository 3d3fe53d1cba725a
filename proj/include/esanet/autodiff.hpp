#pragma once

#include <functional>
#include <map>
#include <vector>

#include "esanet/ops.hpp"
#include "esanet/tensor.hpp"

namespace esanet {

// Eager reverse-mode tape. Tracks every primitive application in issue order
// (inputs always recorded before consumers) and keeps the forward values as
// saved context for the backward closures. One tape per logical training
// thread; independent tapes may run concurrently.
template <typename T>
class Tape {
 public:
  using ValueId = int32_t;
  static constexpr ValueId kNoValue = -1;

  ValueId leaf(Tensor<T> value, bool requires_grad = false);

  const Tensor<T>& value(ValueId id) const { return values_.at(id); }
  int64_t num_values() const { return static_cast<int64_t>(values_.size()); }

  ValueId conv2d(ValueId x, ValueId w, ValueId b, const ConvSpec& spec);
  // Normalizes with batch statistics; writes the momentum-updated running
  // stats through the out-parameters (non-differentiable buffers).
  ValueId batchnorm_train(ValueId x, ValueId gamma, ValueId beta, Tensor<T>& running_mean,
                          Tensor<T>& running_var, T eps, T momentum);
  ValueId batchnorm_infer(ValueId x, ValueId gamma, ValueId beta, const Tensor<T>& mean,
                          const Tensor<T>& var, T eps);
  ValueId relu(ValueId x);
  ValueId sigmoid(ValueId x);
  ValueId maxpool(ValueId x, int wh, int ww, int sh, int sw, int ph = 0, int pw = 0);
  ValueId avgpool(ValueId x, int wh, int ww, int sh, int sw);
  ValueId global_avg_pool(ValueId x);
  ValueId nearest_upsample(ValueId x, int fh, int fw);
  ValueId bilinear_upsample(ValueId x, int fh, int fw);
  ValueId add(ValueId x, ValueId y);
  ValueId concat(const std::vector<ValueId>& xs);
  ValueId scale_channels(ValueId x, ValueId s);

  // Mean over non-void pixels of weight[label] * (-log softmax[label]).
  // All-void input yields loss 0 with zero gradients and sets *all_void.
  ValueId softmax_cross_entropy(ValueId logits, const Tensor<T>& labels,
                                const std::vector<T>& class_weights, int void_label,
                                bool* all_void = nullptr);

  // Scalar <x, weights>; scalarizes outputs for gradient checking.
  ValueId weighted_sum(ValueId x, Tensor<T> weights);

  // Reverse traversal from a scalar root. Gradients of fan-out values are
  // summed. The result has an entry for every requires-grad leaf, zero-filled
  // if the leaf never influenced the root.
  std::map<ValueId, Tensor<T>> backward(ValueId root, T seed = T(1));

 private:
  struct Entry {
    OpKind kind;
    std::vector<ValueId> inputs;
    ValueId output;
    std::function<void(Tape&, const Tensor<T>&)> grad_fn;
  };

  ValueId push_value(Tensor<T> v, bool needs_grad);
  void accumulate(ValueId id, Tensor<T>&& g);
  bool needs(ValueId id) const { return needs_grad_[id]; }

  std::vector<Tensor<T>> values_;
  std::vector<bool> needs_grad_;
  std::vector<bool> is_leaf_;
  std::vector<Entry> entries_;
  std::vector<Tensor<T>> grads_;  // live only during backward
  std::vector<bool> has_grad_;
};

// Central-difference gradient check (step 1e-5) against the tape's analytic
// gradients. `build` wires leaves (pre-registered, requires_grad) into a
// scalar root. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
// denominator; at most `max_coords` coordinates are sampled per input.
template <typename T>
double grad_check(
    const std::function<typename Tape<T>::ValueId(Tape<T>&, const std::vector<typename Tape<T>::ValueId>&)>& build,
    const std::vector<Tensor<T>>& inputs, int64_t max_coords, Rng& rng);

extern template class Tape<float>;
extern template class Tape<double>;
extern template double grad_check<double>(
    const std::function<typename Tape<double>::ValueId(Tape<double>&,
                                                       const std::vector<typename Tape<double>::ValueId>&)>&,
    const std::vector<Tensor<double>>&, int64_t, Rng&);

}  // namespace esanet
