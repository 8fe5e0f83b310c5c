#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "stemnet/tensor.hpp"

namespace stemnet {

struct ConvSpec {
  std::array<int, 3> kernel = {3, 3, 3};
  std::array<int, 3> stride = {1, 1, 1};
  std::array<int, 3> pad = {1, 1, 1};
  int in_channels = 0;
  int out_channels = 0;

  // (in + 2p - k) / s + 1; throws ConfigError unless positive and integer.
  std::array<std::int64_t, 3> out_extents(const std::array<std::int64_t, 3>& in) const;
  void validate() const;

  static ConvSpec same3(int in_ch, int out_ch) { return ConvSpec{{3, 3, 3}, {1, 1, 1}, {1, 1, 1}, in_ch, out_ch}; }
  static ConvSpec pointwise(int in_ch, int out_ch) { return ConvSpec{{1, 1, 1}, {1, 1, 1}, {0, 0, 0}, in_ch, out_ch}; }
};

template <typename T>
struct ConvGrads {
  Tensor<T> dx;  // empty when need_dx was false
  Tensor<T> dw;
  Tensor<T> db;
};

// x [N,Ci,D,H,W], w [Co,Ci,kd,kh,kw], b [Co] -> y [N,Co,D',H',W']
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvSpec& spec);

template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_y,
                             const ConvSpec& spec, bool need_dx = true);

// Fractionally strided convolution with kernel == stride == 2 and no padding:
// every spatial extent exactly doubles. w [Ci,Co,2,2,2], b [Co].
template <typename T>
Tensor<T> transposed_conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
ConvGrads<T> transposed_conv3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_y,
                                        bool need_dx = true);

template <typename T>
struct MaxPoolOut {
  Tensor<T> y;
  // Linear spatial index (d*H*W + h*W + w) of the max within each (n,c)
  // sub-volume, ties resolved to the lowest index.
  Tensor<std::int64_t> argmax;
};

// 2x2x2 window, stride 2; spatial extents must be even.
template <typename T>
MaxPoolOut<T> maxpool3d_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> maxpool3d_backward(const Tensor<std::int64_t>& argmax, const Tensor<T>& grad_y,
                             const Shape& input_shape);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x);

// Gradient at exactly 0 is defined as 0; the mask is x > 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y);

template <typename T>
struct BatchNormCache {
  Tensor<T> mean;  // [C], batch statistics used by the forward pass
  Tensor<T> var;   // [C], biased (1/m)
};

// Train mode: statistics over batch and space per channel (with batch size 1
// this is per-channel spatial statistics); running stats updated in place as
// r <- (1-momentum)*r + momentum*batch. Infer mode: running stats are used.
template <typename T>
Tensor<T> batchnorm3d_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              Tensor<T>& running_mean, Tensor<T>& running_var, bool train, T eps,
                              T momentum, BatchNormCache<T>* cache);

template <typename T>
struct BatchNormGrads {
  Tensor<T> dx;
  Tensor<T> dgamma;
  Tensor<T> dbeta;
};

// Full train-mode gradient, through the batch mean and variance.
template <typename T>
BatchNormGrads<T> batchnorm3d_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                       const BatchNormCache<T>& cache, const Tensor<T>& grad_y, T eps);

// [N,Ca,D,H,W] + [N,Cb,D,H,W] -> [N,Ca+Cb,D,H,W], a's channels first.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, std::int64_t ca, std::int64_t cb);

// Per-voxel softmax over the channel axis, stabilized by max subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x);

// dL/dlogits from dL/dp with p = softmax_channels(logits).
template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& p, const Tensor<T>& grad_p);

}  // namespace stemnet
