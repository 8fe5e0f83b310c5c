#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stemnet/layers.hpp"
#include "stemnet/tensor.hpp"

namespace stemnet {

struct UNetConfig {
  int levels = 5;         // resolution steps; level levels-1 is the bottleneck
  int base_channels = 8;  // encoder level-0 width, doubled per level
  int in_channels = 1;
  int num_classes = 5;
  int input_extent = 96;  // must be divisible by 2^(levels-1)
  float bn_eps = 1e-5f;
  float bn_momentum = 0.1f;

  // levels == 1 (bottleneck plus head, no pooling) is accepted as the
  // degenerate case used for closed-form parameter accounting.
  void validate() const;
  int width(int level) const { return base_channels << level; }

  bool operator==(const UNetConfig&) const = default;
};

template <typename T>
struct ConvParam {
  Tensor<T> w, b;
};

template <typename T>
struct BNParam {
  Tensor<T> gamma, beta, running_mean, running_var;
};

template <typename T>
struct EncoderLevel {
  ConvParam<T> conv1, conv2;
  BNParam<T> bn;
};

template <typename T>
struct DecoderLevel {
  ConvParam<T> upconv, conv1, conv2;
};

template <typename T>
struct NamedTensorRef {
  std::string name;
  Tensor<T>* tensor;
  bool learnable;
};

template <typename T>
struct NamedTensorCRef {
  std::string name;
  const Tensor<T>* tensor;
  bool learnable;
};

// Every learnable tensor and batch-norm buffer of the network, in one
// canonical order shared by init, the optimizer, and the checkpoint codec.
template <typename T>
struct UNetParams {
  UNetConfig config;
  std::vector<EncoderLevel<T>> enc;  // levels-1 entries
  ConvParam<T> bott1, bott2;
  std::vector<DecoderLevel<T>> dec;  // levels-1 entries, dec[l] mirrors enc[l]
  ConvParam<T> head;

  std::vector<NamedTensorRef<T>> tensor_table();
  std::vector<NamedTensorCRef<T>> tensor_table() const;

  static UNetParams init(const UNetConfig& config, std::uint64_t seed);
  static UNetParams zeros(const UNetConfig& config);
  static UNetParams zeros_like(const UNetParams& other) { return zeros(other.config); }

  template <typename U>
  UNetParams<U> cast() const;
};

template <typename T>
struct EncCache {
  Tensor<T> a1, a2, skip;
  BatchNormCache<T> bn;
  MaxPoolOut<T> pool;
};

template <typename T>
struct DecCache {
  Tensor<T> up_out, cat, a1, out;
};

template <typename T>
struct UNetCache {
  Tensor<T> input;
  std::vector<EncCache<T>> enc;
  Tensor<T> bott_a1, bott_out;
  std::vector<DecCache<T>> dec;
};

// Encoder level: conv, ReLU, conv, ReLU, BN; the BN output feeds both the
// skip connection and a 2x2x2 max pool. Bottleneck: two conv+ReLU, no BN or
// pool. Decoder level: 2x2x2 up-convolution, concat(skip, upsampled), then
// conv, ReLU, conv, ReLU. Head: 1x1x1 conv to class logits (softmax is the
// consumer's job). Train mode updates running BN stats in `params` and fills
// `cache` for the backward pass.
template <typename T>
Tensor<T> unet_forward(UNetParams<T>& params, const Tensor<T>& x, bool train,
                       UNetCache<T>* cache = nullptr);

// Gradients for every learnable tensor, in a UNetParams container (batch-norm
// running-stat slots stay zero).
template <typename T>
UNetParams<T> unet_backward(const UNetParams<T>& params, const UNetCache<T>& cache,
                            const Tensor<T>& grad_logits);

// Closed-form learnable-parameter count for a config (no allocation).
std::int64_t parameter_count(const UNetConfig& config);

}  // namespace stemnet
