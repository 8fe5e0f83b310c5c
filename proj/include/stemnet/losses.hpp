#pragma once

#include <vector>

#include "stemnet/tensor.hpp"

namespace stemnet {

// Inverse-frequency class weights normalized so the most frequent class has
// weight 1: w_c = max_c'(f_c') / f_c.
struct ClassWeights {
  std::vector<double> w;
};

ClassWeights class_weights_from_frequencies(const std::vector<double>& freq);

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad;
};

// loss = -(1/W) * sum_v w_t(v) * log p_t(v),  W = sum_v w_t(v), p = softmax
// of the logits. grad is with respect to the logits. Targets must be one-hot.
template <typename T>
LossResult<T> weighted_cross_entropy(const Tensor<T>& logits, const Tensor<T>& onehot,
                                     const ClassWeights& weights);

// Squared-denominator soft Dice over all classes (background included):
// d_c = (2*sum p_c g_c + eps) / (sum p_c^2 + sum g_c^2 + eps),
// loss = 1 - mean_c d_c. grad is with respect to the probabilities.
template <typename T>
LossResult<T> soft_dice_loss(const Tensor<T>& probs, const Tensor<T>& onehot, double eps);

// softmax -> soft Dice -> softmax backward, the stage-B training path.
// grad is with respect to the logits.
template <typename T>
LossResult<T> dice_loss_from_logits(const Tensor<T>& logits, const Tensor<T>& onehot, double eps);

}  // namespace stemnet
