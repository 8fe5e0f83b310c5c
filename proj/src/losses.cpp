#include "stemnet/losses.hpp"

#include <algorithm>
#include <cmath>

#include "stemnet/errors.hpp"
#include "stemnet/layers.hpp"

namespace stemnet {

ClassWeights class_weights_from_frequencies(const std::vector<double>& freq) {
  if (freq.empty()) throw ValueError("class weights: empty frequency vector");
  double max_f = 0.0;
  for (double f : freq) {
    if (!std::isfinite(f) || f < 0.0) throw ValueError("class weights: invalid frequency");
    max_f = std::max(max_f, f);
  }
  ClassWeights cw;
  cw.w.reserve(freq.size());
  for (std::size_t c = 0; c < freq.size(); ++c) {
    if (freq[c] <= 0.0)
      throw ValueError("class weights: class " + std::to_string(c) +
                       " is absent from the training set");
    cw.w.push_back(max_f / freq[c]);
  }
  return cw;
}

namespace {

template <typename T>
void check_loss_shapes(const Tensor<T>& a, const Tensor<T>& b, std::size_t num_classes,
                       const char* what) {
  require_rank(a, 5, what);
  require_same_shape(a, b, what);
  if (num_classes != 0 && static_cast<std::size_t>(a.dim(1)) != num_classes)
    throw ShapeError(std::string(what) + ": " + std::to_string(a.dim(1)) +
                     " channels vs " + std::to_string(num_classes) + " class weights");
}

// The per-voxel target class; throws unless the target is strictly one-hot.
template <typename T>
std::int64_t onehot_class(const T* target, std::int64_t C, std::int64_t stride, std::int64_t v) {
  std::int64_t cls = -1;
  for (std::int64_t c = 0; c < C; ++c) {
    const T g = target[c * stride + v];
    if (g == T{1}) {
      if (cls >= 0) throw ValueError("loss target is not one-hot: two classes set at a voxel");
      cls = c;
    } else if (g != T{0}) {
      throw ValueError("loss target is not one-hot: value other than 0/1");
    }
  }
  if (cls < 0) throw ValueError("loss target is not one-hot: no class set at a voxel");
  return cls;
}

}  // namespace

template <typename T>
LossResult<T> weighted_cross_entropy(const Tensor<T>& logits, const Tensor<T>& onehot,
                                     const ClassWeights& weights) {
  check_loss_shapes(logits, onehot, weights.w.size(), "weighted cross-entropy");
  const std::int64_t N = logits.dim(0), C = logits.dim(1);
  const std::int64_t spatial = logits.dim(2) * logits.dim(3) * logits.dim(4);

  LossResult<T> out;
  out.grad = Tensor<T>(logits.shape());
  Tensor<T> probs = softmax_channels(logits);

  // First pass: normalizer W and weighted log-likelihood.
  double weight_sum = 0.0;
  double nll = 0.0;
  std::vector<std::int64_t> cls(static_cast<std::size_t>(N * spatial));
  for (std::int64_t n = 0; n < N; ++n) {
    const T* g = onehot.data() + n * C * spatial;
    const T* z = logits.data() + n * C * spatial;
    for (std::int64_t v = 0; v < spatial; ++v) {
      const std::int64_t t = onehot_class(g, C, spatial, v);
      cls[static_cast<std::size_t>(n * spatial + v)] = t;
      // log p_t from the logits directly for numerical stability
      T mx = z[v];
      for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, z[c * spatial + v]);
      double denom = 0.0;
      for (std::int64_t c = 0; c < C; ++c)
        denom += std::exp(static_cast<double>(z[c * spatial + v] - mx));
      const double logp = static_cast<double>(z[t * spatial + v] - mx) - std::log(denom);
      const double wc = weights.w[static_cast<std::size_t>(t)];
      weight_sum += wc;
      nll -= wc * logp;
    }
  }
  out.loss = nll / weight_sum;

  const double inv_w = 1.0 / weight_sum;
  for (std::int64_t n = 0; n < N; ++n) {
    const T* p = probs.data() + n * C * spatial;
    T* gr = out.grad.data() + n * C * spatial;
    for (std::int64_t v = 0; v < spatial; ++v) {
      const std::int64_t t = cls[static_cast<std::size_t>(n * spatial + v)];
      const double scale = weights.w[static_cast<std::size_t>(t)] * inv_w;
      for (std::int64_t c = 0; c < C; ++c) {
        const double pc = static_cast<double>(p[c * spatial + v]);
        gr[c * spatial + v] = static_cast<T>(scale * (pc - (c == t ? 1.0 : 0.0)));
      }
    }
  }
  return out;
}

template <typename T>
LossResult<T> soft_dice_loss(const Tensor<T>& probs, const Tensor<T>& onehot, double eps) {
  check_loss_shapes(probs, onehot, 0, "soft dice");
  if (eps < 0.0) throw ConfigError("soft dice: eps must be >= 0");
  const std::int64_t N = probs.dim(0), C = probs.dim(1);
  const std::int64_t spatial = probs.dim(2) * probs.dim(3) * probs.dim(4);

  // Per-class reductions over batch and space.
  std::vector<double> inter(static_cast<std::size_t>(C), 0.0);
  std::vector<double> psq(static_cast<std::size_t>(C), 0.0);
  std::vector<double> gsq(static_cast<std::size_t>(C), 0.0);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = probs.data() + (n * C + c) * spatial;
      const T* g = onehot.data() + (n * C + c) * spatial;
      double i_acc = 0, p_acc = 0, g_acc = 0;
      for (std::int64_t v = 0; v < spatial; ++v) {
        const double pv = static_cast<double>(p[v]);
        if (pv < -1e-6 || pv > 1.0 + 1e-6)
          throw ValueError("soft dice: probability " + std::to_string(pv) + " outside [0, 1]");
        const double gv = static_cast<double>(g[v]);
        i_acc += pv * gv;
        p_acc += pv * pv;
        g_acc += gv * gv;
      }
      inter[static_cast<std::size_t>(c)] += i_acc;
      psq[static_cast<std::size_t>(c)] += p_acc;
      gsq[static_cast<std::size_t>(c)] += g_acc;
    }

  std::vector<double> numer(static_cast<std::size_t>(C)), denom(static_cast<std::size_t>(C));
  double dice_sum = 0.0;
  for (std::int64_t c = 0; c < C; ++c) {
    numer[static_cast<std::size_t>(c)] = 2.0 * inter[static_cast<std::size_t>(c)] + eps;
    denom[static_cast<std::size_t>(c)] =
        psq[static_cast<std::size_t>(c)] + gsq[static_cast<std::size_t>(c)] + eps;
    if (denom[static_cast<std::size_t>(c)] == 0.0)
      throw ValueError("soft dice: empty class with eps = 0 makes the coefficient undefined");
    dice_sum += numer[static_cast<std::size_t>(c)] / denom[static_cast<std::size_t>(c)];
  }

  LossResult<T> out;
  out.loss = 1.0 - dice_sum / static_cast<double>(C);
  out.grad = Tensor<T>(probs.shape());

  // d d_c / d p_c(v) = (2 g - 2 p * d_c') / denom with d_c' = numer/denom.
  const double scale = -1.0 / static_cast<double>(C);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = probs.data() + (n * C + c) * spatial;
      const T* g = onehot.data() + (n * C + c) * spatial;
      T* gr = out.grad.data() + (n * C + c) * spatial;
      const double d = numer[static_cast<std::size_t>(c)] / denom[static_cast<std::size_t>(c)];
      const double inv_denom = 1.0 / denom[static_cast<std::size_t>(c)];
      for (std::int64_t v = 0; v < spatial; ++v) {
        const double pv = static_cast<double>(p[v]);
        const double gv = static_cast<double>(g[v]);
        gr[v] = static_cast<T>(scale * inv_denom * (2.0 * gv - 2.0 * pv * d));
      }
    }
  return out;
}

template <typename T>
LossResult<T> dice_loss_from_logits(const Tensor<T>& logits, const Tensor<T>& onehot, double eps) {
  Tensor<T> probs = softmax_channels(logits);
  LossResult<T> wrt_probs = soft_dice_loss(probs, onehot, eps);
  LossResult<T> out;
  out.loss = wrt_probs.loss;
  out.grad = softmax_channels_backward(probs, wrt_probs.grad);
  return out;
}

#define STEMNET_INSTANTIATE_LOSS(T)                                                          \
  template LossResult<T> weighted_cross_entropy<T>(const Tensor<T>&, const Tensor<T>&,       \
                                                   const ClassWeights&);                     \
  template LossResult<T> soft_dice_loss<T>(const Tensor<T>&, const Tensor<T>&, double);      \
  template LossResult<T> dice_loss_from_logits<T>(const Tensor<T>&, const Tensor<T>&, double);

STEMNET_INSTANTIATE_LOSS(float)
STEMNET_INSTANTIATE_LOSS(double)

#undef STEMNET_INSTANTIATE_LOSS

}  // namespace stemnet
