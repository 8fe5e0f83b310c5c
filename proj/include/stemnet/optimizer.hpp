#pragma once

#include <utility>

#include "stemnet/parallel.hpp"
#include "stemnet/tensor.hpp"
#include "stemnet/unet.hpp"

namespace stemnet {

// Classic momentum: v <- mu*v - lr*g; w <- w + v.
template <typename T>
void sgd_momentum_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr,
                       double momentum) {
  require_same_shape(param, grad, "sgd step param/grad");
  require_same_shape(param, velocity, "sgd step param/velocity");
  T* w = param.data();
  const T* g = grad.data();
  T* v = velocity.data();
  const T mu = static_cast<T>(momentum);
  const T rate = static_cast<T>(lr);
  parallel_for_range(param.numel(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      v[i] = mu * v[i] - rate * g[i];
      w[i] += v[i];
    }
  });
}

// Steps every learnable tensor; batch-norm running stats are not touched.
template <typename T>
void sgd_momentum_step(UNetParams<T>& params, const UNetParams<T>& grads,
                       UNetParams<T>& velocity, double lr, double momentum) {
  auto wt = params.tensor_table();
  auto gt = std::as_const(grads).tensor_table();
  auto vt = velocity.tensor_table();
  if (wt.size() != gt.size() || wt.size() != vt.size())
    throw ShapeError("sgd step: parameter table size mismatch");
  for (std::size_t i = 0; i < wt.size(); ++i) {
    if (!wt[i].learnable) continue;
    sgd_momentum_step(*wt[i].tensor, *gt[i].tensor, *vt[i].tensor, lr, momentum);
  }
}

}  // namespace stemnet
