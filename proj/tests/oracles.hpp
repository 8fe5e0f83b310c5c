#pragma once

// Independent reference implementations used only by tests. Deliberately
// written as plain nested loops with no shared code with src/layers.cpp.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "stemnet/rng.hpp"
#include "stemnet/tensor.hpp"

namespace oracle {

using stemnet::Rng;
using stemnet::Tensor;

// Seven nested loops straight from the convolution definition.
template <typename T>
Tensor<T> naive_conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                       int stride, int pad) {
  const std::int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::int64_t Co = w.dim(0), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  const std::int64_t Do = (D + 2 * pad - kd) / stride + 1;
  const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<T> y({N, Co, Do, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < Co; ++co)
      for (std::int64_t od = 0; od < Do; ++od)
        for (std::int64_t oh = 0; oh < Ho; ++oh)
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            double acc = static_cast<double>(b[co]);
            for (std::int64_t ci = 0; ci < Ci; ++ci)
              for (std::int64_t fd = 0; fd < kd; ++fd)
                for (std::int64_t fh = 0; fh < kh; ++fh)
                  for (std::int64_t fw = 0; fw < kw; ++fw) {
                    const std::int64_t id = od * stride - pad + fd;
                    const std::int64_t ih = oh * stride - pad + fh;
                    const std::int64_t iw = ow * stride - pad + fw;
                    if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                    acc += static_cast<double>(x.at({n, ci, id, ih, iw})) *
                           static_cast<double>(w.at({co, ci, fd, fh, fw}));
                  }
            y.at({n, co, od, oh, ow}) = static_cast<T>(acc);
          }
  return y;
}

// Block max over disjoint 2x2x2 windows.
template <typename T>
Tensor<T> naive_maxpool2(const Tensor<T>& x) {
  const std::int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  Tensor<T> y({N, C, D / 2, H / 2, W / 2});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t od = 0; od < D / 2; ++od)
        for (std::int64_t oh = 0; oh < H / 2; ++oh)
          for (std::int64_t ow = 0; ow < W / 2; ++ow) {
            T best = x.at({n, c, od * 2, oh * 2, ow * 2});
            for (std::int64_t fd = 0; fd < 2; ++fd)
              for (std::int64_t fh = 0; fh < 2; ++fh)
                for (std::int64_t fw = 0; fw < 2; ++fw)
                  best = std::max(best, x.at({n, c, od * 2 + fd, oh * 2 + fh, ow * 2 + fw}));
            y.at({n, c, od, oh, ow}) = best;
          }
  return y;
}

// Per-class set counting for the Dice coefficient, one voxel at a time.
inline double naive_dsc(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                        std::uint8_t code) {
  std::int64_t na = 0, nb = 0, ni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] == code, ib = b[i] == code;
    na += ia;
    nb += ib;
    ni += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

template <typename T>
Tensor<T> random_tensor(stemnet::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Values pairwise separated by at least `gap` so kinked ops (maxpool) stay
// away from tie points during finite differencing.
template <typename T>
Tensor<T> distinct_tensor(stemnet::Shape shape, Rng& rng, double gap = 0.01) {
  Tensor<T> t(std::move(shape));
  std::vector<std::int64_t> order(static_cast<std::size_t>(t.numel()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  rng.shuffle(order);
  for (std::size_t i = 0; i < order.size(); ++i)
    t[order[i]] = static_cast<T>(static_cast<double>(i) * gap + rng.uniform(0.0, gap * 0.2));
  return t;
}

}  // namespace oracle
