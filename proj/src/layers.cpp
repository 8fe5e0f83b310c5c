#include "stemnet/layers.hpp"

#include <algorithm>
#include <cstring>

#include "stemnet/parallel.hpp"

namespace stemnet {

namespace {

// Valid output range [lo, hi) for one kernel tap: positions o with
// 0 <= o*stride - pad + tap < in.
inline std::pair<std::int64_t, std::int64_t> tap_range(std::int64_t in, std::int64_t out,
                                                       std::int64_t tap, std::int64_t stride,
                                                       std::int64_t pad) {
  std::int64_t lo = pad - tap;
  lo = lo <= 0 ? 0 : (lo + stride - 1) / stride;
  const std::int64_t num = in - 1 + pad - tap;
  const std::int64_t hi = num < 0 ? lo : std::min(out, num / stride + 1);
  return {lo, std::max(lo, hi)};
}

// y[i] += w0*x[i-1] + w1*x[i] + w2*x[i+1] over [0, n), edge taps dropped.
// The hot loop of every 3x3x3 same-padded convolution.
template <typename T>
inline void row_axpy3(T* __restrict y, const T* __restrict x, T w0, T w1, T w2, std::int64_t n) {
  if (n == 1) {
    y[0] += w1 * x[0];
    return;
  }
  y[0] += w1 * x[0] + w2 * x[1];
  for (std::int64_t i = 1; i < n - 1; ++i) y[i] += w0 * x[i - 1] + w1 * x[i] + w2 * x[i + 1];
  y[n - 1] += w0 * x[n - 2] + w1 * x[n - 1];
}

// Unrolled dot product with a fixed combine order (bit-reproducible and
// still vectorizable without -ffast-math).
template <typename T>
inline T dot_span(const T* __restrict a, const T* __restrict b, std::int64_t n) {
  constexpr int U = sizeof(T) == 4 ? 16 : 8;
  T acc[U] = {};
  std::int64_t i = 0;
  for (; i + U <= n; i += U)
    for (int u = 0; u < U; ++u) acc[u] += a[i + u] * b[i + u];
  T total{};
  for (int u = 0; u < U; ++u) total += acc[u];
  for (; i < n; ++i) total += a[i] * b[i];
  return total;
}

template <typename T>
void check_conv_args(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                     const ConvSpec& spec) {
  require_rank(x, 5, "conv3d input");
  require_rank(w, 5, "conv3d weight");
  require_rank(b, 1, "conv3d bias");
  spec.validate();
  const Shape expect_w = {spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1],
                          spec.kernel[2]};
  if (w.shape() != expect_w)
    throw ShapeError("conv3d weight: expected " + shape_str(expect_w) + ", got " +
                     shape_str(w.shape()));
  if (x.dim(1) != spec.in_channels)
    throw ShapeError("conv3d input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  if (b.dim(0) != spec.out_channels)
    throw ShapeError("conv3d bias length " + std::to_string(b.dim(0)) + " != out_channels " +
                     std::to_string(spec.out_channels));
}

}  // namespace

std::array<std::int64_t, 3> ConvSpec::out_extents(const std::array<std::int64_t, 3>& in) const {
  std::array<std::int64_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    const std::int64_t num = in[a] + 2 * pad[a] - kernel[a];
    if (num < 0 || num % stride[a] != 0)
      throw ConfigError("conv3d: extent " + std::to_string(in[a]) + " with kernel " +
                        std::to_string(kernel[a]) + ", stride " + std::to_string(stride[a]) +
                        ", pad " + std::to_string(pad[a]) +
                        " does not produce an integer output extent");
    out[a] = num / stride[a] + 1;
  }
  return out;
}

void ConvSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (kernel[a] < 1 || stride[a] < 1 || pad[a] < 0)
      throw ConfigError("conv3d: kernel/stride must be >= 1 and padding >= 0");
  }
  if (in_channels < 1 || out_channels < 1) throw ConfigError("conv3d: channel counts must be >= 1");
}

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         const ConvSpec& spec) {
  check_conv_args(x, w, b, spec);
  const std::int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::int64_t Co = spec.out_channels;
  const std::int64_t k0 = spec.kernel[0], k1 = spec.kernel[1], k2 = spec.kernel[2];
  const std::int64_t s0 = spec.stride[0], s1 = spec.stride[1], s2 = spec.stride[2];
  const std::int64_t p0 = spec.pad[0], p1 = spec.pad[1], p2 = spec.pad[2];
  const auto oe = spec.out_extents({D, H, W});
  const std::int64_t Do = oe[0], Ho = oe[1], Wo = oe[2];

  Tensor<T> y({N, Co, Do, Ho, Wo});
  const T* xp = x.data();
  const T* wp = w.data();
  const T* bp = b.data();
  T* yp = y.data();
  const bool fast3 = k2 == 3 && s2 == 1 && p2 == 1 && W >= 2;

  parallel_for(N * Co * Do, [&](std::int64_t job) {
    const std::int64_t n = job / (Co * Do);
    const std::int64_t co = (job / Do) % Co;
    const std::int64_t od = job % Do;
    T* yplane = yp + ((n * Co + co) * Do + od) * Ho * Wo;
    std::fill(yplane, yplane + Ho * Wo, bp[co]);
    for (std::int64_t ci = 0; ci < Ci; ++ci) {
      const T* xch = xp + (n * Ci + ci) * D * H * W;
      const T* wch = wp + (co * Ci + ci) * k0 * k1 * k2;
      for (std::int64_t fd = 0; fd < k0; ++fd) {
        const std::int64_t id = od * s0 - p0 + fd;
        if (id < 0 || id >= D) continue;
        const T* xdp = xch + id * H * W;
        const T* wkd = wch + fd * k1 * k2;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          T* yrow = yplane + oh * Wo;
          for (std::int64_t fh = 0; fh < k1; ++fh) {
            const std::int64_t ih = oh * s1 - p1 + fh;
            if (ih < 0 || ih >= H) continue;
            const T* xrow = xdp + ih * W;
            const T* wk = wkd + fh * k2;
            if (fast3) {
              row_axpy3(yrow, xrow, wk[0], wk[1], wk[2], W);
            } else {
              for (std::int64_t fw = 0; fw < k2; ++fw) {
                const auto [lo, hi] = tap_range(W, Wo, fw, s2, p2);
                const T wv = wk[fw];
                const T* xr = xrow + lo * s2 - p2 + fw;
                T* yr = yrow + lo;
                const std::int64_t cnt = hi - lo;
                if (s2 == 1)
                  for (std::int64_t i = 0; i < cnt; ++i) yr[i] += wv * xr[i];
                else
                  for (std::int64_t i = 0; i < cnt; ++i) yr[i] += wv * xr[i * s2];
              }
            }
          }
        }
      }
    }
  });
  return y;
}

template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_y,
                             const ConvSpec& spec, bool need_dx) {
  check_conv_args(x, w, Tensor<T>({spec.out_channels}), spec);
  const std::int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::int64_t Co = spec.out_channels;
  const std::int64_t k0 = spec.kernel[0], k1 = spec.kernel[1], k2 = spec.kernel[2];
  const std::int64_t s0 = spec.stride[0], s1 = spec.stride[1], s2 = spec.stride[2];
  const std::int64_t p0 = spec.pad[0], p1 = spec.pad[1], p2 = spec.pad[2];
  const auto oe = spec.out_extents({D, H, W});
  const std::int64_t Do = oe[0], Ho = oe[1], Wo = oe[2];
  const Shape expect_gy = {N, Co, Do, Ho, Wo};
  if (grad_y.shape() != expect_gy)
    throw ShapeError("conv3d backward: expected grad_y " + shape_str(expect_gy) + ", got " +
                     shape_str(grad_y.shape()));

  ConvGrads<T> g;
  g.dw = Tensor<T>({Co, Ci, k0, k1, k2});
  g.db = Tensor<T>({Co});
  const T* xp = x.data();
  const T* wp = w.data();
  const T* gyp = grad_y.data();

  parallel_for(Co, [&](std::int64_t co) {
    T acc{};
    for (std::int64_t n = 0; n < N; ++n) {
      const T* gy = gyp + (n * Co + co) * Do * Ho * Wo;
      constexpr int U = 8;
      T part[U] = {};
      std::int64_t i = 0;
      const std::int64_t m = Do * Ho * Wo;
      for (; i + U <= m; i += U)
        for (int u = 0; u < U; ++u) part[u] += gy[i + u];
      for (int u = 0; u < U; ++u) acc += part[u];
      for (; i < m; ++i) acc += gy[i];
    }
    g.db[co] = acc;
  });

  T* dwp = g.dw.data();
  parallel_for(Co * Ci, [&](std::int64_t job) {
    const std::int64_t co = job / Ci;
    const std::int64_t ci = job % Ci;
    T* dwk = dwp + (co * Ci + ci) * k0 * k1 * k2;
    for (std::int64_t fd = 0; fd < k0; ++fd) {
      const auto [lod, hid] = tap_range(D, Do, fd, s0, p0);
      for (std::int64_t fh = 0; fh < k1; ++fh) {
        const auto [loh, hih] = tap_range(H, Ho, fh, s1, p1);
        for (std::int64_t fw = 0; fw < k2; ++fw) {
          const auto [low, hiw] = tap_range(W, Wo, fw, s2, p2);
          T acc{};
          for (std::int64_t n = 0; n < N; ++n) {
            const T* xch = xp + (n * Ci + ci) * D * H * W;
            const T* gych = gyp + (n * Co + co) * Do * Ho * Wo;
            for (std::int64_t od = lod; od < hid; ++od) {
              const std::int64_t id = od * s0 - p0 + fd;
              for (std::int64_t oh = loh; oh < hih; ++oh) {
                const std::int64_t ih = oh * s1 - p1 + fh;
                const T* gyrow = gych + (od * Ho + oh) * Wo + low;
                const T* xrow = xch + (id * H + ih) * W + (low * s2 - p2 + fw);
                if (s2 == 1) {
                  acc += dot_span(gyrow, xrow, hiw - low);
                } else {
                  for (std::int64_t i = 0; i < hiw - low; ++i) acc += gyrow[i] * xrow[i * s2];
                }
              }
            }
          }
          dwk[(fd * k1 + fh) * k2 + fw] = acc;
        }
      }
    }
  });

  if (need_dx) {
    g.dx = Tensor<T>({N, Ci, D, H, W});
    T* dxp = g.dx.data();
    const bool fast3 = k2 == 3 && s2 == 1 && p2 == 1 && W >= 2 && Wo == W;
    parallel_for(N * Ci * D, [&](std::int64_t job) {
      const std::int64_t n = job / (Ci * D);
      const std::int64_t ci = (job / D) % Ci;
      const std::int64_t id = job % D;
      T* dxplane = dxp + ((n * Ci + ci) * D + id) * H * W;
      for (std::int64_t co = 0; co < Co; ++co) {
        const T* gych = gyp + (n * Co + co) * Do * Ho * Wo;
        const T* wch = wp + (co * Ci + ci) * k0 * k1 * k2;
        for (std::int64_t fd = 0; fd < k0; ++fd) {
          const std::int64_t t = id + p0 - fd;
          if (t < 0 || t % s0 != 0) continue;
          const std::int64_t od = t / s0;
          if (od >= Do) continue;
          const T* gydp = gych + od * Ho * Wo;
          const T* wkd = wch + fd * k1 * k2;
          for (std::int64_t ih = 0; ih < H; ++ih) {
            T* dxrow = dxplane + ih * W;
            for (std::int64_t fh = 0; fh < k1; ++fh) {
              const std::int64_t t2 = ih + p1 - fh;
              if (t2 < 0 || t2 % s1 != 0) continue;
              const std::int64_t oh = t2 / s1;
              if (oh >= Ho) continue;
              const T* gyrow = gydp + oh * Wo;
              const T* wk = wkd + fh * k2;
              if (fast3) {
                row_axpy3(dxrow, gyrow, wk[2], wk[1], wk[0], W);
              } else {
                for (std::int64_t fw = 0; fw < k2; ++fw) {
                  const auto [lo, hi] = tap_range(W, Wo, fw, s2, p2);
                  const T wv = wk[fw];
                  const T* gr = gyrow + lo;
                  T* dr = dxrow + lo * s2 - p2 + fw;
                  const std::int64_t cnt = hi - lo;
                  if (s2 == 1)
                    for (std::int64_t i = 0; i < cnt; ++i) dr[i] += wv * gr[i];
                  else
                    for (std::int64_t i = 0; i < cnt; ++i) dr[i * s2] += wv * gr[i];
                }
              }
            }
          }
        }
      }
    });
  }
  return g;
}

namespace {

template <typename T>
void check_tconv_args(const Tensor<T>& x, const Tensor<T>& w, std::int64_t bias_len) {
  require_rank(x, 5, "transposed conv3d input");
  require_rank(w, 5, "transposed conv3d weight");
  if (w.dim(2) != 2 || w.dim(3) != 2 || w.dim(4) != 2)
    throw ConfigError("transposed conv3d: kernel must be 2x2x2 (stride 2)");
  if (w.dim(0) != x.dim(1))
    throw ShapeError("transposed conv3d: input has " + std::to_string(x.dim(1)) +
                     " channels, weight expects " + std::to_string(w.dim(0)));
  if (bias_len >= 0 && bias_len != w.dim(1))
    throw ShapeError("transposed conv3d: bias length mismatch");
}

}  // namespace

template <typename T>
Tensor<T> transposed_conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(b, 1, "transposed conv3d bias");
  check_tconv_args(x, w, b.dim(0));
  const std::int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::int64_t Co = w.dim(1);
  Tensor<T> y({N, Co, 2 * D, 2 * H, 2 * W});
  const T* xp = x.data();
  const T* wp = w.data();
  T* yp = y.data();

  // kernel == stride, so output voxel (od,oh,ow) receives exactly the tap
  // (od&1, oh&1, ow&1) from input voxel (od/2, oh/2, ow/2).
  parallel_for(N * Co * 2 * D, [&](std::int64_t job) {
    const std::int64_t n = job / (Co * 2 * D);
    const std::int64_t co = (job / (2 * D)) % Co;
    const std::int64_t od = job % (2 * D);
    const std::int64_t id = od / 2, fd = od % 2;
    T* yplane = yp + ((n * Co + co) * 2 * D + od) * 4 * H * W;
    std::fill(yplane, yplane + 4 * H * W, b[co]);
    for (std::int64_t ci = 0; ci < Ci; ++ci) {
      const T* xdp = xp + ((n * Ci + ci) * D + id) * H * W;
      const T* wk = wp + ((ci * Co + co) * 2 + fd) * 4;
      for (std::int64_t oh = 0; oh < 2 * H; ++oh) {
        const std::int64_t ih = oh / 2, fh = oh % 2;
        const T* xrow = xdp + ih * W;
        T* yrow = yplane + oh * 2 * W;
        const T w0 = wk[fh * 2 + 0], w1 = wk[fh * 2 + 1];
        for (std::int64_t iw = 0; iw < W; ++iw) {
          const T xv = xrow[iw];
          yrow[2 * iw] += xv * w0;
          yrow[2 * iw + 1] += xv * w1;
        }
      }
    }
  });
  return y;
}

template <typename T>
ConvGrads<T> transposed_conv3d_backward(const Tensor<T>& x, const Tensor<T>& w,
                                        const Tensor<T>& grad_y, bool need_dx) {
  check_tconv_args(x, w, -1);
  const std::int64_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::int64_t Co = w.dim(1);
  const Shape expect_gy = {N, Co, 2 * D, 2 * H, 2 * W};
  if (grad_y.shape() != expect_gy)
    throw ShapeError("transposed conv3d backward: expected grad_y " + shape_str(expect_gy) +
                     ", got " + shape_str(grad_y.shape()));

  ConvGrads<T> g;
  g.dw = Tensor<T>({Ci, Co, 2, 2, 2});
  g.db = Tensor<T>({Co});
  const T* xp = x.data();
  const T* wp = w.data();
  const T* gyp = grad_y.data();

  parallel_for(Co, [&](std::int64_t co) {
    T acc{};
    for (std::int64_t n = 0; n < N; ++n) {
      const T* gy = gyp + (n * Co + co) * 8 * D * H * W;
      const std::int64_t m = 8 * D * H * W;
      constexpr int U = 8;
      T part[U] = {};
      std::int64_t i = 0;
      for (; i + U <= m; i += U)
        for (int u = 0; u < U; ++u) part[u] += gy[i + u];
      for (int u = 0; u < U; ++u) acc += part[u];
      for (; i < m; ++i) acc += gy[i];
    }
    g.db[co] = acc;
  });

  T* dwp = g.dw.data();
  parallel_for(Ci * Co, [&](std::int64_t job) {
    const std::int64_t ci = job / Co;
    const std::int64_t co = job % Co;
    for (std::int64_t fd = 0; fd < 2; ++fd)
      for (std::int64_t fh = 0; fh < 2; ++fh)
        for (std::int64_t fw = 0; fw < 2; ++fw) {
          T acc{};
          for (std::int64_t n = 0; n < N; ++n) {
            const T* xch = xp + (n * Ci + ci) * D * H * W;
            const T* gych = gyp + (n * Co + co) * 8 * D * H * W;
            for (std::int64_t id = 0; id < D; ++id)
              for (std::int64_t ih = 0; ih < H; ++ih) {
                const T* xrow = xch + (id * H + ih) * W;
                const T* gyrow = gych + ((2 * id + fd) * 2 * H + 2 * ih + fh) * 2 * W + fw;
                for (std::int64_t iw = 0; iw < W; ++iw) acc += xrow[iw] * gyrow[2 * iw];
              }
          }
          dwp[(((ci * Co + co) * 2 + fd) * 2 + fh) * 2 + fw] = acc;
        }
  });

  if (need_dx) {
    g.dx = Tensor<T>({N, Ci, D, H, W});
    T* dxp = g.dx.data();
    parallel_for(N * Ci * D, [&](std::int64_t job) {
      const std::int64_t n = job / (Ci * D);
      const std::int64_t ci = (job / D) % Ci;
      const std::int64_t id = job % D;
      T* dxplane = dxp + ((n * Ci + ci) * D + id) * H * W;
      for (std::int64_t co = 0; co < Co; ++co) {
        const T* gych = gyp + (n * Co + co) * 8 * D * H * W;
        const T* wk = wp + (ci * Co + co) * 8;
        for (std::int64_t fd = 0; fd < 2; ++fd) {
          const T* gydp = gych + (2 * id + fd) * 4 * H * W;
          for (std::int64_t ih = 0; ih < H; ++ih) {
            T* dxrow = dxplane + ih * W;
            for (std::int64_t fh = 0; fh < 2; ++fh) {
              const T* gyrow = gydp + (2 * ih + fh) * 2 * W;
              const T w0 = wk[(fd * 2 + fh) * 2 + 0], w1 = wk[(fd * 2 + fh) * 2 + 1];
              for (std::int64_t iw = 0; iw < W; ++iw)
                dxrow[iw] += w0 * gyrow[2 * iw] + w1 * gyrow[2 * iw + 1];
            }
          }
        }
      }
    });
  }
  return g;
}

template <typename T>
MaxPoolOut<T> maxpool3d_forward(const Tensor<T>& x) {
  require_rank(x, 5, "maxpool3d input");
  const std::int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  if (D % 2 || H % 2 || W % 2)
    throw ConfigError("maxpool3d: spatial extents must be divisible by 2, got " +
                      shape_str(x.shape()));
  MaxPoolOut<T> out;
  out.y = Tensor<T>({N, C, D / 2, H / 2, W / 2});
  out.argmax = Tensor<std::int64_t>({N, C, D / 2, H / 2, W / 2});
  const T* xp = x.data();
  T* yp = out.y.data();
  std::int64_t* ap = out.argmax.data();

  parallel_for(N * C, [&](std::int64_t job) {
    const T* xch = xp + job * D * H * W;
    T* ych = yp + job * (D / 2) * (H / 2) * (W / 2);
    std::int64_t* ach = ap + job * (D / 2) * (H / 2) * (W / 2);
    std::int64_t o = 0;
    for (std::int64_t od = 0; od < D / 2; ++od)
      for (std::int64_t oh = 0; oh < H / 2; ++oh)
        for (std::int64_t ow = 0; ow < W / 2; ++ow, ++o) {
          T best{};
          std::int64_t best_idx = -1;
          for (std::int64_t fd = 0; fd < 2; ++fd)
            for (std::int64_t fh = 0; fh < 2; ++fh)
              for (std::int64_t fw = 0; fw < 2; ++fw) {
                const std::int64_t idx =
                    ((od * 2 + fd) * H + oh * 2 + fh) * W + ow * 2 + fw;
                const T v = xch[idx];
                if (best_idx < 0 || v > best) {  // ties keep the lowest index
                  best = v;
                  best_idx = idx;
                }
              }
          ych[o] = best;
          ach[o] = best_idx;
        }
  });
  return out;
}

template <typename T>
Tensor<T> maxpool3d_backward(const Tensor<std::int64_t>& argmax, const Tensor<T>& grad_y,
                             const Shape& input_shape) {
  if (input_shape.size() != 5) throw ShapeError("maxpool3d backward: input shape must be rank 5");
  if (argmax.shape() != grad_y.shape())
    throw ShapeError("maxpool3d backward: argmax/grad_y shape mismatch");
  Tensor<T> dx(input_shape);
  const std::int64_t N = input_shape[0], C = input_shape[1];
  const std::int64_t spatial = input_shape[2] * input_shape[3] * input_shape[4];
  const std::int64_t out_spatial = grad_y.numel() / (N * C);
  T* dxp = dx.data();
  const T* gyp = grad_y.data();
  const std::int64_t* ap = argmax.data();
  parallel_for(N * C, [&](std::int64_t job) {
    T* dxch = dxp + job * spatial;
    const T* gych = gyp + job * out_spatial;
    const std::int64_t* ach = ap + job * out_spatial;
    for (std::int64_t o = 0; o < out_spatial; ++o) dxch[ach[o]] += gych[o];
  });
  return dx;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* xp = x.data();
  T* yp = y.data();
  parallel_for_range(x.numel(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) yp[i] = xp[i] > T{} ? xp[i] : T{};
  });
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y) {
  require_same_shape(x, grad_y, "relu backward");
  Tensor<T> dx(x.shape());
  const T* xp = x.data();
  const T* gyp = grad_y.data();
  T* dxp = dx.data();
  parallel_for_range(x.numel(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) dxp[i] = xp[i] > T{} ? gyp[i] : T{};
  });
  return dx;
}

template <typename T>
Tensor<T> batchnorm3d_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              Tensor<T>& running_mean, Tensor<T>& running_var, bool train, T eps,
                              T momentum, BatchNormCache<T>* cache) {
  require_rank(x, 5, "batchnorm3d input");
  const std::int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  for (const Tensor<T>* t :
       std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var})
    if (t->rank() != 1 || t->dim(0) != C)
      throw ShapeError("batchnorm3d: per-channel parameter length != channel count " +
                       std::to_string(C));

  Tensor<T> y(x.shape());
  Tensor<T> mean({C}), var({C});
  const std::int64_t spatial = D * H * W;
  const std::int64_t m = N * spatial;
  const T* xp = x.data();
  T* yp = y.data();

  if (train) {
    parallel_for(C, [&](std::int64_t c) {
      double sum = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* xc = xp + (n * C + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) sum += static_cast<double>(xc[i]);
      }
      const double mu = sum / static_cast<double>(m);
      double sq = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* xc = xp + (n * C + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const double d = static_cast<double>(xc[i]) - mu;
          sq += d * d;
        }
      }
      mean[c] = static_cast<T>(mu);
      var[c] = static_cast<T>(sq / static_cast<double>(m));
    });
    for (std::int64_t c = 0; c < C; ++c) {
      running_mean[c] = (T{1} - momentum) * running_mean[c] + momentum * mean[c];
      running_var[c] = (T{1} - momentum) * running_var[c] + momentum * var[c];
    }
  } else {
    mean = running_mean;
    var = running_var;
  }

  parallel_for(N * C, [&](std::int64_t job) {
    const std::int64_t c = job % C;
    const T inv = T{1} / std::sqrt(var[c] + eps);
    const T scale = gamma[c] * inv;
    const T shift = beta[c] - scale * mean[c];
    const T* xc = xp + job * spatial;
    T* yc = yp + job * spatial;
    for (std::int64_t i = 0; i < spatial; ++i) yc[i] = scale * xc[i] + shift;
  });

  if (cache) {
    cache->mean = std::move(mean);
    cache->var = std::move(var);
  }
  return y;
}

template <typename T>
BatchNormGrads<T> batchnorm3d_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                       const BatchNormCache<T>& cache, const Tensor<T>& grad_y,
                                       T eps) {
  require_same_shape(x, grad_y, "batchnorm3d backward");
  const std::int64_t N = x.dim(0), C = x.dim(1);
  const std::int64_t spatial = x.dim(2) * x.dim(3) * x.dim(4);
  const std::int64_t m = N * spatial;
  BatchNormGrads<T> g;
  g.dx = Tensor<T>(x.shape());
  g.dgamma = Tensor<T>({C});
  g.dbeta = Tensor<T>({C});
  const T* xp = x.data();
  const T* gyp = grad_y.data();
  T* dxp = g.dx.data();

  parallel_for(C, [&](std::int64_t c) {
    const double mu = static_cast<double>(cache.mean[c]);
    const double inv = 1.0 / std::sqrt(static_cast<double>(cache.var[c]) + static_cast<double>(eps));
    double dbeta = 0, dgamma = 0;
    for (std::int64_t n = 0; n < N; ++n) {
      const T* xc = xp + (n * C + c) * spatial;
      const T* gyc = gyp + (n * C + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const double xhat = (static_cast<double>(xc[i]) - mu) * inv;
        dbeta += static_cast<double>(gyc[i]);
        dgamma += static_cast<double>(gyc[i]) * xhat;
      }
    }
    g.dbeta[c] = static_cast<T>(dbeta);
    g.dgamma[c] = static_cast<T>(dgamma);
    const double k = static_cast<double>(gamma[c]) * inv;
    const double mean_dy = dbeta / static_cast<double>(m);
    const double mean_dy_xhat = dgamma / static_cast<double>(m);
    for (std::int64_t n = 0; n < N; ++n) {
      const T* xc = xp + (n * C + c) * spatial;
      const T* gyc = gyp + (n * C + c) * spatial;
      T* dxc = dxp + (n * C + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const double xhat = (static_cast<double>(xc[i]) - mu) * inv;
        dxc[i] = static_cast<T>(k * (static_cast<double>(gyc[i]) - mean_dy - xhat * mean_dy_xhat));
      }
    }
  });
  return g;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 5, "concat_channels a");
  require_rank(b, 5, "concat_channels b");
  for (std::size_t d : {0u, 2u, 3u, 4u})
    if (a.dim(d) != b.dim(d))
      throw ShapeError("concat_channels: non-channel extents differ, " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
  const std::int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::int64_t spatial = a.dim(2) * a.dim(3) * a.dim(4);
  Tensor<T> out({N, Ca + Cb, a.dim(2), a.dim(3), a.dim(4)});
  T* op = out.data();
  const T* ap = a.data();
  const T* bp = b.data();
  parallel_for(N, [&](std::int64_t n) {
    std::memcpy(op + n * (Ca + Cb) * spatial, ap + n * Ca * spatial,
                static_cast<std::size_t>(Ca * spatial) * sizeof(T));
    std::memcpy(op + (n * (Ca + Cb) + Ca) * spatial, bp + n * Cb * spatial,
                static_cast<std::size_t>(Cb * spatial) * sizeof(T));
  });
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, std::int64_t ca,
                                               std::int64_t cb) {
  require_rank(g, 5, "split_channels");
  if (g.dim(1) != ca + cb)
    throw ShapeError("split_channels: channel count " + std::to_string(g.dim(1)) +
                     " != " + std::to_string(ca) + " + " + std::to_string(cb));
  const std::int64_t N = g.dim(0);
  const std::int64_t spatial = g.dim(2) * g.dim(3) * g.dim(4);
  Tensor<T> a({N, ca, g.dim(2), g.dim(3), g.dim(4)});
  Tensor<T> b({N, cb, g.dim(2), g.dim(3), g.dim(4)});
  const T* gp = g.data();
  parallel_for(N, [&](std::int64_t n) {
    std::memcpy(a.data() + n * ca * spatial, gp + n * (ca + cb) * spatial,
                static_cast<std::size_t>(ca * spatial) * sizeof(T));
    std::memcpy(b.data() + n * cb * spatial, gp + (n * (ca + cb) + ca) * spatial,
                static_cast<std::size_t>(cb * spatial) * sizeof(T));
  });
  return {std::move(a), std::move(b)};
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  require_rank(x, 5, "softmax_channels");
  const std::int64_t N = x.dim(0), C = x.dim(1);
  const std::int64_t spatial = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor<T> p(x.shape());
  const T* xp = x.data();
  T* pp = p.data();
  parallel_for(N, [&](std::int64_t n) {
    const T* xn = xp + n * C * spatial;
    T* pn = pp + n * C * spatial;
    for (std::int64_t v = 0; v < spatial; ++v) {
      T mx = xn[v];
      for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, xn[c * spatial + v]);
      T denom{};
      for (std::int64_t c = 0; c < C; ++c) {
        const T e = std::exp(xn[c * spatial + v] - mx);
        pn[c * spatial + v] = e;
        denom += e;
      }
      const T inv = T{1} / denom;
      for (std::int64_t c = 0; c < C; ++c) pn[c * spatial + v] *= inv;
    }
  });
  return p;
}

template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& p, const Tensor<T>& grad_p) {
  require_same_shape(p, grad_p, "softmax backward");
  const std::int64_t N = p.dim(0), C = p.dim(1);
  const std::int64_t spatial = p.dim(2) * p.dim(3) * p.dim(4);
  Tensor<T> dz(p.shape());
  const T* pp = p.data();
  const T* gp = grad_p.data();
  T* dp = dz.data();
  parallel_for(N, [&](std::int64_t n) {
    const T* pn = pp + n * C * spatial;
    const T* gn = gp + n * C * spatial;
    T* dn = dp + n * C * spatial;
    for (std::int64_t v = 0; v < spatial; ++v) {
      T inner{};
      for (std::int64_t c = 0; c < C; ++c) inner += gn[c * spatial + v] * pn[c * spatial + v];
      for (std::int64_t c = 0; c < C; ++c)
        dn[c * spatial + v] = pn[c * spatial + v] * (gn[c * spatial + v] - inner);
    }
  });
  return dz;
}

#define STEMNET_INSTANTIATE(T)                                                                    \
  template Tensor<T> conv3d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                       const ConvSpec&);                                          \
  template ConvGrads<T> conv3d_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                           const ConvSpec&, bool);                               \
  template Tensor<T> transposed_conv3d_forward<T>(const Tensor<T>&, const Tensor<T>&,            \
                                                  const Tensor<T>&);                             \
  template ConvGrads<T> transposed_conv3d_backward<T>(const Tensor<T>&, const Tensor<T>&,        \
                                                      const Tensor<T>&, bool);                   \
  template MaxPoolOut<T> maxpool3d_forward<T>(const Tensor<T>&);                                 \
  template Tensor<T> maxpool3d_backward<T>(const Tensor<std::int64_t>&, const Tensor<T>&,        \
                                           const Shape&);                                        \
  template Tensor<T> relu_forward<T>(const Tensor<T>&);                                          \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> batchnorm3d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,\
                                            Tensor<T>&, Tensor<T>&, bool, T, T,                  \
                                            BatchNormCache<T>*);                                 \
  template BatchNormGrads<T> batchnorm3d_backward<T>(const Tensor<T>&, const Tensor<T>&,         \
                                                     const BatchNormCache<T>&, const Tensor<T>&, \
                                                     T);                                         \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                     \
  template std::pair<Tensor<T>, Tensor<T>> split_channels<T>(const Tensor<T>&, std::int64_t,     \
                                                             std::int64_t);                      \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&);                                      \
  template Tensor<T> softmax_channels_backward<T>(const Tensor<T>&, const Tensor<T>&);

STEMNET_INSTANTIATE(float)
STEMNET_INSTANTIATE(double)

#undef STEMNET_INSTANTIATE

}  // namespace stemnet
