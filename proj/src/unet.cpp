#include "stemnet/unet.hpp"

#include <cmath>

#include "stemnet/errors.hpp"
#include "stemnet/rng.hpp"

namespace stemnet {

void UNetConfig::validate() const {
  if (levels < 1) throw ConfigError("unet: levels must be >= 1");
  if (base_channels < 1) throw ConfigError("unet: base_channels must be >= 1");
  if (in_channels < 1) throw ConfigError("unet: in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("unet: num_classes must be >= 2");
  const int down = 1 << (levels - 1);
  if (input_extent < down || input_extent % down != 0)
    throw ConfigError("unet: input extent " + std::to_string(input_extent) +
                      " is not divisible by 2^(levels-1) = " + std::to_string(down));
  if (bn_eps <= 0.0f) throw ConfigError("unet: bn_eps must be positive");
  if (bn_momentum < 0.0f || bn_momentum > 1.0f)
    throw ConfigError("unet: bn_momentum must be in [0, 1]");
}

namespace {

template <typename Ref, typename Self>
auto make_table(Self& self) {
  std::vector<Ref> table;
  const int L = self.config.levels;
  auto add = [&table](const std::string& name, auto& t, bool learnable) {
    table.push_back(Ref{name, &t, learnable});
  };
  for (int l = 0; l < L - 1; ++l) {
    const std::string p = "enc" + std::to_string(l) + ".";
    add(p + "conv1.w", self.enc[l].conv1.w, true);
    add(p + "conv1.b", self.enc[l].conv1.b, true);
    add(p + "conv2.w", self.enc[l].conv2.w, true);
    add(p + "conv2.b", self.enc[l].conv2.b, true);
    add(p + "bn.gamma", self.enc[l].bn.gamma, true);
    add(p + "bn.beta", self.enc[l].bn.beta, true);
    add(p + "bn.running_mean", self.enc[l].bn.running_mean, false);
    add(p + "bn.running_var", self.enc[l].bn.running_var, false);
  }
  add("bottleneck.conv1.w", self.bott1.w, true);
  add("bottleneck.conv1.b", self.bott1.b, true);
  add("bottleneck.conv2.w", self.bott2.w, true);
  add("bottleneck.conv2.b", self.bott2.b, true);
  for (int l = 0; l < L - 1; ++l) {
    const std::string p = "dec" + std::to_string(l) + ".";
    add(p + "upconv.w", self.dec[l].upconv.w, true);
    add(p + "upconv.b", self.dec[l].upconv.b, true);
    add(p + "conv1.w", self.dec[l].conv1.w, true);
    add(p + "conv1.b", self.dec[l].conv1.b, true);
    add(p + "conv2.w", self.dec[l].conv2.w, true);
    add(p + "conv2.b", self.dec[l].conv2.b, true);
  }
  add("head.w", self.head.w, true);
  add("head.b", self.head.b, true);
  return table;
}

template <typename T>
Tensor<T> he_normal(Rng& rng, Shape shape, std::int64_t fan_in) {
  Tensor<T> t(std::move(shape));
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, std));
  return t;
}

}  // namespace

template <typename T>
std::vector<NamedTensorRef<T>> UNetParams<T>::tensor_table() {
  return make_table<NamedTensorRef<T>>(*this);
}

template <typename T>
std::vector<NamedTensorCRef<T>> UNetParams<T>::tensor_table() const {
  return make_table<NamedTensorCRef<T>>(*this);
}

template <typename T>
UNetParams<T> UNetParams<T>::init(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(hash_seed(seed, 0x756e6574));
  const int L = config.levels;
  UNetParams<T> p;
  p.config = config;
  p.enc.resize(static_cast<std::size_t>(L - 1));
  p.dec.resize(static_cast<std::size_t>(L - 1));

  auto conv = [&](int ci, int co) {
    ConvParam<T> c;
    c.w = he_normal<T>(rng, {co, ci, 3, 3, 3}, static_cast<std::int64_t>(ci) * 27);
    c.b = Tensor<T>({co});
    return c;
  };

  for (int l = 0; l < L - 1; ++l) {
    const int ci = l == 0 ? config.in_channels : config.width(l - 1);
    const int co = config.width(l);
    p.enc[l].conv1 = conv(ci, co);
    p.enc[l].conv2 = conv(co, co);
    p.enc[l].bn.gamma = Tensor<T>::full({co}, T{1});
    p.enc[l].bn.beta = Tensor<T>({co});
    p.enc[l].bn.running_mean = Tensor<T>({co});
    p.enc[l].bn.running_var = Tensor<T>::full({co}, T{1});
  }

  const int bott_ci = L >= 2 ? config.width(L - 2) : config.in_channels;
  const int bott_co = config.width(L - 1);
  p.bott1 = conv(bott_ci, bott_co);
  p.bott2 = conv(bott_co, bott_co);

  for (int l = 0; l < L - 1; ++l) {
    const int up_ci = config.width(l + 1);
    const int co = config.width(l);
    p.dec[l].upconv.w = he_normal<T>(rng, {up_ci, co, 2, 2, 2}, static_cast<std::int64_t>(up_ci) * 8);
    p.dec[l].upconv.b = Tensor<T>({co});
    p.dec[l].conv1 = conv(2 * co, co);
    p.dec[l].conv2 = conv(co, co);
  }

  const int head_ci = L >= 2 ? config.base_channels : bott_co;
  p.head.w = he_normal<T>(rng, {config.num_classes, head_ci, 1, 1, 1}, head_ci);
  p.head.b = Tensor<T>({config.num_classes});
  return p;
}

template <typename T>
UNetParams<T> UNetParams<T>::zeros(const UNetConfig& config) {
  config.validate();
  const int L = config.levels;
  UNetParams<T> p;
  p.config = config;
  p.enc.resize(static_cast<std::size_t>(L - 1));
  p.dec.resize(static_cast<std::size_t>(L - 1));
  auto conv = [](int ci, int co, int k) {
    return ConvParam<T>{Tensor<T>({co, ci, k, k, k}), Tensor<T>({co})};
  };
  for (int l = 0; l < L - 1; ++l) {
    const int ci = l == 0 ? config.in_channels : config.width(l - 1);
    const int co = config.width(l);
    p.enc[l].conv1 = conv(ci, co, 3);
    p.enc[l].conv2 = conv(co, co, 3);
    p.enc[l].bn = {Tensor<T>({co}), Tensor<T>({co}), Tensor<T>({co}), Tensor<T>({co})};
  }
  const int bott_ci = L >= 2 ? config.width(L - 2) : config.in_channels;
  const int bott_co = config.width(L - 1);
  p.bott1 = conv(bott_ci, bott_co, 3);
  p.bott2 = conv(bott_co, bott_co, 3);
  for (int l = 0; l < L - 1; ++l) {
    const int co = config.width(l);
    p.dec[l].upconv = {Tensor<T>({config.width(l + 1), co, 2, 2, 2}), Tensor<T>({co})};
    p.dec[l].conv1 = conv(2 * co, co, 3);
    p.dec[l].conv2 = conv(co, co, 3);
  }
  const int head_ci = L >= 2 ? config.base_channels : bott_co;
  p.head = {Tensor<T>({config.num_classes, head_ci, 1, 1, 1}), Tensor<T>({config.num_classes})};
  return p;
}

template <typename T>
template <typename U>
UNetParams<U> UNetParams<T>::cast() const {
  UNetParams<U> p;
  p.config = config;
  p.enc.resize(enc.size());
  p.dec.resize(dec.size());
  auto dst = p.tensor_table();
  auto src = tensor_table();
  for (std::size_t i = 0; i < src.size(); ++i)
    *dst[i].tensor = src[i].tensor->template cast<U>();
  return p;
}

template <typename T>
Tensor<T> unet_forward(UNetParams<T>& params, const Tensor<T>& x, bool train,
                       UNetCache<T>* cache) {
  const UNetConfig& cfg = params.config;
  cfg.validate();
  require_rank(x, 5, "unet input");
  const std::int64_t S = cfg.input_extent;
  if (x.dim(1) != cfg.in_channels || x.dim(2) != S || x.dim(3) != S || x.dim(4) != S)
    throw ShapeError("unet input " + shape_str(x.shape()) + " does not match config extent " +
                     std::to_string(S) + " with " + std::to_string(cfg.in_channels) + " channels");
  if (train && cache == nullptr) throw ConfigError("unet: train-mode forward requires a cache");

  const int L = cfg.levels;
  const T eps = static_cast<T>(cfg.bn_eps);
  const T mom = static_cast<T>(cfg.bn_momentum);
  if (cache) {
    cache->input = x;
    cache->enc.assign(static_cast<std::size_t>(L - 1), {});
    cache->dec.assign(static_cast<std::size_t>(L - 1), {});
  }

  std::vector<Tensor<T>> skips(static_cast<std::size_t>(L - 1));
  Tensor<T> cur = x;
  for (int l = 0; l < L - 1; ++l) {
    auto& level = params.enc[l];
    auto spec1 = ConvSpec::same3(static_cast<int>(cur.dim(1)), cfg.width(l));
    Tensor<T> a1 = relu_forward(conv3d_forward(cur, level.conv1.w, level.conv1.b, spec1));
    auto spec2 = ConvSpec::same3(cfg.width(l), cfg.width(l));
    Tensor<T> a2 = relu_forward(conv3d_forward(a1, level.conv2.w, level.conv2.b, spec2));
    BatchNormCache<T> bn_cache;
    Tensor<T> skip = batchnorm3d_forward(a2, level.bn.gamma, level.bn.beta, level.bn.running_mean,
                                         level.bn.running_var, train, eps, mom,
                                         cache ? &bn_cache : nullptr);
    auto pool = maxpool3d_forward(skip);
    cur = pool.y;
    skips[l] = skip;
    if (cache) {
      cache->enc[l].a1 = std::move(a1);
      cache->enc[l].a2 = std::move(a2);
      cache->enc[l].bn = std::move(bn_cache);
      cache->enc[l].skip = skip;
      cache->enc[l].pool = std::move(pool);
    }
  }

  const int bott_co = cfg.width(L - 1);
  auto bspec1 = ConvSpec::same3(static_cast<int>(cur.dim(1)), bott_co);
  Tensor<T> ba1 = relu_forward(conv3d_forward(cur, params.bott1.w, params.bott1.b, bspec1));
  auto bspec2 = ConvSpec::same3(bott_co, bott_co);
  Tensor<T> cur_out = relu_forward(conv3d_forward(ba1, params.bott2.w, params.bott2.b, bspec2));
  if (cache) {
    cache->bott_a1 = std::move(ba1);
    cache->bott_out = cur_out;
  }

  for (int l = L - 2; l >= 0; --l) {
    auto& level = params.dec[l];
    Tensor<T> up = transposed_conv3d_forward(cur_out, level.upconv.w, level.upconv.b);
    Tensor<T> cat = concat_channels(skips[l], up);
    auto spec1 = ConvSpec::same3(static_cast<int>(cat.dim(1)), cfg.width(l));
    Tensor<T> a1 = relu_forward(conv3d_forward(cat, level.conv1.w, level.conv1.b, spec1));
    auto spec2 = ConvSpec::same3(cfg.width(l), cfg.width(l));
    Tensor<T> out = relu_forward(conv3d_forward(a1, level.conv2.w, level.conv2.b, spec2));
    if (cache) {
      cache->dec[l].up_out = std::move(up);
      cache->dec[l].cat = std::move(cat);
      cache->dec[l].a1 = std::move(a1);
      cache->dec[l].out = out;
    }
    cur_out = std::move(out);
  }

  auto head_spec = ConvSpec::pointwise(static_cast<int>(cur_out.dim(1)), cfg.num_classes);
  return conv3d_forward(cur_out, params.head.w, params.head.b, head_spec);
}

template <typename T>
UNetParams<T> unet_backward(const UNetParams<T>& params, const UNetCache<T>& cache,
                            const Tensor<T>& grad_logits) {
  const UNetConfig& cfg = params.config;
  const int L = cfg.levels;
  UNetParams<T> grads = UNetParams<T>::zeros_like(params);

  const Tensor<T>& head_in = L >= 2 ? cache.dec[0].out : cache.bott_out;
  auto head_spec = ConvSpec::pointwise(static_cast<int>(head_in.dim(1)), cfg.num_classes);
  auto hg = conv3d_backward(head_in, params.head.w, grad_logits, head_spec, true);
  grads.head.w = std::move(hg.dw);
  grads.head.b = std::move(hg.db);

  // Decoder, fine to coarse; grad wrt each skip is deferred to the encoder.
  std::vector<Tensor<T>> skip_grads(static_cast<std::size_t>(L - 1));
  Tensor<T> g = std::move(hg.dx);
  for (int l = 0; l < L - 1; ++l) {
    const auto& level = params.dec[l];
    const auto& c = cache.dec[l];
    const Tensor<T>& up_in = l == L - 2 ? cache.bott_out : cache.dec[l + 1].out;

    Tensor<T> g_pre2 = relu_backward(c.out, g);
    auto spec2 = ConvSpec::same3(cfg.width(l), cfg.width(l));
    auto g2 = conv3d_backward(c.a1, level.conv2.w, g_pre2, spec2, true);
    grads.dec[l].conv2.w = std::move(g2.dw);
    grads.dec[l].conv2.b = std::move(g2.db);

    Tensor<T> g_pre1 = relu_backward(c.a1, g2.dx);
    auto spec1 = ConvSpec::same3(static_cast<int>(c.cat.dim(1)), cfg.width(l));
    auto g1 = conv3d_backward(c.cat, level.conv1.w, g_pre1, spec1, true);
    grads.dec[l].conv1.w = std::move(g1.dw);
    grads.dec[l].conv1.b = std::move(g1.db);

    auto [g_skip, g_up] = split_channels(g1.dx, cfg.width(l), cfg.width(l));
    skip_grads[l] = std::move(g_skip);

    auto gu = transposed_conv3d_backward(up_in, level.upconv.w, g_up, true);
    grads.dec[l].upconv.w = std::move(gu.dw);
    grads.dec[l].upconv.b = std::move(gu.db);
    g = std::move(gu.dx);
  }

  // Bottleneck; for L == 1 the head gradient arrives directly.
  {
    const Tensor<T>& bott_in = L >= 2 ? cache.enc[L - 2].pool.y : cache.input;
    const int bott_co = cfg.width(L - 1);
    Tensor<T> g_pre2 = relu_backward(cache.bott_out, g);
    auto spec2 = ConvSpec::same3(bott_co, bott_co);
    auto g2 = conv3d_backward(cache.bott_a1, params.bott2.w, g_pre2, spec2, true);
    grads.bott2.w = std::move(g2.dw);
    grads.bott2.b = std::move(g2.db);

    Tensor<T> g_pre1 = relu_backward(cache.bott_a1, g2.dx);
    auto spec1 = ConvSpec::same3(static_cast<int>(bott_in.dim(1)), bott_co);
    auto g1 = conv3d_backward(bott_in, params.bott1.w, g_pre1, spec1, L >= 2);
    grads.bott1.w = std::move(g1.dw);
    grads.bott1.b = std::move(g1.db);
    g = std::move(g1.dx);
  }

  // Encoder, deep to shallow.
  for (int l = L - 2; l >= 0; --l) {
    const auto& level = params.enc[l];
    const auto& c = cache.enc[l];
    Tensor<T> g_skip = maxpool3d_backward(c.pool.argmax, g, c.skip.shape());
    for (std::int64_t i = 0; i < g_skip.numel(); ++i) g_skip[i] += skip_grads[l][i];

    auto bn = batchnorm3d_backward(c.a2, level.bn.gamma, c.bn, g_skip,
                                   static_cast<T>(cfg.bn_eps));
    grads.enc[l].bn.gamma = std::move(bn.dgamma);
    grads.enc[l].bn.beta = std::move(bn.dbeta);

    Tensor<T> g_pre2 = relu_backward(c.a2, bn.dx);
    auto spec2 = ConvSpec::same3(cfg.width(l), cfg.width(l));
    auto g2 = conv3d_backward(c.a1, level.conv2.w, g_pre2, spec2, true);
    grads.enc[l].conv2.w = std::move(g2.dw);
    grads.enc[l].conv2.b = std::move(g2.db);

    const Tensor<T>& in = l == 0 ? cache.input : cache.enc[l - 1].pool.y;
    Tensor<T> g_pre1 = relu_backward(c.a1, g2.dx);
    auto spec1 = ConvSpec::same3(static_cast<int>(in.dim(1)), cfg.width(l));
    auto g1 = conv3d_backward(in, level.conv1.w, g_pre1, spec1, l > 0);
    grads.enc[l].conv1.w = std::move(g1.dw);
    grads.enc[l].conv1.b = std::move(g1.db);
    g = std::move(g1.dx);
  }

  return grads;
}

std::int64_t parameter_count(const UNetConfig& config) {
  config.validate();
  const int L = config.levels;
  auto conv_params = [](std::int64_t ci, std::int64_t co, std::int64_t k) {
    return co * ci * k * k * k + co;
  };
  std::int64_t total = 0;
  for (int l = 0; l < L - 1; ++l) {
    const std::int64_t ci = l == 0 ? config.in_channels : config.width(l - 1);
    const std::int64_t co = config.width(l);
    total += conv_params(ci, co, 3) + conv_params(co, co, 3);
    total += 2 * co;  // gamma, beta
  }
  const std::int64_t bott_ci = L >= 2 ? config.width(L - 2) : config.in_channels;
  const std::int64_t bott_co = config.width(L - 1);
  total += conv_params(bott_ci, bott_co, 3) + conv_params(bott_co, bott_co, 3);
  for (int l = 0; l < L - 1; ++l) {
    const std::int64_t co = config.width(l);
    total += config.width(l + 1) * co * 8 + co;  // upconv
    total += conv_params(2 * co, co, 3) + conv_params(co, co, 3);
  }
  const std::int64_t head_ci = L >= 2 ? config.base_channels : bott_co;
  total += conv_params(head_ci, config.num_classes, 1);
  return total;
}

#define STEMNET_INSTANTIATE_UNET(T)                                                         \
  template struct UNetParams<T>;                                                            \
  template Tensor<T> unet_forward<T>(UNetParams<T>&, const Tensor<T>&, bool, UNetCache<T>*); \
  template UNetParams<T> unet_backward<T>(const UNetParams<T>&, const UNetCache<T>&,        \
                                          const Tensor<T>&);

STEMNET_INSTANTIATE_UNET(float)
STEMNET_INSTANTIATE_UNET(double)

template UNetParams<double> UNetParams<float>::cast<double>() const;
template UNetParams<float> UNetParams<double>::cast<float>() const;
template UNetParams<float> UNetParams<float>::cast<float>() const;
template UNetParams<double> UNetParams<double>::cast<double>() const;

#undef STEMNET_INSTANTIATE_UNET

}  // namespace stemnet
