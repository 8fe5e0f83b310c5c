#include "stemnet/unet.hpp"

#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "stemnet/gradcheck.hpp"
#include "stemnet/losses.hpp"
#include "stemnet/rng.hpp"

using namespace stemnet;

TEST_CASE("unet config validation") {
  UNetConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.input_extent = 95;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.input_extent = 96;
  cfg.num_classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("init: seed-determined, seeds differ, He scale") {
  UNetConfig cfg;
  cfg.levels = 2;
  cfg.base_channels = 16;
  cfg.input_extent = 16;
  auto a = UNetParams<float>::init(cfg, 7);
  auto b = UNetParams<float>::init(cfg, 7);
  auto c = UNetParams<float>::init(cfg, 8);

  auto ta = a.tensor_table();
  auto tb = b.tensor_table();
  auto tc = c.tensor_table();
  bool all_equal = true, any_diff_seed = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    for (std::int64_t k = 0; k < ta[i].tensor->numel(); ++k) {
      all_equal &= ((*ta[i].tensor)[k] == (*tb[i].tensor)[k]);
      any_diff_seed |= ((*ta[i].tensor)[k] != (*tc[i].tensor)[k]);
    }
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);

  // enc0.conv2.w is 16x16x3x3x3 = 6912 draws; expect std near sqrt(2/fan_in).
  const Tensor<float>& w = a.enc[0].conv2.w;
  double mean = 0;
  for (std::int64_t i = 0; i < w.numel(); ++i) mean += w[i];
  mean /= static_cast<double>(w.numel());
  double var = 0;
  for (std::int64_t i = 0; i < w.numel(); ++i) var += (w[i] - mean) * (w[i] - mean);
  var /= static_cast<double>(w.numel() - 1);
  const double expect = std::sqrt(2.0 / (16.0 * 27.0));
  CHECK(std::sqrt(var) == doctest::Approx(expect).epsilon(0.10));

  // Biases zero, gamma one, running stats at their inits.
  for (std::int64_t i = 0; i < a.enc[0].conv1.b.numel(); ++i) CHECK(a.enc[0].conv1.b[i] == 0.0f);
  for (std::int64_t i = 0; i < a.enc[0].bn.gamma.numel(); ++i) {
    CHECK(a.enc[0].bn.gamma[i] == 1.0f);
    CHECK(a.enc[0].bn.beta[i] == 0.0f);
    CHECK(a.enc[0].bn.running_mean[i] == 0.0f);
    CHECK(a.enc[0].bn.running_var[i] == 1.0f);
  }
}

TEST_CASE("forward: default config maps 96^3 to 5-class logits") {
  UNetConfig cfg;  // levels 5, base 8, extent 96
  auto params = UNetParams<float>::init(cfg, 1);
  Tensor<float> x({1, 1, 96, 96, 96});
  Rng rng(3);
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform());
  auto logits = unet_forward(params, x, false);
  CHECK(logits.shape() == Shape{1, 5, 96, 96, 96});

  auto p = softmax_channels(logits);
  const std::int64_t spatial = 96ll * 96 * 96;
  for (std::int64_t v : {std::int64_t(0), spatial / 2, spatial - 1}) {
    double sum = 0;
    for (std::int64_t c = 0; c < 5; ++c) sum += p[c * spatial + v];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("forward: infer mode is a pure function") {
  UNetConfig cfg;
  cfg.levels = 3;
  cfg.base_channels = 2;
  cfg.input_extent = 8;
  auto params = UNetParams<float>::init(cfg, 5);
  Rng rng(9);
  auto x = oracle::random_tensor<float>({1, 1, 8, 8, 8}, rng);
  auto y1 = unet_forward(params, x, false);
  auto y2 = unet_forward(params, x, false);
  for (std::int64_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);
}

TEST_CASE("forward: extent mismatch is a shape error") {
  UNetConfig cfg;
  cfg.levels = 2;
  cfg.base_channels = 2;
  cfg.input_extent = 8;
  auto params = UNetParams<float>::init(cfg, 1);
  Tensor<float> x({1, 1, 6, 6, 6});
  CHECK_THROWS_AS(unet_forward(params, x, false), ShapeError);
}

TEST_CASE("parameter_count: degenerate hand case and monotonicity") {
  UNetConfig tiny;
  tiny.levels = 1;
  tiny.base_channels = 1;
  tiny.in_channels = 1;
  tiny.num_classes = 2;
  tiny.input_extent = 4;
  CHECK(parameter_count(tiny) == 60);  // two 3^3 convs (28 each) + 1^1 head (4)

  UNetConfig cfg;
  cfg.input_extent = 96;
  std::int64_t prev = 0;
  for (int base : {2, 4, 8, 16}) {
    cfg.base_channels = base;
    const std::int64_t count = parameter_count(cfg);
    CHECK(count > prev);
    prev = count;
  }
}

namespace {

// Independent per-layer summation, written against the architecture rules
// rather than the library's closed form.
std::int64_t enumerate_params(const UNetConfig& c) {
  auto conv = [](std::int64_t ci, std::int64_t co, std::int64_t k) { return co * (ci * k * k * k + 1); };
  std::int64_t widths[16];
  for (int l = 0; l < c.levels; ++l) widths[l] = static_cast<std::int64_t>(c.base_channels) << l;
  std::int64_t n = 0;
  std::int64_t in = c.in_channels;
  for (int l = 0; l + 1 < c.levels; ++l) {
    n += conv(in, widths[l], 3) + conv(widths[l], widths[l], 3) + 2 * widths[l];
    in = widths[l];
  }
  n += conv(in, widths[c.levels - 1], 3) + conv(widths[c.levels - 1], widths[c.levels - 1], 3);
  for (int l = c.levels - 2; l >= 0; --l) {
    n += widths[l + 1] * widths[l] * 8 + widths[l];
    n += conv(2 * widths[l], widths[l], 3) + conv(widths[l], widths[l], 3);
  }
  n += conv(c.levels >= 2 ? widths[0] : widths[c.levels - 1], c.num_classes, 1);
  return n;
}

}  // namespace

TEST_CASE("parameter_count: matches an independent enumeration and the live tensors") {
  for (int levels : {2, 3, 5}) {
    UNetConfig cfg;
    cfg.levels = levels;
    cfg.base_channels = levels == 5 ? 8 : 4;
    cfg.input_extent = 1 << (levels - 1);
    CHECK(parameter_count(cfg) == enumerate_params(cfg));

    auto params = UNetParams<float>::init(cfg, 0);
    std::int64_t live = 0;
    for (const auto& ref : params.tensor_table())
      if (ref.learnable) live += ref.tensor->numel();
    CHECK(parameter_count(cfg) == live);
  }
}

TEST_CASE("gradcheck: full forward-loss composite on an 8^3 two-class toy") {
  UNetConfig cfg;
  cfg.levels = 3;
  cfg.base_channels = 2;
  cfg.num_classes = 2;
  cfg.input_extent = 8;
  auto params = UNetParams<double>::init(cfg, 11);

  Rng rng(13);
  auto x = oracle::random_tensor<double>({1, 1, 8, 8, 8}, rng, 0.0, 1.0);
  Tensor<double> onehot({1, 2, 8, 8, 8});
  const std::int64_t spatial = 512;
  for (std::int64_t v = 0; v < spatial; ++v) {
    const std::int64_t cls = rng.uniform() < 0.7 ? 0 : 1;
    onehot[cls * spatial + v] = 1.0;
  }
  ClassWeights weights{{1.0, 2.5}};

  UNetCache<double> cache;
  auto logits = unet_forward(params, x, true, &cache);
  auto loss = weighted_cross_entropy(logits, onehot, weights);
  auto grads = unet_backward(params, cache, loss.grad);

  std::vector<Tensor<double>*> inputs;
  std::vector<const Tensor<double>*> analytic;
  auto pt = params.tensor_table();
  auto gt = grads.tensor_table();
  for (std::size_t i = 0; i < pt.size(); ++i) {
    if (!pt[i].learnable) continue;
    inputs.push_back(pt[i].tensor);
    analytic.push_back(gt[i].tensor);
  }
  auto loss_fn = [&] {
    UNetCache<double> scratch;
    auto z = unet_forward(params, x, true, &scratch);
    return weighted_cross_entropy(z, onehot, weights).loss;
  };
  auto report = gradcheck("unet_wce", loss_fn, inputs, analytic);
  INFO("max rel error ", report.max_rel_error, " over ", report.entries_checked, " entries");
  CHECK(report.max_rel_error <= 1e-5);
}

TEST_CASE("gradcheck: sampled composite with Dice loss at 32^3") {
  UNetConfig cfg;
  cfg.levels = 3;
  cfg.base_channels = 2;
  cfg.num_classes = 5;
  cfg.input_extent = 32;
  auto params = UNetParams<double>::init(cfg, 17);

  Rng rng(19);
  auto x = oracle::random_tensor<double>({1, 1, 32, 32, 32}, rng, 0.0, 1.0);
  Tensor<double> onehot({1, 5, 32, 32, 32});
  const std::int64_t spatial = 32ll * 32 * 32;
  for (std::int64_t v = 0; v < spatial; ++v)
    onehot[static_cast<std::int64_t>(rng.uniform_index(5)) * spatial + v] = 1.0;

  UNetCache<double> cache;
  auto logits = unet_forward(params, x, true, &cache);
  auto loss = dice_loss_from_logits(logits, onehot, 1e-5);
  auto grads = unet_backward(params, cache, loss.grad);

  std::vector<Tensor<double>*> inputs;
  std::vector<const Tensor<double>*> analytic;
  auto pt = params.tensor_table();
  auto gt = grads.tensor_table();
  for (std::size_t i = 0; i < pt.size(); ++i) {
    if (!pt[i].learnable) continue;
    inputs.push_back(pt[i].tensor);
    analytic.push_back(gt[i].tensor);
  }
  auto loss_fn = [&] {
    UNetCache<double> scratch;
    auto z = unet_forward(params, x, true, &scratch);
    return dice_loss_from_logits(z, onehot, 1e-5).loss;
  };
  auto report = gradcheck("unet_dice_32", loss_fn, inputs, analytic, 1e-5, 6, 23);
  INFO("max rel error ", report.max_rel_error, " over ", report.entries_checked, " entries");
  CHECK(report.max_rel_error <= 1e-5);
}
