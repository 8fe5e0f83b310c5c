#include "stemnet/gradcheck.hpp"

#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "stemnet/layers.hpp"
#include "stemnet/rng.hpp"

using namespace stemnet;

namespace {

// Scalar objective: sum of elementwise product with a fixed projection, so
// dL/dy is simply the projection tensor.
template <typename T>
double project(const Tensor<T>& y, const Tensor<T>& r) {
  double acc = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i)
    acc += static_cast<double>(y[i]) * static_cast<double>(r[i]);
  return acc;
}

}  // namespace

TEST_CASE("gradcheck: exact for a linear op") {
  Rng rng(101);
  auto x = oracle::random_tensor<double>({1, 2, 3, 3, 3}, rng);
  auto r = oracle::random_tensor<double>({1, 2, 3, 3, 3}, rng);
  Tensor<double> analytic(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) analytic[i] = 3.0 * r[i];
  auto report = gradcheck(
      "linear",
      [&] {
        Tensor<double> y(x.shape());
        for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = 3.0 * x[i];
        return project(y, r);
      },
      {&x}, {&analytic});
  CHECK(report.max_rel_error <= 1e-9);
  CHECK(report.entries_checked == x.numel());
}

TEST_CASE("gradcheck: conv3d backward (x, w, b)") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    ConvSpec spec = ConvSpec::same3(2, 3);
    auto x = oracle::random_tensor<double>({1, 2, 4, 4, 4}, rng);
    auto w = oracle::random_tensor<double>({3, 2, 3, 3, 3}, rng);
    auto b = oracle::random_tensor<double>({3}, rng);
    auto r = oracle::random_tensor<double>({1, 3, 4, 4, 4}, rng);
    auto grads = conv3d_backward(x, w, r, spec);
    auto loss = [&] { return project(conv3d_forward(x, w, b, spec), r); };
    auto report = gradcheck("conv3d", loss, {&x, &w, &b}, {&grads.dx, &grads.dw, &grads.db});
    INFO("seed ", seed, " max rel err ", report.max_rel_error);
    CHECK(report.max_rel_error <= 1e-6);
  }
}

TEST_CASE("gradcheck: conv3d with stride 2 and no padding") {
  Rng rng(7);
  ConvSpec spec{{2, 2, 2}, {2, 2, 2}, {0, 0, 0}, 2, 2};
  auto x = oracle::random_tensor<double>({1, 2, 4, 4, 4}, rng);
  auto w = oracle::random_tensor<double>({2, 2, 2, 2, 2}, rng);
  auto b = oracle::random_tensor<double>({2}, rng);
  auto r = oracle::random_tensor<double>({1, 2, 2, 2, 2}, rng);
  auto grads = conv3d_backward(x, w, r, spec);
  auto loss = [&] { return project(conv3d_forward(x, w, b, spec), r); };
  auto report = gradcheck("conv3d_s2", loss, {&x, &w, &b}, {&grads.dx, &grads.dw, &grads.db});
  CHECK(report.max_rel_error <= 1e-6);
}

TEST_CASE("gradcheck: transposed conv3d backward") {
  Rng rng(11);
  auto x = oracle::random_tensor<double>({1, 3, 2, 2, 2}, rng);
  auto w = oracle::random_tensor<double>({3, 2, 2, 2, 2}, rng);
  auto b = oracle::random_tensor<double>({2}, rng);
  auto r = oracle::random_tensor<double>({1, 2, 4, 4, 4}, rng);
  auto grads = transposed_conv3d_backward(x, w, r);
  auto loss = [&] { return project(transposed_conv3d_forward(x, w, b), r); };
  // db is the plain sum of r over each output channel.
  Tensor<double> db({2});
  for (std::int64_t co = 0; co < 2; ++co)
    for (std::int64_t i = 0; i < 64; ++i) db[co] += r[co * 64 + i];
  for (std::int64_t co = 0; co < 2; ++co) CHECK(grads.db[co] == doctest::Approx(db[co]));
  auto report = gradcheck("transposed_conv3d", loss, {&x, &w}, {&grads.dx, &grads.dw});
  CHECK(report.max_rel_error <= 1e-6);
}

TEST_CASE("gradcheck: maxpool backward") {
  Rng rng(13);
  auto x = oracle::distinct_tensor<double>({1, 2, 4, 4, 4}, rng);
  auto r = oracle::random_tensor<double>({1, 2, 2, 2, 2}, rng);
  auto fwd = maxpool3d_forward(x);
  auto dx = maxpool3d_backward(fwd.argmax, r, x.shape());
  auto loss = [&] { return project(maxpool3d_forward(x).y, r); };
  auto report = gradcheck("maxpool3d", loss, {&x}, {&dx});
  CHECK(report.max_rel_error <= 1e-6);
}

TEST_CASE("gradcheck: relu backward away from the kink") {
  Rng rng(17);
  Tensor<double> x({1, 2, 3, 3, 3});
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double mag = rng.uniform(0.1, 1.0);
    x[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  auto r = oracle::random_tensor<double>({1, 2, 3, 3, 3}, rng);
  auto dx = relu_backward(x, r);
  auto loss = [&] { return project(relu_forward(x), r); };
  auto report = gradcheck("relu", loss, {&x}, {&dx});
  CHECK(report.max_rel_error <= 1e-6);
}

TEST_CASE("gradcheck: batchnorm backward through mean and variance") {
  Rng rng(19);
  auto x = oracle::random_tensor<double>({2, 3, 3, 3, 3}, rng, -2.0, 2.0);
  auto gamma = oracle::random_tensor<double>({3}, rng, 0.5, 1.5);
  auto beta = oracle::random_tensor<double>({3}, rng, -0.5, 0.5);
  auto r = oracle::random_tensor<double>({2, 3, 3, 3, 3}, rng);
  Tensor<double> rmean({3});
  auto rvar = Tensor<double>::full({3}, 1.0);
  const double eps = 1e-5;

  BatchNormCache<double> cache;
  auto y = batchnorm3d_forward(x, gamma, beta, rmean, rvar, true, eps, 0.1, &cache);
  (void)y;
  auto grads = batchnorm3d_backward(x, gamma, cache, r, eps);
  auto loss = [&] {
    Tensor<double> rm({3});
    auto rv = Tensor<double>::full({3}, 1.0);
    return project(batchnorm3d_forward<double>(x, gamma, beta, rm, rv, true, eps, 0.1, nullptr), r);
  };
  auto report = gradcheck("batchnorm3d", loss, {&x, &gamma, &beta},
                          {&grads.dx, &grads.dgamma, &grads.dbeta});
  CHECK(report.max_rel_error <= 1e-6);
}

TEST_CASE("gradcheck: flags an injected sign flip and names the op") {
  Rng rng(23);
  ConvSpec spec = ConvSpec::same3(1, 1);
  auto x = oracle::random_tensor<double>({1, 1, 3, 3, 3}, rng);
  auto w = oracle::random_tensor<double>({1, 1, 3, 3, 3}, rng);
  auto b = oracle::random_tensor<double>({1}, rng);
  auto r = oracle::random_tensor<double>({1, 1, 3, 3, 3}, rng);
  auto grads = conv3d_backward(x, w, r, spec);
  for (std::int64_t i = 0; i < grads.dw.numel(); ++i) grads.dw[i] = -grads.dw[i];  // fault
  auto loss = [&] { return project(conv3d_forward(x, w, b, spec), r); };
  auto report = gradcheck("conv3d_faulted", loss, {&w}, {&grads.dw});
  CHECK(report.op == "conv3d_faulted");
  CHECK(report.max_rel_error > 0.5);
}

TEST_CASE("gradcheck: sampled subset checks fewer entries") {
  Rng rng(29);
  auto x = oracle::random_tensor<double>({1, 1, 4, 4, 4}, rng);
  auto r = oracle::random_tensor<double>({1, 1, 4, 4, 4}, rng);
  auto loss = [&] { return project(x, r); };
  auto report = gradcheck("sampled", loss, {&x}, {&r}, 1e-5, 10, 42);
  CHECK(report.entries_checked <= 10);
  CHECK(report.entries_checked > 0);
  CHECK(report.max_rel_error <= 1e-8);
}
