/*
 *  Copyright 2026 The vesselseg Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#include <omp.h>

#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "vesselseg/volcore.hpp"

using namespace vesselseg;
using namespace vesselseg::volcore;
using namespace vstest;

namespace {

Tensor4 row(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor4(Shape4{1, 1, 1, n}, std::move(v));
}

KernelStack row_kernel(std::vector<double> taps) {
  KernelStack k(1, 1, Window{1, 1, static_cast<int>(taps.size())});
  k.weights() = std::move(taps);
  return k;
}

}  // namespace

TEST_CASE("conv_direct hand examples") {
  SUBCASE("3x3 ones") {
    Tensor4 in(Shape4{1, 1, 3, 3}, 1.0);
    KernelStack k(1, 1, Window{1, 3, 3});
    std::fill(k.weights().begin(), k.weights().end(), 1.0);
    const Tensor4 out = conv_direct(in, k);
    REQUIRE(out.shape() == Shape4{1, 1, 1, 1});
    CHECK(out[0] == 9.0);
  }
  SUBCASE("difference kernel is a cross-correlation") {
    const Tensor4 out = conv_direct(row({1, 2, 3, 4, 5}), row_kernel({1, 0, -1}));
    REQUIRE(out.shape().x == 3);
    CHECK(out[0] == -2.0);
    CHECK(out[1] == -2.0);
    CHECK(out[2] == -2.0);
  }
  SUBCASE("dilation 2 picks taps 1,3,5") {
    const Tensor4 out = conv_direct(row({1, 2, 3, 4, 5}), row_kernel({1, 1, 1}), Dilation{1, 1, 2});
    REQUIRE(out.shape().x == 1);
    CHECK(out[0] == 9.0);
  }
  SUBCASE("bias is added per output channel") {
    KernelStack k(2, 1, Window{1, 1, 1});
    k.weights() = {1.0, 2.0};
    k.bias() = {0.5, -1.0};
    const Tensor4 out = conv_direct(row({1, 2}), k);
    CHECK(out(0, 0, 0, 0) == 1.5);
    CHECK(out(0, 0, 0, 1) == 2.5);
    CHECK(out(1, 0, 0, 0) == 1.0);
    CHECK(out(1, 0, 0, 1) == 3.0);
  }
}

TEST_CASE("convolution size errors name the axis") {
  Tensor4 in(Shape4{1, 1, 5, 2});
  KernelStack k(1, 1, Window{1, 1, 3});
  try {
    conv_direct(in, k);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("along x") != std::string::npos);
  }
  CHECK_THROWS_AS(conv_fft(in, k), ShapeError);
  KernelStack k2(1, 2, Window{1, 1, 1});
  CHECK_THROWS_AS(conv_direct(in, k2), ShapeError);
}

TEST_CASE("conv_fft matches trivial cases") {
  Rng rng(11);
  SUBCASE("delta kernel crops the input") {
    const Tensor4 in = random_tensor(Shape4{1, 3, 7, 6}, rng);
    KernelStack k(1, 1, Window{3, 3, 3});
    k.w(0, 0, 1, 1, 1) = 1.0;
    const Tensor4 out = conv_fft(in, k);
    REQUIRE(out.shape() == Shape4{1, 1, 5, 4});
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 4; ++x) CHECK(out(0, 0, y, x) == doctest::Approx(in(0, 1, y + 1, x + 1)).epsilon(1e-12));
  }
  SUBCASE("zero input gives the bias") {
    Tensor4 in(Shape4{2, 2, 6, 6});
    KernelStack k = random_kernel(3, 2, Window{1, 3, 3}, rng);
    const Tensor4 out = conv_fft(in, k);
    for (int o = 0; o < 3; ++o)
      for (double v : out.channel(o)) CHECK(v == doctest::Approx(k.bias()[o]).epsilon(1e-12));
  }
  SUBCASE("2x4x8x8 input, 3x2x1x3x3 kernels") {
    const Tensor4 in = random_tensor(Shape4{2, 4, 8, 8}, rng);
    const KernelStack k = random_kernel(3, 2, Window{1, 3, 3}, rng);
    CHECK(rel_error(conv_fft(in, k), conv_direct(in, k)) < 1e-5);
  }
}

TEST_CASE("property: conv_fft equals conv_direct and the naive oracle") {
  Rng rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const Shape4 s{rand_int(rng, 1, 4), rand_int(rng, 1, 16), rand_int(rng, 1, 32), rand_int(rng, 1, 32)};
    const Dilation d{rand_int(rng, 1, 2), rand_int(rng, 1, 3), rand_int(rng, 1, 3)};
    const auto fit = [&](int n, int dd) { return std::max(1, std::min(3, (n - 1) / dd + 1)); };
    const Window k{rand_int(rng, 1, fit(s.z, d.z)), rand_int(rng, 1, fit(s.y, d.y)), rand_int(rng, 1, fit(s.x, d.x))};
    const Tensor4 in = random_tensor(s, rng);
    const KernelStack ks = random_kernel(rand_int(rng, 1, 3), s.c, k, rng);
    const Tensor4 direct = conv_direct(in, ks, d);
    // out_dim = in_dim - (k - 1) * d
    CHECK(direct.shape().z == s.z - (k.z - 1) * d.z);
    CHECK(direct.shape().y == s.y - (k.y - 1) * d.y);
    CHECK(direct.shape().x == s.x - (k.x - 1) * d.x);
    CHECK(rel_error(direct, naive_conv(in, ks, d)) < 1e-12);
    CHECK(rel_error(conv_fft(in, ks, d), direct) < 1e-5);
  }
}

TEST_CASE("property: convolution is linear") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape4 s{2, rand_int(rng, 1, 4), rand_int(rng, 4, 12), rand_int(rng, 4, 12)};
    const Tensor4 a = random_tensor(s, rng), b = random_tensor(s, rng);
    const KernelStack k = random_kernel(2, 2, Window{1, 3, 3}, rng, false);
    const double alpha = rand_sym(rng) * 3.0, beta = rand_sym(rng) * 3.0;
    Tensor4 mix(s);
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * a[i] + beta * b[i];
    const Tensor4 lhs = conv_direct(mix, k);
    const Tensor4 ca = conv_direct(a, k), cb = conv_direct(b, k);
    Tensor4 rhs(lhs.shape());
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = alpha * ca[i] + beta * cb[i];
    CHECK(max_abs_diff(lhs, rhs) < 1e-6);
  }
}

TEST_CASE("max_filter") {
  SUBCASE("unit window is the identity") {
    Rng rng(3);
    const Tensor4 in = random_tensor(Shape4{2, 3, 5, 4}, rng);
    const Tensor4 out = max_filter(in, Window{1, 1, 1});
    CHECK(out == in);
    CHECK(max_filter(out, Window{1, 1, 1}) == out);
  }
  SUBCASE("hand sliding maxima") {
    const Tensor4 a = max_filter(row({1, 3, 2, 5}), Window{1, 1, 2});
    CHECK(a.values() == std::vector<double>{3, 3, 5});
    const Tensor4 b = max_filter(row({1, 3, 2, 5}), Window{1, 1, 2}, Dilation{1, 1, 2});
    CHECK(b.values() == std::vector<double>{2, 5});
  }
  SUBCASE("window larger than input") {
    CHECK_THROWS_AS(max_filter(row({1, 2}), Window{1, 1, 3}), ShapeError);
    CHECK_THROWS_AS(max_filter(row({1, 2, 3}), Window{1, 1, 2}, Dilation{1, 1, 3}), ShapeError);
  }
  SUBCASE("property: monotone and valid-shaped") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
      const Shape4 s{rand_int(rng, 1, 3), rand_int(rng, 2, 6), rand_int(rng, 4, 10), rand_int(rng, 4, 10)};
      const Window w{rand_int(rng, 1, 2), rand_int(rng, 1, 2), rand_int(rng, 1, 2)};
      const Dilation d{1, rand_int(rng, 1, 2), rand_int(rng, 1, 2)};
      const Tensor4 x = random_tensor(s, rng);
      Tensor4 y = x;
      for (double& v : y.values()) v += uniform01(rng);
      const Tensor4 fx = max_filter(x, w, d), fy = max_filter(y, w, d);
      CHECK(fx.shape().y == s.y - (w.y - 1) * d.y);
      CHECK(fx.shape().x == s.x - (w.x - 1) * d.x);
      bool monotone = true;
      for (std::size_t i = 0; i < fx.size(); ++i) monotone = monotone && fx[i] <= fy[i];
      CHECK(monotone);
    }
  }
}

TEST_CASE("activations") {
  CHECK(activate(Activation::tanh, 0.0) == 0.0);
  CHECK(activate(Activation::relu, -1.0) == 0.0);
  CHECK(activate(Activation::logistic, 0.0) == 0.5);
  CHECK(std::abs(activate(Activation::tanh, 20.0) - 1.0) < 1e-8);
  CHECK(std::abs(activate(Activation::tanh, -20.0) + 1.0) < 1e-8);
  CHECK(std::isfinite(activate(Activation::logistic, -800.0)));
  CHECK(activate(Activation::logistic, 800.0) == 1.0);
  CHECK_THROWS_AS(parse_activation("elu"), ArgumentError);

  Rng rng(9);
  for (Activation a : {Activation::tanh, Activation::relu, Activation::logistic}) {
    for (int i = 0; i < 200; ++i) {
      double v = rand_sym(rng) * 4.0;
      if (a == Activation::relu && std::abs(v) < 1e-3) v = 0.5;  // stay off the kink
      const double h = 1e-5;
      const double fd = (activate(a, v + h) - activate(a, v - h)) / (2 * h);
      CHECK(std::abs(fd - activate_derivative(a, v)) < 1e-6);
    }
  }
}

TEST_CASE("backward: trivial cases") {
  Rng rng(1);
  const Tensor4 in = random_tensor(Shape4{2, 2, 5, 5}, rng);
  const KernelStack k = random_kernel(3, 2, Window{1, 3, 3}, rng);
  const Tensor4 zero(Shape4{3, 2, 3, 3});
  const ConvGrads g = conv_backward(in, k, {}, zero);
  for (double v : g.input.values()) CHECK(v == 0.0);
  for (double v : g.kernel.weights()) CHECK(v == 0.0);
  for (double v : g.kernel.bias()) CHECK(v == 0.0);

  // d/dw (w * x) = x
  Tensor4 x(Shape4{1, 1, 1, 1}, 2.75);
  KernelStack w(1, 1, Window{1, 1, 1});
  w.weights()[0] = -1.5;
  const ConvGrads s = conv_backward(x, w, {}, Tensor4(Shape4{1, 1, 1, 1}, 1.0));
  CHECK(s.kernel.weights()[0] == 2.75);
  CHECK(s.input[0] == -1.5);
  CHECK(s.kernel.bias()[0] == 1.0);

  CHECK_THROWS_AS(conv_backward(in, k, {}, Tensor4(Shape4{3, 2, 4, 3})), ShapeError);
  CHECK_THROWS_AS(max_filter_backward(in, Window{1, 2, 2}, {}, Tensor4(Shape4{2, 2, 5, 5})), ShapeError);
}

TEST_CASE("max_filter_backward breaks ties at the lowest index") {
  const Tensor4 in = row({4, 4, 1});
  const Tensor4 g = max_filter_backward(in, Window{1, 1, 2}, {}, row({1.0, 10.0}));
  // window {4,4} -> first 4; window {4,1} -> index 1
  CHECK(g.values() == std::vector<double>{1.0, 10.0, 0.0});
}

TEST_CASE("property: backward passes finite-difference checks") {
  Rng rng(4242);
  const double h = 1e-6;
  int instances = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const Shape4 s{rand_int(rng, 1, 3), rand_int(rng, 1, 3), rand_int(rng, 3, 7), rand_int(rng, 3, 7)};
    const Dilation d{1, rand_int(rng, 1, 2), rand_int(rng, 1, 2)};
    const Window kw{rand_int(rng, 1, std::min(2, s.z)), 2, rand_int(rng, 1, 2)};
    const Tensor4 in = random_tensor(s, rng);
    const KernelStack k = random_kernel(rand_int(rng, 1, 3), s.c, kw, rng);
    const Tensor4 r = random_tensor(conv_direct(in, k, d).shape(), rng);
    const ConvGrads g = conv_backward(in, k, d, r);
    auto loss_in = [&](const Tensor4& x) { return dot(conv_direct(x, k, d), r); };
    auto loss_k = [&](const KernelStack& kk) { return dot(conv_direct(in, kk, d), r); };
    double worst = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      Tensor4 p = in, m = in;
      p[i] += h;
      m[i] -= h;
      worst = std::max(worst, grad_rel(g.input[i], (loss_in(p) - loss_in(m)) / (2 * h)));
    }
    for (std::size_t i = 0; i < k.weights().size(); ++i) {
      KernelStack p = k, m = k;
      p.weights()[i] += h;
      m.weights()[i] -= h;
      worst = std::max(worst, grad_rel(g.kernel.weights()[i], (loss_k(p) - loss_k(m)) / (2 * h)));
    }
    for (std::size_t i = 0; i < k.bias().size(); ++i) {
      KernelStack p = k, m = k;
      p.bias()[i] += h;
      m.bias()[i] -= h;
      worst = std::max(worst, grad_rel(g.kernel.bias()[i], (loss_k(p) - loss_k(m)) / (2 * h)));
    }
    CHECK(worst < 1e-4);
    ++instances;
  }
  for (int trial = 0; trial < 40; ++trial) {
    const Shape4 s{rand_int(rng, 1, 2), rand_int(rng, 1, 3), rand_int(rng, 3, 6), rand_int(rng, 3, 6)};
    const Window w{rand_int(rng, 1, std::min(2, s.z)), 2, 2};
    const Dilation d{1, rand_int(rng, 1, 2), 1};
    const Tensor4 in = random_tensor(s, rng);  // continuous values: ties have probability 0
    const Tensor4 r = random_tensor(max_filter(in, w, d).shape(), rng);
    const Tensor4 g = max_filter_backward(in, w, d, r);
    double worst = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      Tensor4 p = in, m = in;
      p[i] += h;
      m[i] -= h;
      worst = std::max(worst, grad_rel(g[i], (dot(max_filter(p, w, d), r) - dot(max_filter(m, w, d), r)) / (2 * h)));
    }
    CHECK(worst < 1e-4);
    ++instances;
  }
  for (int trial = 0; trial < 30; ++trial) {
    const Activation a = std::array{Activation::tanh, Activation::relu, Activation::logistic}[trial % 3];
    Tensor4 in = random_tensor(Shape4{2, 1, 3, 4}, rng);
    for (double& v : in.values())
      if (std::abs(v) < 1e-3) v = 0.25;
    const Tensor4 r = random_tensor(in.shape(), rng);
    const Tensor4 g = activation_backward(in, a, r);
    double worst = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      Tensor4 p = in, m = in;
      p[i] += h;
      m[i] -= h;
      worst = std::max(worst, grad_rel(g[i], (dot(activation(p, a), r) - dot(activation(m, a), r)) / (2 * h)));
    }
    CHECK(worst < 1e-4);
    ++instances;
  }
  CHECK(instances >= 100);
}

TEST_CASE("results are bitwise independent of thread count") {
  Rng rng(77);
  const Tensor4 in = random_tensor(Shape4{3, 3, 20, 20}, rng);
  const KernelStack k = random_kernel(4, 3, Window{2, 3, 3}, rng);
  const Tensor4 go = random_tensor(Shape4{4, 2, 18, 18}, rng);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const Tensor4 a = conv_direct(in, k);
  const ConvGrads ga = conv_backward(in, k, {}, go);
  const Tensor4 fa = conv_fft(in, k);
  omp_set_num_threads(4);
  const Tensor4 b = conv_direct(in, k);
  const ConvGrads gb = conv_backward(in, k, {}, go);
  const Tensor4 fb = conv_fft(in, k);
  omp_set_num_threads(saved);
  CHECK(a == b);
  CHECK(fa == fb);
  CHECK(ga.input == gb.input);
  CHECK(ga.kernel == gb.kernel);
}
