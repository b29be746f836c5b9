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

#include "vesselseg/volcore.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <tuple>

#include "fft_plans.hpp"

namespace vesselseg::volcore {

std::string to_string(const Shape4& s) {
  std::ostringstream os;
  os << "(c=" << s.c << ", z=" << s.z << ", y=" << s.y << ", x=" << s.x << ")";
  return os.str();
}

Tensor4::Tensor4(Shape4 shape, double fill) : shape_(shape) {
  if (shape.c <= 0 || shape.z <= 0 || shape.y <= 0 || shape.x <= 0)
    throw ShapeError("tensor dims must be positive, got " + to_string(shape));
  data_.assign(shape.size(), fill);
}

Tensor4::Tensor4(Shape4 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size()) throw ShapeError("tensor buffer length does not match " + to_string(shape_));
}

bool Tensor4::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor4 from_volume(const Volume<float>& v) {
  const Extent3 d = v.dims();
  return Tensor4(Shape4{1, d.z, d.y, d.x}, std::vector<double>(v.values().begin(), v.values().end()));
}

Tensor4 from_volumes(std::span<const Volume<float>> vs) {
  if (vs.empty()) throw ShapeError("no input volumes");
  const Extent3 d = vs.front().dims();
  Tensor4 t(Shape4{static_cast<int>(vs.size()), d.z, d.y, d.x});
  for (std::size_t c = 0; c < vs.size(); ++c) {
    if (!(vs[c].dims() == d)) throw ShapeError("input volumes differ in size");
    std::copy(vs[c].values().begin(), vs[c].values().end(), t.channel(static_cast<int>(c)).begin());
  }
  return t;
}

Volume<float> to_volume(const Tensor4& t, int channel) {
  const Shape4& s = t.shape();
  Volume<float> v(s.spatial());
  auto ch = t.channel(channel);
  std::transform(ch.begin(), ch.end(), v.values().begin(), [](double x) { return static_cast<float>(x); });
  return v;
}

KernelStack::KernelStack(int c_out, int c_in, Window k) : c_out_(c_out), c_in_(c_in), k_(k) {
  if (c_out <= 0 || c_in <= 0 || k.z <= 0 || k.y <= 0 || k.x <= 0)
    throw ShapeError("kernel stack dims must be positive");
  weights_.assign(static_cast<std::size_t>(c_out) * c_in * k.volume(), 0.0);
  bias_.assign(static_cast<std::size_t>(c_out), 0.0);
}

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  if (name == "logistic") return Activation::logistic;
  throw ArgumentError("unknown activation '" + name + "'");
}

const char* activation_name(Activation a) noexcept {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::logistic: return "logistic";
  }
  return "?";
}

Extent3 valid_extent(Extent3 in, Window k, Dilation d, const char* what) {
  auto axis = [&](int n, int kk, int dd, const char* name) {
    const int eff = (kk - 1) * dd + 1;
    if (n < eff) {
      std::ostringstream os;
      os << what << ": input extent " << n << " along " << name << " is smaller than the effective window " << eff;
      throw ShapeError(os.str());
    }
    return n - eff + 1;
  };
  return {axis(in.z, k.z, d.z, "z"), axis(in.y, k.y, d.y, "y"), axis(in.x, k.x, d.x, "x")};
}

namespace {

void check_conv(const Tensor4& input, const KernelStack& k) {
  if (input.shape().c != k.c_in()) {
    std::ostringstream os;
    os << "convolution: input has " << input.shape().c << " channels, kernel expects " << k.c_in()
       << " (axis c)";
    throw ShapeError(os.str());
  }
}

}  // namespace

Tensor4 conv_direct(const Tensor4& input, const KernelStack& k, Dilation d) {
  check_conv(input, k);
  const Shape4 is = input.shape();
  const Window kw = k.extent();
  const Extent3 os = valid_extent(is.spatial(), kw, d, "convolution");
  Tensor4 out(Shape4{k.c_out(), os.z, os.y, os.x});

#pragma omp parallel for schedule(static)
  for (int o = 0; o < k.c_out(); ++o) {
    auto plane = out.channel(o);
    std::fill(plane.begin(), plane.end(), k.bias()[o]);
    for (int i = 0; i < is.c; ++i) {
      for (int tz = 0; tz < kw.z; ++tz)
        for (int ty = 0; ty < kw.y; ++ty)
          for (int tx = 0; tx < kw.x; ++tx) {
            const double w = k.w(o, i, tz, ty, tx);
            for (int z = 0; z < os.z; ++z)
              for (int y = 0; y < os.y; ++y) {
                const double* src = &input(i, z + tz * d.z, y + ty * d.y, tx * d.x);
                double* dst = &out(o, z, y, 0);
                for (int x = 0; x < os.x; ++x) dst[x] += w * src[x];
              }
          }
    }
  }
  return out;
}

using detail::alloc_complex;
using detail::alloc_real;
using detail::ComplexBuffer;
using detail::PlanCache;
using detail::PlanPair;
using detail::RealBuffer;

Tensor4 conv_fft(const Tensor4& input, const KernelStack& k, Dilation d) {
  check_conv(input, k);
  const Shape4 is = input.shape();
  const Extent3 n = is.spatial();
  const Window kw = k.extent();
  const Extent3 os = valid_extent(n, kw, d, "convolution");
  const std::size_t nr = n.volume();
  const std::size_t nc = static_cast<std::size_t>(n.z) * n.y * (n.x / 2 + 1);
  const PlanPair plans = PlanCache::instance().get(n);

  // Spectra of every input channel.
  std::vector<ComplexBuffer> in_spec(static_cast<std::size_t>(is.c));
  for (int i = 0; i < is.c; ++i) {
    RealBuffer r = alloc_real(nr);
    auto ch = input.channel(i);
    std::copy(ch.begin(), ch.end(), r.get());
    in_spec[i] = alloc_complex(nc);
    fftw_execute_dft_r2c(plans.forward, r.get(), in_spec[i].get());
  }

  Tensor4 out(Shape4{k.c_out(), os.z, os.y, os.x});
  const double scale = 1.0 / static_cast<double>(nr);

#pragma omp parallel for schedule(static)
  for (int o = 0; o < k.c_out(); ++o) {
    RealBuffer kr = alloc_real(nr);
    ComplexBuffer kc = alloc_complex(nc);
    ComplexBuffer acc = alloc_complex(nc);
    std::fill_n(reinterpret_cast<double*>(acc.get()), 2 * nc, 0.0);
    for (int i = 0; i < is.c; ++i) {
      // Zero-stuffed (dilated) kernel embedded at the origin.
      std::fill_n(kr.get(), nr, 0.0);
      for (int tz = 0; tz < kw.z; ++tz)
        for (int ty = 0; ty < kw.y; ++ty)
          for (int tx = 0; tx < kw.x; ++tx)
            kr[(static_cast<std::size_t>(tz * d.z) * n.y + ty * d.y) * n.x + tx * d.x] = k.w(o, i, tz, ty, tx);
      fftw_execute_dft_r2c(plans.forward, kr.get(), kc.get());
      // Cross-correlation: X * conj(K).
      const fftw_complex* xs = in_spec[i].get();
      for (std::size_t j = 0; j < nc; ++j) {
        const double ar = xs[j][0], ai = xs[j][1];
        const double br = kc[j][0], bi = -kc[j][1];
        acc[j][0] += ar * br - ai * bi;
        acc[j][1] += ar * bi + ai * br;
      }
    }
    fftw_execute_dft_c2r(plans.backward, acc.get(), kr.get());
    const double b = k.bias()[o];
    for (int z = 0; z < os.z; ++z)
      for (int y = 0; y < os.y; ++y) {
        const double* src = kr.get() + (static_cast<std::size_t>(z) * n.y + y) * n.x;
        double* dst = &out(o, z, y, 0);
        for (int x = 0; x < os.x; ++x) dst[x] = src[x] * scale + b;
      }
  }
  return out;
}

Tensor4 max_filter(const Tensor4& input, Window window, Dilation d) {
  const Shape4 is = input.shape();
  const Extent3 os = valid_extent(is.spatial(), window, d, "max-filter");
  Tensor4 out(Shape4{is.c, os.z, os.y, os.x});

#pragma omp parallel for schedule(static)
  for (int c = 0; c < is.c; ++c) {
    for (int z = 0; z < os.z; ++z)
      for (int y = 0; y < os.y; ++y) {
        double* dst = &out(c, z, y, 0);
        for (int x = 0; x < os.x; ++x) dst[x] = input(c, z, y, x);
        for (int tz = 0; tz < window.z; ++tz)
          for (int ty = 0; ty < window.y; ++ty)
            for (int tx = 0; tx < window.x; ++tx) {
              const double* src = &input(c, z + tz * d.z, y + ty * d.y, tx * d.x);
              for (int x = 0; x < os.x; ++x) dst[x] = std::max(dst[x], src[x]);
            }
      }
  }
  return out;
}

double activate(Activation kind, double v) noexcept {
  switch (kind) {
    case Activation::tanh: return std::tanh(v);
    case Activation::relu: return v > 0.0 ? v : 0.0;
    case Activation::logistic:
      if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
      else {
        const double e = std::exp(v);
        return e / (1.0 + e);
      }
  }
  return v;
}

double activate_derivative(Activation kind, double v) noexcept {
  switch (kind) {
    case Activation::tanh: {
      const double t = std::tanh(v);
      return 1.0 - t * t;
    }
    case Activation::relu: return v > 0.0 ? 1.0 : 0.0;
    case Activation::logistic: {
      const double s = activate(Activation::logistic, v);
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

Tensor4 activation(const Tensor4& input, Activation kind) {
  Tensor4 out(input.shape());
  const std::size_t n = input.size();
#pragma omp parallel for schedule(static)
  for (std::size_t j = 0; j < n; ++j) out[j] = activate(kind, input[j]);
  return out;
}

Tensor4 activation_backward(const Tensor4& input, Activation kind, const Tensor4& grad_out) {
  if (!(input.shape() == grad_out.shape()))
    throw ShapeError("activation backward: gradient shape " + to_string(grad_out.shape()) + " != input shape " +
                     to_string(input.shape()));
  Tensor4 g(input.shape());
  const std::size_t n = input.size();
#pragma omp parallel for schedule(static)
  for (std::size_t j = 0; j < n; ++j) g[j] = grad_out[j] * activate_derivative(kind, input[j]);
  return g;
}

ConvGrads conv_backward(const Tensor4& input, const KernelStack& k, Dilation d, const Tensor4& grad_out) {
  check_conv(input, k);
  const Shape4 is = input.shape();
  const Window kw = k.extent();
  const Extent3 os = valid_extent(is.spatial(), kw, d, "convolution backward");
  if (!(grad_out.shape() == Shape4{k.c_out(), os.z, os.y, os.x}))
    throw ShapeError("convolution backward: gradient shape " + to_string(grad_out.shape()) +
                     " does not match forward output " + to_string(Shape4{k.c_out(), os.z, os.y, os.x}));

  ConvGrads g{Tensor4(is), KernelStack(k.c_out(), k.c_in(), kw)};

  for (int o = 0; o < k.c_out(); ++o) {
    double s = 0.0;
    for (double v : grad_out.channel(o)) s += v;
    g.kernel.bias()[o] = s;
  }

  const int pairs = k.c_out() * is.c;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < pairs; ++p) {
    const int o = p / is.c;
    const int i = p % is.c;
    for (int tz = 0; tz < kw.z; ++tz)
      for (int ty = 0; ty < kw.y; ++ty)
        for (int tx = 0; tx < kw.x; ++tx) {
          double s = 0.0;
          for (int z = 0; z < os.z; ++z)
            for (int y = 0; y < os.y; ++y) {
              const double* src = &input(i, z + tz * d.z, y + ty * d.y, tx * d.x);
              const double* go = &grad_out(o, z, y, 0);
              for (int x = 0; x < os.x; ++x) s += go[x] * src[x];
            }
          g.kernel.w(o, i, tz, ty, tx) = s;
        }
  }

#pragma omp parallel for schedule(static)
  for (int i = 0; i < is.c; ++i) {
    for (int o = 0; o < k.c_out(); ++o)
      for (int tz = 0; tz < kw.z; ++tz)
        for (int ty = 0; ty < kw.y; ++ty)
          for (int tx = 0; tx < kw.x; ++tx) {
            const double w = k.w(o, i, tz, ty, tx);
            for (int z = 0; z < os.z; ++z)
              for (int y = 0; y < os.y; ++y) {
                double* dst = &g.input(i, z + tz * d.z, y + ty * d.y, tx * d.x);
                const double* go = &grad_out(o, z, y, 0);
                for (int x = 0; x < os.x; ++x) dst[x] += w * go[x];
              }
          }
  }
  return g;
}

Tensor4 max_filter_backward(const Tensor4& input, Window window, Dilation d, const Tensor4& grad_out) {
  const Shape4 is = input.shape();
  const Extent3 os = valid_extent(is.spatial(), window, d, "max-filter backward");
  if (!(grad_out.shape() == Shape4{is.c, os.z, os.y, os.x}))
    throw ShapeError("max-filter backward: gradient shape " + to_string(grad_out.shape()) +
                     " does not match forward output");
  Tensor4 g(is);

#pragma omp parallel for schedule(static)
  for (int c = 0; c < is.c; ++c) {
    for (int z = 0; z < os.z; ++z)
      for (int y = 0; y < os.y; ++y)
        for (int x = 0; x < os.x; ++x) {
          // Taps are visited in increasing linear index; strict '>' keeps the
          // first (lowest index) maximum.
          std::size_t best = input.index(c, z, y, x);
          double best_v = input[best];
          for (int tz = 0; tz < window.z; ++tz)
            for (int ty = 0; ty < window.y; ++ty)
              for (int tx = 0; tx < window.x; ++tx) {
                const std::size_t j = input.index(c, z + tz * d.z, y + ty * d.y, x + tx * d.x);
                if (input[j] > best_v) {
                  best_v = input[j];
                  best = j;
                }
              }
          g[best] += grad_out(c, z, y, x);
        }
  }
  return g;
}

}  // namespace vesselseg::volcore
