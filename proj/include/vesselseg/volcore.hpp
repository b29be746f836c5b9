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

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vesselseg/volume.hpp"

namespace vesselseg::volcore {

/// Tensor shape (channels, z, y, x).
struct Shape4 {
  int c = 1;
  int z = 1;
  int y = 1;
  int x = 1;

  constexpr Extent3 spatial() const noexcept { return {z, y, x}; }
  constexpr std::size_t plane() const noexcept { return static_cast<std::size_t>(z) * y * x; }
  constexpr std::size_t size() const noexcept { return plane() * static_cast<std::size_t>(c); }
  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;
};

std::string to_string(const Shape4& s);

/// Four-dimensional activation / gradient buffer. Storage is (c, z, y, x)
/// with x fastest; values are double so every reduction accumulates in 64 bit.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, double fill = 0.0);
  Tensor4(Shape4 shape, std::vector<double> data);

  const Shape4& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::size_t index(int c, int z, int y, int x) const noexcept {
    return ((static_cast<std::size_t>(c) * shape_.z + z) * shape_.y + y) * shape_.x + x;
  }
  double& operator()(int c, int z, int y, int x) noexcept { return data_[index(c, z, y, x)]; }
  const double& operator()(int c, int z, int y, int x) const noexcept { return data_[index(c, z, y, x)]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  const double& operator[](std::size_t i) const noexcept { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> channel(int c) noexcept { return {data_.data() + c * shape_.plane(), shape_.plane()}; }
  std::span<const double> channel(int c) const noexcept { return {data_.data() + c * shape_.plane(), shape_.plane()}; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  Shape4 shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

/// One-channel tensor view of a volume (copy).
Tensor4 from_volume(const Volume<float>& v);
/// Stack several equally sized volumes as channels.
Tensor4 from_volumes(std::span<const Volume<float>> vs);
Volume<float> to_volume(const Tensor4& t, int channel);

struct Dilation {
  int z = 1;
  int y = 1;
  int x = 1;
  friend constexpr bool operator==(const Dilation&, const Dilation&) = default;
};

/// Kernel extents, ordered (z, y, x).
using Window = Extent3;

/// Convolution weights (c_out, c_in, kz, ky, kx) plus one bias per output.
class KernelStack {
 public:
  KernelStack() = default;
  KernelStack(int c_out, int c_in, Window k);

  int c_out() const noexcept { return c_out_; }
  int c_in() const noexcept { return c_in_; }
  const Window& extent() const noexcept { return k_; }
  std::size_t taps() const noexcept { return k_.volume(); }
  std::size_t weight_count() const noexcept { return weights_.size(); }
  std::size_t param_count() const noexcept { return weights_.size() + bias_.size(); }

  std::size_t index(int o, int i, int z, int y, int x) const noexcept {
    return (((static_cast<std::size_t>(o) * c_in_ + i) * k_.z + z) * k_.y + y) * k_.x + x;
  }
  double& w(int o, int i, int z, int y, int x) noexcept { return weights_[index(o, i, z, y, x)]; }
  double w(int o, int i, int z, int y, int x) const noexcept { return weights_[index(o, i, z, y, x)]; }
  /// Taps of one (output, input) pair.
  std::span<const double> filter(int o, int i) const noexcept {
    return {weights_.data() + (static_cast<std::size_t>(o) * c_in_ + i) * taps(), taps()};
  }

  std::vector<double>& weights() noexcept { return weights_; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  std::vector<double>& bias() noexcept { return bias_; }
  const std::vector<double>& bias() const noexcept { return bias_; }

  friend bool operator==(const KernelStack&, const KernelStack&) = default;

 private:
  int c_out_ = 0;
  int c_in_ = 0;
  Window k_{1, 1, 1};
  std::vector<double> weights_;
  std::vector<double> bias_;
};

enum class Activation { tanh, relu, logistic };

Activation parse_activation(const std::string& name);
const char* activation_name(Activation a) noexcept;

/// Output extent of a valid sliding operation: in - (k - 1) * d per axis.
/// Throws ShapeError naming the first axis that is too small.
Extent3 valid_extent(Extent3 in, Window k, Dilation d, const char* what);

// Forward primitives. All are valid-mode (no padding) cross-correlations /
// sliding maxima and are pure functions of their arguments.

Tensor4 conv_direct(const Tensor4& input, const KernelStack& k, Dilation d = {});
Tensor4 conv_fft(const Tensor4& input, const KernelStack& k, Dilation d = {});
Tensor4 max_filter(const Tensor4& input, Window window, Dilation d = {});
Tensor4 activation(const Tensor4& input, Activation kind);

struct ConvGrads {
  Tensor4 input;
  KernelStack kernel;  // gradient w.r.t. weights and bias, same layout as k
};

ConvGrads conv_backward(const Tensor4& input, const KernelStack& k, Dilation d, const Tensor4& grad_out);

/// Routes each output gradient to the arg-max tap of its window. Ties are
/// broken by the lowest linear input index.
Tensor4 max_filter_backward(const Tensor4& input, Window window, Dilation d, const Tensor4& grad_out);

/// Gradient through an elementwise activation, given the forward input.
Tensor4 activation_backward(const Tensor4& input, Activation kind, const Tensor4& grad_out);

/// Scalar activation and derivative, exposed for finite-difference tests.
double activate(Activation kind, double v) noexcept;
double activate_derivative(Activation kind, double v) noexcept;

}  // namespace vesselseg::volcore
