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

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vesselseg/error.hpp"

namespace vesselseg {

/// Spatial extent or index triple, ordered (z, y, x). x is the fastest axis.
struct Extent3 {
  int z = 1;
  int y = 1;
  int x = 1;

  constexpr std::size_t volume() const noexcept {
    return static_cast<std::size_t>(z) * static_cast<std::size_t>(y) * static_cast<std::size_t>(x);
  }
  friend constexpr bool operator==(const Extent3&, const Extent3&) = default;
};

std::string to_string(const Extent3& e);

/// Dense z-major volume. Voxel (z, y, x) lives at (z * Y + y) * X + x.
template <typename T>
class Volume {
 public:
  using value_type = T;

  Volume() = default;
  explicit Volume(Extent3 dims, T fill = T{}) : dims_(dims), data_(checked_size(dims), fill) {}
  Volume(Extent3 dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {
    if (data_.size() != dims_.volume()) throw ShapeError("volume buffer length does not match " + to_string(dims_));
  }

  const Extent3& dims() const noexcept { return dims_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t index(int z, int y, int x) const noexcept {
    return (static_cast<std::size_t>(z) * dims_.y + y) * dims_.x + x;
  }
  T& operator()(int z, int y, int x) noexcept { return data_[index(z, y, x)]; }
  const T& operator()(int z, int y, int x) const noexcept { return data_[index(z, y, x)]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  /// Copy of slice z as a 1-deep volume.
  Volume slice(int z) const {
    Volume out(Extent3{1, dims_.y, dims_.x});
    const std::size_t n = static_cast<std::size_t>(dims_.y) * dims_.x;
    std::copy(data_.begin() + z * n, data_.begin() + (z + 1) * n, out.data_.begin());
    return out;
  }
  void set_slice(int z, const Volume& s) {
    const std::size_t n = static_cast<std::size_t>(dims_.y) * dims_.x;
    if (s.size() != n) throw ShapeError("slice size mismatch");
    std::copy(s.data_.begin(), s.data_.end(), data_.begin() + z * n);
  }

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  static std::size_t checked_size(const Extent3& d) {
    if (d.z <= 0 || d.y <= 0 || d.x <= 0) throw ShapeError("volume extents must be positive, got " + to_string(d));
    return d.volume();
  }

  Extent3 dims_{0, 0, 0};
  std::vector<T> data_;
};

/// Binary vessel mask, values 0/1.
using LabelMask = Volume<std::uint8_t>;
/// Per-voxel vessel probability.
using ProbMap = Volume<float>;

/// Physical voxel spacing in micrometres.
struct VoxelSize {
  double x = 1.0;
  double y = 1.0;
  double z = 1.0;
  friend bool operator==(const VoxelSize&, const VoxelSize&) = default;
};

enum class SampleKind { u8, u16, f32 };

/// A microscopy volume plus its acquisition metadata.
struct Stack {
  Volume<float> voxels;
  VoxelSize spacing;
  bool has_spacing = false;
  SampleKind kind = SampleKind::f32;
};

/// Mirror (reflect, edge excluded) padding of a volume. Pads may exceed the
/// extent, in which case reflection is repeated.
template <typename T>
Volume<T> mirror_pad(const Volume<T>& v, Extent3 lo, Extent3 hi);

/// Crop of [origin, origin + size).
template <typename T>
Volume<T> crop(const Volume<T>& v, Extent3 origin, Extent3 size);

int reflect_index(int i, int n) noexcept;

}  // namespace vesselseg
