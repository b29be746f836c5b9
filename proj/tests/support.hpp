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

// Shared helpers for the test suites: random generators and small
// reference implementations that never call into the library code they are
// used to check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vesselseg/random.hpp"
#include "vesselseg/volcore.hpp"

namespace vstest {

using vesselseg::Extent3;
using vesselseg::Rng;
using vesselseg::uniform01;
using vesselseg::volcore::Dilation;
using vesselseg::volcore::KernelStack;
using vesselseg::volcore::Shape4;
using vesselseg::volcore::Tensor4;
using vesselseg::volcore::Window;

inline int rand_int(Rng& rng, int lo, int hi) {  // inclusive
  return lo + static_cast<int>(vesselseg::uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

inline double rand_sym(Rng& rng) { return 2.0 * uniform01(rng) - 1.0; }

inline Tensor4 random_tensor(Shape4 s, Rng& rng) {
  Tensor4 t(s);
  for (double& v : t.values()) v = rand_sym(rng);
  return t;
}

inline KernelStack random_kernel(int co, int ci, Window k, Rng& rng, bool with_bias = true) {
  KernelStack ks(co, ci, k);
  for (double& v : ks.weights()) v = rand_sym(rng);
  if (with_bias)
    for (double& v : ks.bias()) v = rand_sym(rng);
  return ks;
}

/// Plain six-loop valid cross-correlation with strided taps.
inline Tensor4 naive_conv(const Tensor4& in, const KernelStack& k, Dilation d, Extent3 stride = {1, 1, 1}) {
  const Shape4 s = in.shape();
  const Window w = k.extent();
  const int oz = (s.z - ((w.z - 1) * d.z + 1)) / stride.z + 1;
  const int oy = (s.y - ((w.y - 1) * d.y + 1)) / stride.y + 1;
  const int ox = (s.x - ((w.x - 1) * d.x + 1)) / stride.x + 1;
  Tensor4 out(Shape4{k.c_out(), oz, oy, ox});
  for (int o = 0; o < k.c_out(); ++o)
    for (int z = 0; z < oz; ++z)
      for (int y = 0; y < oy; ++y)
        for (int x = 0; x < ox; ++x) {
          double acc = k.bias()[o];
          for (int i = 0; i < s.c; ++i)
            for (int a = 0; a < w.z; ++a)
              for (int b = 0; b < w.y; ++b)
                for (int c = 0; c < w.x; ++c)
                  acc += k.w(o, i, a, b, c) * in(i, z * stride.z + a * d.z, y * stride.y + b * d.y, x * stride.x + c * d.x);
          out(o, z, y, x) = acc;
        }
  return out;
}

/// Non-overlapping max pooling (stride == window); extents must divide.
inline Tensor4 naive_max_pool(const Tensor4& in, Window w) {
  const Shape4 s = in.shape();
  Tensor4 out(Shape4{s.c, s.z / w.z, s.y / w.y, s.x / w.x});
  for (int c = 0; c < s.c; ++c)
    for (int z = 0; z < s.z / w.z; ++z)
      for (int y = 0; y < s.y / w.y; ++y)
        for (int x = 0; x < s.x / w.x; ++x) {
          double m = -INFINITY;
          for (int a = 0; a < w.z; ++a)
            for (int b = 0; b < w.y; ++b)
              for (int cc = 0; cc < w.x; ++cc) m = std::max(m, in(c, z * w.z + a, y * w.y + b, x * w.x + cc));
          out(c, z, y, x) = m;
        }
  return out;
}

inline double max_abs_diff(const Tensor4& a, const Tensor4& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(const Tensor4& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

/// max |a - b| / max(max |b|, tiny)
inline double rel_error(const Tensor4& a, const Tensor4& b) {
  return max_abs_diff(a, b) / std::max(max_abs(b), 1e-300);
}

inline double dot(const Tensor4& a, const Tensor4& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Relative error used by the gradient checks.
inline double grad_rel(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace vstest
