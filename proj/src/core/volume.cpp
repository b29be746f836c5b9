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

#include "vesselseg/volume.hpp"

#include <sstream>

namespace vesselseg {

std::string to_string(const Extent3& e) {
  std::ostringstream os;
  os << "(z=" << e.z << ", y=" << e.y << ", x=" << e.x << ")";
  return os.str();
}

int reflect_index(int i, int n) noexcept {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

template <typename T>
Volume<T> mirror_pad(const Volume<T>& v, Extent3 lo, Extent3 hi) {
  const Extent3 in = v.dims();
  const Extent3 out{in.z + lo.z + hi.z, in.y + lo.y + hi.y, in.x + lo.x + hi.x};
  Volume<T> r(out);
  for (int z = 0; z < out.z; ++z) {
    const int sz = reflect_index(z - lo.z, in.z);
    for (int y = 0; y < out.y; ++y) {
      const int sy = reflect_index(y - lo.y, in.y);
      for (int x = 0; x < out.x; ++x) r(z, y, x) = v(sz, sy, reflect_index(x - lo.x, in.x));
    }
  }
  return r;
}

template <typename T>
Volume<T> crop(const Volume<T>& v, Extent3 origin, Extent3 size) {
  const Extent3 in = v.dims();
  if (origin.z < 0 || origin.y < 0 || origin.x < 0 || origin.z + size.z > in.z || origin.y + size.y > in.y ||
      origin.x + size.x > in.x) {
    throw ShapeError("crop " + to_string(size) + " at " + to_string(origin) + " exceeds volume " + to_string(in));
  }
  Volume<T> r(size);
  for (int z = 0; z < size.z; ++z)
    for (int y = 0; y < size.y; ++y) {
      const T* src = &v(origin.z + z, origin.y + y, origin.x);
      std::copy(src, src + size.x, &r(z, y, 0));
    }
  return r;
}

template Volume<float> mirror_pad(const Volume<float>&, Extent3, Extent3);
template Volume<std::uint8_t> mirror_pad(const Volume<std::uint8_t>&, Extent3, Extent3);
template Volume<float> crop(const Volume<float>&, Extent3, Extent3);
template Volume<std::uint8_t> crop(const Volume<std::uint8_t>&, Extent3, Extent3);

}  // namespace vesselseg
