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

#include "vesselseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vesselseg/random.hpp"

namespace vesselseg::synth {

namespace {

double gaussian(Rng& rng) {
  // Box-Muller on our own uniform draws keeps the stream reproducible.
  const double u1 = std::max(uniform01(rng), 1e-300);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

TubeVolume tube_volume(const TubeParams& p, std::uint64_t seed) {
  Rng rng(seed);
  const Extent3 d = p.dims;
  struct Tube {
    double cz, cy, cx;  // a point on the axis
    double uz, uy, ux;  // unit direction (physical units)
    double r;
  };
  std::vector<Tube> tubes;
  for (int i = 0; i < p.tubes; ++i) {
    Tube t;
    t.cz = uniform01(rng) * (d.z - 1) * p.z_aspect;
    t.cy = (0.15 + 0.7 * uniform01(rng)) * d.y;
    t.cx = (0.15 + 0.7 * uniform01(rng)) * d.x;
    const double theta = std::numbers::pi * uniform01(rng);
    const double tilt = 0.15 * (2.0 * uniform01(rng) - 1.0);
    t.uy = std::cos(theta);
    t.ux = std::sin(theta);
    t.uz = tilt;
    const double n = std::sqrt(t.uz * t.uz + t.uy * t.uy + t.ux * t.ux);
    t.uz /= n;
    t.uy /= n;
    t.ux /= n;
    t.r = p.radius_min + (p.radius_max - p.radius_min) * uniform01(rng);
    tubes.push_back(t);
  }
  TubeVolume v;
  v.image.voxels = Volume<float>(d);
  v.image.kind = SampleKind::f32;
  v.image.spacing = VoxelSize{1.0, 1.0, p.z_aspect};
  v.image.has_spacing = true;
  v.labels = LabelMask(d, 0);
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        double intensity = p.background;
        bool inside = false;
        for (const auto& t : tubes) {
          const double pz = z * p.z_aspect - t.cz, py = y - t.cy, px = x - t.cx;
          const double along = pz * t.uz + py * t.uy + px * t.ux;
          const double d2 = pz * pz + py * py + px * px - along * along;
          intensity = std::max(intensity, p.background + p.signal * std::exp(-d2 / (2.0 * t.r * t.r)));
          inside = inside || d2 <= t.r * t.r;
        }
        v.image.voxels(z, y, x) = static_cast<float>(intensity + p.noise_sigma * gaussian(rng));
        v.labels(z, y, x) = inside ? 1 : 0;
      }
  return v;
}

ProbMap noisy_probability(const LabelMask& truth, double contrast, double noise_sigma, std::uint64_t seed) {
  Rng rng(seed);
  ProbMap p(truth.dims());
  for (std::size_t j = 0; j < truth.size(); ++j) {
    const double logit = (truth[j] ? contrast : -contrast) + noise_sigma * gaussian(rng);
    p[j] = static_cast<float>(1.0 / (1.0 + std::exp(-logit)));
  }
  return p;
}

}  // namespace vesselseg::synth
