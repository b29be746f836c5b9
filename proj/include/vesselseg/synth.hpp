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

#include <cstdint>

#include "vesselseg/volume.hpp"

namespace vesselseg::synth {

struct TubeParams {
  Extent3 dims{8, 64, 64};
  int tubes = 12;
  double radius_min = 1.5;  // in-plane voxels
  double radius_max = 3.0;
  double z_aspect = 2.0;   // z voxels are this many times longer than x-y voxels
  double background = 0.15;
  double signal = 0.6;
  double noise_sigma = 0.05;
};

struct TubeVolume {
  Stack image;       // float intensities
  LabelMask labels;  // 1 inside a tube
};

/// Straight tubes crossing the volume at random in-plane angles with a
/// small z tilt. Intensity is a Gaussian profile across each tube plus
/// Gaussian noise; labels mark voxels within the tube radius.
TubeVolume tube_volume(const TubeParams& p, std::uint64_t seed);

/// A degraded probability map for `truth`: a smooth tube-shaped response
/// plus independent per-voxel noise in the logit domain, which produces
/// scattered false detections away from the vessels.
ProbMap noisy_probability(const LabelMask& truth, double contrast, double noise_sigma, std::uint64_t seed);

}  // namespace vesselseg::synth
