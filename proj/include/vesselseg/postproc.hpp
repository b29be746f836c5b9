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

#include <string>
#include <vector>

#include "vesselseg/volume.hpp"

namespace vesselseg::postproc {

/// Vessel iff p >= t.
LabelMask threshold(const ProbMap& prob, double t);

struct CrfParams {
  double unary_weight = 1.0;
  double w_s = 3.0;       // smoothness kernel weight
  double theta_s = 3.0;   // px
  double w_a = 10.0;      // appearance kernel weight
  double theta_a = 30.0;  // px
  double theta_i = 0.1;   // guide intensity units
  int iterations = 10;
  double grid_spacing = 0.4;  // lattice mode, in kernel sigmas

  void validate() const;
};

enum class CrfMode { exact, lattice };

CrfMode parse_crf_mode(const std::string& s);
std::string crf_mode_name(CrfMode m);

/// Largest slice (in pixels) accepted by the brute-force mode.
inline constexpr std::size_t kExactCrfMaxPixels = 64 * 64;

struct MeanField {
  Volume<float> vessel;        // vessel marginal per pixel
  std::vector<double> energy;  // free energy before and after each iteration (exact mode only)
};

/// Mean-field inference for a fully connected two-label Potts CRF on one
/// slice. Messages include each pixel's own kernel term, which makes the
/// parallel update a concave-convex step that never increases the free
/// energy for positive semidefinite kernels.
MeanField mean_field_2d(const ProbMap& prob, const Volume<float>& guide, const CrfParams& p, CrfMode mode,
                        bool track_energy = false);

/// Argmax of the marginals; ties go to vessel.
LabelMask dense_crf_2d(const ProbMap& prob, const Volume<float>& guide, const CrfParams& p,
                       CrfMode mode = CrfMode::lattice);

/// dense_crf_2d on every z-slice independently.
LabelMask apply_stack(const ProbMap& prob, const Volume<float>& guide, const CrfParams& p,
                      CrfMode mode = CrfMode::lattice);

/// Splat/blur/slice Gaussian filter on a dense grid over the feature space,
/// approximating out_i = sum_j exp(-|f_i - f_j|^2 / 2) v_j. Multilinear
/// splatting and slicing each add h^2/6 of variance per axis, which the grid
/// blur subtracts; the response is normalized to the kernel integral.
class GaussianGrid {
 public:
  /// features: n points of dimension d (1..3), row-major; spacing in
  /// feature units.
  GaussianGrid(const std::vector<double>& features, int d, std::size_t n, double spacing = 0.4);

  /// values: n points of dimension vd, row-major.
  std::vector<double> filter(const std::vector<double>& values, int vd) const;

  std::size_t cells() const noexcept { return cells_; }

 private:
  int d_;
  std::size_t n_;
  std::size_t cells_ = 1;
  std::vector<int> dim_;
  std::vector<std::size_t> stride_;
  std::vector<double> taps_;
  int radius_ = 0;
  double gain_ = 1.0;
  std::vector<std::size_t> base_;  // n: cell index of the lower corner
  std::vector<double> frac_;       // n * d
};

}  // namespace vesselseg::postproc
