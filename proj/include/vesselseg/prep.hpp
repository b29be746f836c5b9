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

#include <functional>
#include <string>
#include <vector>

#include "vesselseg/volume.hpp"

namespace vesselseg::prep {

/// Variance-stabilizing transform 2 sqrt(x + 3/8). Throws DataError on
/// negative input.
Volume<float> anscombe(const Volume<float>& v);

enum class InverseKind { algebraic, unbiased };

InverseKind parse_inverse_kind(const std::string& s);
std::string inverse_kind_name(InverseKind k);

/// The unbiased inverse is the closed-form approximation of the exact
/// unbiased inverse for Poisson data, clamped at zero.
Volume<float> inverse_anscombe(const Volume<float>& v, InverseKind kind = InverseKind::unbiased);

double anscombe_value(double x);
double inverse_anscombe_value(double y, InverseKind kind);

struct Notch {
  double fy = 0;  // cycles per pixel, [-0.5, 0.5)
  double fx = 0;
  double radius = 0.01;
};

struct NotchSpec {
  std::vector<Notch> notches;

  void validate() const;
  bool empty() const noexcept { return notches.empty(); }
};

/// Parses "fy,fx,r;fy,fx,r;..." (empty string gives an empty spec).
NotchSpec parse_notch_spec(const std::string& s);
std::string format_notch_spec(const NotchSpec& n);

/// Per-slice 2D spectral filter with Gaussian notches at +f and -f. Each
/// notch is truncated beyond six radii so distant bins, including DC, pass
/// unchanged.
Volume<float> notch_filter(const Volume<float>& v, const NotchSpec& n);

/// Multiplicative transfer value of the filter at one normalized frequency.
double notch_gain(const NotchSpec& n, double fy, double fx);

enum class NormalizeMode { affine, percentile };

struct NormalizeParams {
  NormalizeMode mode = NormalizeMode::affine;
  double lo_pct = 1.0;
  double hi_pct = 99.0;
};

struct Normalized {
  Volume<float> voxels;
  double lo = 0;
  double hi = 1;
  bool constant = false;
};

NormalizeMode parse_normalize_mode(const std::string& s);

/// Affine map of [lo, hi] onto [0, 1], clipping outside. A constant stack
/// maps to 0.5 with a warning.
Normalized normalize(const Volume<float>& v, const NormalizeParams& p = {});
Volume<float> denormalize(const Volume<float>& v, double lo, double hi);

/// Linear-interpolated percentile, pct in [0, 100].
double percentile(std::vector<float> values, double pct);

/// Denoiser operating in the variance-stabilized domain.
using Denoiser = std::function<Volume<float>(const Volume<float>&)>;

/// Separable Gaussian smoother with mirrored borders; a sigma of zero skips
/// that axis.
Denoiser gaussian_denoiser(double sigma_xy, double sigma_z);

Volume<float> gaussian_smooth(const Volume<float>& v, double sigma_xy, double sigma_z);

/// anscombe, denoise, inverse.
Volume<float> denoise_stabilized(const Volume<float>& v, const Denoiser& d, InverseKind kind = InverseKind::unbiased);

}  // namespace vesselseg::prep
