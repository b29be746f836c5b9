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

#include "vesselseg/prep.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fft_plans.hpp"
#include "vesselseg/error.hpp"
#include "vesselseg/log.hpp"

namespace vesselseg::prep {

double anscombe_value(double x) {
  if (!(x >= 0)) throw DataError("anscombe transform needs non-negative intensities");
  return 2.0 * std::sqrt(x + 0.375);
}

double inverse_anscombe_value(double y, InverseKind kind) {
  if (kind == InverseKind::algebraic) {
    if (!(y >= 0)) throw DataError("algebraic inverse anscombe needs non-negative values");
    return 0.25 * y * y - 0.375;
  }
  if (!(y > 0)) return 0.0;
  const double s = std::sqrt(1.5);
  const double yi = 1.0 / y;
  const double x = 0.25 * y * y + 0.25 * s * yi - 1.375 * yi * yi + 0.625 * s * yi * yi * yi - 0.125;
  return std::max(x, 0.0);
}

Volume<float> anscombe(const Volume<float>& v) {
  Volume<float> out(v.dims());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(anscombe_value(v[i]));
  return out;
}

InverseKind parse_inverse_kind(const std::string& s) {
  if (s == "algebraic") return InverseKind::algebraic;
  if (s == "unbiased") return InverseKind::unbiased;
  throw ConfigError("unknown inverse anscombe kind '" + s + "'");
}

std::string inverse_kind_name(InverseKind k) { return k == InverseKind::algebraic ? "algebraic" : "unbiased"; }

Volume<float> inverse_anscombe(const Volume<float>& v, InverseKind kind) {
  Volume<float> out(v.dims());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(inverse_anscombe_value(v[i], kind));
  return out;
}

void NotchSpec::validate() const {
  for (const auto& n : notches) {
    if (!(n.fy >= -0.5 && n.fy < 0.5) || !(n.fx >= -0.5 && n.fx < 0.5))
      throw ConfigError("notch frequency outside [-0.5, 0.5)");
    if (!(n.radius > 0)) throw ConfigError("notch radius must be positive");
  }
}

NotchSpec parse_notch_spec(const std::string& s) {
  NotchSpec spec;
  std::stringstream all(s);
  std::string item;
  while (std::getline(all, item, ';')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    std::replace(item.begin(), item.end(), ',', ' ');
    std::istringstream is(item);
    Notch n;
    std::string extra;
    if (!(is >> n.fy >> n.fx >> n.radius) || (is >> extra)) throw ConfigError("bad notch '" + item + "', expected fy,fx,radius");
    spec.notches.push_back(n);
  }
  spec.validate();
  return spec;
}

std::string format_notch_spec(const NotchSpec& n) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < n.notches.size(); ++i) {
    if (i) os << ';';
    os << n.notches[i].fy << ',' << n.notches[i].fx << ',' << n.notches[i].radius;
  }
  return os.str();
}

namespace {

double wrap(double f) {
  f -= std::floor(f + 0.5);
  return f;
}

double bin_frequency(int k, int n) {
  double f = static_cast<double>(k) / n;
  if (f >= 0.5) f -= 1.0;
  return f;
}

}  // namespace

double notch_gain(const NotchSpec& spec, double fy, double fx) {
  double g = 1.0;
  for (const auto& n : spec.notches) {
    for (int sign : {1, -1}) {
      const double dy = wrap(fy - sign * n.fy);
      const double dx = wrap(fx - sign * n.fx);
      const double d2 = dy * dy + dx * dx;
      if (d2 >= 36.0 * n.radius * n.radius) continue;
      g *= 1.0 - std::exp(-d2 / (2.0 * n.radius * n.radius));
    }
  }
  return g;
}

Volume<float> notch_filter(const Volume<float>& v, const NotchSpec& spec) {
  spec.validate();
  const Extent3 d = v.dims();
  if (v.empty()) return v;
  const Extent3 plane{1, d.y, d.x};
  const int hx = d.x / 2 + 1;
  const std::size_t nr = plane.volume();
  const std::size_t nc = static_cast<std::size_t>(d.y) * hx;
  std::vector<double> gain(nc);
  for (int ky = 0; ky < d.y; ++ky)
    for (int kx = 0; kx < hx; ++kx)
      gain[static_cast<std::size_t>(ky) * hx + kx] = notch_gain(spec, bin_frequency(ky, d.y), bin_frequency(kx, d.x));

  const detail::PlanPair plans = detail::PlanCache::instance().get(plane);
  Volume<float> out(d);
  const double scale = 1.0 / static_cast<double>(nr);
#pragma omp parallel for schedule(static)
  for (int z = 0; z < d.z; ++z) {
    detail::RealBuffer r = detail::alloc_real(nr);
    detail::ComplexBuffer c = detail::alloc_complex(nc);
    const float* src = v.data() + z * nr;
    for (std::size_t i = 0; i < nr; ++i) r[i] = src[i];
    fftw_execute_dft_r2c(plans.forward, r.get(), c.get());
    for (std::size_t i = 0; i < nc; ++i) {
      c[i][0] *= gain[i];
      c[i][1] *= gain[i];
    }
    fftw_execute_dft_c2r(plans.backward, c.get(), r.get());
    float* dst = out.data() + z * nr;
    for (std::size_t i = 0; i < nr; ++i) dst[i] = static_cast<float>(r[i] * scale);
  }
  return out;
}

NormalizeMode parse_normalize_mode(const std::string& s) {
  if (s == "affine") return NormalizeMode::affine;
  if (s == "percentile") return NormalizeMode::percentile;
  throw ConfigError("unknown normalize mode '" + s + "'");
}

double percentile(std::vector<float> values, double pct) {
  if (values.empty()) throw DataError("percentile of an empty stack");
  if (!(pct >= 0 && pct <= 100)) throw ArgumentError("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double t = pos - static_cast<double>(lo);
  return values[lo] + t * (static_cast<double>(values[hi]) - values[lo]);
}

Normalized normalize(const Volume<float>& v, const NormalizeParams& p) {
  if (v.empty()) throw DataError("cannot normalize an empty stack");
  Normalized r;
  if (p.mode == NormalizeMode::percentile) {
    if (!(p.lo_pct < p.hi_pct)) throw ConfigError("percentile bounds must satisfy lo < hi");
    r.lo = percentile(v.values(), p.lo_pct);
    r.hi = percentile(v.values(), p.hi_pct);
  } else {
    const auto [mn, mx] = std::minmax_element(v.values().begin(), v.values().end());
    r.lo = *mn;
    r.hi = *mx;
  }
  r.voxels = Volume<float>(v.dims());
  if (!(r.hi > r.lo)) {
    r.constant = true;
    warn("constant stack, normalized to 0.5");
    std::fill(r.voxels.values().begin(), r.voxels.values().end(), 0.5f);
    return r;
  }
  const double s = 1.0 / (r.hi - r.lo);
  for (std::size_t i = 0; i < v.size(); ++i)
    r.voxels[i] = static_cast<float>(std::clamp((v[i] - r.lo) * s, 0.0, 1.0));
  return r;
}

Volume<float> denormalize(const Volume<float>& v, double lo, double hi) {
  Volume<float> out(v.dims());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(lo + v[i] * (hi - lo));
  return out;
}

namespace {

std::vector<double> gaussian_taps(double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> t(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += t[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& x : t) x /= sum;
  return t;
}

// axis 0 = z, 1 = y, 2 = x
Volume<float> smooth_axis(const Volume<float>& v, double sigma, int axis) {
  const Extent3 d = v.dims();
  const std::vector<double> taps = gaussian_taps(sigma);
  const int r = static_cast<int>(taps.size() / 2);
  const int n = axis == 0 ? d.z : axis == 1 ? d.y : d.x;
  Volume<float> out(d);
#pragma omp parallel for schedule(static)
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const int c = axis == 0 ? z : axis == 1 ? y : x;
        double acc = 0;
        for (int k = -r; k <= r; ++k) {
          const int s = reflect_index(c + k, n);
          acc += taps[k + r] * (axis == 0 ? v(s, y, x) : axis == 1 ? v(z, s, x) : v(z, y, s));
        }
        out(z, y, x) = static_cast<float>(acc);
      }
  return out;
}

}  // namespace

Volume<float> gaussian_smooth(const Volume<float>& v, double sigma_xy, double sigma_z) {
  if (sigma_xy < 0 || sigma_z < 0) throw ConfigError("smoothing sigma must be non-negative");
  Volume<float> out = v;
  if (sigma_xy > 0) {
    out = smooth_axis(out, sigma_xy, 2);
    out = smooth_axis(out, sigma_xy, 1);
  }
  if (sigma_z > 0) out = smooth_axis(out, sigma_z, 0);
  return out;
}

Denoiser gaussian_denoiser(double sigma_xy, double sigma_z) {
  if (sigma_xy < 0 || sigma_z < 0) throw ConfigError("smoothing sigma must be non-negative");
  return [sigma_xy, sigma_z](const Volume<float>& v) { return gaussian_smooth(v, sigma_xy, sigma_z); };
}

Volume<float> denoise_stabilized(const Volume<float>& v, const Denoiser& d, InverseKind kind) {
  Volume<float> s = anscombe(v);
  if (d) s = d(s);
  return inverse_anscombe(s, kind);
}

}  // namespace vesselseg::prep
