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

#include "vesselseg/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <memory>
#include <numbers>

#include "vesselseg/error.hpp"

namespace vesselseg::postproc {

LabelMask threshold(const ProbMap& prob, double t) {
  if (!(t > 0.0 && t < 1.0)) throw ArgumentError("threshold must lie in (0, 1)");
  LabelMask out(prob.dims());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] >= t ? 1 : 0;
  return out;
}

void CrfParams::validate() const {
  if (!(theta_s > 0 && theta_a > 0 && theta_i > 0)) throw ConfigError("CRF sigmas must be positive");
  if (!(w_s >= 0 && w_a >= 0)) throw ConfigError("CRF kernel weights must be non-negative");
  if (!(unary_weight > 0)) throw ConfigError("CRF unary weight must be positive");
  if (iterations < 1) throw ConfigError("CRF iterations must be >= 1");
  if (!(grid_spacing > 0 && grid_spacing < 1.5)) throw ConfigError("CRF grid spacing must lie in (0, 1.5)");
}

CrfMode parse_crf_mode(const std::string& s) {
  if (s == "exact") return CrfMode::exact;
  if (s == "lattice") return CrfMode::lattice;
  throw ConfigError("unknown CRF mode '" + s + "'");
}

std::string crf_mode_name(CrfMode m) { return m == CrfMode::exact ? "exact" : "lattice"; }

// ---------------------------------------------------------------------------
// Gaussian grid

GaussianGrid::GaussianGrid(const std::vector<double>& f, int d, std::size_t n, double h) : d_(d), n_(n) {
  if (d < 1 || d > 3) throw ArgumentError("grid feature dimension must be 1..3");
  if (!(h > 0 && h < 1.5)) throw ArgumentError("grid spacing must lie in (0, 1.5)");
  if (f.size() != n * static_cast<std::size_t>(d)) throw ShapeError("grid feature buffer size mismatch");
  const double sb = std::sqrt(1.0 - h * h / 3.0) / h;  // blur sigma in cells
  radius_ = static_cast<int>(std::ceil(4.0 * sb));
  taps_.resize(2 * radius_ + 1);
  double tap_sum = 0;
  for (int k = -radius_; k <= radius_; ++k) tap_sum += taps_[k + radius_] = std::exp(-0.5 * k * k / (sb * sb));
  gain_ = std::pow(std::sqrt(2.0 * std::numbers::pi) / (h * tap_sum), d);

  std::vector<double> lo(d, std::numeric_limits<double>::max()), hi(d, std::numeric_limits<double>::lowest());
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) {
      lo[k] = std::min(lo[k], f[i * d + k]);
      hi[k] = std::max(hi[k], f[i * d + k]);
    }
  dim_.resize(d);
  stride_.resize(d);
  for (int k = 0; k < d; ++k) dim_[k] = n ? static_cast<int>(std::floor((hi[k] - lo[k]) / h)) + 2 + 2 * radius_ : 1;
  for (int k = d - 1; k >= 0; --k) {
    stride_[k] = cells_;
    cells_ *= static_cast<std::size_t>(dim_[k]);
  }
  base_.resize(n);
  frac_.resize(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t idx = 0;
    for (int k = 0; k < d; ++k) {
      const double c = (f[i * d + k] - lo[k]) / h + radius_;
      const int b = std::min(static_cast<int>(std::floor(c)), dim_[k] - 2);
      frac_[i * d + k] = c - b;
      idx += static_cast<std::size_t>(b) * stride_[k];
    }
    base_[i] = idx;
  }
}

std::vector<double> GaussianGrid::filter(const std::vector<double>& values, int vd) const {
  if (values.size() != n_ * static_cast<std::size_t>(vd)) throw ShapeError("grid value buffer size mismatch");
  const int corners = 1 << d_;
  auto corner = [&](std::size_t i, int m, std::size_t& idx, double& w) {
    idx = base_[i];
    w = 1.0;
    for (int k = 0; k < d_; ++k) {
      const double fr = frac_[i * d_ + k];
      if ((m >> k) & 1) {
        w *= fr;
        idx += stride_[k];
      } else {
        w *= 1.0 - fr;
      }
    }
  };
  std::vector<double> g(cells_ * vd, 0.0), t(cells_ * vd);
  for (std::size_t i = 0; i < n_; ++i)
    for (int m = 0; m < corners; ++m) {
      std::size_t idx;
      double w;
      corner(i, m, idx, w);
      for (int c = 0; c < vd; ++c) g[idx * vd + c] += w * values[i * vd + c];
    }
  for (int ax = 0; ax < d_; ++ax) {
    const std::size_t st = stride_[ax];
    const int len = dim_[ax];
    for (std::size_t idx = 0; idx < cells_; ++idx) {
      const int pos = static_cast<int>((idx / st) % len);
      const int k0 = std::max(-radius_, -pos), k1 = std::min(radius_, len - 1 - pos);
      for (int c = 0; c < vd; ++c) {
        double acc = 0;
        for (int k = k0; k <= k1; ++k)
          acc += taps_[k + radius_] * g[(idx + static_cast<std::ptrdiff_t>(k) * static_cast<std::ptrdiff_t>(st)) * vd + c];
        t[idx * vd + c] = acc;
      }
    }
    std::swap(g, t);
  }
  std::vector<double> out(n_ * vd, 0.0);
  for (std::size_t i = 0; i < n_; ++i)
    for (int m = 0; m < corners; ++m) {
      std::size_t idx;
      double w;
      corner(i, m, idx, w);
      for (int c = 0; c < vd; ++c) out[i * vd + c] += gain_ * w * g[idx * vd + c];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Mean field

namespace {

constexpr double kProbFloor = 1e-7;

struct Slice {
  int ny = 0, nx = 0;
  std::size_t n() const { return static_cast<std::size_t>(ny) * nx; }
};

std::vector<double> gaussian_table(int n, double theta) {
  std::vector<double> t(n);
  for (int i = 0; i < n; ++i) t[i] = std::exp(-0.5 * i * i / (theta * theta));
  return t;
}

/// Dense kernel matrix including the diagonal.
std::vector<double> kernel_matrix(const Volume<float>& guide, const CrfParams& p, Slice s) {
  const std::size_t n = s.n();
  const int span = std::max(s.ny, s.nx);
  const auto ts = gaussian_table(span, p.theta_s);
  const auto ta = gaussian_table(span, p.theta_a);
  const double inv_i = 1.0 / (2.0 * p.theta_i * p.theta_i);
  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const int yi = static_cast<int>(i / s.nx), xi = static_cast<int>(i % s.nx);
    const double gi = guide[i];
    for (std::size_t j = 0; j < n; ++j) {
      const int dy = std::abs(yi - static_cast<int>(j / s.nx)), dx = std::abs(xi - static_cast<int>(j % s.nx));
      const double di = gi - guide[j];
      k[i * n + j] = p.w_s * ts[dy] * ts[dx] + p.w_a * ta[dy] * ta[dx] * std::exp(-di * di * inv_i);
    }
  }
  return k;
}

/// Exact separable Gaussian sum over the slice, truncated at 4 sigma.
std::vector<double> spatial_filter(const std::vector<double>& q, Slice s, double theta) {
  const int r = static_cast<int>(std::ceil(4.0 * theta));
  const auto t = gaussian_table(r + 1, theta);
  std::vector<double> tmp(s.n(), 0.0), out(s.n(), 0.0);
  for (int y = 0; y < s.ny; ++y)
    for (int x = 0; x < s.nx; ++x) {
      double acc = 0;
      for (int k = std::max(0, x - r); k <= std::min(s.nx - 1, x + r); ++k) acc += t[std::abs(k - x)] * q[y * s.nx + k];
      tmp[y * s.nx + x] = acc;
    }
  for (int y = 0; y < s.ny; ++y)
    for (int x = 0; x < s.nx; ++x) {
      double acc = 0;
      for (int k = std::max(0, y - r); k <= std::min(s.ny - 1, y + r); ++k) acc += t[std::abs(k - y)] * tmp[k * s.nx + x];
      out[y * s.nx + x] = acc;
    }
  return out;
}

double free_energy(const std::vector<double>& q1, const std::vector<double>& u0, const std::vector<double>& u1,
                   const std::vector<double>& k, std::size_t n) {
  double e = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 1.0 - q1[i], b = q1[i];
    e += a * u0[i] + b * u1[i];
    if (a > 0) e += a * std::log(a);
    if (b > 0) e += b * std::log(b);
    double pair = 0;
    const double* row = &k[i * n];
    for (std::size_t j = 0; j < n; ++j) pair += row[j] * (a * q1[j] + b * (1.0 - q1[j]));
    e += 0.5 * pair;
  }
  return e;
}

}  // namespace

MeanField mean_field_2d(const ProbMap& prob, const Volume<float>& guide, const CrfParams& p, CrfMode mode,
                        bool track_energy) {
  p.validate();
  if (!(prob.dims() == guide.dims())) throw ShapeError("probability and guide slices differ in shape");
  if (prob.dims().z != 1) throw ShapeError("dense CRF works on single slices");
  const Slice s{prob.dims().y, prob.dims().x};
  const std::size_t n = s.n();
  if (mode == CrfMode::exact && n > kExactCrfMaxPixels)
    throw ArgumentError("exact CRF mode is limited to " + std::to_string(kExactCrfMaxPixels) + " pixels per slice");
  if (track_energy && mode != CrfMode::exact) throw ArgumentError("free energy is tracked in exact mode only");

  std::vector<double> u0(n), u1(n), q(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = prob[i];
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("probabilities must lie in [0, 1]");
    const double pv = std::clamp(v, kProbFloor, 1.0 - kProbFloor);
    u1[i] = -p.unary_weight * std::log(pv);
    u0[i] = -p.unary_weight * std::log(1.0 - pv);
  }
  auto update = [&](const std::vector<double>& m0, const std::vector<double>& m1) {
    for (std::size_t i = 0; i < n; ++i) {
      // Q_l proportional to exp(-u_l + m_l), written as a logistic.
      const double a = (u1[i] - m1[i]) - (u0[i] - m0[i]);
      q[i] = 1.0 / (1.0 + std::exp(a));
    }
  };
  const std::vector<double> zeros(n, 0.0);
  update(zeros, zeros);

  MeanField r;
  std::vector<double> k;
  std::unique_ptr<GaussianGrid> lattice;
  if (mode == CrfMode::exact) {
    k = kernel_matrix(guide, p, s);
  } else if (p.w_a > 0) {
    std::vector<double> f(n * 3);
    for (std::size_t i = 0; i < n; ++i) {
      f[i * 3 + 0] = static_cast<double>(i % s.nx) / p.theta_a;
      f[i * 3 + 1] = static_cast<double>(i / s.nx) / p.theta_a;
      f[i * 3 + 2] = guide[i] / p.theta_i;
    }
    lattice = std::make_unique<GaussianGrid>(f, 3, n, p.grid_spacing);
  }
  if (track_energy) r.energy.push_back(free_energy(q, u0, u1, k, n));

  std::vector<double> m0(n), m1(n), q2(2 * n);
  for (int it = 0; it < p.iterations; ++it) {
    if (mode == CrfMode::exact) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = &k[i * n];
        double a = 0, tot = 0;
        for (std::size_t j = 0; j < n; ++j) {
          a += row[j] * q[j];
          tot += row[j];
        }
        m1[i] = a;
        m0[i] = tot - a;
      }
    } else {
      std::fill(m0.begin(), m0.end(), 0.0);
      std::fill(m1.begin(), m1.end(), 0.0);
      if (p.w_s > 0) {
        std::vector<double> q0(n);
        for (std::size_t i = 0; i < n; ++i) q0[i] = 1.0 - q[i];
        const auto s1 = spatial_filter(q, s, p.theta_s), s0 = spatial_filter(q0, s, p.theta_s);
        for (std::size_t i = 0; i < n; ++i) {
          m0[i] += p.w_s * s0[i];
          m1[i] += p.w_s * s1[i];
        }
      }
      if (lattice) {
        for (std::size_t i = 0; i < n; ++i) {
          q2[2 * i] = 1.0 - q[i];
          q2[2 * i + 1] = q[i];
        }
        const auto a = lattice->filter(q2, 2);
        for (std::size_t i = 0; i < n; ++i) {
          m0[i] += p.w_a * a[2 * i];
          m1[i] += p.w_a * a[2 * i + 1];
        }
      }
    }
    update(m0, m1);
    if (track_energy) r.energy.push_back(free_energy(q, u0, u1, k, n));
  }
  r.vessel = Volume<float>(prob.dims());
  for (std::size_t i = 0; i < n; ++i) r.vessel[i] = static_cast<float>(q[i]);
  return r;
}

LabelMask dense_crf_2d(const ProbMap& prob, const Volume<float>& guide, const CrfParams& p, CrfMode mode) {
  const MeanField mf = mean_field_2d(prob, guide, p, mode);
  LabelMask out(prob.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mf.vessel[i] >= 0.5f ? 1 : 0;
  return out;
}

LabelMask apply_stack(const ProbMap& prob, const Volume<float>& guide, const CrfParams& p, CrfMode mode) {
  p.validate();
  if (!(prob.dims() == guide.dims())) throw ShapeError("probability map and guide stack differ in shape");
  const int nz = prob.dims().z;
  LabelMask out(prob.dims());
  std::vector<std::exception_ptr> errors(nz);
#pragma omp parallel for schedule(dynamic)
  for (int z = 0; z < nz; ++z) {
    try {
      out.set_slice(z, dense_crf_2d(prob.slice(z), guide.slice(z), p, mode));
    } catch (...) {
      errors[z] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace vesselseg::postproc
