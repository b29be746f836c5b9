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

#include "vesselseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "vesselseg/error.hpp"

namespace vesselseg::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_same(const Extent3& a, const Extent3& b) {
  if (!(a == b)) throw ShapeError("metric inputs differ in shape: " + to_string(a) + " vs " + to_string(b));
}

/// Lower envelope of parabolas w (q - p)^2 + f(p) over the finite sites.
void edt_line(double* f, int n, std::ptrdiff_t stride, double w, std::vector<double>& buf, std::vector<int>& v,
              std::vector<double>& z) {
  buf.resize(n);
  v.resize(n);
  z.resize(n + 1);
  for (int i = 0; i < n; ++i) buf[i] = f[i * stride];
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (buf[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    for (;;) {
      const int p = v[k];
      s = ((buf[q] + w * q * q) - (buf[p] + w * p * p)) / (2.0 * w * (q - p));
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) return;  // no sites: stays infinite
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double d = q - v[k];
    f[q * stride] = w * d * d + buf[v[k]];
  }
}

struct Weights {
  double z = 1, y = 1, x = 1;
};

Weights weights(const std::optional<VoxelSize>& s) {
  if (!s) return {};
  if (!(s->x > 0 && s->y > 0 && s->z > 0)) throw ArgumentError("voxel spacing must be positive");
  return {s->z * s->z, s->y * s->y, s->x * s->x};
}

std::vector<std::size_t> points(const LabelMask& m) {
  std::vector<std::size_t> p;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) p.push_back(i);
  return p;
}

}  // namespace

Volume<double> squared_distance_transform(const LabelMask& mask, const std::optional<VoxelSize>& spacing) {
  const Weights w = weights(spacing);
  const Extent3 d = mask.dims();
  Volume<double> f(d);
  for (std::size_t i = 0; i < mask.size(); ++i) f[i] = mask[i] ? 0.0 : kInf;
  std::vector<double> buf, z;
  std::vector<int> v;
  for (int zz = 0; zz < d.z; ++zz)
    for (int y = 0; y < d.y; ++y) edt_line(&f(zz, y, 0), d.x, 1, w.x, buf, v, z);
  for (int zz = 0; zz < d.z; ++zz)
    for (int x = 0; x < d.x; ++x) edt_line(&f(zz, 0, x), d.y, d.x, w.y, buf, v, z);
  const std::ptrdiff_t plane = static_cast<std::ptrdiff_t>(d.y) * d.x;
  for (int y = 0; y < d.y; ++y)
    for (int x = 0; x < d.x; ++x) edt_line(&f(0, y, x), d.z, plane, w.z, buf, v, z);
  return f;
}

LabelMask surface(const LabelMask& m) {
  const Extent3 d = m.dims();
  LabelMask s(d, 0);
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        if (!m(z, y, x)) continue;
        const bool edge = z == 0 || z == d.z - 1 || y == 0 || y == d.y - 1 || x == 0 || x == d.x - 1;
        s(z, y, x) = edge || !m(z - 1, y, x) || !m(z + 1, y, x) || !m(z, y - 1, x) || !m(z, y + 1, x) ||
                             !m(z, y, x - 1) || !m(z, y, x + 1)
                         ? 1
                         : 0;
      }
  return s;
}

std::vector<double> directed_distances(const LabelMask& from, const LabelMask& to, const DistanceOptions& o) {
  check_same(from.dims(), to.dims());
  const LabelMask& src = o.surface ? surface(from) : from;
  const LabelMask tgt = o.surface ? surface(to) : to;
  const auto pa = points(src);
  if (pa.empty()) throw MetricUndefined("empty mask");
  if (points(tgt).empty()) throw MetricUndefined("empty mask");
  const Volume<double> dt = squared_distance_transform(tgt, o.spacing);
  std::vector<double> out;
  out.reserve(pa.size());
  for (std::size_t i : pa) out.push_back(std::sqrt(dt[i]));
  return out;
}

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double average_hausdorff(const LabelMask& a, const LabelMask& b, const DistanceOptions& o) {
  const double ab = mean_of(directed_distances(a, b, o));
  const double ba = mean_of(directed_distances(b, a, o));
  return o.avd == AvdMode::max ? std::max(ab, ba) : 0.5 * (ab + ba);
}

double hausdorff_quantile(const LabelMask& a, const LabelMask& b, double q, const DistanceOptions& o) {
  if (!(q > 0.0 && q <= 1.0)) throw ArgumentError("Hausdorff quantile must lie in (0, 1]");
  std::vector<double> all = directed_distances(a, b, o);
  const std::vector<double> ba = directed_distances(b, a, o);
  all.insert(all.end(), ba.begin(), ba.end());
  std::sort(all.begin(), all.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(all.size())));
  return all[std::clamp<std::size_t>(rank, 1, all.size()) - 1];
}

namespace {

struct Table2x2 {
  double n[2][2] = {{0, 0}, {0, 0}};
  double total = 0;
};

Table2x2 contingency(const LabelMask& a, const LabelMask& b) {
  check_same(a.dims(), b.dims());
  std::size_t c[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < a.size(); ++i) ++c[a[i] ? 1 : 0][b[i] ? 1 : 0];
  Table2x2 t;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) t.n[i][j] = static_cast<double>(c[i][j]);
  t.total = static_cast<double>(a.size());
  return t;
}

long double comb2(double n) { return static_cast<long double>(n) * (static_cast<long double>(n) - 1) / 2; }

}  // namespace

double adjusted_rand(const LabelMask& a, const LabelMask& b) {
  const Table2x2 t = contingency(a, b);
  if (t.total < 2) throw MetricUndefined("adjusted Rand index needs at least two voxels");
  long double index = 0, ra = 0, cb = 0;
  for (int i = 0; i < 2; ++i) {
    ra += comb2(t.n[i][0] + t.n[i][1]);
    cb += comb2(t.n[0][i] + t.n[1][i]);
    for (int j = 0; j < 2; ++j) index += comb2(t.n[i][j]);
  }
  const long double expected = ra * cb / comb2(t.total);
  const long double maximum = 0.5L * (ra + cb);
  if (maximum == expected) return 1.0;  // both partitions trivial, hence identical
  return static_cast<double>((index - expected) / (maximum - expected));
}

double mutual_information(const LabelMask& a, const LabelMask& b) {
  const Table2x2 t = contingency(a, b);
  if (t.total == 0) throw MetricUndefined("mutual information of empty volumes");
  double mi = 0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      if (t.n[i][j] == 0) continue;
      const double pij = t.n[i][j] / t.total;
      const double pi = (t.n[i][0] + t.n[i][1]) / t.total;
      const double pj = (t.n[0][j] + t.n[1][j]) / t.total;
      mi += pij * std::log2(pij / (pi * pj));
    }
  return std::max(mi, 0.0);
}

double auc(const ProbMap& prob, const LabelMask& truth) {
  check_same(prob.dims(), truth.dims());
  std::vector<std::pair<float, std::uint8_t>> v(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) {
    if (std::isnan(prob[i])) throw DataError("probability map contains NaN");
    v[i] = {prob[i], truth[i] ? std::uint8_t{1} : std::uint8_t{0}};
  }
  std::sort(v.begin(), v.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
  double rank_sum = 0, pos = 0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    double p = 0;
    while (j < v.size() && v[j].first == v[i].first) p += v[j++].second;
    // Mid-rank (1-based) of the tied block.
    rank_sum += p * (static_cast<double>(i + 1 + j) / 2.0);
    pos += p;
    i = j;
  }
  const double neg = static_cast<double>(v.size()) - pos;
  if (pos == 0 || neg == 0) throw MetricUndefined("AUC needs both classes in the truth mask");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

double mahalanobis(const LabelMask& a, const LabelMask& b, const std::optional<VoxelSize>& spacing) {
  check_same(a.dims(), b.dims());
  const VoxelSize s = spacing.value_or(VoxelSize{});
  const Extent3 d = a.dims();
  struct Moments {
    double n = 0;
    double mean[3] = {0, 0, 0};
    double cov[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};  // population
  };
  auto moments = [&](const LabelMask& m) {
    Moments r;
    auto coord = [&](std::size_t i, double c[3]) {
      const std::size_t plane = static_cast<std::size_t>(d.y) * d.x;
      c[0] = static_cast<double>(i / plane) * s.z;
      c[1] = static_cast<double>((i / d.x) % d.y) * s.y;
      c[2] = static_cast<double>(i % d.x) * s.x;
    };
    const auto p = points(m);
    r.n = static_cast<double>(p.size());
    if (p.size() < 2) throw MetricUndefined("Mahalanobis distance needs at least two voxels per mask");
    double c[3];
    for (std::size_t i : p) {
      coord(i, c);
      for (int k = 0; k < 3; ++k) r.mean[k] += c[k];
    }
    for (double& m : r.mean) m /= r.n;
    for (std::size_t i : p) {
      coord(i, c);
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l) r.cov[k][l] += (c[k] - r.mean[k]) * (c[l] - r.mean[l]);
    }
    for (auto& row : r.cov)
      for (double& x : row) x /= r.n;
    return r;
  };
  const Moments ma = moments(a), mb = moments(b);
  double S[3][3], delta[3];
  double trace = 0;
  for (int k = 0; k < 3; ++k) {
    delta[k] = ma.mean[k] - mb.mean[k];
    for (int l = 0; l < 3; ++l) S[k][l] = (ma.n * ma.cov[k][l] + mb.n * mb.cov[k][l]) / (ma.n + mb.n);
    trace += S[k][k];
  }
  // Cholesky S = L L^T.
  double L[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  const double tol = 1e-12 * std::max(trace, 1e-300);
  for (int k = 0; k < 3; ++k) {
    double diag = S[k][k];
    for (int m = 0; m < k; ++m) diag -= L[k][m] * L[k][m];
    if (!(diag > tol)) throw MetricUndefined("singular common covariance");
    L[k][k] = std::sqrt(diag);
    for (int r = k + 1; r < 3; ++r) {
      double v = S[r][k];
      for (int m = 0; m < k; ++m) v -= L[r][m] * L[k][m];
      L[r][k] = v / L[k][k];
    }
  }
  double y[3], q = 0;
  for (int k = 0; k < 3; ++k) {
    double v = delta[k];
    for (int m = 0; m < k; ++m) v -= L[k][m] * y[m];
    y[k] = v / L[k][k];
    q += y[k] * y[k];
  }
  return std::sqrt(q);
}

StackMetrics evaluate(const std::string& id, const ProbMap& prob, const LabelMask& predicted, const LabelMask& truth,
                      const EvaluateOptions& o) {
  check_same(prob.dims(), truth.dims());
  check_same(predicted.dims(), truth.dims());
  auto guarded = [](auto&& fn) {
    try {
      return fn();
    } catch (const MetricUndefined&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  StackMetrics m;
  m.id = id;
  m.auc = guarded([&] { return auc(prob, truth); });
  m.adjrind = guarded([&] { return adjusted_rand(predicted, truth); });
  m.mutinf = guarded([&] { return mutual_information(predicted, truth); });
  m.hdrfdst = guarded([&] { return hausdorff_quantile(predicted, truth, o.hd_quantile, o.distance); });
  m.avgdist = guarded([&] { return average_hausdorff(predicted, truth, o.distance); });
  m.mahlnbs = guarded([&] { return mahalanobis(predicted, truth, o.distance.spacing); });
  return m;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  double sum = 0;
  for (double v : values)
    if (!std::isnan(v)) {
      sum += v;
      ++s.count;
    }
  if (s.count == 0) {
    s.mean = s.sd = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.mean = sum / s.count;
  if (s.count < 2) {
    s.sd = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  double ss = 0;
  for (double v : values)
    if (!std::isnan(v)) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / (s.count - 1));
  return s;
}

const std::vector<std::string>& MetricsReport::metric_names() {
  static const std::vector<std::string> names{"AUC", "ADJRIND", "MUTINF", "HDRFDST", "AVGDIST", "MAHLNBS"};
  return names;
}

std::vector<double> MetricsReport::column(const std::string& metric) const {
  std::vector<double> out;
  for (const auto& s : stacks) {
    if (metric == "AUC") out.push_back(s.auc);
    else if (metric == "ADJRIND") out.push_back(s.adjrind);
    else if (metric == "MUTINF") out.push_back(s.mutinf);
    else if (metric == "HDRFDST") out.push_back(s.hdrfdst);
    else if (metric == "AVGDIST") out.push_back(s.avgdist);
    else if (metric == "MAHLNBS") out.push_back(s.mahlnbs);
    else throw ArgumentError("unknown metric '" + metric + "'");
  }
  return out;
}

Summary MetricsReport::summary(const std::string& metric) const { return summarize(column(metric)); }

namespace {

std::string header_name(const std::string& metric, const EvaluateOptions& o) {
  if (metric == "AVGDIST" && o.distance.avd == AvdMode::mean) return "AVGDIST_MEANDIR";
  return metric;
}

std::string fmt(double v, int precision) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

}  // namespace

void MetricsReport::write_csv(std::ostream& os) const {
  os << "id";
  for (const auto& m : metric_names()) os << ',' << header_name(m, options);
  os << '\n';
  for (std::size_t i = 0; i < stacks.size(); ++i) {
    os << stacks[i].id;
    for (const auto& m : metric_names()) os << ',' << fmt(column(m)[i], 6);
    os << '\n';
  }
  for (const char* row : {"mean", "sd"}) {
    os << row;
    for (const auto& m : metric_names()) {
      const Summary s = summary(m);
      os << ',' << fmt(row[0] == 'm' ? s.mean : s.sd, 6);
    }
    os << '\n';
  }
}

void MetricsReport::write_table(std::ostream& os) const {
  std::size_t w0 = 5;
  for (const auto& s : stacks) w0 = std::max(w0, s.id.size());
  auto cell = [](const std::string& s, std::size_t w) { return std::string(w > s.size() ? w - s.size() : 0, ' ') + s; };
  os << cell("stack", w0);
  for (const auto& m : metric_names()) os << "  " << cell(header_name(m, options), 16);
  os << '\n';
  for (std::size_t i = 0; i < stacks.size(); ++i) {
    os << cell(stacks[i].id, w0);
    for (const auto& m : metric_names()) os << "  " << cell(fmt(column(m)[i], 2), 16);
    os << '\n';
  }
  os << cell("mean", w0);
  for (const auto& m : metric_names()) {
    const Summary s = summary(m);
    os << "  " << cell(fmt(s.mean, 2) + " (" + fmt(s.sd, 2) + ")", 16);
  }
  os << "\nmean (sample SD); HDRFDST at quantile " << fmt(options.hd_quantile, 2) << "; distances in "
     << (options.distance.spacing ? "physical units" : "voxels")
     << (options.distance.surface ? ", surface voxels" : "") << '\n';
}

}  // namespace vesselseg::metrics
