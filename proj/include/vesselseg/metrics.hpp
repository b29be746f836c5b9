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

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vesselseg/volume.hpp"

namespace vesselseg::metrics {

enum class AvdMode { max, mean };

struct DistanceOptions {
  std::optional<VoxelSize> spacing;  // voxel units when absent
  bool surface = false;              // use boundary voxels only
  AvdMode avd = AvdMode::max;
};

/// Squared distance from every voxel to the nearest set voxel of `mask`
/// (exact separable transform). Infinite when the mask is empty.
Volume<double> squared_distance_transform(const LabelMask& mask, const std::optional<VoxelSize>& spacing = {});

/// Foreground voxels with a face neighbour that is background or outside
/// the volume.
LabelMask surface(const LabelMask& mask);

/// Nearest-neighbour distances from each point of `from` to `to`, in
/// linear-index order of `from`.
std::vector<double> directed_distances(const LabelMask& from, const LabelMask& to, const DistanceOptions& o = {});

double average_hausdorff(const LabelMask& a, const LabelMask& b, const DistanceOptions& o = {});

/// Nearest-rank quantile of the pooled directed distances; q = 1 is the
/// classical Hausdorff distance.
double hausdorff_quantile(const LabelMask& a, const LabelMask& b, double q = 0.95, const DistanceOptions& o = {});

double adjusted_rand(const LabelMask& a, const LabelMask& b);

/// Bits.
double mutual_information(const LabelMask& a, const LabelMask& b);

/// Rank statistic; ties count one half.
double auc(const ProbMap& prob, const LabelMask& truth);

/// Distance between voxel-coordinate means under the size-weighted pooled
/// population covariance.
double mahalanobis(const LabelMask& a, const LabelMask& b, const std::optional<VoxelSize>& spacing = {});

struct StackMetrics {
  std::string id;
  double auc = 0;
  double adjrind = 0;
  double mutinf = 0;
  double hdrfdst = 0;
  double avgdist = 0;
  double mahlnbs = 0;
};

struct EvaluateOptions {
  DistanceOptions distance;
  double hd_quantile = 0.95;
};

/// Undefined metrics are reported as NaN.
StackMetrics evaluate(const std::string& id, const ProbMap& prob, const LabelMask& predicted, const LabelMask& truth,
                      const EvaluateOptions& o = {});

struct Summary {
  double mean = 0;
  double sd = 0;  // sample SD (n - 1); NaN below two values
  int count = 0;
};

/// NaN entries are skipped.
Summary summarize(const std::vector<double>& values);

struct MetricsReport {
  std::vector<StackMetrics> stacks;
  EvaluateOptions options;

  static const std::vector<std::string>& metric_names();
  std::vector<double> column(const std::string& metric) const;
  Summary summary(const std::string& metric) const;

  void write_csv(std::ostream& os) const;
  void write_table(std::ostream& os) const;
};

}  // namespace vesselseg::metrics
