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
#include <optional>
#include <string>
#include <vector>

#include "vesselseg/netgraph.hpp"
#include "vesselseg/random.hpp"
#include "vesselseg/volume.hpp"

namespace vesselseg::trainer {

using netgraph::NetworkSpec;
using netgraph::ParamStore;

/// Step-wise exponential annealing, optionally restarted once at update
/// reset_at with its own base rate and period.
struct LrSchedule {
  double initial_lr = 0.01;
  double anneal_factor = 0.999;
  std::uint64_t anneal_every = 6;
  std::optional<std::uint64_t> reset_at;
  double reset_lr = 1e-4;
  std::uint64_t reset_every = 10;

  void validate() const;

  /// 0.01, x0.999 every 6 updates.
  static LrSchedule vd2d();
  /// 0.01, x0.999 every update until 15000, then 1e-4, x0.999 every 10th.
  static LrSchedule vd2d3d();
};

/// Learning rate for update index k (0-based).
double lr_at(const LrSchedule& s, std::uint64_t k);

struct TrainConfig {
  std::string stage = "stage1";
  std::uint64_t updates = 60000;
  Extent3 patch_out{1, 100, 100};
  double momentum = 0.9;
  LrSchedule lr = LrSchedule::vd2d();
  double dropout_p = 0.5;  // overrides the p of every dropout layer in the spec
  bool augment = true;
  bool rebalance = true;
  std::uint64_t seed = 0;
  int batch = 1;  // patches per update; gradients are averaged
  bool mirror_pad = false;  // pad stacks so every labelled voxel can be an output voxel
  netgraph::ConvAlgorithm conv = netgraph::ConvAlgorithm::direct;
  netgraph::InitScheme init = netgraph::InitScheme::relu_gain_uniform;  // fresh weights in train_recursive

  std::uint64_t log_every = 100;
  int monitor_patches = 8;  // fixed patches per split used for ERR/CLS logging
  std::string log_path;     // CSV; empty disables
  std::uint64_t checkpoint_every = 5000;
  std::string checkpoint_dir;  // empty disables

  void validate() const;

  static TrainConfig stage1();
  static TrainConfig stage2();
};

using WeightMap = Volume<float>;

/// Class weights 0.5 / f_c normalized to unit mean; single-class patches get
/// all ones.
WeightMap rebalance_weights(const LabelMask& labels);

/// One training example: input channels (image, optionally the recursive
/// map) aligned with their labels.
struct Patch {
  std::vector<Volume<float>> channels;
  LabelMask labels;
};

/// Element t in 0..7 of the dihedral group of the square: t % 4 quarter
/// turns counter-clockwise in the x-y plane, followed by a mirror along x
/// when t >= 4. Applied slice by slice and identically to every component.
/// Quarter turns require square x-y extents (ArgumentError otherwise).
Patch augment(const Patch& p, int t);
int dihedral_inverse(int t);

struct TrainItem {
  std::string id;
  std::vector<Volume<float>> channels;
  LabelMask labels;
  bool test = false;
};

struct SampledPatch {
  Patch patch;
  Extent3 label_origin;
};

/// Uniformly placed patch producing `out` output voxels. Without padding the
/// input patch lies inside the stack; with `padded` the channels have been
/// mirror padded by the receptive field and the label origin ranges over the
/// whole unpadded stack.
SampledPatch sample_patch(const std::vector<Volume<float>>& channels, const LabelMask& labels, const NetworkSpec& spec,
                          Extent3 out, Rng& rng, bool padded = false);

using Velocity = std::vector<volcore::KernelStack>;

Velocity zero_velocity(const ParamStore& params);

/// v <- momentum * v - lr * g; w <- w + v.
void sgd_step(ParamStore& params, const std::vector<volcore::KernelStack>& grads, Velocity& velocity, double lr,
              double momentum);

struct LogEntry {
  std::uint64_t update = 0;
  std::string split;  // "train" or "test"
  double err = 0.0;
  double cls = 0.0;
};

struct TrainResult {
  ParamStore params;
  std::vector<LogEntry> log;
  std::vector<double> patch_err;  // per-update training ERR on the sampled patches
};

/// Runs updates from params0.update up to cfg.updates.
TrainResult train_stage(const NetworkSpec& spec, const ParamStore& params0, const std::vector<TrainItem>& data,
                        const TrainConfig& cfg);

struct RecursiveResult {
  ParamStore vd2d;
  ParamStore vd2d3d;
  std::vector<ProbMap> recursive_maps;  // aligned with the dataset items
  std::vector<LogEntry> stage1_log;
  std::vector<LogEntry> stage2_log;
  ParamStore stage2_init;
};

/// VD2D training, dense VD2D inference over every item, weight transfer,
/// then training of the chosen VD2D3D-family preset on (image, map) pairs.
/// Items must carry exactly one channel (the image).
RecursiveResult train_recursive(const std::vector<TrainItem>& dataset, const std::string& stage2_preset,
                                double width_scale, const TrainConfig& stage1, const TrainConfig& stage2);

void write_log_csv(const std::string& path, const std::vector<LogEntry>& log, bool append);

}  // namespace vesselseg::trainer
