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
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vesselseg/metrics.hpp"
#include "vesselseg/postproc.hpp"
#include "vesselseg/prep.hpp"
#include "vesselseg/stackio.hpp"
#include "vesselseg/trainer.hpp"

namespace vesselseg::pipeline {

/// deterministic: direct convolution, fixed seed, results independent of the
/// thread count. fast: FFT convolution.
enum class EngineMode { deterministic, fast };

EngineMode parse_engine_mode(const std::string& s);
std::string engine_mode_name(EngineMode m);

struct PrepConfig {
  prep::NormalizeParams normalize;
  bool denoise = true;
  double sigma_xy = 1.0;
  double sigma_z = 0.0;
  prep::InverseKind inverse = prep::InverseKind::unbiased;
  std::map<std::string, prep::NotchSpec> notches;  // by stack id
};

struct PipelineConfig {
  std::filesystem::path manifest;
  std::string preset = "VD2D3D";
  double width_scale = 1.0;
  trainer::TrainConfig stage1 = trainer::TrainConfig::stage1();
  trainer::TrainConfig stage2 = trainer::TrainConfig::stage2();
  PrepConfig prep;
  postproc::CrfParams crf;
  postproc::CrfMode crf_mode = postproc::CrfMode::lattice;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  EngineMode engine = EngineMode::deterministic;
  int threads = 0;  // 0 leaves the OpenMP default
  std::filesystem::path out = "out";
  metrics::EvaluateOptions evaluate;
  bool use_voxel_size = true;  // distances in micrometres from the manifest

  void validate() const;
  /// Stage configs with seeds, convolution algorithm and output paths filled
  /// in from the top-level fields.
  trainer::TrainConfig resolved_stage(int stage) const;
};

/// JSON document; every key is optional and unknown keys are rejected.
/// Relative paths resolve against `base`.
PipelineConfig parse_config(const std::string& json_text, const std::filesystem::path& base);
PipelineConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const PipelineConfig& c);

/// Applies a dotted-key override ("stage1.updates=2000", "crf.w_a=5").
void apply_override(PipelineConfig& c, const std::string& assignment);

/// Exclusive lock on an output directory, released on destruction.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path file_;
};

struct Layout {
  std::filesystem::path root;
  std::filesystem::path prep_image(const std::string& id) const;
  std::filesystem::path prep_sidecar(const std::string& id) const;
  std::filesystem::path train_dir() const;
  std::filesystem::path train_log(int stage) const;
  std::filesystem::path probability(const std::string& id) const;
  std::filesystem::path mask(const std::string& id, const std::string& method) const;
  std::filesystem::path metrics_csv(const std::string& method) const;
  std::filesystem::path metrics_table(const std::string& method) const;
  std::filesystem::path report_dir() const;
};

Layout layout(const PipelineConfig& c);

/// normalize, anscombe, denoise, inverse anscombe, optional notch filter.
struct PrepResult {
  Volume<float> voxels;
  prep::Normalized normalized;  // voxels field left empty
};
PrepResult preprocess_stack(const Volume<float>& raw, const PrepConfig& p, const prep::NotchSpec& notch);

struct CommandSummary {
  std::vector<std::string> processed;
  std::vector<std::string> failed;  // "id: reason"
};

/// Each command throws the first failure's error class after processing
/// every stack it can.
CommandSummary cmd_preprocess(const PipelineConfig& c);
CommandSummary cmd_train(const PipelineConfig& c);
/// `stacks` empty means every manifest entry; a stack can be a manifest id
/// or a TIFF path. The checkpoint defaults to the final one of the
/// configured preset.
CommandSummary cmd_infer(const PipelineConfig& c, const std::vector<std::string>& stacks,
                         const std::optional<std::filesystem::path>& checkpoint = {});
/// Scores threshold and CRF masks of the test stacks (every stack with
/// outputs when `all`).
CommandSummary cmd_evaluate(const PipelineConfig& c, bool all = false);
/// Summary tables from the evaluate CSVs plus best/worst slice overlays.
CommandSummary cmd_report(const PipelineConfig& c);

struct SynthOptions {
  int stacks = 4;
  int test_stacks = 1;
  Extent3 dims{8, 64, 64};
  std::uint64_t seed = 0;
};
/// Synthetic tube stacks with labels and a manifest under `dir`.
std::filesystem::path cmd_synth(const std::filesystem::path& dir, const SynthOptions& o);

/// AVD per z-slice, NaN where a slice is empty in either mask.
std::vector<double> slice_avd(const LabelMask& a, const LabelMask& b, const metrics::DistanceOptions& o);

}  // namespace vesselseg::pipeline
