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
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vesselseg/random.hpp"
#include "vesselseg/volcore.hpp"

namespace vesselseg::netgraph {

using volcore::Activation;
using volcore::Dilation;
using volcore::KernelStack;
using volcore::Tensor4;
using volcore::Window;

enum class LayerKind { conv, max_filter, activation, dropout, combine, output };

const char* kind_name(LayerKind k) noexcept;

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  Window kernel{1, 1, 1};  // conv kernel or max-filter window, (z, y, x)
  int out_channels = 0;    // conv / output only
  Activation act = Activation::relu;
  double dropout_p = 0.0;
  std::vector<std::string> inputs;
  std::string source;  // provenance note from the preset file ("text", "figure")
};

struct NetworkSpec {
  std::string preset;
  int version = 1;
  double width_scale = 1.0;
  std::vector<std::string> inputs;  // "image" and optionally "recursive"
  std::vector<LayerSpec> layers;    // topological order; last layer is the output

  int arity() const noexcept { return static_cast<int>(inputs.size()); }
  const LayerSpec* find(const std::string& name) const;
};

/// Names of the shipped presets.
std::vector<std::string> preset_ids();
bool is_vd2d3d_family(const std::string& preset);

/// Raw text of a shipped preset file.
const std::string& preset_text(const std::string& id);

/// Parse a preset description; widths are multiplied by width_scale
/// (floored, at least 1). The two-channel output layer is never scaled.
NetworkSpec parse_preset(const std::string& text, double width_scale = 1.0);
NetworkSpec build_preset(const std::string& id, double width_scale = 1.0);

/// Per-node static information derived from a spec: channel count, the
/// dilation a node's operation runs at, the dilation its output carries
/// downstream and the receptive field at its output.
struct NodeInfo {
  std::string name;
  int channels = 0;
  Dilation dilation_in;
  Dilation dilation_out;
  Extent3 field{1, 1, 1};
  std::vector<int> inputs;  // node indices
  int layer = -1;           // index into spec.layers, -1 for graph inputs
};

/// Nodes are the graph inputs followed by the layers, in spec order.
/// Validates names, references and combine shapes.
std::vector<NodeInfo> analyze(const NetworkSpec& spec);

/// Input extent that influences a single output voxel, (z, y, x).
Extent3 receptive_field(const NetworkSpec& spec);

/// Offset from an input patch origin to the input voxel aligned with output
/// voxel 0: (field - 1) / 2 per axis.
Extent3 field_offset(const NetworkSpec& spec);

struct NamedKernel {
  std::string name;
  KernelStack kernel;
  friend bool operator==(const NamedKernel&, const NamedKernel&) = default;
};

struct ParamStore {
  std::string preset;
  double width_scale = 1.0;
  int version = 1;
  std::uint64_t update = 0;  // number of training updates applied
  std::vector<NamedKernel> layers;

  KernelStack* find(const std::string& name);
  const KernelStack* find(const std::string& name) const;
  std::size_t param_count() const noexcept;
  bool all_finite() const noexcept;
  friend bool operator==(const ParamStore&, const ParamStore&) = default;
};

std::size_t param_count(const NetworkSpec& spec);

/// Zero-valued store shaped for spec.
ParamStore zero_params(const NetworkSpec& spec);

enum class InitScheme { fan_in_uniform, relu_gain_uniform };

InitScheme parse_init_scheme(const std::string& s);
std::string init_scheme_name(InitScheme s);

/// Weights ~ U(-a, a) with a = sqrt(3 g / fan_in), i.e. variance g / fan_in;
/// g = 1 for fan_in_uniform, and for relu_gain_uniform g = 2 on layers
/// followed by a ReLU. Biases zero. Each layer draws from its own seeded
/// stream.
ParamStore init_weights(const NetworkSpec& spec, InitScheme scheme, std::uint64_t seed);

/// Copies matching VD2D layers into a fresh VD2D3D-family store. A 2D kernel
/// widened to an odd kz is placed at the central z tap, other taps zero.
ParamStore transfer_vd2d_into(const ParamStore& vd2d, const NetworkSpec& target, std::uint64_t seed,
                              InitScheme scheme = InitScheme::relu_gain_uniform);

enum class Mode { train, infer };
enum class ConvAlgorithm { direct, fft };

struct ForwardOptions {
  Mode mode = Mode::infer;
  std::uint64_t seed = 0;  // dropout masks
  ConvAlgorithm conv = ConvAlgorithm::direct;
  bool keep_cache = true;
};

struct ForwardCache {
  std::vector<Tensor4> values;        // per node output
  std::vector<Tensor4> dropout_mask;  // per node, empty unless dropout ran
  std::vector<Tensor4> pre_softmax;   // logits of the output node
};

struct ForwardResult {
  Tensor4 prob;  // channel 0 background, channel 1 vessel
  ForwardCache cache;
};

/// Dense forward pass. inputs.size() must equal spec.arity(); every input has
/// one channel and identical spatial extent.
ForwardResult forward(const NetworkSpec& spec, const ParamStore& params, const std::vector<Tensor4>& inputs,
                      const ForwardOptions& opts = {});

struct BackwardResult {
  std::vector<KernelStack> grads;  // aligned with params.layers
  double err = 0.0;                // weighted cross-entropy, per-voxel mean
  double err_sum = 0.0;            // weighted cross-entropy, summed
  double cls = 0.0;                // fraction misclassified at argmax
};

/// Gradients of the summed weighted cross-entropy sum_v w_v * -ln p_v(target_v).
BackwardResult backward(const NetworkSpec& spec, const ParamStore& params, const ForwardResult& fwd,
                        const LabelMask& target, const Volume<float>& weights);

/// Loss and misclassification only (no gradients).
struct LossStats {
  double err = 0.0;
  double err_sum = 0.0;
  double cls = 0.0;
};
LossStats evaluate_loss(const Tensor4& prob, const LabelMask& target, const Volume<float>& weights);

/// Vessel probability for every voxel of the given channels. Each channel is
/// mirror padded by the receptive field so the output is aligned voxel for
/// voxel with the input; the work is split into output tiles.
ProbMap infer_dense(const NetworkSpec& spec, const ParamStore& params, const std::vector<Volume<float>>& channels,
                    Extent3 tile = {8, 64, 64}, ConvAlgorithm conv = ConvAlgorithm::direct);

/// Checkpoint: text header (format tag, preset id, width scale, update,
/// layer name/shape list) followed by little-endian float32 weights then
/// biases for each layer in header order.
void write_checkpoint(std::ostream& os, const ParamStore& params);
ParamStore read_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);

/// Throws DataError unless params are shaped exactly for spec.
void check_compatible(const NetworkSpec& spec, const ParamStore& params);

}  // namespace vesselseg::netgraph
