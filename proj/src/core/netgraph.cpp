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

#include "vesselseg/netgraph.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "presets_embedded.hpp"

namespace vesselseg::netgraph {

using volcore::Shape4;

const char* kind_name(LayerKind k) noexcept {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::max_filter: return "max_filter";
    case LayerKind::activation: return "activation";
    case LayerKind::dropout: return "dropout";
    case LayerKind::combine: return "combine";
    case LayerKind::output: return "output";
  }
  return "?";
}

const LayerSpec* NetworkSpec::find(const std::string& name) const {
  for (const auto& l : layers)
    if (l.name == name) return &l;
  return nullptr;
}

std::vector<std::string> preset_ids() {
  std::vector<std::string> ids;
  for (const auto& p : embedded_presets()) ids.push_back(p.id);
  return ids;
}

bool is_vd2d3d_family(const std::string& preset) { return preset.rfind("VD2D3D", 0) == 0; }

const std::string& preset_text(const std::string& id) {
  for (const auto& p : embedded_presets())
    if (p.id == id) return p.text;
  throw ConfigError("unknown preset '" + id + "'");
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

Window parse_xyz(const std::string& v, const std::string& where) {
  const auto parts = split(v, ',');
  if (parts.size() != 3) throw ConfigError(where + ": expected x,y,z but got '" + v + "'");
  int xyz[3];
  for (int i = 0; i < 3; ++i) {
    try {
      xyz[i] = std::stoi(parts[i]);
    } catch (const std::exception&) {
      throw ConfigError(where + ": bad extent '" + v + "'");
    }
    if (xyz[i] < 1) throw ConfigError(where + ": extents must be >= 1");
  }
  return Window{xyz[2], xyz[1], xyz[0]};
}

int scaled_width(int w, double scale) {
  return std::max(1, static_cast<int>(std::floor(static_cast<double>(w) * scale + 1e-9)));
}

}  // namespace

NetworkSpec parse_preset(const std::string& text, double width_scale) {
  if (!(width_scale > 0.0) || !std::isfinite(width_scale)) throw ConfigError("width_scale must be positive");
  NetworkSpec spec;
  spec.width_scale = width_scale;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string head;
    if (!(ls >> head)) continue;
    const std::string where = "preset line " + std::to_string(lineno);
    if (head == "preset") {
      ls >> spec.preset;
    } else if (head == "version") {
      ls >> spec.version;
    } else if (head == "input") {
      std::string name;
      ls >> name;
      spec.inputs.push_back(name);
    } else if (head == "layer") {
      std::string name, kind;
      if (!(ls >> name >> kind)) throw ConfigError(where + ": expected 'layer <name> <kind>'");
      std::map<std::string, std::string> kv;
      std::string tok;
      while (ls >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
      }
      auto need = [&](const char* key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw ConfigError(where + ": layer " + name + " lacks '" + key + "'");
        return it->second;
      };
      LayerSpec l;
      l.name = name;
      l.inputs = split(need("in"), ',');
      if (auto it = kv.find("src"); it != kv.end()) l.source = it->second;
      if (kind == "conv") {
        l.kind = LayerKind::conv;
        l.kernel = parse_xyz(need("kernel"), where);
        l.out_channels = scaled_width(std::stoi(need("width")), width_scale);
        const Activation act = volcore::parse_activation(need("act"));
        spec.layers.push_back(l);
        LayerSpec a;
        a.name = name + ".act";
        a.kind = LayerKind::activation;
        a.act = act;
        a.inputs = {name};
        a.source = l.source;
        spec.layers.push_back(a);
        continue;
      } else if (kind == "max_filter") {
        l.kind = LayerKind::max_filter;
        l.kernel = parse_xyz(need("window"), where);
      } else if (kind == "dropout") {
        l.kind = LayerKind::dropout;
        l.dropout_p = std::stod(need("p"));
        if (!(l.dropout_p >= 0.0 && l.dropout_p < 1.0)) throw ConfigError(where + ": dropout p must be in [0,1)");
      } else if (kind == "combine") {
        l.kind = LayerKind::combine;
      } else if (kind == "output") {
        l.kind = LayerKind::output;
        l.out_channels = std::stoi(need("width"));
        if (l.out_channels != 2) throw ConfigError(where + ": output layer must have width 2");
      } else {
        throw ConfigError(where + ": unknown layer kind '" + kind + "'");
      }
      spec.layers.push_back(l);
    } else {
      throw ConfigError(where + ": unknown record '" + head + "'");
    }
  }
  if (spec.preset.empty()) throw ConfigError("preset text lacks a 'preset' record");
  if (spec.inputs.empty() || spec.inputs.size() > 2) throw ConfigError("preset must declare one or two inputs");
  analyze(spec);
  return spec;
}

NetworkSpec build_preset(const std::string& id, double width_scale) {
  return parse_preset(preset_text(id), width_scale);
}

std::vector<NodeInfo> analyze(const NetworkSpec& spec) {
  std::vector<NodeInfo> nodes;
  std::map<std::string, int> index;
  for (const auto& in : spec.inputs) {
    if (!index.emplace(in, static_cast<int>(nodes.size())).second)
      throw ConfigError("duplicate node name '" + in + "'");
    NodeInfo n;
    n.name = in;
    n.channels = 1;
    nodes.push_back(n);
  }
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::output)
    throw ConfigError("network must end with an output layer");
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const LayerSpec& l = spec.layers[li];
    NodeInfo n;
    n.name = l.name;
    n.layer = static_cast<int>(li);
    for (const auto& in : l.inputs) {
      auto it = index.find(in);
      if (it == index.end()) throw ConfigError("layer '" + l.name + "' references unknown or later node '" + in + "'");
      n.inputs.push_back(it->second);
    }
    const std::size_t want = l.kind == LayerKind::combine ? 2 : 1;
    if (n.inputs.size() != want)
      throw ConfigError("layer '" + l.name + "' (" + kind_name(l.kind) + ") needs " + std::to_string(want) + " input(s)");
    const NodeInfo& a = nodes[n.inputs[0]];
    n.channels = a.channels;
    n.dilation_in = a.dilation_out;
    n.dilation_out = a.dilation_out;
    n.field = a.field;
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::output:
        n.channels = l.out_channels;
        [[fallthrough]];
      case LayerKind::max_filter: {
        const Dilation d = n.dilation_in;
        n.field = Extent3{a.field.z + (l.kernel.z - 1) * d.z, a.field.y + (l.kernel.y - 1) * d.y,
                          a.field.x + (l.kernel.x - 1) * d.x};
        if (l.kind == LayerKind::max_filter)
          n.dilation_out = Dilation{d.z * l.kernel.z, d.y * l.kernel.y, d.x * l.kernel.x};
        break;
      }
      case LayerKind::combine: {
        const NodeInfo& b = nodes[n.inputs[1]];
        if (a.channels != b.channels || !(a.field == b.field) || !(a.dilation_out == b.dilation_out))
          throw ConfigError("combine '" + l.name + "' joins streams of different shape");
        break;
      }
      case LayerKind::activation:
      case LayerKind::dropout:
        break;
    }
    if (!index.emplace(l.name, static_cast<int>(nodes.size())).second)
      throw ConfigError("duplicate node name '" + l.name + "'");
    nodes.push_back(n);
  }
  return nodes;
}

Extent3 receptive_field(const NetworkSpec& spec) { return analyze(spec).back().field; }

Extent3 field_offset(const NetworkSpec& spec) {
  const Extent3 f = receptive_field(spec);
  return {(f.z - 1) / 2, (f.y - 1) / 2, (f.x - 1) / 2};
}

KernelStack* ParamStore::find(const std::string& name) {
  for (auto& l : layers)
    if (l.name == name) return &l.kernel;
  return nullptr;
}

const KernelStack* ParamStore::find(const std::string& name) const {
  for (const auto& l : layers)
    if (l.name == name) return &l.kernel;
  return nullptr;
}

std::size_t ParamStore::param_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.kernel.param_count();
  return n;
}

bool ParamStore::all_finite() const noexcept {
  for (const auto& l : layers) {
    for (double v : l.kernel.weights())
      if (!std::isfinite(v)) return false;
    for (double v : l.kernel.bias())
      if (!std::isfinite(v)) return false;
  }
  return true;
}

ParamStore zero_params(const NetworkSpec& spec) {
  const auto nodes = analyze(spec);
  ParamStore p;
  p.preset = spec.preset;
  p.width_scale = spec.width_scale;
  p.version = spec.version;
  for (std::size_t ni = spec.inputs.size(); ni < nodes.size(); ++ni) {
    const LayerSpec& l = spec.layers[nodes[ni].layer];
    if (l.kind != LayerKind::conv && l.kind != LayerKind::output) continue;
    p.layers.push_back({l.name, KernelStack(l.out_channels, nodes[nodes[ni].inputs[0]].channels, l.kernel)});
  }
  return p;
}

std::size_t param_count(const NetworkSpec& spec) { return zero_params(spec).param_count(); }

InitScheme parse_init_scheme(const std::string& s) {
  if (s == "fan_in_uniform") return InitScheme::fan_in_uniform;
  if (s == "relu_gain_uniform") return InitScheme::relu_gain_uniform;
  throw ConfigError("unknown init scheme '" + s + "'");
}

std::string init_scheme_name(InitScheme s) {
  return s == InitScheme::fan_in_uniform ? "fan_in_uniform" : "relu_gain_uniform";
}

namespace {

bool feeds_relu(const NetworkSpec& spec, const std::string& name) {
  for (const auto& l : spec.layers)
    if (l.kind == LayerKind::activation && l.act == Activation::relu && l.inputs.size() == 1 && l.inputs[0] == name)
      return true;
  return false;
}

}  // namespace

ParamStore init_weights(const NetworkSpec& spec, InitScheme scheme, std::uint64_t seed) {
  ParamStore p = zero_params(spec);
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    KernelStack& k = p.layers[li].kernel;
    Rng rng(mix_seed(seed, li));
    const double fan_in = static_cast<double>(k.c_in()) * static_cast<double>(k.taps());
    const double gain = scheme == InitScheme::relu_gain_uniform && feeds_relu(spec, p.layers[li].name) ? 2.0 : 1.0;
    const double a = std::sqrt(3.0 * gain / fan_in);
    for (double& w : k.weights()) w = (2.0 * uniform01(rng) - 1.0) * a;
  }
  return p;
}

void check_compatible(const NetworkSpec& spec, const ParamStore& params) {
  const ParamStore want = zero_params(spec);
  if (want.layers.size() != params.layers.size())
    throw DataError("parameter store has " + std::to_string(params.layers.size()) + " layers, preset " + spec.preset +
                    " needs " + std::to_string(want.layers.size()));
  for (std::size_t i = 0; i < want.layers.size(); ++i) {
    const auto& a = want.layers[i];
    const auto& b = params.layers[i];
    if (a.name != b.name || a.kernel.c_out() != b.kernel.c_out() || a.kernel.c_in() != b.kernel.c_in() ||
        !(a.kernel.extent() == b.kernel.extent()))
      throw DataError("parameter layer '" + b.name + "' does not match preset layer '" + a.name + "'");
  }
}

ParamStore transfer_vd2d_into(const ParamStore& vd2d, const NetworkSpec& target, std::uint64_t seed,
                              InitScheme scheme) {
  if (vd2d.preset != "VD2D") throw ArgumentError("transfer source must be a VD2D store, got '" + vd2d.preset + "'");
  if (!is_vd2d3d_family(target.preset))
    throw ArgumentError("transfer target must be a VD2D3D-family preset, got '" + target.preset + "'");
  if (std::abs(vd2d.width_scale - target.width_scale) > 1e-12)
    throw ArgumentError("transfer requires equal width scales");
  ParamStore out = init_weights(target, scheme, seed);
  for (auto& [name, k] : out.layers) {
    const KernelStack* src = vd2d.find(name);
    if (src == nullptr || src->c_out() != k.c_out() || src->c_in() != k.c_in()) continue;
    const Window sw = src->extent(), tw = k.extent();
    if (sw.y != tw.y || sw.x != tw.x) continue;
    if (sw.z == tw.z) {
      k = *src;
    } else if (sw.z == 1 && tw.z % 2 == 1) {
      std::fill(k.weights().begin(), k.weights().end(), 0.0);
      const int zc = tw.z / 2;
      for (int o = 0; o < k.c_out(); ++o)
        for (int i = 0; i < k.c_in(); ++i)
          for (int y = 0; y < tw.y; ++y)
            for (int x = 0; x < tw.x; ++x) k.w(o, i, zc, y, x) = src->w(o, i, 0, y, x);
      k.bias() = src->bias();
    }
  }
  return out;
}

namespace {

void softmax2(const Tensor4& logits, Tensor4& prob) {
  const std::size_t n = logits.shape().plane();
  const double* z0 = logits.channel(0).data();
  const double* z1 = logits.channel(1).data();
  double* p0 = prob.channel(0).data();
  double* p1 = prob.channel(1).data();
  for (std::size_t j = 0; j < n; ++j) {
    const double m = std::max(z0[j], z1[j]);
    const double e0 = std::exp(z0[j] - m), e1 = std::exp(z1[j] - m);
    const double s = e0 + e1;
    p0[j] = e0 / s;
    p1[j] = e1 / s;
  }
}

Tensor4 run_conv(const Tensor4& in, const KernelStack& k, Dilation d, ConvAlgorithm algo) {
  return algo == ConvAlgorithm::fft ? volcore::conv_fft(in, k, d) : volcore::conv_direct(in, k, d);
}

void add_into(Tensor4& dst, const Tensor4& src) {
  for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
}

}  // namespace

ForwardResult forward(const NetworkSpec& spec, const ParamStore& params, const std::vector<Tensor4>& inputs,
                      const ForwardOptions& opts) {
  const auto nodes = analyze(spec);
  if (static_cast<int>(inputs.size()) != spec.arity())
    throw ShapeError("network " + spec.preset + " takes " + std::to_string(spec.arity()) + " input(s), got " +
                     std::to_string(inputs.size()));
  check_compatible(spec, params);
  const Extent3 field = nodes.back().field;
  const Extent3 in_dims = inputs.front().shape().spatial();
  for (const auto& t : inputs) {
    if (t.shape().c != 1) throw ShapeError("network inputs must have one channel");
    if (!(t.shape().spatial() == in_dims)) throw ShapeError("network inputs differ in spatial extent");
  }
  auto check_axis = [](int n, int f, const char* axis) {
    if (n < f)
      throw ShapeError("input extent " + std::to_string(n) + " along " + axis + " is smaller than the receptive field " +
                       std::to_string(f));
  };
  check_axis(in_dims.z, field.z, "z");
  check_axis(in_dims.y, field.y, "y");
  check_axis(in_dims.x, field.x, "x");

  std::vector<int> last_use(nodes.size(), -1);
  for (std::size_t ni = 0; ni < nodes.size(); ++ni)
    for (int in : nodes[ni].inputs) last_use[in] = static_cast<int>(ni);

  ForwardResult r;
  ForwardCache& c = r.cache;
  c.values.resize(nodes.size());
  c.dropout_mask.resize(nodes.size());
  c.pre_softmax.resize(1);
  for (std::size_t i = 0; i < inputs.size(); ++i) c.values[i] = inputs[i];

  Rng drop_rng(mix_seed(opts.seed, 0xd0));
  for (std::size_t ni = inputs.size(); ni < nodes.size(); ++ni) {
    const NodeInfo& n = nodes[ni];
    const LayerSpec& l = spec.layers[n.layer];
    const Tensor4& a = c.values[n.inputs[0]];
    switch (l.kind) {
      case LayerKind::conv:
        c.values[ni] = run_conv(a, *params.find(l.name), n.dilation_in, opts.conv);
        break;
      case LayerKind::activation:
        c.values[ni] = volcore::activation(a, l.act);
        break;
      case LayerKind::max_filter:
        c.values[ni] = volcore::max_filter(a, l.kernel, n.dilation_in);
        break;
      case LayerKind::dropout:
        if (opts.mode == Mode::train && l.dropout_p > 0.0) {
          Tensor4 mask(a.shape());
          const double keep = 1.0 - l.dropout_p;
          for (std::size_t j = 0; j < mask.size(); ++j) mask[j] = uniform01(drop_rng) < keep ? 1.0 / keep : 0.0;
          Tensor4 v(a.shape());
          for (std::size_t j = 0; j < v.size(); ++j) v[j] = a[j] * mask[j];
          c.values[ni] = std::move(v);
          c.dropout_mask[ni] = std::move(mask);
        } else {
          c.values[ni] = a;
        }
        break;
      case LayerKind::combine: {
        const Tensor4& b = c.values[n.inputs[1]];
        if (!(a.shape() == b.shape())) throw ShapeError("combine '" + l.name + "': stream shapes differ");
        Tensor4 v = a;
        add_into(v, b);
        c.values[ni] = std::move(v);
        break;
      }
      case LayerKind::output: {
        Tensor4 logits = run_conv(a, *params.find(l.name), n.dilation_in, opts.conv);
        Tensor4 prob(logits.shape());
        softmax2(logits, prob);
        c.values[ni] = std::move(prob);
        c.pre_softmax[0] = std::move(logits);
        break;
      }
    }
    if (!opts.keep_cache) {
      for (int in : n.inputs)
        if (last_use[in] == static_cast<int>(ni)) c.values[in] = Tensor4();
    }
  }
  r.prob = c.values.back();
  if (!opts.keep_cache) r.cache = ForwardCache{};
  return r;
}

LossStats evaluate_loss(const Tensor4& prob, const LabelMask& target, const Volume<float>& weights) {
  const Extent3 d = prob.shape().spatial();
  if (prob.shape().c != 2) throw ShapeError("probability tensor must have two channels");
  if (!(target.dims() == d) || !(weights.dims() == d))
    throw ShapeError("target/weights extent " + to_string(target.dims()) + " does not match output " + to_string(d));
  LossStats s;
  const std::size_t n = d.volume();
  const double* p0 = prob.channel(0).data();
  const double* p1 = prob.channel(1).data();
  std::size_t wrong = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const bool vessel = target[j] != 0;
    const double pt = vessel ? p1[j] : p0[j];
    s.err_sum += static_cast<double>(weights[j]) * -std::log(std::max(pt, std::numeric_limits<double>::min()));
    const bool predicted = p1[j] > p0[j];
    if (predicted != vessel) ++wrong;
  }
  s.err = s.err_sum / static_cast<double>(n);
  s.cls = static_cast<double>(wrong) / static_cast<double>(n);
  return s;
}

BackwardResult backward(const NetworkSpec& spec, const ParamStore& params, const ForwardResult& fwd,
                        const LabelMask& target, const Volume<float>& weights) {
  const auto nodes = analyze(spec);
  const ForwardCache& c = fwd.cache;
  if (c.values.size() != nodes.size() || c.pre_softmax.empty() || c.values.front().size() == 0)
    throw ArgumentError("backward needs the cache of a forward pass run with keep_cache");
  check_compatible(spec, params);

  BackwardResult r;
  const LossStats loss = evaluate_loss(fwd.prob, target, weights);
  r.err = loss.err;
  r.err_sum = loss.err_sum;
  r.cls = loss.cls;

  std::vector<Tensor4> grad(nodes.size());
  {
    // d/dz_c of -w ln p_t under softmax is w (p_c - [c == t]).
    Tensor4 g(fwd.prob.shape());
    const std::size_t n = fwd.prob.shape().plane();
    for (std::size_t j = 0; j < n; ++j) {
      const double w = weights[j];
      const bool vessel = target[j] != 0;
      g.channel(0)[j] = w * (fwd.prob.channel(0)[j] - (vessel ? 0.0 : 1.0));
      g.channel(1)[j] = w * (fwd.prob.channel(1)[j] - (vessel ? 1.0 : 0.0));
    }
    grad.back() = std::move(g);
  }

  r.grads.resize(params.layers.size());
  std::map<std::string, std::size_t> pidx;
  for (std::size_t i = 0; i < params.layers.size(); ++i) pidx[params.layers[i].name] = i;

  auto accumulate = [&](int node, Tensor4&& g) {
    if (grad[node].size() == 0) grad[node] = std::move(g);
    else add_into(grad[node], g);
  };

  for (std::size_t ni = nodes.size(); ni-- > spec.inputs.size();) {
    if (grad[ni].size() == 0) continue;
    const NodeInfo& n = nodes[ni];
    const LayerSpec& l = spec.layers[n.layer];
    const Tensor4& a = c.values[n.inputs[0]];
    Tensor4 g = std::move(grad[ni]);
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::output: {
        const KernelStack& k = *params.find(l.name);
        volcore::ConvGrads cg = volcore::conv_backward(a, k, n.dilation_in, g);
        r.grads[pidx.at(l.name)] = std::move(cg.kernel);
        if (n.inputs[0] >= static_cast<int>(spec.inputs.size())) accumulate(n.inputs[0], std::move(cg.input));
        break;
      }
      case LayerKind::activation:
        accumulate(n.inputs[0], volcore::activation_backward(a, l.act, g));
        break;
      case LayerKind::max_filter:
        accumulate(n.inputs[0], volcore::max_filter_backward(a, l.kernel, n.dilation_in, g));
        break;
      case LayerKind::dropout:
        if (c.dropout_mask[ni].size() != 0)
          for (std::size_t j = 0; j < g.size(); ++j) g[j] *= c.dropout_mask[ni][j];
        accumulate(n.inputs[0], std::move(g));
        break;
      case LayerKind::combine: {
        Tensor4 copy = g;
        accumulate(n.inputs[0], std::move(g));
        accumulate(n.inputs[1], std::move(copy));
        break;
      }
    }
  }
  for (std::size_t i = 0; i < r.grads.size(); ++i)
    if (r.grads[i].weight_count() == 0) {
      const KernelStack& k = params.layers[i].kernel;
      r.grads[i] = KernelStack(k.c_out(), k.c_in(), k.extent());
    }
  return r;
}

ProbMap infer_dense(const NetworkSpec& spec, const ParamStore& params, const std::vector<Volume<float>>& channels,
                    Extent3 tile, ConvAlgorithm conv) {
  if (static_cast<int>(channels.size()) != spec.arity())
    throw ShapeError("network " + spec.preset + " takes " + std::to_string(spec.arity()) + " input(s), got " +
                     std::to_string(channels.size()));
  const Extent3 dims = channels.front().dims();
  for (const auto& ch : channels)
    if (!(ch.dims() == dims)) throw ShapeError("input channels differ in extent");
  const Extent3 f = receptive_field(spec);
  const Extent3 lo{(f.z - 1) / 2, (f.y - 1) / 2, (f.x - 1) / 2};
  const Extent3 hi{f.z - 1 - lo.z, f.y - 1 - lo.y, f.x - 1 - lo.x};
  std::vector<Volume<float>> padded;
  for (const auto& ch : channels) padded.push_back(mirror_pad(ch, lo, hi));

  ProbMap out(dims);
  tile = Extent3{std::max(1, tile.z), std::max(1, tile.y), std::max(1, tile.x)};
  for (int z0 = 0; z0 < dims.z; z0 += tile.z)
    for (int y0 = 0; y0 < dims.y; y0 += tile.y)
      for (int x0 = 0; x0 < dims.x; x0 += tile.x) {
        const Extent3 t{std::min(tile.z, dims.z - z0), std::min(tile.y, dims.y - y0), std::min(tile.x, dims.x - x0)};
        const Extent3 in_size{t.z + f.z - 1, t.y + f.y - 1, t.x + f.x - 1};
        std::vector<Tensor4> inputs;
        for (const auto& p : padded) inputs.push_back(volcore::from_volume(crop(p, Extent3{z0, y0, x0}, in_size)));
        ForwardOptions opts;
        opts.mode = Mode::infer;
        opts.keep_cache = false;
        opts.conv = conv;
        const ForwardResult r = forward(spec, params, inputs, opts);
        for (int z = 0; z < t.z; ++z)
          for (int y = 0; y < t.y; ++y)
            for (int x = 0; x < t.x; ++x) out(z0 + z, y0 + y, x0 + x) = static_cast<float>(r.prob(1, z, y, x));
      }
  return out;
}

namespace {

constexpr const char* kCheckpointTag = "vesselseg-checkpoint";

void put_f32(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                              static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

double get_f32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("checkpoint truncated");
  const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
                             static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace

void write_checkpoint(std::ostream& os, const ParamStore& params) {
  char scale[64];
  std::snprintf(scale, sizeof scale, "%.17g", params.width_scale);
  os << kCheckpointTag << ' ' << params.version << '\n';
  os << "preset " << params.preset << '\n';
  os << "width_scale " << scale << '\n';
  os << "update " << params.update << '\n';
  os << "layers " << params.layers.size() << '\n';
  for (const auto& [name, k] : params.layers) {
    const Window e = k.extent();
    os << name << ' ' << k.c_out() << ' ' << k.c_in() << ' ' << e.z << ' ' << e.y << ' ' << e.x << '\n';
  }
  os << "data\n";
  for (const auto& l : params.layers) {
    for (double v : l.kernel.weights()) put_f32(os, v);
    for (double v : l.kernel.bias()) put_f32(os, v);
  }
  if (!os) throw DataError("failed writing checkpoint");
}

ParamStore read_checkpoint(std::istream& is) {
  ParamStore p;
  std::string tag, key;
  std::size_t n = 0;
  if (!(is >> tag >> p.version) || tag != kCheckpointTag) throw DataError("not a vesselseg checkpoint");
  if (!(is >> key >> p.preset) || key != "preset") throw DataError("checkpoint: missing preset");
  if (!(is >> key >> p.width_scale) || key != "width_scale") throw DataError("checkpoint: missing width_scale");
  if (!(is >> key >> p.update) || key != "update") throw DataError("checkpoint: missing update");
  if (!(is >> key >> n) || key != "layers") throw DataError("checkpoint: missing layer count");
  for (std::size_t i = 0; i < n; ++i) {
    std::string name;
    int co, ci, kz, ky, kx;
    if (!(is >> name >> co >> ci >> kz >> ky >> kx)) throw DataError("checkpoint: bad layer record");
    p.layers.push_back({name, KernelStack(co, ci, Window{kz, ky, kx})});
  }
  if (!(is >> key) || key != "data") throw DataError("checkpoint: missing data marker");
  is.get();  // newline
  for (auto& l : p.layers) {
    for (double& v : l.kernel.weights()) v = get_f32(is);
    for (double& v : l.kernel.bias()) v = get_f32(is);
  }
  return p;
}

void save_checkpoint(const std::string& path, const ParamStore& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  write_checkpoint(os, params);
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  return read_checkpoint(is);
}

}  // namespace vesselseg::netgraph
