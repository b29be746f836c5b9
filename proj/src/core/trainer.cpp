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

#include "vesselseg/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>

namespace vesselseg::trainer {

using netgraph::ForwardOptions;
using netgraph::Mode;
using volcore::KernelStack;
using volcore::Tensor4;

void LrSchedule::validate() const {
  if (!(initial_lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(anneal_factor > 0.0 && anneal_factor <= 1.0)) throw ConfigError("anneal factor must be in (0, 1]");
  if (anneal_every < 1) throw ConfigError("anneal period must be >= 1");
  if (reset_at) {
    if (!(reset_lr > 0.0)) throw ConfigError("reset learning rate must be positive");
    if (reset_every < 1) throw ConfigError("reset anneal period must be >= 1");
  }
}

LrSchedule LrSchedule::vd2d() { return LrSchedule{0.01, 0.999, 6, std::nullopt, 1e-4, 10}; }

LrSchedule LrSchedule::vd2d3d() { return LrSchedule{0.01, 0.999, 1, 15000, 1e-4, 10}; }

double lr_at(const LrSchedule& s, std::uint64_t k) {
  if (s.reset_at && k >= *s.reset_at)
    return s.reset_lr * std::pow(s.anneal_factor, static_cast<double>((k - *s.reset_at) / s.reset_every));
  return s.initial_lr * std::pow(s.anneal_factor, static_cast<double>(k / s.anneal_every));
}

void TrainConfig::validate() const {
  lr.validate();
  if (patch_out.z < 1 || patch_out.y < 1 || patch_out.x < 1) throw ConfigError("patch size must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout probability must be in [0, 1)");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (log_every < 1) throw ConfigError("log cadence must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("checkpoint cadence must be >= 1");
}

TrainConfig TrainConfig::stage1() {
  TrainConfig c;
  c.stage = "stage1";
  c.updates = 60000;
  c.lr = LrSchedule::vd2d();
  return c;
}

TrainConfig TrainConfig::stage2() {
  TrainConfig c;
  c.stage = "stage2";
  c.updates = 90000;
  c.lr = LrSchedule::vd2d3d();
  return c;
}

WeightMap rebalance_weights(const LabelMask& labels) {
  std::size_t vessel = 0;
  for (auto v : labels.values()) vessel += v != 0;
  const std::size_t n = labels.size();
  WeightMap w(labels.dims(), 1.0f);
  if (vessel == 0 || vessel == n) return w;
  const double fv = static_cast<double>(vessel) / static_cast<double>(n);
  const double wv = 0.5 / fv, wb = 0.5 / (1.0 - fv);
  // mean = fv * wv + (1 - fv) * wb = 1 already; renormalize against rounding.
  double mean = 0.0;
  for (std::size_t j = 0; j < n; ++j) mean += labels[j] ? wv : wb;
  mean /= static_cast<double>(n);
  for (std::size_t j = 0; j < n; ++j) w[j] = static_cast<float>((labels[j] ? wv : wb) / mean);
  return w;
}

namespace {

template <typename T>
Volume<T> dihedral(const Volume<T>& v, int t) {
  const Extent3 d = v.dims();
  const int r = t % 4;
  const bool flip = t >= 4;
  if (r % 2 == 1 && d.y != d.x) throw ArgumentError("quarter-turn augmentation needs a square x-y patch");
  Volume<T> out(d);
  const int ny = d.y, nx = d.x;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        // Output pixel (y, x): undo the mirror first, then the rotation.
        int sy = y, sx = flip ? nx - 1 - x : x;
        for (int i = 0; i < r; ++i) {
          // one counter-clockwise quarter turn: out(y, x) = in(x, n - 1 - y)
          const int ty = sx, tx = ny - 1 - sy;
          sy = ty;
          sx = tx;
        }
        out(z, y, x) = v(z, sy, sx);
      }
  return out;
}

}  // namespace

Patch augment(const Patch& p, int t) {
  if (t < 0 || t > 7) throw ArgumentError("augmentation index must be in 0..7");
  Patch out;
  for (const auto& c : p.channels) out.channels.push_back(dihedral(c, t));
  out.labels = dihedral(p.labels, t);
  return out;
}

int dihedral_inverse(int t) {
  if (t < 0 || t > 7) throw ArgumentError("augmentation index must be in 0..7");
  return t >= 4 ? t : (4 - t) % 4;
}

SampledPatch sample_patch(const std::vector<Volume<float>>& channels, const LabelMask& labels, const NetworkSpec& spec,
                          Extent3 out, Rng& rng, bool padded) {
  if (channels.empty()) throw ArgumentError("no input channels");
  const Extent3 f = netgraph::receptive_field(spec);
  const Extent3 lo{(f.z - 1) / 2, (f.y - 1) / 2, (f.x - 1) / 2};
  const Extent3 in_size{out.z + f.z - 1, out.y + f.y - 1, out.x + f.x - 1};
  const Extent3 cd = channels.front().dims();
  const Extent3 ld = labels.dims();
  // Range of the input-patch origin along each axis.
  auto span = [&](int avail, int need, const char* axis) {
    if (avail < need)
      throw DataError(std::string("stack extent ") + std::to_string(avail) + " along " + axis +
                      " is smaller than the required " + std::to_string(need));
    return avail - need + 1;
  };
  Extent3 range;
  if (padded) {
    range = {span(ld.z, out.z, "z"), span(ld.y, out.y, "y"), span(ld.x, out.x, "x")};
  } else {
    if (!(cd == ld)) throw ShapeError("labels and channels differ in extent");
    range = {span(cd.z, in_size.z, "z"), span(cd.y, in_size.y, "y"), span(cd.x, in_size.x, "x")};
  }
  const Extent3 o{static_cast<int>(uniform_index(rng, range.z)), static_cast<int>(uniform_index(rng, range.y)),
                  static_cast<int>(uniform_index(rng, range.x))};
  SampledPatch s;
  for (const auto& c : channels) s.patch.channels.push_back(crop(c, o, in_size));
  s.label_origin = padded ? o : Extent3{o.z + lo.z, o.y + lo.y, o.x + lo.x};
  s.patch.labels = crop(labels, s.label_origin, out);
  return s;
}

Velocity zero_velocity(const ParamStore& params) {
  Velocity v;
  for (const auto& l : params.layers) v.emplace_back(l.kernel.c_out(), l.kernel.c_in(), l.kernel.extent());
  return v;
}

void sgd_step(ParamStore& params, const std::vector<KernelStack>& grads, Velocity& velocity, double lr,
              double momentum) {
  if (grads.size() != params.layers.size() || velocity.size() != params.layers.size())
    throw ShapeError("gradient/velocity layer count does not match parameters");
  for (std::size_t li = 0; li < grads.size(); ++li) {
    KernelStack& w = params.layers[li].kernel;
    KernelStack& v = velocity[li];
    const KernelStack& g = grads[li];
    if (g.weight_count() != w.weight_count() || v.weight_count() != w.weight_count())
      throw ShapeError("gradient shape mismatch at layer " + params.layers[li].name);
    for (std::size_t i = 0; i < w.weights().size(); ++i) {
      v.weights()[i] = momentum * v.weights()[i] - lr * g.weights()[i];
      w.weights()[i] += v.weights()[i];
    }
    for (std::size_t i = 0; i < w.bias().size(); ++i) {
      v.bias()[i] = momentum * v.bias()[i] - lr * g.bias()[i];
      w.bias()[i] += v.bias()[i];
    }
  }
}

void write_log_csv(const std::string& path, const std::vector<LogEntry>& log, bool append) {
  const bool fresh = !append || !std::filesystem::exists(path);
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  if (!os) throw DataError("cannot write log " + path);
  if (fresh) os << "update,split,err,cls\n";
  os << std::setprecision(9);
  for (const auto& e : log) os << e.update << ',' << e.split << ',' << e.err << ',' << e.cls << '\n';
}

namespace {

std::vector<Tensor4> to_inputs(const Patch& p) {
  std::vector<Tensor4> v;
  for (const auto& c : p.channels) v.push_back(volcore::from_volume(c));
  return v;
}

struct Prepared {
  std::vector<Volume<float>> channels;  // padded when cfg.mirror_pad
  const TrainItem* item;
};

}  // namespace

TrainResult train_stage(const NetworkSpec& spec_in, const ParamStore& params0, const std::vector<TrainItem>& data,
                        const TrainConfig& cfg) {
  cfg.validate();
  NetworkSpec spec = spec_in;
  for (auto& l : spec.layers)
    if (l.kind == netgraph::LayerKind::dropout) l.dropout_p = cfg.dropout_p;
  netgraph::check_compatible(spec, params0);
  if (data.empty()) throw ArgumentError("training data is empty");

  const Extent3 f = netgraph::receptive_field(spec);
  const Extent3 lo{(f.z - 1) / 2, (f.y - 1) / 2, (f.x - 1) / 2};
  const Extent3 hi{f.z - 1 - lo.z, f.y - 1 - lo.y, f.x - 1 - lo.x};
  std::vector<Prepared> train, test;
  for (const auto& item : data) {
    if (static_cast<int>(item.channels.size()) != spec.arity())
      throw ArgumentError("item '" + item.id + "' has " + std::to_string(item.channels.size()) +
                          " channel(s) but preset " + spec.preset + " takes " + std::to_string(spec.arity()));
    Prepared p{{}, &item};
    for (const auto& c : item.channels) {
      if (!(c.dims() == item.labels.dims())) throw ShapeError("item '" + item.id + "': channel/label extent mismatch");
      p.channels.push_back(cfg.mirror_pad ? mirror_pad(c, lo, hi) : c);
    }
    (item.test ? test : train).push_back(std::move(p));
  }
  if (train.empty()) throw ArgumentError("no training (non-test) items");

  TrainResult result;
  result.params = params0;
  if (params0.update >= cfg.updates) return result;

  auto draw = [&](const Prepared& p, Rng& rng) {
    return sample_patch(p.channels, p.item->labels, spec, cfg.patch_out, rng, cfg.mirror_pad).patch;
  };

  // Fixed monitoring patches, drawn once per split.
  std::vector<Patch> monitor_train, monitor_test;
  {
    Rng mrng(mix_seed(cfg.seed, 0x6d6f6e));
    for (int i = 0; i < cfg.monitor_patches; ++i) {
      monitor_train.push_back(draw(train[i % train.size()], mrng));
      if (!test.empty()) monitor_test.push_back(draw(test[i % test.size()], mrng));
    }
  }
  auto monitor = [&](const std::vector<Patch>& patches, const std::string& split, std::uint64_t update) {
    if (patches.empty()) return;
    double err = 0.0, cls = 0.0;
    for (const auto& p : patches) {
      ForwardOptions fo;
      fo.keep_cache = false;
      fo.conv = cfg.conv;
      const auto r = netgraph::forward(spec, result.params, to_inputs(p), fo);
      const WeightMap w = cfg.rebalance ? rebalance_weights(p.labels) : WeightMap(p.labels.dims(), 1.0f);
      const auto s = netgraph::evaluate_loss(r.prob, p.labels, w);
      err += s.err;
      cls += s.cls;
    }
    const double n = static_cast<double>(patches.size());
    result.log.push_back({update, split, err / n, cls / n});
  };
  auto checkpoint = [&](std::uint64_t update, bool final) {
    if (cfg.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(cfg.checkpoint_dir);
    const std::filesystem::path dir(cfg.checkpoint_dir);
    netgraph::save_checkpoint((dir / (cfg.stage + "_last.ckpt")).string(), result.params);
    if (final) netgraph::save_checkpoint((dir / (cfg.stage + "_final.ckpt")).string(), result.params);
    else netgraph::save_checkpoint((dir / (cfg.stage + "_" + std::to_string(update) + ".ckpt")).string(), result.params);
  };

  // Velocity starts at zero for every stage (and on resume).
  Velocity velocity = zero_velocity(result.params);
  const std::size_t log_start = result.log.size();
  for (std::uint64_t k = params0.update; k < cfg.updates; ++k) {
    // Each update draws from its own stream so a resumed run samples the
    // same patches as an uninterrupted one.
    Rng rng(mix_seed(cfg.seed, k));
    std::vector<KernelStack> grads;
    double err = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const Prepared& item = train[uniform_index(rng, train.size())];
      Patch p = draw(item, rng);
      if (cfg.augment) p = augment(p, static_cast<int>(uniform_index(rng, 8)));
      const WeightMap w = cfg.rebalance ? rebalance_weights(p.labels) : WeightMap(p.labels.dims(), 1.0f);
      ForwardOptions fo;
      fo.mode = Mode::train;
      fo.seed = mix_seed(cfg.seed ^ 0x5eed, k * static_cast<std::uint64_t>(cfg.batch) + b);
      fo.conv = cfg.conv;
      const auto fwd = netgraph::forward(spec, result.params, to_inputs(p), fo);
      auto bw = netgraph::backward(spec, result.params, fwd, p.labels, w);
      if (!std::isfinite(bw.err_sum)) throw NumericError("non-finite loss at update " + std::to_string(k));
      err += bw.err;
      if (grads.empty()) {
        grads = std::move(bw.grads);
      } else {
        for (std::size_t li = 0; li < grads.size(); ++li) {
          for (std::size_t i = 0; i < grads[li].weights().size(); ++i) grads[li].weights()[i] += bw.grads[li].weights()[i];
          for (std::size_t i = 0; i < grads[li].bias().size(); ++i) grads[li].bias()[i] += bw.grads[li].bias()[i];
        }
      }
    }
    if (cfg.batch > 1) {
      const double inv = 1.0 / cfg.batch;
      for (auto& g : grads) {
        for (double& v : g.weights()) v *= inv;
        for (double& v : g.bias()) v *= inv;
      }
    }
    sgd_step(result.params, grads, velocity, lr_at(cfg.lr, k), cfg.momentum);
    if (!result.params.all_finite()) throw NumericError("non-finite parameters after update " + std::to_string(k));
    result.params.update = k + 1;
    result.patch_err.push_back(err / cfg.batch);

    const bool last = k + 1 == cfg.updates;
    if ((k + 1) % cfg.log_every == 0 || last) {
      monitor(monitor_train, "train", k + 1);
      monitor(monitor_test, "test", k + 1);
    }
    if ((k + 1) % cfg.checkpoint_every == 0 && !last) checkpoint(k + 1, false);
    if (last) checkpoint(k + 1, true);
  }
  if (!cfg.log_path.empty())
    write_log_csv(cfg.log_path, std::vector<LogEntry>(result.log.begin() + log_start, result.log.end()), true);
  return result;
}

RecursiveResult train_recursive(const std::vector<TrainItem>& dataset, const std::string& stage2_preset,
                                double width_scale, const TrainConfig& stage1, const TrainConfig& stage2) {
  if (!netgraph::is_vd2d3d_family(stage2_preset))
    throw ConfigError("second stage preset must be VD2D3D-family, got '" + stage2_preset + "'");
  for (const auto& item : dataset)
    if (item.channels.size() != 1) throw ArgumentError("recursive training items must carry only the image");

  RecursiveResult r;
  const NetworkSpec spec1 = netgraph::build_preset("VD2D", width_scale);
  const ParamStore init1 = netgraph::init_weights(spec1, stage1.init, stage1.seed);
  TrainResult t1 = train_stage(spec1, init1, dataset, stage1);
  r.vd2d = t1.params;
  r.stage1_log = std::move(t1.log);

  std::vector<TrainItem> items2;
  for (const auto& item : dataset) {
    ProbMap map = netgraph::infer_dense(spec1, r.vd2d, item.channels, Extent3{8, 128, 128}, stage1.conv);
    r.recursive_maps.push_back(map);
    TrainItem t = item;
    t.channels.push_back(std::move(map));
    items2.push_back(std::move(t));
  }

  const NetworkSpec spec2 = netgraph::build_preset(stage2_preset, width_scale);
  r.stage2_init = netgraph::transfer_vd2d_into(r.vd2d, spec2, stage2.seed, stage2.init);
  TrainResult t2 = train_stage(spec2, r.stage2_init, items2, stage2);
  r.vd2d3d = t2.params;
  r.stage2_log = std::move(t2.log);
  return r;
}

}  // namespace vesselseg::trainer
