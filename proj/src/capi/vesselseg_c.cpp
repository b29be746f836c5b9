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

#include "vesselseg/vesselseg.h"

#include <omp.h>

#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "vesselseg/netgraph.hpp"
#include "vesselseg/pipeline.hpp"
#include "vesselseg/stackio.hpp"
#include "vesselseg/trainer.hpp"

using namespace vesselseg;

struct vs_config {
  pipeline::PipelineConfig cfg;
};

struct vs_volume {
  Volume<float> v;
};

struct vs_network {
  netgraph::NetworkSpec spec;
  netgraph::ParamStore params;
};

namespace {

thread_local std::string t_error;

template <typename F>
vs_status guarded(F&& f) {
  try {
    f();
    t_error.clear();
    return VS_OK;
  } catch (const Error& e) {
    t_error = e.what();
    return static_cast<vs_status>(static_cast<int>(e.code()));
  } catch (const std::bad_alloc&) {
    t_error = "out of memory";
  } catch (const std::exception& e) {
    t_error = e.what();
  } catch (...) {
    t_error = "unknown error";
  }
  return VS_ERR_INTERNAL;
}

void need(const void* p, const char* what) {
  if (p == nullptr) throw ArgumentError(std::string(what) + " is NULL");
}

void set_processed(size_t* out, const pipeline::CommandSummary& s) {
  if (out) *out = s.processed.size();
}

}  // namespace

extern "C" {

const char* vs_version(void) { return "0.1.0"; }

const char* vs_last_error(void) { return t_error.c_str(); }

vs_status vs_set_threads(int n) {
  return guarded([&] {
    if (n < 0) throw ArgumentError("thread count must be >= 0");
    omp_set_num_threads(n > 0 ? n : omp_get_num_procs());
  });
}

vs_status vs_config_default(vs_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new vs_config{};
  });
}

vs_status vs_config_load(const char* path, vs_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new vs_config{pipeline::load_config(path)};
  });
}

vs_status vs_config_set(vs_config* c, const char* key, const char* value) {
  return guarded([&] {
    need(c, "config");
    need(key, "key");
    need(value, "value");
    pipeline::apply_override(c->cfg, std::string(key) + "=" + value);
  });
}

vs_status vs_config_to_json(const vs_config* c, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    need(c, "config");
    const std::string s = pipeline::config_to_json(c->cfg);
    if (needed) *needed = s.size() + 1;
    if (cap == 0) return;
    need(buf, "buf");
    const size_t n = std::min(cap - 1, s.size());
    std::memcpy(buf, s.data(), n);
    buf[n] = '\0';
  });
}

void vs_config_free(vs_config* c) { delete c; }

vs_status vs_preprocess(const vs_config* c, size_t* processed) {
  return guarded([&] {
    need(c, "config");
    set_processed(processed, pipeline::cmd_preprocess(c->cfg));
  });
}

vs_status vs_train(const vs_config* c, size_t* processed) {
  return guarded([&] {
    need(c, "config");
    set_processed(processed, pipeline::cmd_train(c->cfg));
  });
}

vs_status vs_infer(const vs_config* c, const char* const* stacks, size_t n, const char* checkpoint,
                   size_t* processed) {
  return guarded([&] {
    need(c, "config");
    std::vector<std::string> ids;
    for (size_t i = 0; i < n; ++i) {
      need(stacks, "stacks");
      need(stacks[i], "stack name");
      ids.emplace_back(stacks[i]);
    }
    std::optional<std::filesystem::path> ckpt;
    if (checkpoint && *checkpoint) ckpt = std::filesystem::path(checkpoint);
    set_processed(processed, pipeline::cmd_infer(c->cfg, ids, ckpt));
  });
}

vs_status vs_evaluate(const vs_config* c, int all_stacks, size_t* processed) {
  return guarded([&] {
    need(c, "config");
    set_processed(processed, pipeline::cmd_evaluate(c->cfg, all_stacks != 0));
  });
}

vs_status vs_report(const vs_config* c, size_t* processed) {
  return guarded([&] {
    need(c, "config");
    set_processed(processed, pipeline::cmd_report(c->cfg));
  });
}

vs_status vs_synth(const char* dir, int stacks, int test_stacks, int nz, int ny, int nx, uint64_t seed) {
  return guarded([&] {
    need(dir, "dir");
    if (nz < 1 || ny < 1 || nx < 1) throw ArgumentError("synthetic extent must be positive");
    pipeline::SynthOptions o;
    o.stacks = stacks;
    o.test_stacks = test_stacks;
    o.dims = Extent3{nz, ny, nx};
    o.seed = seed;
    pipeline::cmd_synth(dir, o);
  });
}

vs_status vs_volume_create(int nz, int ny, int nx, vs_volume** out) {
  return guarded([&] {
    need(out, "out");
    if (nz < 1 || ny < 1 || nx < 1) throw ArgumentError("volume extent must be positive");
    *out = new vs_volume{Volume<float>(Extent3{nz, ny, nx})};
  });
}

vs_status vs_volume_read_tiff(const char* path, vs_volume** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new vs_volume{stackio::read_stack(path).voxels};
  });
}

vs_status vs_volume_write_tiff(const vs_volume* v, const char* path, vs_sample_kind kind) {
  return guarded([&] {
    need(v, "volume");
    need(path, "path");
    Stack s;
    s.voxels = v->v;
    switch (kind) {
      case VS_U8: s.kind = SampleKind::u8; break;
      case VS_U16: s.kind = SampleKind::u16; break;
      case VS_F32: s.kind = SampleKind::f32; break;
      default: throw ArgumentError("unknown sample kind");
    }
    stackio::write_stack(path, s);
  });
}

void vs_volume_dims(const vs_volume* v, int* nz, int* ny, int* nx) {
  const Extent3 d = v ? v->v.dims() : Extent3{0, 0, 0};
  if (nz) *nz = d.z;
  if (ny) *ny = d.y;
  if (nx) *nx = d.x;
}

float* vs_volume_data(vs_volume* v) { return v ? v->v.values().data() : nullptr; }

void vs_volume_free(vs_volume* v) { delete v; }

vs_status vs_network_create(const char* preset, double width_scale, uint64_t seed, vs_network** out) {
  return guarded([&] {
    need(preset, "preset");
    need(out, "out");
    auto spec = netgraph::build_preset(preset, width_scale);
    auto params = netgraph::init_weights(spec, netgraph::InitScheme::relu_gain_uniform, seed);
    *out = new vs_network{std::move(spec), std::move(params)};
  });
}

vs_status vs_network_load(const char* checkpoint, vs_network** out) {
  return guarded([&] {
    need(checkpoint, "checkpoint");
    need(out, "out");
    auto params = netgraph::load_checkpoint(checkpoint);
    auto spec = netgraph::build_preset(params.preset, params.width_scale);
    netgraph::check_compatible(spec, params);
    *out = new vs_network{std::move(spec), std::move(params)};
  });
}

vs_status vs_network_save(const vs_network* n, const char* path) {
  return guarded([&] {
    need(n, "network");
    need(path, "path");
    netgraph::save_checkpoint(path, n->params);
  });
}

size_t vs_network_param_count(const vs_network* n) { return n ? n->params.param_count() : 0; }

int vs_network_arity(const vs_network* n) { return n ? n->spec.arity() : 0; }

vs_status vs_network_infer(const vs_network* n, const vs_volume* const* channels, size_t count, int fast,
                           vs_volume** prob) {
  return guarded([&] {
    need(n, "network");
    need(prob, "prob");
    std::vector<Volume<float>> ch;
    for (size_t i = 0; i < count; ++i) {
      need(channels, "channels");
      need(channels[i], "channel");
      ch.push_back(channels[i]->v);
    }
    if (static_cast<int>(ch.size()) != n->spec.arity())
      throw ArgumentError("network takes " + std::to_string(n->spec.arity()) + " channel(s), got " +
                          std::to_string(ch.size()));
    const auto conv = fast ? netgraph::ConvAlgorithm::fft : netgraph::ConvAlgorithm::direct;
    *prob = new vs_volume{netgraph::infer_dense(n->spec, n->params, ch, Extent3{8, 128, 128}, conv)};
  });
}

void vs_network_free(vs_network* n) { delete n; }

vs_status vs_lr_at(const char* schedule, uint64_t update, double* lr) {
  return guarded([&] {
    need(schedule, "schedule");
    need(lr, "lr");
    const std::string s(schedule);
    if (s == "VD2D") *lr = trainer::lr_at(trainer::LrSchedule::vd2d(), update);
    else if (s == "VD2D3D") *lr = trainer::lr_at(trainer::LrSchedule::vd2d3d(), update);
    else throw ArgumentError("unknown schedule '" + s + "'");
  });
}

}  // extern "C"
