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

#include "vesselseg/pipeline.hpp"

#include <fcntl.h>
#include <omp.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "vesselseg/log.hpp"
#include "vesselseg/synth.hpp"

namespace vesselseg::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

EngineMode parse_engine_mode(const std::string& s) {
  if (s == "deterministic") return EngineMode::deterministic;
  if (s == "fast") return EngineMode::fast;
  throw ConfigError("unknown engine mode '" + s + "' (deterministic or fast)");
}

std::string engine_mode_name(EngineMode m) { return m == EngineMode::fast ? "fast" : "deterministic"; }

namespace {

metrics::AvdMode parse_avd(const std::string& s) {
  if (s == "max") return metrics::AvdMode::max;
  if (s == "mean") return metrics::AvdMode::mean;
  throw ConfigError("unknown AVD mode '" + s + "' (max or mean)");
}

std::string avd_name(metrics::AvdMode m) { return m == metrics::AvdMode::mean ? "mean" : "max"; }

// Walks one JSON object, remembering which keys were consumed so leftovers
// can be reported.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type (" + it->dump() + ")");
    }
  }

  const json* object(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

  const std::string& where() const { return where_; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

void read_stage(const json& j, const std::string& where, trainer::TrainConfig& t) {
  Reader r(j, where);
  r.get("updates", t.updates);
  if (const json* p = r.object("patch")) {
    std::vector<int> v;
    try {
      v = p->get<std::vector<int>>();
    } catch (const json::exception&) {
    }
    if (v.size() != 3) throw ConfigError(where + ".patch: expected [z, y, x]");
    t.patch_out = Extent3{v[0], v[1], v[2]};
  }
  r.get("momentum", t.momentum);
  r.get("dropout", t.dropout_p);
  r.get("augment", t.augment);
  r.get("rebalance", t.rebalance);
  r.get("batch", t.batch);
  r.get("mirror_pad", t.mirror_pad);
  r.get("log_every", t.log_every);
  r.get("monitor_patches", t.monitor_patches);
  r.get("checkpoint_every", t.checkpoint_every);
  std::string init;
  r.get("init", init);
  if (!init.empty()) t.init = netgraph::parse_init_scheme(init);
  if (const json* lj = r.object("lr")) {
    Reader l(*lj, where + ".lr");
    l.get("initial", t.lr.initial_lr);
    l.get("anneal_factor", t.lr.anneal_factor);
    l.get("anneal_every", t.lr.anneal_every);
    if (const json* ra = l.object("reset_at")) {
      if (ra->is_null()) t.lr.reset_at.reset();
      else if (ra->is_number_unsigned()) t.lr.reset_at = ra->get<std::uint64_t>();
      else throw ConfigError(where + ".lr.reset_at: expected an update index or null");
    }
    l.get("reset_lr", t.lr.reset_lr);
    l.get("reset_every", t.lr.reset_every);
    l.finish();
  }
  r.finish();
}

json stage_json(const trainer::TrainConfig& t) {
  json lr = {{"initial", t.lr.initial_lr},
             {"anneal_factor", t.lr.anneal_factor},
             {"anneal_every", t.lr.anneal_every},
             {"reset_lr", t.lr.reset_lr},
             {"reset_every", t.lr.reset_every}};
  lr["reset_at"] = t.lr.reset_at ? json(*t.lr.reset_at) : json(nullptr);
  return {{"updates", t.updates},
          {"patch", {t.patch_out.z, t.patch_out.y, t.patch_out.x}},
          {"momentum", t.momentum},
          {"dropout", t.dropout_p},
          {"augment", t.augment},
          {"rebalance", t.rebalance},
          {"batch", t.batch},
          {"mirror_pad", t.mirror_pad},
          {"init", netgraph::init_scheme_name(t.init)},
          {"log_every", t.log_every},
          {"monitor_patches", t.monitor_patches},
          {"checkpoint_every", t.checkpoint_every},
          {"lr", lr}};
}

void apply_threads(const PipelineConfig& c) {
  if (c.threads > 0) omp_set_num_threads(c.threads);
}

netgraph::ConvAlgorithm conv_of(const PipelineConfig& c) {
  return c.engine == EngineMode::fast ? netgraph::ConvAlgorithm::fft : netgraph::ConvAlgorithm::direct;
}

// Collects per-stack failures; rethrows with the first failure's category.
class Failures {
 public:
  void add(const std::string& id, const std::exception& e) {
    const auto* err = dynamic_cast<const Error*>(&e);
    if (!code_) code_ = err ? err->code() : ErrorCode::internal;
    summary_.failed.push_back(id + ": " + e.what());
  }
  void ok(const std::string& id) { summary_.processed.push_back(id); }

  CommandSummary finish(const std::string& command) {
    if (!summary_.failed.empty()) {
      std::string msg = command + " failed for " + std::to_string(summary_.failed.size()) + " stack(s):";
      for (const auto& f : summary_.failed) msg += "\n  " + f;
      throw Error(*code_, msg);
    }
    return summary_;
  }

 private:
  CommandSummary summary_;
  std::optional<ErrorCode> code_;
};

Stack float_stack(Volume<float> v, const VoxelSize& spacing) {
  Stack s;
  s.voxels = std::move(v);
  s.kind = SampleKind::f32;
  s.spacing = spacing;
  s.has_spacing = true;
  return s;
}

Volume<float> read_prepped(const Layout& l, const std::string& id) {
  const fs::path p = l.prep_image(id);
  if (!fs::exists(p)) throw DataError("no preprocessed stack at " + p.string() + "; run preprocess first");
  return stackio::read_stack(p).voxels;
}

netgraph::ParamStore load_ckpt(const fs::path& p) {
  if (!fs::exists(p)) throw DataError("checkpoint " + p.string() + " not found; run train first");
  return netgraph::load_checkpoint(p.string());
}

constexpr Extent3 kInferTile{8, 128, 128};

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  const auto ids = netgraph::preset_ids();
  if (std::find(ids.begin(), ids.end(), preset) == ids.end()) throw ConfigError("unknown preset '" + preset + "'");
  if (!(width_scale > 0.0 && width_scale <= 1.0)) throw ConfigError("width_scale must be in (0, 1]");
  stage1.validate();
  stage2.validate();
  crf.validate();
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must be in (0, 1)");
  if (!(evaluate.hd_quantile > 0.0 && evaluate.hd_quantile <= 1.0))
    throw ConfigError("evaluate.hd_quantile must be in (0, 1]");
  if (threads < 0) throw ConfigError("threads must be >= 0");
  if (!(prep.sigma_xy >= 0.0 && prep.sigma_z >= 0.0)) throw ConfigError("denoiser sigmas must be >= 0");
  if (!(prep.normalize.lo_pct >= 0.0 && prep.normalize.lo_pct < prep.normalize.hi_pct &&
        prep.normalize.hi_pct <= 100.0))
    throw ConfigError("normalize percentiles must satisfy 0 <= lo < hi <= 100");
  for (const auto& [id, n] : prep.notches) {
    try {
      n.validate();
    } catch (const Error& e) {
      throw ConfigError("notches for stack " + id + ": " + e.what());
    }
  }
  if (out.empty()) throw ConfigError("output directory is empty");
}

trainer::TrainConfig PipelineConfig::resolved_stage(int stage) const {
  if (stage != 1 && stage != 2) throw ArgumentError("stage must be 1 or 2");
  trainer::TrainConfig t = stage == 1 ? stage1 : stage2;
  t.stage = stage == 1 ? "stage1" : "stage2";
  t.seed = mix_seed(seed, static_cast<std::uint64_t>(stage));
  t.conv = conv_of(*this);
  const Layout l = layout(*this);
  t.checkpoint_dir = l.train_dir().string();
  t.log_path = l.train_log(stage).string();
  return t;
}

PipelineConfig parse_config(const std::string& json_text, const fs::path& base) {
  json j;
  try {
    j = json::parse(json_text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c;
  Reader r(j, "config");
  std::string s;
  if (r.get("manifest", s), !s.empty()) c.manifest = resolve(base, s);
  r.get("preset", c.preset);
  r.get("width_scale", c.width_scale);
  r.get("seed", c.seed);
  s.clear();
  if (r.get("engine", s), !s.empty()) c.engine = parse_engine_mode(s);
  r.get("threads", c.threads);
  s.clear();
  if (r.get("out", s), !s.empty()) c.out = resolve(base, s);
  r.get("threshold", c.threshold);
  if (const json* p = r.object("prep")) {
    Reader pr(*p, "prep");
    s.clear();
    if (pr.get("normalize", s), !s.empty()) c.prep.normalize.mode = prep::parse_normalize_mode(s);
    pr.get("lo_pct", c.prep.normalize.lo_pct);
    pr.get("hi_pct", c.prep.normalize.hi_pct);
    pr.get("denoise", c.prep.denoise);
    pr.get("sigma_xy", c.prep.sigma_xy);
    pr.get("sigma_z", c.prep.sigma_z);
    s.clear();
    if (pr.get("inverse", s), !s.empty()) c.prep.inverse = prep::parse_inverse_kind(s);
    if (const json* n = pr.object("notches")) {
      if (!n->is_object()) throw ConfigError("prep.notches: expected an object of id -> \"fy,fx,r;...\"");
      for (auto it = n->begin(); it != n->end(); ++it) {
        if (!it->is_string()) throw ConfigError("prep.notches." + it.key() + ": expected a string");
        c.prep.notches[it.key()] = prep::parse_notch_spec(it->get<std::string>());
      }
    }
    pr.finish();
  }
  if (const json* st = r.object("stage1")) read_stage(*st, "stage1", c.stage1);
  if (const json* st = r.object("stage2")) read_stage(*st, "stage2", c.stage2);
  if (const json* cj = r.object("crf")) {
    Reader cr(*cj, "crf");
    s.clear();
    if (cr.get("mode", s), !s.empty()) c.crf_mode = postproc::parse_crf_mode(s);
    cr.get("unary_weight", c.crf.unary_weight);
    cr.get("w_s", c.crf.w_s);
    cr.get("theta_s", c.crf.theta_s);
    cr.get("w_a", c.crf.w_a);
    cr.get("theta_a", c.crf.theta_a);
    cr.get("theta_i", c.crf.theta_i);
    cr.get("iterations", c.crf.iterations);
    cr.get("grid_spacing", c.crf.grid_spacing);
    cr.finish();
  }
  if (const json* ej = r.object("evaluate")) {
    Reader er(*ej, "evaluate");
    er.get("hd_quantile", c.evaluate.hd_quantile);
    s.clear();
    if (er.get("avd", s), !s.empty()) c.evaluate.distance.avd = parse_avd(s);
    er.get("surface", c.evaluate.distance.surface);
    er.get("use_voxel_size", c.use_voxel_size);
    er.finish();
  }
  r.finish();
  c.validate();
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

std::string config_to_json(const PipelineConfig& c) {
  json notches = json::object();
  for (const auto& [id, n] : c.prep.notches) notches[id] = prep::format_notch_spec(n);
  const json j = {
      {"manifest", c.manifest.string()},
      {"preset", c.preset},
      {"width_scale", c.width_scale},
      {"seed", c.seed},
      {"engine", engine_mode_name(c.engine)},
      {"threads", c.threads},
      {"out", c.out.string()},
      {"threshold", c.threshold},
      {"prep",
       {{"normalize", c.prep.normalize.mode == prep::NormalizeMode::percentile ? "percentile" : "affine"},
        {"lo_pct", c.prep.normalize.lo_pct},
        {"hi_pct", c.prep.normalize.hi_pct},
        {"denoise", c.prep.denoise},
        {"sigma_xy", c.prep.sigma_xy},
        {"sigma_z", c.prep.sigma_z},
        {"inverse", prep::inverse_kind_name(c.prep.inverse)},
        {"notches", notches}}},
      {"stage1", stage_json(c.stage1)},
      {"stage2", stage_json(c.stage2)},
      {"crf",
       {{"mode", postproc::crf_mode_name(c.crf_mode)},
        {"unary_weight", c.crf.unary_weight},
        {"w_s", c.crf.w_s},
        {"theta_s", c.crf.theta_s},
        {"w_a", c.crf.w_a},
        {"theta_a", c.crf.theta_a},
        {"theta_i", c.crf.theta_i},
        {"iterations", c.crf.iterations},
        {"grid_spacing", c.crf.grid_spacing}}},
      {"evaluate",
       {{"hd_quantile", c.evaluate.hd_quantile},
        {"avd", avd_name(c.evaluate.distance.avd)},
        {"surface", c.evaluate.distance.surface},
        {"use_voxel_size", c.use_voxel_size}}},
  };
  return j.dump(2);
}

void apply_override(PipelineConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), value = assignment.substr(eq + 1);
  json j = json::parse(config_to_json(c));
  json::json_pointer ptr;
  std::istringstream ks(key);
  for (std::string part; std::getline(ks, part, '.');) ptr /= part;
  if (ptr.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
  json v;
  try {
    v = json::parse(value);
  } catch (const json::parse_error&) {
    v = value;
  }
  // The notch map is keyed by stack id, so new entries are allowed there.
  if (!j.contains(ptr) && ptr.parent_pointer() != json::json_pointer("/prep/notches"))
    throw ConfigError("unknown config key '" + key + "'");
  j[ptr] = v;
  c = parse_config(j.dump(), fs::current_path());
}

// ---------------------------------------------------------------------------
// Output directory

OutputLock::OutputLock(const fs::path& dir) {
  fs::create_directories(dir);
  file_ = dir / ".vesselseg.lock";
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      return;
    }
    if (errno != EEXIST) throw DataError("cannot create lock " + file_.string() + ": " + std::strerror(errno));
    long holder = 0;
    std::ifstream(file_) >> holder;
    if (holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno == EPERM))
      throw ConfigError("output directory " + dir.string() + " is locked by process " + std::to_string(holder));
    warn("removing stale lock " + file_.string());
    std::error_code ec;
    fs::remove(file_, ec);
  }
  throw ConfigError("cannot lock output directory " + dir.string());
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(file_, ec);
}

fs::path Layout::prep_image(const std::string& id) const { return root / "prep" / (id + ".tif"); }
fs::path Layout::prep_sidecar(const std::string& id) const { return root / "prep" / (id + ".json"); }
fs::path Layout::train_dir() const { return root / "train"; }
fs::path Layout::train_log(int stage) const { return train_dir() / ("stage" + std::to_string(stage) + "_log.csv"); }
fs::path Layout::probability(const std::string& id) const { return root / "infer" / (id + "_prob.tif"); }
fs::path Layout::mask(const std::string& id, const std::string& method) const {
  return root / "infer" / (id + "_mask_" + method + ".tif");
}
fs::path Layout::metrics_csv(const std::string& method) const { return root / "eval" / ("metrics_" + method + ".csv"); }
fs::path Layout::metrics_table(const std::string& method) const {
  return root / "eval" / ("metrics_" + method + ".txt");
}
fs::path Layout::report_dir() const { return root / "report"; }

Layout layout(const PipelineConfig& c) { return Layout{c.out}; }

// ---------------------------------------------------------------------------
// Commands

PrepResult preprocess_stack(const Volume<float>& raw, const PrepConfig& p, const prep::NotchSpec& notch) {
  PrepResult r;
  r.normalized = prep::normalize(raw, p.normalize);
  r.voxels = std::move(r.normalized.voxels);
  r.normalized.voxels = Volume<float>();
  if (p.denoise) r.voxels = prep::denoise_stabilized(r.voxels, prep::gaussian_denoiser(p.sigma_xy, p.sigma_z), p.inverse);
  if (!notch.empty()) r.voxels = prep::notch_filter(r.voxels, notch);
  return r;
}

CommandSummary cmd_preprocess(const PipelineConfig& c) {
  c.validate();
  apply_threads(c);
  const auto m = stackio::parse_manifest(c.manifest);
  const Layout l = layout(c);
  OutputLock lock(c.out);
  fs::create_directories(l.root / "prep");
  Failures f;
  for (const auto& e : m.entries) {
    try {
      const Stack raw = stackio::read_stack(m.image_path(e));
      const auto it = c.prep.notches.find(e.id);
      const prep::NotchSpec notch = it == c.prep.notches.end() ? prep::NotchSpec{} : it->second;
      PrepResult r = preprocess_stack(raw.voxels, c.prep, notch);
      const Extent3 d = r.voxels.dims();
      stackio::write_stack(l.prep_image(e.id), float_stack(std::move(r.voxels), e.voxel));
      const json side = {
          {"id", e.id},
          {"input", m.image_path(e).string()},
          {"output", l.prep_image(e.id).string()},
          {"dims", {d.z, d.y, d.x}},
          {"voxel_size", {e.voxel.x, e.voxel.y, e.voxel.z}},
          {"normalize",
           {{"mode", c.prep.normalize.mode == prep::NormalizeMode::percentile ? "percentile" : "affine"},
            {"lo_pct", c.prep.normalize.lo_pct},
            {"hi_pct", c.prep.normalize.hi_pct},
            {"lo", r.normalized.lo},
            {"hi", r.normalized.hi},
            {"constant", r.normalized.constant}}},
          {"stabilize", c.prep.denoise},
          {"denoiser", {{"kind", "gaussian"}, {"sigma_xy", c.prep.sigma_xy}, {"sigma_z", c.prep.sigma_z}}},
          {"inverse", prep::inverse_kind_name(c.prep.inverse)},
          {"notches", prep::format_notch_spec(notch)},
      };
      std::ofstream(l.prep_sidecar(e.id)) << side.dump(2) << '\n';
      f.ok(e.id);
    } catch (const std::exception& ex) {
      f.add(e.id, ex);
    }
  }
  return f.finish("preprocess");
}

CommandSummary cmd_train(const PipelineConfig& c) {
  c.validate();
  apply_threads(c);
  const auto m = stackio::parse_manifest(c.manifest);
  const Layout l = layout(c);
  std::vector<trainer::TrainItem> items;
  Failures f;
  for (const auto& e : m.entries) {
    try {
      trainer::TrainItem t;
      t.id = e.id;
      t.channels.push_back(read_prepped(l, e.id));
      t.labels = stackio::read_labels(m.label_path(e));
      if (!(t.labels.dims() == t.channels[0].dims()))
        throw DataError("labels and image differ in extent");
      t.test = e.usage == stackio::Usage::test;
      items.push_back(std::move(t));
      f.ok(e.id);
    } catch (const std::exception& ex) {
      f.add(e.id, ex);
    }
  }
  CommandSummary summary = f.finish("train");
  OutputLock lock(c.out);
  fs::create_directories(l.train_dir());

  auto run_stage = [&](int stage, const netgraph::NetworkSpec& spec, const std::vector<trainer::TrainItem>& data,
                       auto&& fresh) {
    const trainer::TrainConfig tc = c.resolved_stage(stage);
    const fs::path final_ckpt = l.train_dir() / (tc.stage + "_final.ckpt");
    const fs::path last_ckpt = l.train_dir() / (tc.stage + "_last.ckpt");
    netgraph::ParamStore p0;
    if (fs::exists(final_ckpt)) p0 = netgraph::load_checkpoint(final_ckpt.string());
    else if (fs::exists(last_ckpt)) p0 = netgraph::load_checkpoint(last_ckpt.string());
    else p0 = fresh();
    if (p0.update >= tc.updates) return p0;
    try {
      trainer::train_stage(spec, p0, data, tc);
    } catch (const Error& e) {
      throw Error(e.code(), tc.stage + ": " + e.what());
    }
    // Later stages start from the stored (float32) weights so a resumed run
    // sees exactly what an uninterrupted one does.
    return netgraph::load_checkpoint(final_ckpt.string());
  };

  const netgraph::NetworkSpec spec1 = netgraph::build_preset("VD2D", c.width_scale);
  const netgraph::ParamStore vd2d = run_stage(1, spec1, items, [&] {
    return netgraph::init_weights(spec1, c.stage1.init, c.resolved_stage(1).seed);
  });
  if (c.preset == "VD2D") return summary;
  if (!netgraph::is_vd2d3d_family(c.preset))
    throw ConfigError("preset '" + c.preset + "' cannot be trained recursively");

  std::vector<trainer::TrainItem> items2 = items;
  for (auto& t : items2)
    t.channels.push_back(netgraph::infer_dense(spec1, vd2d, t.channels, kInferTile, conv_of(c)));
  const netgraph::NetworkSpec spec2 = netgraph::build_preset(c.preset, c.width_scale);
  run_stage(2, spec2, items2, [&] {
    return netgraph::transfer_vd2d_into(vd2d, spec2, c.resolved_stage(2).seed, c.stage2.init);
  });
  return summary;
}

CommandSummary cmd_infer(const PipelineConfig& c, const std::vector<std::string>& stacks,
                         const std::optional<fs::path>& checkpoint) {
  c.validate();
  apply_threads(c);
  const Layout l = layout(c);
  const bool recursive = netgraph::is_vd2d3d_family(c.preset);
  const fs::path ckpt_path =
      checkpoint ? *checkpoint : l.train_dir() / (recursive ? "stage2_final.ckpt" : "stage1_final.ckpt");
  const netgraph::ParamStore params = load_ckpt(ckpt_path);
  const netgraph::NetworkSpec spec = netgraph::build_preset(params.preset, params.width_scale);
  netgraph::check_compatible(spec, params);
  std::optional<netgraph::ParamStore> first;
  std::optional<netgraph::NetworkSpec> first_spec;
  if (spec.arity() == 2) {
    const fs::path dir = ckpt_path.has_parent_path() ? ckpt_path.parent_path() : fs::path(".");
    first = load_ckpt(dir / "stage1_final.ckpt");
    first_spec = netgraph::build_preset(first->preset, first->width_scale);
    netgraph::check_compatible(*first_spec, *first);
  }

  std::optional<stackio::DatasetManifest> m;
  if (!c.manifest.empty()) m = stackio::parse_manifest(c.manifest);
  std::vector<std::string> targets = stacks;
  if (targets.empty()) {
    if (!m) throw ConfigError("no manifest configured and no stacks given");
    for (const auto& e : m->entries) targets.push_back(e.id);
  }

  OutputLock lock(c.out);
  fs::create_directories(l.root / "infer");
  Failures f;
  for (const auto& target : targets) {
    std::string id = target;
    try {
      Volume<float> image;
      VoxelSize spacing{1, 1, 1};
      const stackio::ManifestEntry* e = m ? m->find(target) : nullptr;
      if (e) {
        image = read_prepped(l, e->id);
        spacing = e->voxel;
      } else if (fs::exists(target)) {
        id = fs::path(target).stem().string();
        const Stack raw = stackio::read_stack(target);
        if (raw.has_spacing) spacing = raw.spacing;
        image = preprocess_stack(raw.voxels, c.prep, {}).voxels;
      } else {
        throw DataError("'" + target + "' is neither a manifest id nor a file");
      }
      std::vector<Volume<float>> channels{image};
      if (first) channels.push_back(netgraph::infer_dense(*first_spec, *first, channels, kInferTile, conv_of(c)));
      const ProbMap prob = netgraph::infer_dense(spec, params, channels, kInferTile, conv_of(c));
      stackio::write_stack(l.probability(id), float_stack(prob, spacing));
      stackio::write_labels(l.mask(id, "threshold"), postproc::threshold(prob, c.threshold), spacing);
      stackio::write_labels(l.mask(id, "crf"), postproc::apply_stack(prob, image, c.crf, c.crf_mode), spacing);
      f.ok(id);
    } catch (const std::exception& ex) {
      f.add(id, ex);
    }
  }
  return f.finish("infer");
}

namespace {

const std::vector<std::string> kMethods{"threshold", "crf"};

metrics::MetricsReport read_metrics_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot read " + p.string() + "; run evaluate first");
  std::string line;
  std::getline(in, line);
  metrics::MetricsReport r;
  if (line.find("AVGDIST_MEANDIR") != std::string::npos) r.options.distance.avd = metrics::AvdMode::mean;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells.size() != 7) throw DataError(p.string() + ": malformed row '" + line + "'");
    if (cells[0] == "mean" || cells[0] == "sd") continue;
    auto num = [&](const std::string& s) {
      if (s.empty() || s == "nan" || s == "NA") return std::numeric_limits<double>::quiet_NaN();
      try {
        return std::stod(s);
      } catch (const std::exception&) {
        throw DataError(p.string() + ": bad value '" + s + "'");
      }
    };
    metrics::StackMetrics s;
    s.id = cells[0];
    s.auc = num(cells[1]);
    s.adjrind = num(cells[2]);
    s.mutinf = num(cells[3]);
    s.hdrfdst = num(cells[4]);
    s.avgdist = num(cells[5]);
    s.mahlnbs = num(cells[6]);
    r.stacks.push_back(s);
  }
  return r;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L)); }

// input | label | probability | mask, one z-slice, 4 px separators.
void write_overlay(const fs::path& p, const Volume<float>& image, const LabelMask& truth, const ProbMap& prob,
                   const LabelMask& mask, int z) {
  const Extent3 d = image.dims();
  constexpr int gap = 4;
  Stack s;
  s.kind = SampleKind::u8;
  s.voxels = Volume<float>(Extent3{1, d.y, 4 * d.x + 3 * gap}, 255.f);
  for (int y = 0; y < d.y; ++y)
    for (int x = 0; x < d.x; ++x) {
      s.voxels(0, y, x) = to_byte(image(z, y, x));
      s.voxels(0, y, d.x + gap + x) = truth(z, y, x) ? 255.f : 0.f;
      s.voxels(0, y, 2 * (d.x + gap) + x) = to_byte(prob(z, y, x));
      s.voxels(0, y, 3 * (d.x + gap) + x) = mask(z, y, x) ? 255.f : 0.f;
    }
  stackio::write_stack(p, s);
}

}  // namespace

std::vector<double> slice_avd(const LabelMask& a, const LabelMask& b, const metrics::DistanceOptions& o) {
  if (!(a.dims() == b.dims())) throw ShapeError("slice_avd: masks differ in extent");
  const Extent3 d = a.dims();
  std::vector<double> out(static_cast<std::size_t>(d.z), std::numeric_limits<double>::quiet_NaN());
  for (int z = 0; z < d.z; ++z) {
    const LabelMask sa = crop(a, Extent3{z, 0, 0}, Extent3{1, d.y, d.x});
    const LabelMask sb = crop(b, Extent3{z, 0, 0}, Extent3{1, d.y, d.x});
    try {
      out[static_cast<std::size_t>(z)] = metrics::average_hausdorff(sa, sb, o);
    } catch (const MetricUndefined&) {
    }
  }
  return out;
}

CommandSummary cmd_evaluate(const PipelineConfig& c, bool all) {
  c.validate();
  apply_threads(c);
  const auto m = stackio::parse_manifest(c.manifest);
  const Layout l = layout(c);
  std::map<std::string, metrics::MetricsReport> reports;
  for (const auto& method : kMethods) {
    reports[method].options = c.evaluate;
    if (c.use_voxel_size) reports[method].options.distance.spacing = VoxelSize{};
  }
  Failures f;
  for (const auto& e : m.entries) {
    if (!all && e.usage != stackio::Usage::test) continue;
    if (all && !fs::exists(l.probability(e.id))) continue;
    try {
      if (!fs::exists(l.probability(e.id)))
        throw DataError("no probability map at " + l.probability(e.id).string() + "; run infer first");
      const ProbMap prob = stackio::read_stack(l.probability(e.id)).voxels;
      const LabelMask truth = stackio::read_labels(m.label_path(e));
      if (!(prob.dims() == truth.dims())) throw DataError("probability map and labels are misaligned");
      metrics::EvaluateOptions o = c.evaluate;
      if (c.use_voxel_size) o.distance.spacing = e.voxel;
      for (const auto& method : kMethods) {
        const LabelMask mask = stackio::read_labels(l.mask(e.id, method));
        if (!(mask.dims() == truth.dims())) throw DataError(method + " mask and labels are misaligned");
        reports[method].stacks.push_back(metrics::evaluate(e.id, prob, mask, truth, o));
      }
      f.ok(e.id);
    } catch (const std::exception& ex) {
      f.add(e.id, ex);
    }
  }
  CommandSummary s = f.finish("evaluate");
  if (s.processed.empty()) throw DataError("no stacks to evaluate");
  OutputLock lock(c.out);
  fs::create_directories(l.root / "eval");
  for (const auto& [method, r] : reports) {
    std::ofstream csv(l.metrics_csv(method));
    r.write_csv(csv);
    std::ofstream table(l.metrics_table(method));
    r.write_table(table);
  }
  return s;
}

CommandSummary cmd_report(const PipelineConfig& c) {
  c.validate();
  apply_threads(c);
  const Layout l = layout(c);
  std::optional<stackio::DatasetManifest> m;
  if (!c.manifest.empty()) m = stackio::parse_manifest(c.manifest);
  std::map<std::string, metrics::MetricsReport> reports;
  for (const auto& method : kMethods) {
    reports[method] = read_metrics_csv(l.metrics_csv(method));
    reports[method].options.hd_quantile = c.evaluate.hd_quantile;
    reports[method].options.distance.surface = c.evaluate.distance.surface;
    if (c.use_voxel_size) reports[method].options.distance.spacing = VoxelSize{};
  }

  OutputLock lock(c.out);
  fs::create_directories(l.report_dir());
  {
    std::ofstream os(l.report_dir() / "summary.txt");
    for (const auto& method : kMethods) {
      os << (method == "crf" ? "Dense CRF" : "Threshold " + std::to_string(c.threshold).substr(0, 4)) << '\n';
      reports[method].write_table(os);
      os << '\n';
    }
  }

  Failures f;
  std::ofstream slices(l.report_dir() / "slices.csv");
  slices << "id,method,best_z,best_avd,worst_z,worst_avd\n" << std::setprecision(9);
  for (const auto& s : reports["crf"].stacks) {
    try {
      const stackio::ManifestEntry* e = m ? m->find(s.id) : nullptr;
      if (!e) throw DataError("stack is not in the manifest");
      const Volume<float> image = read_prepped(l, s.id);
      const LabelMask truth = stackio::read_labels(m->label_path(*e));
      const ProbMap prob = stackio::read_stack(l.probability(s.id)).voxels;
      metrics::DistanceOptions o = c.evaluate.distance;
      if (c.use_voxel_size) o.spacing = e->voxel;
      for (const auto& method : kMethods) {
        const LabelMask mask = stackio::read_labels(l.mask(s.id, method));
        const auto avd = slice_avd(mask, truth, o);
        int best = -1, worst = -1;
        for (int z = 0; z < static_cast<int>(avd.size()); ++z) {
          if (std::isnan(avd[z])) continue;
          if (best < 0 || avd[z] < avd[best]) best = z;
          if (worst < 0 || avd[z] > avd[worst]) worst = z;
        }
        if (best < 0) {
          slices << s.id << ',' << method << ",,,,\n";
          continue;
        }
        slices << s.id << ',' << method << ',' << best << ',' << avd[best] << ',' << worst << ',' << avd[worst]
               << '\n';
        write_overlay(l.report_dir() / (s.id + "_" + method + "_best_z" + std::to_string(best) + ".tif"), image,
                      truth, prob, mask, best);
        write_overlay(l.report_dir() / (s.id + "_" + method + "_worst_z" + std::to_string(worst) + ".tif"), image,
                      truth, prob, mask, worst);
      }
      f.ok(s.id);
    } catch (const std::exception& ex) {
      f.add(s.id, ex);
    }
  }
  return f.finish("report");
}

fs::path cmd_synth(const fs::path& dir, const SynthOptions& o) {
  if (o.stacks < 1 || o.test_stacks < 0 || o.test_stacks >= o.stacks)
    throw ArgumentError("synthetic dataset needs at least one training stack");
  fs::create_directories(dir / "stacks");
  fs::create_directories(dir / "labels");
  std::ostringstream manifest;
  manifest << "# synthetic tube stacks\nroot .\n" << std::fixed;
  synth::TubeParams tp;
  tp.dims = o.dims;
  for (int i = 1; i <= o.stacks; ++i) {
    const auto t = synth::tube_volume(tp, mix_seed(o.seed, static_cast<std::uint64_t>(i)));
    Stack img = t.image;
    img.kind = SampleKind::u16;
    for (float& v : img.voxels.values()) v = std::max(0.f, v * 1000.f);
    const std::string id = std::to_string(i);
    stackio::write_stack(dir / "stacks" / (id + ".tif"), img);
    stackio::write_labels(dir / "labels" / (id + ".tif"), t.labels, t.image.spacing);
    const bool test = i > o.stacks - o.test_stacks;
    manifest << id << " stacks/" << id << ".tif labels/" << id << ".tif " << std::setprecision(3) << t.image.spacing.x
             << 'x' << t.image.spacing.y << 'x' << t.image.spacing.z << " cortex " << (test ? "Test" : "Train") << " vessel="
             << std::setprecision(1) << 100.0 * stackio::label_stats(t.labels) << " dims=" << o.dims.x << 'x'
             << o.dims.y << 'x' << o.dims.z << '\n';
  }
  const fs::path path = dir / "manifest.txt";
  std::ofstream(path) << manifest.str();
  return path;
}

}  // namespace vesselseg::pipeline
