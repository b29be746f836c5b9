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

#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vesselseg/vesselseg.h"

namespace {

struct Options {
  std::string config;
  std::string manifest;
  std::string preset;
  std::string out;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  int threads = -1;
  bool deterministic = false;
  bool fast = false;
};

int fail(vs_status s) {
  std::fprintf(stderr, "error: %s\n", vs_last_error());
  return static_cast<int>(s);
}

// Config file, then flags, then --set overrides.
vs_status make_config(const Options& o, vs_config** out) {
  vs_status s = o.config.empty() ? vs_config_default(out) : vs_config_load(o.config.c_str(), out);
  if (s != VS_OK) return s;
  auto set = [&](const char* key, const std::string& value) {
    if (s == VS_OK) s = vs_config_set(*out, key, value.c_str());
  };
  if (!o.manifest.empty()) set("manifest", "\"" + o.manifest + "\"");
  if (!o.preset.empty()) set("preset", "\"" + o.preset + "\"");
  if (!o.out.empty()) set("out", "\"" + o.out + "\"");
  if (o.seed >= 0) set("seed", std::to_string(o.seed));
  int threads = o.threads;
  if (threads < 0)
    if (const char* env = std::getenv("VESSELSEG_THREADS")) threads = std::atoi(env);
  if (threads >= 0) set("threads", std::to_string(threads));
  if (o.deterministic) set("engine", "deterministic");
  if (o.fast) set("engine", "fast");
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
      s = VS_ERR_CONFIG;
      break;
    }
    set(kv.substr(0, eq).c_str(), kv.substr(eq + 1));
  }
  if (s == VS_OK && threads >= 0) s = vs_set_threads(threads);
  if (s != VS_OK) {
    vs_config_free(*out);
    *out = nullptr;
  }
  return s;
}

void report(const char* what, size_t n) { std::printf("%s: %zu stack(s)\n", what, n); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vessel segmentation for two-photon microscopy stacks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", vs_version());
  Options o;
  app.add_option("--config", o.config, "JSON pipeline configuration")->check(CLI::ExistingFile);
  app.add_option("--manifest", o.manifest, "Dataset manifest");
  app.add_option("--preset", o.preset, "Network preset (VD2D, VD2D3D, ...)");
  app.add_option("--seed", o.seed, "Random seed")->check(CLI::NonNegativeNumber);
  app.add_option("--threads", o.threads, "Worker threads (0 = all); VESSELSEG_THREADS also works")
      ->check(CLI::NonNegativeNumber);
  auto* det = app.add_flag("--deterministic", o.deterministic, "Reproducible engine (direct convolution)");
  app.add_flag("--fast", o.fast, "FFT convolution engine")->excludes(det);
  app.add_option("--out", o.out, "Output directory");
  app.add_option("--set", o.overrides, "Config override key=value (repeatable), e.g. stage1.updates=2000");

  auto* pre = app.add_subcommand("preprocess", "Normalize, stabilize, denoise and notch-filter every stack");
  auto* train = app.add_subcommand("train", "Train VD2D, then the recursive stage for VD2D3D presets");
  auto* infer = app.add_subcommand("infer", "Probability maps plus threshold and CRF masks");
  std::vector<std::string> stacks;
  std::string checkpoint;
  infer->add_option("stacks", stacks, "Manifest ids or TIFF paths (default: all)");
  infer->add_option("--checkpoint", checkpoint, "Checkpoint (default: final checkpoint of the preset)");
  auto* eval = app.add_subcommand("evaluate", "Metrics of the test stacks against their labels");
  bool all = false;
  eval->add_flag("--all", all, "Every stack with inference outputs, not only Test");
  auto* rep = app.add_subcommand("report", "Summary tables and best/worst slice overlays");
  auto* syn = app.add_subcommand("synth", "Write a synthetic tube dataset with a manifest");
  std::string synth_dir;
  int synth_stacks = 4, synth_test = 1;
  std::vector<int> dims{8, 64, 64};
  std::uint64_t synth_seed = 0;
  syn->add_option("dir", synth_dir, "Output directory")->required();
  syn->add_option("--stacks", synth_stacks, "Number of stacks");
  syn->add_option("--test-stacks", synth_test, "How many of them are Test");
  syn->add_option("--dims", dims, "Extent z y x")->expected(3);
  syn->add_option("--synth-seed", synth_seed, "Seed of the generated data");
  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  auto* lr = app.add_subcommand("lr", "Learning rate of a schedule at an update index");
  std::uint64_t update = 0;
  std::string schedule = "VD2D";
  lr->add_option("update", update, "Update index")->required();
  lr->add_option("--schedule", schedule, "VD2D or VD2D3D");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(VS_ERR_CONFIG);
  }

  if (syn->parsed()) {
    const vs_status s = vs_synth(synth_dir.c_str(), synth_stacks, synth_test, dims[0], dims[1], dims[2], synth_seed);
    if (s != VS_OK) return fail(s);
    std::printf("%s/manifest.txt\n", synth_dir.c_str());
    return 0;
  }
  if (lr->parsed()) {
    double v = 0;
    const vs_status s = vs_lr_at(schedule.c_str(), update, &v);
    if (s != VS_OK) return fail(s);
    std::printf("%.9g\n", v);
    return 0;
  }

  vs_config* cfg = nullptr;
  vs_status s = make_config(o, &cfg);
  if (s != VS_OK) return fail(s);
  size_t n = 0;
  if (show->parsed()) {
    size_t need = 0;
    s = vs_config_to_json(cfg, nullptr, 0, &need);
    std::string buf(need, '\0');
    if (s == VS_OK) s = vs_config_to_json(cfg, buf.data(), buf.size(), &need);
    if (s == VS_OK) std::printf("%s\n", buf.c_str());
  } else if (pre->parsed()) {
    if ((s = vs_preprocess(cfg, &n)) == VS_OK) report("preprocessed", n);
  } else if (train->parsed()) {
    if ((s = vs_train(cfg, &n)) == VS_OK) report("training data", n);
  } else if (infer->parsed()) {
    std::vector<const char*> ptrs;
    for (const auto& st : stacks) ptrs.push_back(st.c_str());
    if ((s = vs_infer(cfg, ptrs.data(), ptrs.size(), checkpoint.empty() ? nullptr : checkpoint.c_str(), &n)) == VS_OK)
      report("inferred", n);
  } else if (eval->parsed()) {
    if ((s = vs_evaluate(cfg, all ? 1 : 0, &n)) == VS_OK) report("evaluated", n);
  } else if (rep->parsed()) {
    if ((s = vs_report(cfg, &n)) == VS_OK) report("reported", n);
  }
  vs_config_free(cfg);
  return s == VS_OK ? 0 : fail(s);
}
