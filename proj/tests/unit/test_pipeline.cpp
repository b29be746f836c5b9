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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "vesselseg/error.hpp"
#include "vesselseg/pipeline.hpp"
#include "vesselseg/synth.hpp"

using namespace vesselseg;
using namespace vesselseg::pipeline;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("vs_pipeline_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PipelineConfig tiny_config(const fs::path& dir) {
  SynthOptions so;
  so.stacks = 3;
  so.test_stacks = 1;
  so.dims = Extent3{3, 24, 24};
  so.seed = 2;
  PipelineConfig c;
  c.manifest = cmd_synth(dir / "data", so);
  c.out = dir / "out";
  c.preset = "VD2D";
  c.width_scale = 0.1;
  c.stage1.updates = 6;
  c.stage1.patch_out = Extent3{1, 6, 6};
  c.stage1.mirror_pad = true;
  c.stage1.lr.initial_lr = 1e-5;
  c.stage1.log_every = 3;
  c.stage1.monitor_patches = 1;
  c.stage1.checkpoint_every = 3;
  return c;
}

}  // namespace

TEST_CASE("config parsing") {
  const PipelineConfig d = parse_config("{}", "/base");
  CHECK(d.preset == "VD2D3D");
  CHECK(d.stage1.updates == 60000);
  CHECK(d.stage2.lr.reset_at == 15000u);
  CHECK(d.engine == EngineMode::deterministic);

  const PipelineConfig c = parse_config(R"({
    // comments are allowed
    "manifest": "m.txt", "out": "/abs/out", "preset": "VD2D", "width_scale": 0.5, "seed": 9,
    "stage1": {"updates": 100, "patch": [1, 10, 12], "lr": {"initial": 0.001}, "init": "fan_in_uniform"},
    "stage2": {"lr": {"reset_at": null}},
    "prep": {"notches": {"4": "0.1,0.2,0.01"}, "inverse": "algebraic"},
    "crf": {"mode": "exact", "w_a": 4},
    "evaluate": {"avd": "mean", "hd_quantile": 0.9}
  })", "/base");
  CHECK(c.manifest == fs::path("/base/m.txt"));
  CHECK(c.out == fs::path("/abs/out"));
  CHECK(c.stage1.patch_out == Extent3{1, 10, 12});
  CHECK(c.stage1.lr.initial_lr == 0.001);
  CHECK(c.stage1.init == netgraph::InitScheme::fan_in_uniform);
  CHECK_FALSE(c.stage2.lr.reset_at.has_value());
  CHECK(c.prep.notches.at("4").notches.size() == 1);
  CHECK(c.prep.inverse == prep::InverseKind::algebraic);
  CHECK(c.crf_mode == postproc::CrfMode::exact);
  CHECK(c.crf.w_a == 4);
  CHECK(c.evaluate.distance.avd == metrics::AvdMode::mean);

  // round trip through JSON
  const PipelineConfig r = parse_config(config_to_json(c), "");
  CHECK(config_to_json(r) == config_to_json(c));

  CHECK_THROWS_AS(parse_config("{\"bogus\": 1}", ""), ConfigError);
  CHECK_THROWS_AS(parse_config("{\"stage1\": {\"updatez\": 1}}", ""), ConfigError);
  CHECK_THROWS_AS(parse_config("{\"seed\": \"x\"}", ""), ConfigError);
  CHECK_THROWS_AS(parse_config("{\"preset\": \"VD9\"}", ""), ConfigError);
  CHECK_THROWS_AS(parse_config("{\"engine\": \"turbo\"}", ""), ConfigError);
  CHECK_THROWS_AS(parse_config("{\"stage1\": {\"patch\": [1, 2]}}", ""), ConfigError);
  CHECK_THROWS_AS(parse_config("not json", ""), ConfigError);
}

TEST_CASE("config overrides") {
  PipelineConfig c;
  apply_override(c, "stage1.updates=2000");
  CHECK(c.stage1.updates == 2000);
  apply_override(c, "crf.mode=exact");
  CHECK(c.crf_mode == postproc::CrfMode::exact);
  apply_override(c, "prep.notches.7=0.25,0,0.02");
  CHECK(c.prep.notches.at("7").notches[0].fy == 0.25);
  CHECK_THROWS_AS(apply_override(c, "stage1.nothing=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "seed"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "threshold=0"), ConfigError);
}

TEST_CASE("resolved stages derive distinct seeds and engine choice") {
  PipelineConfig c;
  c.seed = 4;
  CHECK(c.resolved_stage(1).seed != c.resolved_stage(2).seed);
  CHECK(c.resolved_stage(1).conv == netgraph::ConvAlgorithm::direct);
  c.engine = EngineMode::fast;
  CHECK(c.resolved_stage(2).conv == netgraph::ConvAlgorithm::fft);
  CHECK(c.resolved_stage(2).stage == "stage2");
}

TEST_CASE("output lock is exclusive and stale locks are reclaimed") {
  TempDir tmp;
  {
    OutputLock a(tmp.path);
    CHECK_THROWS_AS(OutputLock(tmp.path), ConfigError);
  }
  CHECK_NOTHROW(OutputLock(tmp.path));
  std::ofstream(tmp.path / ".vesselseg.lock") << 999999999 << '\n';
  CHECK_NOTHROW(OutputLock(tmp.path));
}

TEST_CASE("preprocess is idempotent and records provenance") {
  TempDir tmp;
  PipelineConfig c = tiny_config(tmp.path);
  c.prep.notches["2"] = prep::parse_notch_spec("0.25,0,0.02");
  const auto s = cmd_preprocess(c);
  CHECK(s.processed.size() == 3);
  const Layout l = layout(c);
  const std::string first = slurp(l.prep_image("2"));
  cmd_preprocess(c);
  CHECK(slurp(l.prep_image("2")) == first);
  const auto side = nlohmann::json::parse(slurp(l.prep_sidecar("2")));
  CHECK(side["notches"] == "0.25,0,0.02");
  CHECK(side["inverse"] == "unbiased");
  CHECK(side["normalize"]["hi"].get<double>() > side["normalize"]["lo"].get<double>());
  CHECK(nlohmann::json::parse(slurp(l.prep_sidecar("1")))["notches"] == "");

  fs::remove(tmp.path / "data" / "stacks" / "3.tif");
  try {
    cmd_preprocess(c);
    FAIL("missing stack not reported");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::data);
    CHECK(std::string(e.what()).find("3: ") != std::string::npos);
  }
}

TEST_CASE("train, infer, evaluate and report end to end") {
  TempDir tmp;
  PipelineConfig c = tiny_config(tmp.path);
  cmd_preprocess(c);
  CHECK_THROWS_AS(cmd_infer(c, {}), DataError);
  cmd_train(c);
  const Layout l = layout(c);
  CHECK(fs::exists(l.train_dir() / "stage1_final.ckpt"));
  CHECK(fs::exists(l.train_log(1)));

  const auto s = cmd_infer(c, {});
  CHECK(s.processed.size() == 3);
  const ProbMap p1 = stackio::read_stack(l.probability("1")).voxels;
  CHECK(p1.dims() == Extent3{3, 24, 24});
  const std::string bytes = slurp(l.probability("1"));
  cmd_infer(c, {"1"});
  CHECK(slurp(l.probability("1")) == bytes);

  // an external TIFF path works too
  cmd_infer(c, {(tmp.path / "data" / "stacks" / "2.tif").string()});
  CHECK(fs::exists(l.mask("2", "crf")));

  // Scoring the truth against itself.
  const auto m = stackio::parse_manifest(c.manifest);
  for (const auto& e : m.entries)
    for (const char* method : {"threshold", "crf"})
      stackio::write_labels(l.mask(e.id, method), stackio::read_labels(m.label_path(e)));
  CHECK(cmd_evaluate(c).processed == std::vector<std::string>{"3"});
  CHECK(cmd_evaluate(c, true).processed.size() == 3);
  std::ifstream csv(l.metrics_csv("crf"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "id,AUC,ADJRIND,MUTINF,HDRFDST,AVGDIST,MAHLNBS");
  int rows = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells[0] == "mean" || cells[0] == "sd") continue;
    ++rows;
    CHECK(std::stod(cells[2]) == 1.0);
    CHECK(std::stod(cells[5]) == 0.0);
  }
  CHECK(rows == 3);

  cmd_report(c);
  CHECK(fs::exists(l.report_dir() / "summary.txt"));
  CHECK(slurp(l.report_dir() / "summary.txt").find("physical units") != std::string::npos);
  const std::string slices = slurp(l.report_dir() / "slices.csv");
  CHECK(slices.find("1,crf,0,0,0,0") != std::string::npos);
}

TEST_CASE("report summary matches a recomputation from the CSV") {
  TempDir tmp;
  PipelineConfig c = tiny_config(tmp.path);
  cmd_preprocess(c);
  cmd_train(c);
  cmd_infer(c, {});
  cmd_evaluate(c, true);
  const Layout l = layout(c);
  std::ifstream csv(l.metrics_csv("threshold"));
  std::string line;
  std::getline(csv, line);
  std::vector<double> auc;
  std::string mean_row;
  while (std::getline(csv, line)) {
    const std::string id = line.substr(0, line.find(','));
    const std::string rest = line.substr(line.find(',') + 1);
    if (id == "mean") mean_row = rest.substr(0, rest.find(','));
    else if (id != "sd") auc.push_back(std::stod(rest.substr(0, rest.find(','))));
  }
  REQUIRE(auc.size() == 3);
  const double mean = (auc[0] + auc[1] + auc[2]) / 3;
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << mean;
  CHECK(mean_row == os.str());
}

TEST_CASE("per-slice AVD agrees with scoring each slice on its own") {
  std::mt19937 g(5);
  LabelMask a(Extent3{4, 9, 9}, 0), b(Extent3{4, 9, 9}, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = g() % 4 == 0;
    b[i] = g() % 5 == 0;
  }
  for (int x = 0; x < 9; ++x)
    for (int y = 0; y < 9; ++y) a(2, y, x) = 0;
  metrics::DistanceOptions o;
  o.spacing = VoxelSize{0.5, 0.5, 5};
  const auto v = slice_avd(a, b, o);
  REQUIRE(v.size() == 4);
  CHECK(std::isnan(v[2]));
  for (int z : {0, 1, 3}) {
    const LabelMask sa = crop(a, Extent3{z, 0, 0}, Extent3{1, 9, 9});
    const LabelMask sb = crop(b, Extent3{z, 0, 0}, Extent3{1, 9, 9});
    CHECK(v[z] == metrics::average_hausdorff(sa, sb, o));
  }
}
