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
#include <cstdlib>
#include <fstream>
#include <filesystem>
#include <map>
#include <numeric>

#include "doctest.h"
#include "vesselseg/error.hpp"
#include "vesselseg/synth.hpp"
#include "vesselseg/trainer.hpp"

using namespace vesselseg;
using namespace vesselseg::trainer;

namespace {

Patch asymmetric_patch(int z, int n) {
  Patch p;
  Volume<float> c(Extent3{z, n, n});
  LabelMask l(Extent3{z, n, n}, 0);
  for (std::size_t i = 0; i < c.size(); ++i) {
    c[i] = static_cast<float>(i);
    l[i] = static_cast<std::uint8_t>(i % 3 == 0);
  }
  p.channels = {c, c};
  p.labels = l;
  return p;
}

bool same(const Patch& a, const Patch& b) {
  if (a.channels.size() != b.channels.size() || a.labels.values() != b.labels.values()) return false;
  for (std::size_t i = 0; i < a.channels.size(); ++i)
    if (a.channels[i].values() != b.channels[i].values()) return false;
  return true;
}

std::vector<TrainItem> tube_items() {
  synth::TubeParams tp;
  tp.dims = Extent3{2, 24, 24};
  tp.tubes = 4;
  const auto a = synth::tube_volume(tp, 11);
  const auto b = synth::tube_volume(tp, 12);
  return {{"a", {a.image.voxels}, a.labels, false}, {"b", {b.image.voxels}, b.labels, true}};
}

TrainConfig small_config(std::uint64_t updates) {
  TrainConfig c = TrainConfig::stage1();
  c.updates = updates;
  c.patch_out = Extent3{1, 8, 8};
  c.mirror_pad = true;
  c.lr.initial_lr = 1e-4;
  c.log_every = 5;
  c.monitor_patches = 2;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  const LrSchedule s = LrSchedule::vd2d();
  CHECK(lr_at(s, 0) == 0.01);
  CHECK(lr_at(s, 5) == 0.01);
  CHECK(lr_at(s, 6) == doctest::Approx(0.00999));
  CHECK(lr_at(s, 60000) == doctest::Approx(4.52e-7).epsilon(1e-9 / 4.52e-7));
  const LrSchedule r = LrSchedule::vd2d3d();
  CHECK(lr_at(r, 14999) == doctest::Approx(0.01 * std::pow(0.999, 14999)));
  CHECK(lr_at(r, 15000) == 1e-4);
  CHECK(lr_at(r, 15019) == doctest::Approx(1e-4 * 0.999));
  LrSchedule bad;
  bad.initial_lr = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("class rebalancing") {
  LabelMask l(Extent3{1, 1, 4}, 0);
  l[0] = 1;
  const WeightMap w = rebalance_weights(l);
  CHECK(w[0] == doctest::Approx(2.0));
  CHECK(w[1] == doctest::Approx(2.0 / 3.0));
  double mean = 0;
  for (float v : w.values()) mean += v;
  CHECK(mean / 4 == doctest::Approx(1.0));
  const WeightMap ones = rebalance_weights(LabelMask(Extent3{1, 2, 2}, 1));
  for (float v : ones.values()) CHECK(v == 1.0f);
}

TEST_CASE("augmentation is the dihedral group of the square") {
  const Patch p = asymmetric_patch(2, 4);
  CHECK(same(augment(p, 0), p));
  std::vector<Patch> images;
  for (int t = 0; t < 8; ++t) {
    const Patch a = augment(p, t);
    CHECK(same(augment(a, dihedral_inverse(t)), p));
    CHECK(a.channels[0].values() == a.channels[1].values());
    for (const auto& other : images) CHECK_FALSE(same(a, other));
    images.push_back(a);
  }
  // four quarter turns and two mirrors are the identity
  Patch q = p;
  for (int i = 0; i < 4; ++i) q = augment(q, 1);
  CHECK(same(q, p));
  CHECK(same(augment(augment(p, 4), 4), p));
  // one quarter turn counter-clockwise: out(y, x) = in(x, n - 1 - y)
  const Patch r = augment(p, 1);
  CHECK(r.channels[0](1, 0, 3) == p.channels[0](1, 3, 3));
  CHECK(r.channels[0](0, 2, 1) == p.channels[0](0, 1, 1));

  Patch wide;
  wide.channels = {Volume<float>(Extent3{1, 2, 3})};
  wide.labels = LabelMask(Extent3{1, 2, 3}, 0);
  CHECK_THROWS_AS(augment(wide, 1), ArgumentError);
  CHECK_NOTHROW(augment(wide, 2));
  CHECK_NOTHROW(augment(wide, 6));
  CHECK_THROWS_AS(augment(p, 8), ArgumentError);
}

TEST_CASE("sample_patch shape, alignment and determinism") {
  const auto spec = netgraph::build_preset("VD2D", 0.1);
  const Extent3 f = netgraph::receptive_field(spec);
  const Extent3 d{2, f.y + 5, f.x + 3};
  Volume<float> img(d);
  LabelMask lab(d, 0);
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = static_cast<float>(i);
    lab[i] = static_cast<std::uint8_t>(i % 2);
  }
  const Extent3 out{1, 4, 2};
  Rng g1(9), g2(9);
  for (int i = 0; i < 20; ++i) {
    const auto s = sample_patch({img}, lab, spec, out, g1);
    const auto t = sample_patch({img}, lab, spec, out, g2);
    CHECK(s.label_origin == t.label_origin);
    CHECK(s.patch.channels[0].dims() == Extent3{1, out.y + f.y - 1, out.x + f.x - 1});
    CHECK(s.patch.labels.dims() == out);
    // centre of the first input window lies on the first output voxel
    const Extent3 o = s.label_origin;
    CHECK(s.patch.channels[0](0, (f.y - 1) / 2, (f.x - 1) / 2) == img(o.z, o.y, o.x));
    CHECK(s.patch.labels(0, 0, 0) == lab(o.z, o.y, o.x));
  }
  Rng g(1);
  CHECK_THROWS_AS(sample_patch({img}, lab, spec, Extent3{1, 7, 2}, g), DataError);
}

TEST_CASE("padded sampling covers every output origin uniformly") {
  const auto spec = netgraph::build_preset("VD2D", 0.1);
  const Extent3 f = netgraph::receptive_field(spec);
  const LabelMask lab(Extent3{1, 5, 5}, 0);
  const Volume<float> padded(Extent3{1, 5 + f.y - 1, 5 + f.x - 1});
  Rng g(4);
  std::map<std::pair<int, int>, int> hist;
  const int draws = 25000;
  for (int i = 0; i < draws; ++i) {
    const auto s = sample_patch({padded}, lab, spec, Extent3{1, 1, 1}, g, true);
    ++hist[{s.label_origin.y, s.label_origin.x}];
  }
  REQUIRE(hist.size() == 25);
  double chi2 = 0;
  for (const auto& [k, n] : hist) chi2 += (n - 1000.0) * (n - 1000.0) / 1000.0;
  CHECK(chi2 < 51.2);  // 24 dof, p = 0.001
}

TEST_CASE("sgd_step with momentum") {
  const auto spec = netgraph::build_preset("VD2D", 0.1);
  ParamStore p = netgraph::zero_params(spec);
  std::vector<volcore::KernelStack> g;
  for (const auto& l : p.layers) {
    volcore::KernelStack k(l.kernel.c_out(), l.kernel.c_in(), l.kernel.extent());
    std::fill(k.weights().begin(), k.weights().end(), 1.0);
    std::fill(k.bias().begin(), k.bias().end(), 2.0);
    g.push_back(k);
  }
  Velocity v = zero_velocity(p);
  sgd_step(p, g, v, 0.1, 0.5);
  CHECK(p.layers[0].kernel.weights()[0] == doctest::Approx(-0.1));
  CHECK(p.layers[0].kernel.bias()[0] == doctest::Approx(-0.2));
  sgd_step(p, g, v, 0.1, 0.5);
  // v = 0.5 * -0.1 - 0.1 = -0.15
  CHECK(p.layers[0].kernel.weights()[0] == doctest::Approx(-0.25));
  CHECK(v[0].weights()[0] == doctest::Approx(-0.15));
  g.pop_back();
  CHECK_THROWS_AS(sgd_step(p, g, v, 0.1, 0.5), ShapeError);
}

TEST_CASE("train_stage: zero updates, determinism and resume") {
  const auto spec = netgraph::build_preset("VD2D", 0.1);
  const auto data = tube_items();
  const ParamStore p0 = netgraph::init_weights(spec, netgraph::InitScheme::relu_gain_uniform, 3);

  TrainConfig c0 = small_config(0);
  const TrainResult none = train_stage(spec, p0, data, c0);
  CHECK(none.params == p0);
  CHECK(none.log.empty());

  TrainConfig c = small_config(10);
  c.momentum = 0.0;  // velocity restarts on resume, so compare without it
  const TrainResult a = train_stage(spec, p0, data, c);
  const TrainResult b = train_stage(spec, p0, data, c);
  CHECK(a.params == b.params);
  CHECK(a.params.update == 10);
  CHECK_FALSE(a.params == p0);
  REQUIRE(a.log.size() == 4);
  CHECK(a.log[0].split == "train");
  CHECK(a.log[1].split == "test");

  TrainConfig half = c;
  half.updates = 5;
  const TrainResult h = train_stage(spec, p0, data, half);
  const TrainResult resumed = train_stage(spec, h.params, data, c);
  CHECK(resumed.params == a.params);

  TrainConfig other = c;
  other.seed = 6;
  CHECK_FALSE(train_stage(spec, p0, data, other).params == a.params);
}

TEST_CASE("train_stage rejects bad inputs") {
  const auto spec = netgraph::build_preset("VD2D", 0.1);
  const ParamStore p0 = netgraph::init_weights(spec, netgraph::InitScheme::relu_gain_uniform, 3);
  auto data = tube_items();
  TrainConfig c = small_config(2);
  c.batch = 0;
  CHECK_THROWS_AS(train_stage(spec, p0, data, c), ConfigError);
  c.batch = 1;
  data[0].test = true;
  CHECK_THROWS_AS(train_stage(spec, p0, data, c), ArgumentError);
  data[0].test = false;
  data[0].channels.push_back(data[0].channels[0]);
  CHECK_THROWS_AS(train_stage(spec, p0, data, c), ArgumentError);
  const auto other = netgraph::build_preset("VD2D", 0.2);
  CHECK_THROWS_AS(train_stage(other, p0, tube_items(), c), DataError);
}

TEST_CASE("checkpoints and log files") {
  const auto spec = netgraph::build_preset("VD2D", 0.1);
  const ParamStore p0 = netgraph::init_weights(spec, netgraph::InitScheme::relu_gain_uniform, 3);
  const auto dir = std::filesystem::temp_directory_path() / "vs_trainer_ckpt";
  std::filesystem::remove_all(dir);
  TrainConfig c = small_config(6);
  c.checkpoint_every = 4;
  c.checkpoint_dir = dir.string();
  c.log_path = (dir / "log.csv").string();
  std::filesystem::create_directories(dir);
  const TrainResult r = train_stage(spec, p0, tube_items(), c);
  CHECK(std::filesystem::exists(dir / "stage1_4.ckpt"));
  const ParamStore fin = netgraph::load_checkpoint((dir / "stage1_final.ckpt").string());
  CHECK(netgraph::load_checkpoint((dir / "stage1_last.ckpt").string()) == fin);
  CHECK(fin.update == 6);
  REQUIRE(fin.layers.size() == r.params.layers.size());
  for (std::size_t l = 0; l < fin.layers.size(); ++l)
    for (std::size_t i = 0; i < fin.layers[l].kernel.weights().size(); ++i)
      CHECK(fin.layers[l].kernel.weights()[i] == static_cast<float>(r.params.layers[l].kernel.weights()[i]));
  std::ifstream log(dir / "log.csv");
  std::string header;
  std::getline(log, header);
  CHECK(header == "update,split,err,cls");
  std::filesystem::remove_all(dir);
}

TEST_CASE("training lowers the loss on a small tube stack") {
  const auto spec = netgraph::parse_preset(
      "preset small\ninput image\n"
      "layer C1 conv in=image kernel=3,3,1 width=6 act=relu\n"
      "layer C2 conv in=C1.act kernel=3,3,1 width=6 act=tanh\n"
      "layer out output in=C2.act width=2\n");
  const ParamStore p0 = netgraph::init_weights(spec, netgraph::InitScheme::relu_gain_uniform, 1);
  TrainConfig c = small_config(300);
  c.patch_out = Extent3{1, 16, 16};
  c.lr.initial_lr = 1e-4;
  c.log_every = c.updates;
  const TrainResult r = train_stage(spec, p0, tube_items(), c);
  const auto& e = r.patch_err;
  const double first = std::accumulate(e.begin(), e.begin() + 30, 0.0) / 30;
  const double last = std::accumulate(e.end() - 30, e.end(), 0.0) / 30;
  MESSAGE("patch ERR first 30: " << first << ", last 30: " << last);
  CHECK(last < 0.8 * first);
}
