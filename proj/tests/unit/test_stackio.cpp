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

#include <tiffio.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "doctest.h"
#include "vesselseg/stackio.hpp"

using namespace vesselseg;
using namespace vesselseg::stackio;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("vs_stackio_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

void write_rgb(const fs::path& p, int w, int h) {
  TIFF* t = TIFFOpen(p.string().c_str(), "w");
  REQUIRE(t);
  TIFFSetField(t, TIFFTAG_IMAGEWIDTH, w);
  TIFFSetField(t, TIFFTAG_IMAGELENGTH, h);
  TIFFSetField(t, TIFFTAG_SAMPLESPERPIXEL, 3);
  TIFFSetField(t, TIFFTAG_BITSPERSAMPLE, 8);
  TIFFSetField(t, TIFFTAG_PHOTOMETRIC, PHOTOMETRIC_RGB);
  TIFFSetField(t, TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
  TIFFSetField(t, TIFFTAG_ROWSPERSTRIP, h);
  std::vector<unsigned char> row(3 * w, 7);
  for (int y = 0; y < h; ++y) TIFFWriteScanline(t, row.data(), y, 0);
  TIFFClose(t);
}

void write_ragged(const fs::path& p) {
  TIFF* t = TIFFOpen(p.string().c_str(), "w");
  REQUIRE(t);
  for (int page = 0; page < 2; ++page) {
    const int w = page == 0 ? 8 : 6;
    TIFFSetField(t, TIFFTAG_IMAGEWIDTH, w);
    TIFFSetField(t, TIFFTAG_IMAGELENGTH, 4);
    TIFFSetField(t, TIFFTAG_SAMPLESPERPIXEL, 1);
    TIFFSetField(t, TIFFTAG_BITSPERSAMPLE, 8);
    TIFFSetField(t, TIFFTAG_PHOTOMETRIC, PHOTOMETRIC_MINISBLACK);
    TIFFSetField(t, TIFFTAG_ROWSPERSTRIP, 4);
    std::vector<unsigned char> row(w, 1);
    for (int y = 0; y < 4; ++y) TIFFWriteScanline(t, row.data(), y, 0);
    TIFFWriteDirectory(t);
  }
  TIFFClose(t);
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

}  // namespace

TEST_CASE("16-bit stacks round trip bit for bit") {
  TempDir tmp;
  Stack s;
  s.kind = SampleKind::u16;
  s.voxels = Volume<float>(Extent3{3, 5, 7});
  std::mt19937 g(3);
  for (auto& v : s.voxels.values()) v = static_cast<float>(g() % 65536);
  s.has_spacing = true;
  s.spacing = VoxelSize{0.994, 0.994, 5.0};
  write_stack(tmp.path / "a.tif", s);
  const Stack r = read_stack(tmp.path / "a.tif");
  CHECK(r.kind == SampleKind::u16);
  CHECK(r.voxels.dims() == s.voxels.dims());
  CHECK(r.voxels.values() == s.voxels.values());
  REQUIRE(r.has_spacing);
  CHECK(r.spacing.x == doctest::Approx(0.994).epsilon(1e-6));
  CHECK(r.spacing.z == doctest::Approx(5.0));
}

TEST_CASE("8-bit and float stacks round trip") {
  TempDir tmp;
  for (auto kind : {SampleKind::u8, SampleKind::f32}) {
    Stack s;
    s.kind = kind;
    s.voxels = Volume<float>(Extent3{2, 4, 3});
    for (std::size_t i = 0; i < s.voxels.size(); ++i)
      s.voxels[i] = kind == SampleKind::u8 ? static_cast<float>(i * 9 % 256) : 0.125f * i - 1.5f;
    write_stack(tmp.path / "b.tif", s);
    const Stack r = read_stack(tmp.path / "b.tif");
    CHECK(r.kind == kind);
    CHECK(r.voxels.values() == s.voxels.values());
    CHECK_FALSE(r.has_spacing);
  }
}

TEST_CASE("a 512x512x15 file reads as (15,512,512)") {
  TempDir tmp;
  Stack s;
  s.kind = SampleKind::u8;
  s.voxels = Volume<float>(Extent3{15, 512, 512});
  write_stack(tmp.path / "big.tif", s);
  const Extent3 d = read_stack(tmp.path / "big.tif").voxels.dims();
  CHECK(d.z == 15);
  CHECK(d.y == 512);
  CHECK(d.x == 512);
}

TEST_CASE("integer writes clamp and round") {
  TempDir tmp;
  Stack s;
  s.kind = SampleKind::u8;
  s.voxels = Volume<float>(Extent3{1, 1, 4});
  s.voxels[0] = -3.f;
  s.voxels[1] = 2.6f;
  s.voxels[2] = 300.f;
  s.voxels[3] = 255.f;
  write_stack(tmp.path / "c.tif", s);
  const auto r = read_stack(tmp.path / "c.tif").voxels.values();
  CHECK(r == std::vector<float>{0.f, 3.f, 255.f, 255.f});
}

TEST_CASE("rgb, ragged and missing files are rejected") {
  TempDir tmp;
  write_rgb(tmp.path / "rgb.tif", 6, 4);
  CHECK_THROWS_AS(read_stack(tmp.path / "rgb.tif"), UnsupportedFormat);
  write_ragged(tmp.path / "ragged.tif");
  CHECK_THROWS_AS(read_stack(tmp.path / "ragged.tif"), CorruptFile);
  CHECK_THROWS_AS(read_stack(tmp.path / "none.tif"), DataError);
  write_text(tmp.path / "junk.tif", "not a tiff at all");
  CHECK_THROWS_AS(read_stack(tmp.path / "junk.tif"), DataError);
}

TEST_CASE("labels accept 0/1 and 0/255 and are written as 0/255") {
  TempDir tmp;
  LabelMask m(Extent3{2, 3, 3}, 0);
  m(0, 1, 1) = 1;
  m(1, 2, 0) = 1;
  write_labels(tmp.path / "l.tif", m, VoxelSize{1, 1, 5});
  const Stack raw = read_stack(tmp.path / "l.tif");
  CHECK(raw.voxels(0, 1, 1) == 255.f);
  CHECK(read_labels(tmp.path / "l.tif").values() == m.values());

  Stack ones;
  ones.kind = SampleKind::u8;
  ones.voxels = Volume<float>(m.dims());
  for (std::size_t i = 0; i < m.size(); ++i) ones.voxels[i] = m[i];
  write_stack(tmp.path / "ones.tif", ones);
  CHECK(read_labels(tmp.path / "ones.tif").values() == m.values());

  ones.voxels[0] = 7.f;
  write_stack(tmp.path / "bad.tif", ones);
  CHECK_THROWS_AS(read_labels(tmp.path / "bad.tif"), DataError);
}

TEST_CASE("label_stats") {
  CHECK(label_stats(LabelMask(Extent3{2, 4, 4}, 0)) == 0.0);
  LabelMask half(Extent3{2, 4, 4}, 0);
  for (std::size_t i = 0; i < half.size(); i += 2) half[i] = 1;
  CHECK(label_stats(half) == doctest::Approx(0.5));
}

TEST_CASE("shipped manifest encodes the dataset table") {
  const auto m = parse_manifest(fs::path(VESSELSEG_SOURCE_DIR) / "data" / "manifest.txt");
  REQUIRE(m.entries.size() == 12);
  CHECK(m.with_usage(Usage::test).size() == 2);
  CHECK(m.find("6")->usage == Usage::test);
  CHECK(m.find("7")->usage == Usage::test);
  const ManifestEntry* s9 = m.find("9");
  REQUIRE(s9);
  CHECK(s9->voxel.x == 2.485);
  CHECK(s9->voxel.y == 2.485);
  CHECK(s9->voxel.z == 5.0);
  CHECK(m.find("2")->dims->x == 320);
  CHECK(m.find("2")->dims->z == 26);
  CHECK(*m.find("1")->vessel_pct == 12.4);
  CHECK(m.find("11")->source == Source::tumor);
  CHECK(m.image_path(*m.find("3")) == m.root / "stacks/3.tif");
}

TEST_CASE("manifest validation") {
  const fs::path base = "/data";
  const std::string ok = "a x.tif y.tif 1x1x5 cortex Train\n";
  CHECK(parse_manifest_text(ok, base).entries.size() == 1);
  CHECK(parse_manifest_text(ok, base).root == base);
  CHECK(parse_manifest_text("root sub\n" + ok, base).root == base / "sub");
  CHECK_THROWS_AS(parse_manifest_text(ok + ok, base), ConfigError);
  CHECK_THROWS_AS(parse_manifest_text("a x y 1x1x5 cortex Validate\n", base), ConfigError);
  CHECK_THROWS_AS(parse_manifest_text("a x y 1x1 cortex Train\n", base), ConfigError);
  CHECK_THROWS_AS(parse_manifest_text("a x y 1xqx5 cortex Train\n", base), ConfigError);
  CHECK_THROWS_AS(parse_manifest_text("a x y 0x1x5 cortex Train\n", base), ConfigError);
  CHECK_THROWS_AS(parse_manifest_text("a x y 1x1x5 liver Train\n", base), ConfigError);
  CHECK_THROWS_AS(parse_manifest_text("a x y 1x1x5 cortex Train color=red\n", base), ConfigError);
  CHECK(parse_manifest_text("# only a comment\n\n", base).entries.empty());
}
