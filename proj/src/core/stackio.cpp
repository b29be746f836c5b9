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

#include "vesselseg/stackio.hpp"

#include <tiffio.h>

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>

namespace vesselseg::stackio {

namespace {

thread_local std::string t_last_tiff_error;

void tiff_error(const char* module, const char* fmt, va_list ap) {
  char buf[512];
  std::vsnprintf(buf, sizeof buf, fmt, ap);
  t_last_tiff_error = (module ? std::string(module) + ": " : std::string()) + buf;
}

void tiff_warning(const char*, const char*, va_list) {}

void install_handlers() {
  static std::once_flag once;
  std::call_once(once, [] {
    TIFFSetErrorHandler(tiff_error);
    TIFFSetWarningHandler(tiff_warning);
  });
}

struct TiffCloser {
  void operator()(TIFF* t) const noexcept { TIFFClose(t); }
};
using TiffPtr = std::unique_ptr<TIFF, TiffCloser>;

TiffPtr open(const std::filesystem::path& path, const char* mode) {
  install_handlers();
  t_last_tiff_error.clear();
  TIFF* t = TIFFOpen(path.string().c_str(), mode);
  if (!t) {
    if (*mode == 'r' && !std::filesystem::exists(path)) throw DataError("cannot open " + path.string() + ": no such file");
    throw DataError("cannot open " + path.string() + (t_last_tiff_error.empty() ? "" : ": " + t_last_tiff_error));
  }
  return TiffPtr(t);
}

std::optional<double> description_spacing(const std::string& desc) {
  std::istringstream is(desc);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("spacing=", 0) == 0) {
      try {
        return std::stod(line.substr(8));
      } catch (const std::exception&) {
        return std::nullopt;
      }
    }
  }
  return std::nullopt;
}

}  // namespace

Stack read_stack(const std::filesystem::path& path) {
  TiffPtr tif = open(path, "r");
  const std::string name = path.string();
  Stack s;
  std::vector<float> data;
  std::uint32_t width = 0, height = 0;
  std::uint16_t bits0 = 0, format0 = 0;
  int pages = 0;
  do {
    std::uint32_t w = 0, h = 0;
    std::uint16_t spp = 1, bits = 1, fmt = SAMPLEFORMAT_UINT, photo = PHOTOMETRIC_MINISBLACK, planar = PLANARCONFIG_CONTIG;
    TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &w);
    TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &h);
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bits);
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &fmt);
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &planar);
    if (!TIFFGetField(tif.get(), TIFFTAG_PHOTOMETRIC, &photo)) photo = PHOTOMETRIC_MINISBLACK;
    if (spp != 1 || photo == PHOTOMETRIC_RGB || photo == PHOTOMETRIC_PALETTE || photo == PHOTOMETRIC_YCBCR)
      throw UnsupportedFormat(name + " is not single-channel grayscale");
    if (TIFFIsTiled(tif.get())) throw UnsupportedFormat(name + " uses tiles; only striped files are read");
    const bool ok_int = (bits == 8 || bits == 16) && fmt == SAMPLEFORMAT_UINT;
    const bool ok_float = bits == 32 && fmt == SAMPLEFORMAT_IEEEFP;
    if (!ok_int && !ok_float)
      throw UnsupportedFormat(name + ": " + std::to_string(bits) + "-bit samples of format " + std::to_string(fmt));
    if (pages == 0) {
      width = w;
      height = h;
      bits0 = bits;
      format0 = fmt;
      s.kind = bits == 8 ? SampleKind::u8 : bits == 16 ? SampleKind::u16 : SampleKind::f32;
      float xr = 0, yr = 0;
      if (TIFFGetField(tif.get(), TIFFTAG_XRESOLUTION, &xr) && TIFFGetField(tif.get(), TIFFTAG_YRESOLUTION, &yr) &&
          xr > 0 && yr > 0) {
        s.spacing.x = 1.0 / xr;
        s.spacing.y = 1.0 / yr;
        s.has_spacing = true;
        char* desc = nullptr;
        if (TIFFGetField(tif.get(), TIFFTAG_IMAGEDESCRIPTION, &desc) && desc)
          if (auto z = description_spacing(desc)) s.spacing.z = *z;
      }
    } else if (w != width || h != height || bits != bits0 || fmt != format0) {
      throw CorruptFile(name + ": page " + std::to_string(pages) + " differs in size or sample type from page 0");
    }
    if (w == 0 || h == 0) throw CorruptFile(name + ": empty page");
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    data.resize(data.size() + plane);
    float* dst = data.data() + static_cast<std::size_t>(pages) * plane;
    std::vector<unsigned char> line(TIFFScanlineSize(tif.get()));
    for (std::uint32_t y = 0; y < h; ++y) {
      if (TIFFReadScanline(tif.get(), line.data(), y, 0) < 0)
        throw CorruptFile(name + ": cannot read row " + std::to_string(y) + " of page " + std::to_string(pages) +
                          (t_last_tiff_error.empty() ? "" : " (" + t_last_tiff_error + ")"));
      float* row = dst + static_cast<std::size_t>(y) * w;
      if (bits == 8) {
        for (std::uint32_t x = 0; x < w; ++x) row[x] = line[x];
      } else if (bits == 16) {
        const auto* p = reinterpret_cast<const std::uint16_t*>(line.data());
        for (std::uint32_t x = 0; x < w; ++x) row[x] = p[x];
      } else {
        const auto* p = reinterpret_cast<const float*>(line.data());
        std::copy(p, p + w, row);
      }
    }
    ++pages;
  } while (TIFFReadDirectory(tif.get()));
  s.voxels = Volume<float>(Extent3{pages, static_cast<int>(height), static_cast<int>(width)}, std::move(data));
  return s;
}

void write_stack(const std::filesystem::path& path, const Stack& stack) {
  const Extent3 d = stack.voxels.dims();
  if (stack.voxels.empty()) throw ArgumentError("cannot write an empty stack");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  TiffPtr tif = open(path, "w");
  const int bits = stack.kind == SampleKind::u8 ? 8 : stack.kind == SampleKind::u16 ? 16 : 32;
  std::ostringstream desc;
  desc << "ImageJ=1.11a\nimages=" << d.z << "\nslices=" << d.z << "\n";
  if (stack.has_spacing) desc << "unit=micron\nspacing=" << stack.spacing.z << "\n";
  desc << "loop=false\n";
  const std::string desc_s = desc.str();
  std::vector<unsigned char> line(static_cast<std::size_t>(d.x) * bits / 8);
  for (int z = 0; z < d.z; ++z) {
    TIFFSetField(tif.get(), TIFFTAG_IMAGEWIDTH, static_cast<std::uint32_t>(d.x));
    TIFFSetField(tif.get(), TIFFTAG_IMAGELENGTH, static_cast<std::uint32_t>(d.y));
    TIFFSetField(tif.get(), TIFFTAG_SAMPLESPERPIXEL, 1);
    TIFFSetField(tif.get(), TIFFTAG_BITSPERSAMPLE, bits);
    TIFFSetField(tif.get(), TIFFTAG_SAMPLEFORMAT, bits == 32 ? SAMPLEFORMAT_IEEEFP : SAMPLEFORMAT_UINT);
    TIFFSetField(tif.get(), TIFFTAG_PHOTOMETRIC, PHOTOMETRIC_MINISBLACK);
    TIFFSetField(tif.get(), TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
    TIFFSetField(tif.get(), TIFFTAG_COMPRESSION, COMPRESSION_NONE);
    TIFFSetField(tif.get(), TIFFTAG_ROWSPERSTRIP, TIFFDefaultStripSize(tif.get(), 0));
    if (z == 0) TIFFSetField(tif.get(), TIFFTAG_IMAGEDESCRIPTION, desc_s.c_str());
    if (stack.has_spacing) {
      TIFFSetField(tif.get(), TIFFTAG_XRESOLUTION, static_cast<float>(1.0 / stack.spacing.x));
      TIFFSetField(tif.get(), TIFFTAG_YRESOLUTION, static_cast<float>(1.0 / stack.spacing.y));
      TIFFSetField(tif.get(), TIFFTAG_RESOLUTIONUNIT, RESUNIT_NONE);
    }
    for (int y = 0; y < d.y; ++y) {
      const float* src = &stack.voxels(z, y, 0);
      if (bits == 8) {
        for (int x = 0; x < d.x; ++x) line[x] = static_cast<unsigned char>(std::clamp(std::lround(src[x]), 0L, 255L));
      } else if (bits == 16) {
        auto* p = reinterpret_cast<std::uint16_t*>(line.data());
        for (int x = 0; x < d.x; ++x) p[x] = static_cast<std::uint16_t>(std::clamp(std::lround(src[x]), 0L, 65535L));
      } else {
        std::copy(src, src + d.x, reinterpret_cast<float*>(line.data()));
      }
      if (TIFFWriteScanline(tif.get(), line.data(), y, 0) < 0) throw DataError("cannot write " + path.string());
    }
    if (!TIFFWriteDirectory(tif.get())) throw DataError("cannot write " + path.string());
  }
}

LabelMask read_labels(const std::filesystem::path& path) {
  const Stack s = read_stack(path);
  if (s.kind == SampleKind::f32) throw UnsupportedFormat(path.string() + ": label masks must be integer TIFFs");
  bool has1 = false, has255 = false;
  LabelMask m(s.voxels.dims());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const float v = s.voxels[i];
    if (v == 0.f) continue;
    if (v == 1.f) has1 = true;
    else if (v == 255.f) has255 = true;
    else throw DataError(path.string() + ": label value " + std::to_string(v) + " is neither 0/1 nor 0/255");
    m[i] = 1;
  }
  if (has1 && has255) throw DataError(path.string() + ": label mask mixes 1 and 255 foreground values");
  return m;
}

void write_labels(const std::filesystem::path& path, const LabelMask& mask, const std::optional<VoxelSize>& spacing) {
  Stack s;
  s.kind = SampleKind::u8;
  s.voxels = Volume<float>(mask.dims());
  for (std::size_t i = 0; i < mask.size(); ++i) s.voxels[i] = mask[i] ? 255.f : 0.f;
  if (spacing) {
    s.spacing = *spacing;
    s.has_spacing = true;
  }
  write_stack(path, s);
}

double label_stats(const LabelMask& labels) {
  if (labels.empty()) return 0.0;
  std::size_t n = 0;
  for (auto v : labels.values()) n += v != 0;
  return static_cast<double>(n) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------
// Manifest

const ManifestEntry* DatasetManifest::find(const std::string& id) const {
  for (const auto& e : entries)
    if (e.id == id) return &e;
  return nullptr;
}

std::filesystem::path DatasetManifest::image_path(const ManifestEntry& e) const {
  return e.image.is_absolute() ? e.image : root / e.image;
}

std::filesystem::path DatasetManifest::label_path(const ManifestEntry& e) const {
  return e.labels.is_absolute() ? e.labels : root / e.labels;
}

std::vector<const ManifestEntry*> DatasetManifest::with_usage(Usage u) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries)
    if (e.usage == u) out.push_back(&e);
  return out;
}

std::string usage_name(Usage u) { return u == Usage::train ? "Train" : "Test"; }
std::string source_name(Source s) { return s == Source::cortex ? "cortex" : "tumor"; }

namespace {

std::vector<double> split_x(const std::string& s, const std::string& where) {
  std::vector<double> out;
  std::string part;
  std::istringstream is(s);
  while (std::getline(is, part, 'x')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != part.size()) throw ConfigError(where + ": malformed triple '" + s + "'");
    out.push_back(v);
  }
  if (out.size() != 3) throw ConfigError(where + ": expected three 'x'-separated values in '" + s + "'");
  return out;
}

}  // namespace

DatasetManifest parse_manifest_text(const std::string& text, const std::filesystem::path& base) {
  DatasetManifest m;
  m.root = base;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    const std::string where = "manifest line " + std::to_string(lineno);
    if (tok[0] == "root") {
      if (tok.size() != 2) throw ConfigError(where + ": root takes one path");
      const std::filesystem::path r(tok[1]);
      m.root = r.is_absolute() ? r : base / r;
      continue;
    }
    if (tok.size() < 6) throw ConfigError(where + ": expected id image labels voxel source usage");
    ManifestEntry e;
    e.id = tok[0];
    e.image = tok[1];
    e.labels = tok[2];
    const auto v = split_x(tok[3], where + " voxel size");
    if (!(v[0] > 0 && v[1] > 0 && v[2] > 0)) throw ConfigError(where + ": voxel size must be positive");
    e.voxel = VoxelSize{v[0], v[1], v[2]};
    if (tok[4] == "cortex") e.source = Source::cortex;
    else if (tok[4] == "tumor") e.source = Source::tumor;
    else throw ConfigError(where + ": unknown source '" + tok[4] + "'");
    if (tok[5] == "Train") e.usage = Usage::train;
    else if (tok[5] == "Test") e.usage = Usage::test;
    else throw ConfigError(where + ": unknown usage '" + tok[5] + "' (Train or Test)");
    for (std::size_t i = 6; i < tok.size(); ++i) {
      const auto eq = tok[i].find('=');
      const std::string key = tok[i].substr(0, eq), val = eq == std::string::npos ? "" : tok[i].substr(eq + 1);
      if (key == "vessel") {
        try {
          e.vessel_pct = std::stod(val);
        } catch (const std::exception&) {
          throw ConfigError(where + ": malformed vessel percentage '" + val + "'");
        }
      } else if (key == "dims") {
        const auto dd = split_x(val, where + " dims");
        e.dims = Extent3{static_cast<int>(dd[2]), static_cast<int>(dd[1]), static_cast<int>(dd[0])};
      } else {
        throw ConfigError(where + ": unknown field '" + tok[i] + "'");
      }
    }
    if (!ids.insert(e.id).second) throw ConfigError(where + ": duplicate id '" + e.id + "'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

DatasetManifest parse_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest_text(ss.str(), path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

}  // namespace vesselseg::stackio
