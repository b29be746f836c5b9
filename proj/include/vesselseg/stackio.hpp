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

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vesselseg/error.hpp"
#include "vesselseg/volume.hpp"

namespace vesselseg::stackio {

class UnsupportedFormat : public DataError {
 public:
  explicit UnsupportedFormat(const std::string& what) : DataError("unsupported format: " + what) {}
};

class CorruptFile : public DataError {
 public:
  explicit CorruptFile(const std::string& what) : DataError("corrupt file: " + what) {}
};

/// Multi-page grayscale TIFF, 8/16-bit unsigned or 32-bit float, one page
/// per z-slice. Voxel size is taken from ImageJ resolution tags and the
/// "spacing=" entry of the image description when present.
Stack read_stack(const std::filesystem::path& path);

/// Writes stack.voxels with stack.kind; integer kinds are rounded and
/// clamped to their range.
void write_stack(const std::filesystem::path& path, const Stack& stack);

/// Binary mask stored as 0/1 or 0/255, returned as 0/1.
LabelMask read_labels(const std::filesystem::path& path);

/// Always written as 8-bit 0/255.
void write_labels(const std::filesystem::path& path, const LabelMask& mask,
                  const std::optional<VoxelSize>& spacing = {});

/// Fraction of vessel voxels, in [0, 1].
double label_stats(const LabelMask& labels);

enum class Usage { train, test };
enum class Source { cortex, tumor };

struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  std::filesystem::path labels;
  VoxelSize voxel;
  Source source = Source::cortex;
  Usage usage = Usage::train;
  std::optional<double> vessel_pct;  // expected "% of vessel labels"
  std::optional<Extent3> dims;       // expected extent
};

struct DatasetManifest {
  std::filesystem::path root;  // relative paths resolve against it
  std::vector<ManifestEntry> entries;

  const ManifestEntry* find(const std::string& id) const;
  std::filesystem::path image_path(const ManifestEntry& e) const;
  std::filesystem::path label_path(const ManifestEntry& e) const;
  std::vector<const ManifestEntry*> with_usage(Usage u) const;
};

/// Grammar, one record per line, '#' starts a comment:
///   root <dir>
///   <id> <image> <labels> <vx>x<vy>x<vz> <cortex|tumor> <Train|Test> [vessel=<pct>] [dims=<x>x<y>x<z>]
/// The root directive defaults to the manifest's directory; a relative root
/// resolves against it.
DatasetManifest parse_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest_text(const std::string& text, const std::filesystem::path& base);

std::string usage_name(Usage u);
std::string source_name(Source s);

}  // namespace vesselseg::stackio
