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

#include <fftw3.h>

#include <map>
#include <memory>
#include <mutex>
#include <tuple>

#include "vesselseg/volume.hpp"

namespace vesselseg::detail {

struct FftwFree {
  void operator()(void* p) const noexcept { fftw_free(p); }
};
using RealBuffer = std::unique_ptr<double[], FftwFree>;
using ComplexBuffer = std::unique_ptr<fftw_complex[], FftwFree>;

inline RealBuffer alloc_real(std::size_t n) { return RealBuffer(fftw_alloc_real(n)); }
inline ComplexBuffer alloc_complex(std::size_t n) { return ComplexBuffer(fftw_alloc_complex(n)); }

/// Forward/backward plan pair for one real volume size. Plans are created
/// once per size and executed with the new-array interface, which FFTW
/// guarantees to be thread safe.
struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan backward = nullptr;
};

class PlanCache {
 public:
  static PlanCache& instance();
  PlanPair get(const Extent3& n);

 private:
  PlanCache() = default;
  ~PlanCache();

  std::mutex mutex_;
  std::map<std::tuple<int, int, int>, PlanPair> plans_;
};

}  // namespace vesselseg::detail
