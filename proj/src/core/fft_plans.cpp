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

#include "fft_plans.hpp"

namespace vesselseg::detail {

PlanCache& PlanCache::instance() {
  static PlanCache cache;
  return cache;
}

PlanPair PlanCache::get(const Extent3& n) {
  std::lock_guard lock(mutex_);
  const auto key = std::make_tuple(n.z, n.y, n.x);
  if (auto it = plans_.find(key); it != plans_.end()) return it->second;
  const std::size_t nc = static_cast<std::size_t>(n.z) * n.y * (n.x / 2 + 1);
  RealBuffer r = alloc_real(n.volume());
  ComplexBuffer c = alloc_complex(nc);
  PlanPair p;
  p.forward = fftw_plan_dft_r2c_3d(n.z, n.y, n.x, r.get(), c.get(), FFTW_ESTIMATE);
  p.backward = fftw_plan_dft_c2r_3d(n.z, n.y, n.x, c.get(), r.get(), FFTW_ESTIMATE);
  plans_.emplace(key, p);
  return p;
}

PlanCache::~PlanCache() {
  for (auto& [key, p] : plans_) {
    fftw_destroy_plan(p.forward);
    fftw_destroy_plan(p.backward);
  }
}

}  // namespace vesselseg::detail
