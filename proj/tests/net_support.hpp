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

// Network-level helpers shared by the unit and acceptance suites.
#pragma once

#include <algorithm>
#include <vector>

#include "support.hpp"
#include "vesselseg/netgraph.hpp"

namespace vstest {

namespace ng = vesselseg::netgraph;

using vesselseg::LabelMask;
using vesselseg::Volume;
using vesselseg::netgraph::ForwardOptions;
using vesselseg::netgraph::NetworkSpec;
using vesselseg::netgraph::ParamStore;

inline std::vector<Tensor4> random_inputs(const NetworkSpec& spec, Extent3 e, Rng& rng) {
  std::vector<Tensor4> v;
  for (int i = 0; i < spec.arity(); ++i) v.push_back(random_tensor(Shape4{1, e.z, e.y, e.x}, rng));
  return v;
}

inline ParamStore random_params(const NetworkSpec& spec, std::uint64_t seed) {
  ParamStore p = ng::init_weights(spec, ng::InitScheme::fan_in_uniform, seed);
  Rng rng(seed + 99);
  for (auto& l : p.layers)
    for (double& b : l.kernel.bias()) b = 0.1 * rand_sym(rng);
  return p;
}

/// Worst relative error between analytic and central-difference gradients
/// of the summed loss, checking every stride-th parameter.
inline double fd_check(const NetworkSpec& spec, ParamStore p, const std::vector<Tensor4>& in, const LabelMask& target,
                       const Volume<float>& w, ForwardOptions opts, std::size_t stride) {
  opts.keep_cache = true;
  const auto g = ng::backward(spec, p, ng::forward(spec, p, in, opts), target, w);
  auto objective = [&](const ParamStore& q) {
    return ng::evaluate_loss(ng::forward(spec, q, in, opts).prob, target, w).err_sum;
  };
  const double h = 1e-6;
  double worst = 0.0;
  std::size_t counter = 0;
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    auto check = [&](std::vector<double>& values, const std::vector<double>& grads) {
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (counter++ % stride != 0) continue;
        const double saved = values[i];
        values[i] = saved + h;
        const double up = objective(p);
        values[i] = saved - h;
        const double down = objective(p);
        values[i] = saved;
        worst = std::max(worst, grad_rel(grads[i], (up - down) / (2 * h)));
      }
    };
    check(p.layers[li].kernel.weights(), g.grads[li].weights());
    check(p.layers[li].kernel.bias(), g.grads[li].bias());
  }
  return worst;
}

}  // namespace vstest
