// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "vaguide/geometry.hpp"
#include "vaguide/rng.hpp"

namespace testutil {

// Random pose with Euler pitch restricted to (-85, 85) degrees.
inline vaguide::Pose random_pose(vaguide::SplitMix64 &rng, double extent_mm = 100.0) {
  const vaguide::Vec3 pos{rng.uniform(-extent_mm, extent_mm), rng.uniform(-extent_mm, extent_mm),
                          rng.uniform(-extent_mm, extent_mm)};
  const vaguide::Vec3 euler{rng.uniform(-179.9, 179.9), rng.uniform(-85.0, 85.0), rng.uniform(-179.9, 179.9)};
  return vaguide::Pose(pos, vaguide::quaternion_from_euler_zyx_deg(euler));
}

inline vaguide::Action6 random_action(vaguide::SplitMix64 &rng, double extent_mm = 50.0) {
  return {{rng.uniform(-extent_mm, extent_mm), rng.uniform(-extent_mm, extent_mm), rng.uniform(-extent_mm, extent_mm)},
          {rng.uniform(-179.9, 179.9), rng.uniform(-85.0, 85.0), rng.uniform(-179.9, 179.9)}};
}

inline double pose_max_diff(const vaguide::Pose &a, const vaguide::Pose &b) {
  const auto x = a.to_array(), y = b.to_array();
  double d = 0.0;
  for (int i = 0; i < 7; ++i) d = std::fmax(d, std::abs(x[i] - y[i]));
  return d;
}

}  // namespace testutil
