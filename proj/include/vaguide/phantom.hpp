// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "vaguide/geometry.hpp"

namespace vaguide {

enum class StructureKind { ventricle, atrium, vessel };

struct Ellipsoid {
  std::string name;
  StructureKind kind = StructureKind::ventricle;
  Vec3 center{};       // mm
  Vec3 radii{};        // mm, along the local axes
  Quaternion orientation{};
  double intensity = 0.5;        // [0, 1]
  double phase_amplitude = 0.0;  // [0, 0.3]

  friend bool operator==(const Ellipsoid &, const Ellipsoid &) = default;
};

struct Box {
  Vec3 lo{};
  Vec3 hi{};
  bool contains(const Vec3 &p) const {
    for (int i = 0; i < 3; ++i)
      if (p[i] < lo[i] || p[i] > hi[i]) return false;
    return true;
  }
  friend bool operator==(const Box &, const Box &) = default;
};

struct Phantom {
  std::uint64_t seed = 0;
  Box bounds{};
  Pose heart_frame{};  // canonical heart axes: +z apex->base, +x towards the left heart
  std::vector<Ellipsoid> chambers;

  const Ellipsoid &structure(std::string_view name) const;
  friend bool operator==(const Phantom &, const Phantom &) = default;
};

inline constexpr int kNumPlanes = 10;
inline constexpr std::array<std::string_view, kNumPlanes> kPlaneNames = {
    "PLAX", "PSAX-AV", "PSAX-MV", "PSAX-PM", "A4C", "A5C", "A2C", "A3C", "SC4C", "SC-IVC"};

struct StandardPlane {
  std::string name;
  Pose pose;
};

using StandardPlaneSet = std::array<StandardPlane, kNumPlanes>;

struct SliceImage {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // row-major, values in [0, 1]

  float at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
  friend bool operator==(const SliceImage &, const SliceImage &) = default;
};

struct RenderOptions {
  double fov_mm = 120.0;  // square field of view, centred on the probe position
  bool speckle = true;
};

// Intensity model constants.
inline constexpr double kBackgroundIntensity = 0.1;
inline constexpr double kWallIntensity = 0.9;
inline constexpr double kWallSigmaMm = 2.0;
inline constexpr double kSpeckleAmplitude = 0.15;

Phantom make_phantom(std::uint64_t seed);
StandardPlaneSet standard_planes(const Phantom &ph);

// Chamber scale factor at a cardiac phase.
double phase_scale(const Ellipsoid &e, double phase);

// Noise-free intensity of the phantom at a world point.
double intensity_at(const Phantom &ph, const Vec3 &world, double phase);

// Whether the point lies inside any chamber (used by inflation checks).
bool inside_any_chamber(const Phantom &ph, const Vec3 &world, double phase);

// Samples the probe's imaging plane (local x = lateral/columns, local z =
// depth/rows). OpenMP-parallel over rows; output is independent of thread
// count because every pixel is computed independently.
SliceImage render_slice(const Phantom &ph, const Pose &probe, double phase, int width, int height,
                        std::uint64_t noise_seed, const RenderOptions &opt = {});

// Serial reference kept for equivalence tests and benchmarks.
SliceImage render_slice_serial(const Phantom &ph, const Pose &probe, double phase, int width, int height,
                               std::uint64_t noise_seed, const RenderOptions &opt = {});

// World position of pixel centre (row, col) for a probe pose.
Vec3 pixel_world_position(const Pose &probe, int row, int col, int width, int height, double fov_mm);

double phase_at(double time_s, double heart_rate_hz);

}  // namespace vaguide
