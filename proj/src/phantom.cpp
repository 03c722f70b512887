// SPDX-License-Identifier: Apache-2.0
#include "vaguide/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vaguide/error.hpp"
#include "vaguide/rng.hpp"

namespace vaguide {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct ChamberRanges {
  const char *name;
  StructureKind kind;
  Vec3 center;        // canonical heart frame, mm
  double center_jitter;
  Vec3 radii_lo, radii_hi;
  double tilt_deg;    // random tilt about the heart x axis, +-
  double intensity_lo, intensity_hi;
  double amp_lo, amp_hi;
};

// Order is priority order when structures overlap.
constexpr ChamberRanges kRanges[] = {
    {"LV", StructureKind::ventricle, {14, 0, -12}, 3.0, {18, 18, 28}, {26, 26, 35}, 8.0, 0.30, 0.40, 0.12, 0.20},
    {"RV", StructureKind::ventricle, {-20, 6, -8}, 3.0, {15, 16, 24}, {20, 24, 32}, 8.0, 0.22, 0.30, 0.10, 0.18},
    {"LA", StructureKind::atrium, {14, -4, 30}, 3.0, {14, 14, 14}, {20, 20, 18}, 6.0, 0.45, 0.55, 0.04, 0.10},
    {"RA", StructureKind::atrium, {-20, -2, 28}, 3.0, {14, 14, 14}, {20, 20, 18}, 6.0, 0.52, 0.62, 0.04, 0.10},
    {"Ao", StructureKind::vessel, {2, 12, 34}, 2.0, {7, 7, 22}, {10, 10, 28}, 15.0, 0.65, 0.75, 0.02, 0.05},
    {"IVC", StructureKind::vessel, {-22, -22, -4}, 2.0, {8, 8, 25}, {11, 11, 30}, 10.0, 0.70, 0.80, 0.02, 0.05},
};

Vec3 lerp3(const Vec3 &lo, const Vec3 &hi, SplitMix64 &rng) {
  return {rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), rng.uniform(lo[2], hi[2])};
}

// Local x = lateral, local y = plane normal, local z = depth; x, y, z right-handed.
Pose plane_pose(const Vec3 &center, const Vec3 &lateral, const Vec3 &depth_hint) {
  const Vec3 x = normalized(lateral);
  const Vec3 z = normalized(depth_hint - dot(depth_hint, x) * x);
  const Vec3 y = cross(z, x);
  return Pose(center, Quaternion::from_basis(x, y, z));
}

Vec3 midpoint(const Vec3 &a, const Vec3 &b) { return 0.5 * (a + b); }

Pose rotated_local(const Pose &p, const Vec3 &axis, double deg) {
  return Pose(p.position(), p.orientation() * Quaternion::from_axis_angle(axis, deg * kDeg));
}

struct ChamberEval {
  double rho;       // normalised ellipsoidal radius
  double dist_mm;   // signed distance estimate to the surface
};

ChamberEval eval_chamber(const Ellipsoid &e, const Vec3 &world, double scale) {
  const Vec3 local = e.orientation.conjugate().rotate(world - e.center);
  double acc = 0.0;
  double rmin = e.radii[0];
  for (int i = 0; i < 3; ++i) {
    const double a = e.radii[i] * scale;
    acc += (local[i] / a) * (local[i] / a);
    rmin = std::min(rmin, e.radii[i]);
  }
  const double rho = std::sqrt(acc);
  return {rho, (rho - 1.0) * rmin * scale};
}

double pixel_value(const Phantom &ph, const std::vector<double> &scales, const Vec3 &p, std::uint64_t noise_seed,
                   std::uint64_t pixel_index, bool speckle) {
  if (!ph.bounds.contains(p)) return kBackgroundIntensity;
  double value = kBackgroundIntensity;
  bool filled = false;
  double wall = 0.0;
  for (std::size_t c = 0; c < ph.chambers.size(); ++c) {
    const Ellipsoid &e = ph.chambers[c];
    const ChamberEval ev = eval_chamber(e, p, scales[c]);
    if (!filled && ev.rho < 1.0) {
      value = e.intensity;
      filled = true;
    }
    const double d = ev.dist_mm / kWallSigmaMm;
    wall = std::max(wall, std::exp(-0.5 * d * d));
  }
  value += (kWallIntensity - value) * wall;
  if (speckle) {
    const double u = 2.0 * counter_uniform(noise_seed, pixel_index) - 1.0;
    value *= 1.0 + kSpeckleAmplitude * u;
  }
  return std::clamp(value, 0.0, 1.0);
}

void check_render_args(const Phantom &ph, double phase, int width, int height) {
  (void)ph;
  if (width < 8 || height < 8) fail(ErrorCode::invalid_argument, "slice dimensions must be at least 8x8");
  if (!(phase >= 0.0 && phase < 1.0)) fail(ErrorCode::invalid_argument, "cardiac phase must lie in [0, 1)");
}

std::vector<double> chamber_scales(const Phantom &ph, double phase) {
  std::vector<double> s;
  s.reserve(ph.chambers.size());
  for (const auto &e : ph.chambers) s.push_back(phase_scale(e, phase));
  return s;
}

}  // namespace

const Ellipsoid &Phantom::structure(std::string_view name) const {
  for (const auto &e : chambers)
    if (e.name == name) return e;
  fail(ErrorCode::data, "phantom has no structure named " + std::string(name));
}

Phantom make_phantom(std::uint64_t seed) {
  SplitMix64 rng(seed);
  Phantom ph;
  ph.seed = seed;
  ph.bounds = {{-120.0, -120.0, -120.0}, {120.0, 120.0, 120.0}};

  const Vec3 origin{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
  const Vec3 euler{rng.uniform(-15, 15), rng.uniform(-15, 15), rng.uniform(-20, 20)};
  ph.heart_frame = Pose(origin, quaternion_from_euler_zyx_deg(euler));

  for (const auto &r : kRanges) {
    Ellipsoid e;
    e.name = r.name;
    e.kind = r.kind;
    const Vec3 jitter{rng.uniform(-r.center_jitter, r.center_jitter), rng.uniform(-r.center_jitter, r.center_jitter),
                      rng.uniform(-r.center_jitter, r.center_jitter)};
    e.radii = lerp3(r.radii_lo, r.radii_hi, rng);
    const double tilt = rng.uniform(-r.tilt_deg, r.tilt_deg);
    e.intensity = rng.uniform(r.intensity_lo, r.intensity_hi);
    e.phase_amplitude = rng.uniform(r.amp_lo, r.amp_hi);
    e.center = ph.heart_frame.transform(r.center + jitter);
    e.orientation = canonical(ph.heart_frame.orientation() * Quaternion::from_axis_angle({1, 0, 0}, tilt * kDeg));
    ph.chambers.push_back(std::move(e));
  }
  return ph;
}

StandardPlaneSet standard_planes(const Phantom &ph) {
  // Constructions use the canonical heart frame, then map to world.
  const Pose to_heart = inverse(ph.heart_frame);
  auto c = [&](std::string_view n) { return to_heart.transform(ph.structure(n).center); };
  const Vec3 lv = c("LV"), rv = c("RV"), la = c("LA"), ra = c("RA"), ao = c("Ao"), ivc = c("IVC");
  const double lv_long = ph.structure("LV").radii[2];

  // Lateral axes are kept roughly perpendicular to the long axis so that no
  // plane's lateral axis aligns with another plane's beam axis; relative
  // Z-Y-X pitch between planes then stays well inside (-85, 85) degrees.
  const Vec3 long_axis{0, 0, 1}, lateral{1, 0, 0}, posterior{0, -1, 0};
  std::array<Pose, kNumPlanes> local;
  // Parasternal long axis: beam posterior, image tilted 40 degrees towards the
  // long axis, centred between the LV, LA and aortic root.
  local[0] = rotated_local(plane_pose((1.0 / 3.0) * (lv + la + ao), lateral, posterior), {0, 0, 1}, 40.0);
  // Short-axis stack: normal along the long axis, beam posterior.
  const Vec3 av_centre{0.5 * (lv[0] + ao[0]), 0.5 * (lv[1] + ao[1]), lv[2] + 0.9 * lv_long};
  local[1] = plane_pose(av_centre, lateral, posterior);
  local[2] = plane_pose(lv + 0.5 * lv_long * long_axis, lateral, posterior);
  local[3] = plane_pose(lv + (-0.1 * lv_long) * long_axis, lateral, posterior);
  // A4C: contains both ventricle-centre and atrium-centre midpoints; beam apex -> base.
  const Vec3 mid_v = midpoint(lv, rv), mid_a = midpoint(la, ra);
  const Pose a4c = plane_pose(midpoint(mid_v, mid_a), lv - rv, mid_a - mid_v);
  local[4] = a4c;
  // A5C: A4C tilted anteriorly about its lateral axis to open the outflow tract.
  local[5] = rotated_local(Pose(a4c.transform({0, 6, 0}), a4c.orientation()), {1, 0, 0}, -18.0);
  // A2C / A3C: A4C rotated about the beam (long) axis.
  local[6] = rotated_local(a4c, {0, 0, 1}, 40.0);
  local[7] = rotated_local(a4c, {0, 0, 1}, -40.0);
  // SC4C: four-chamber plane entered from below, beam tilted about the lateral
  // axis and shifted towards the right heart.
  local[8] = rotated_local(Pose(a4c.transform({-15, 0, -10}), a4c.orientation()), {1, 0, 0}, 30.0);
  // SC-IVC: beam running along the IVC into the right atrium.
  local[9] = plane_pose(midpoint(ivc, ra), lateral, ra - ivc);

  StandardPlaneSet set;
  for (int i = 0; i < kNumPlanes; ++i) set[i] = {std::string(kPlaneNames[i]), compose(ph.heart_frame, local[i])};
  return set;
}

double phase_scale(const Ellipsoid &e, double phase) {
  return 1.0 + e.phase_amplitude * std::sin(2.0 * std::numbers::pi * phase);
}

double intensity_at(const Phantom &ph, const Vec3 &world, double phase) {
  return pixel_value(ph, chamber_scales(ph, phase), world, 0, 0, false);
}

bool inside_any_chamber(const Phantom &ph, const Vec3 &world, double phase) {
  for (const auto &e : ph.chambers)
    if (eval_chamber(e, world, phase_scale(e, phase)).rho < 1.0) return true;
  return false;
}

Vec3 pixel_world_position(const Pose &probe, int row, int col, int width, int height, double fov_mm) {
  const double lx = ((col + 0.5) / width - 0.5) * fov_mm;
  const double lz = ((row + 0.5) / height - 0.5) * fov_mm;
  return probe.transform({lx, 0.0, lz});
}

SliceImage render_slice(const Phantom &ph, const Pose &probe, double phase, int width, int height,
                        std::uint64_t noise_seed, const RenderOptions &opt) {
  check_render_args(ph, phase, width, height);
  const auto scales = chamber_scales(ph, phase);
  SliceImage img{width, height, std::vector<float>(static_cast<std::size_t>(width) * height)};
#pragma omp parallel for schedule(static)
  for (int r = 0; r < height; ++r) {
    for (int col = 0; col < width; ++col) {
      const std::uint64_t idx = static_cast<std::uint64_t>(r) * width + col;
      img.data[idx] = static_cast<float>(
          pixel_value(ph, scales, pixel_world_position(probe, r, col, width, height, opt.fov_mm), noise_seed, idx,
                      opt.speckle));
    }
  }
  return img;
}

SliceImage render_slice_serial(const Phantom &ph, const Pose &probe, double phase, int width, int height,
                               std::uint64_t noise_seed, const RenderOptions &opt) {
  check_render_args(ph, phase, width, height);
  const auto scales = chamber_scales(ph, phase);
  SliceImage img{width, height, std::vector<float>(static_cast<std::size_t>(width) * height)};
  for (int r = 0; r < height; ++r) {
    for (int col = 0; col < width; ++col) {
      const std::uint64_t idx = static_cast<std::uint64_t>(r) * width + col;
      img.data[idx] = static_cast<float>(
          pixel_value(ph, scales, pixel_world_position(probe, r, col, width, height, opt.fov_mm), noise_seed, idx,
                      opt.speckle));
    }
  }
  return img;
}

double phase_at(double time_s, double heart_rate_hz) {
  if (!(heart_rate_hz > 0.0)) fail(ErrorCode::invalid_argument, "heart rate must be positive");
  if (!std::isfinite(time_s)) fail(ErrorCode::invalid_argument, "time must be finite");
  const double x = time_s * heart_rate_hz;
  const double f = x - std::floor(x);
  return f >= 1.0 ? 0.0 : f;
}

}  // namespace vaguide
