// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "oracles.hpp"
#include "vaguide/error.hpp"
#include "vaguide/phantom.hpp"

using namespace vaguide;

TEST_CASE("make_phantom is deterministic and seed sensitive") {
  CHECK(make_phantom(0) == make_phantom(0));
  const Phantom a = make_phantom(0), b = make_phantom(1);
  bool differs = false;
  for (std::size_t i = 0; i < a.chambers.size(); ++i) differs |= a.chambers[i].center != b.chambers[i].center;
  CHECK(differs);
}

TEST_CASE("phantom structure guarantees") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Phantom ph = make_phantom(seed * 7919 + 3);
    CHECK(ph.chambers.size() >= 5);
    const auto count = [&](StructureKind k) {
      return std::count_if(ph.chambers.begin(), ph.chambers.end(), [k](const auto &e) { return e.kind == k; });
    };
    CHECK(count(StructureKind::ventricle) >= 2);
    CHECK(count(StructureKind::atrium) >= 2);
    CHECK(count(StructureKind::vessel) >= 1);
    for (const auto &e : ph.chambers) {
      const double reach = *std::max_element(e.radii.begin(), e.radii.end()) * (1.0 + e.phase_amplitude);
      for (int i = 0; i < 3; ++i) {
        CHECK(e.center[i] - reach > ph.bounds.lo[i]);
        CHECK(e.center[i] + reach < ph.bounds.hi[i]);
      }
      CHECK(e.intensity >= 0.0);
      CHECK(e.intensity <= 1.0);
      CHECK(e.phase_amplitude >= 0.0);
      CHECK(e.phase_amplitude <= 0.3);
    }
    const auto &lv = ph.structure("LV");
    for (double r : lv.radii) {
      CHECK(r >= 15.0);
      CHECK(r <= 35.0);
    }
  }
}

TEST_CASE("standard planes") {
  const Phantom ph = make_phantom(42);
  const auto a = standard_planes(ph), b = standard_planes(ph);
  for (int i = 0; i < kNumPlanes; ++i) {
    CHECK(a[i].pose == b[i].pose);
    CHECK(a[i].name == kPlaneNames[i]);
  }

  SUBCASE("A4C plane contains the midpoint of the ventricle centres") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const Phantom p = make_phantom(seed);
      const auto planes = standard_planes(p);
      const auto m = oracle::homogeneous(planes[4].pose.to_array());
      const Vec3 normal{m[0][1], m[1][1], m[2][1]};
      const Vec3 origin{m[0][3], m[1][3], m[2][3]};
      const Vec3 mid = 0.5 * (p.structure("LV").center + p.structure("RV").center);
      CHECK(std::abs(dot(normal, mid - origin)) < 1.0);
      const Vec3 mid_a = 0.5 * (p.structure("LA").center + p.structure("RA").center);
      CHECK(std::abs(dot(normal, mid_a - origin)) < 1.0);
    }
  }

  SUBCASE("planes are pairwise distinct") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto planes = standard_planes(make_phantom(seed));
      for (int i = 0; i < kNumPlanes; ++i)
        for (int j = i + 1; j < kNumPlanes; ++j) {
          const auto d = pose_distance(planes[i].pose, planes[j].pose);
          CHECK((d.trans_mm > 5.0 || d.rot_deg > 5.0));
        }
    }
  }
}

TEST_CASE("render_slice") {
  const Phantom ph = make_phantom(5);
  const auto planes = standard_planes(ph);

  SUBCASE("far outside the bounds renders uniform background") {
    const SliceImage img = render_slice(ph, Pose::translation(1000, 1000, 1000), 0.3, 32, 32, 9);
    for (float v : img.data) CHECK(v == static_cast<float>(kBackgroundIntensity));
  }
  SUBCASE("deterministic, in range, and equal to the serial reference") {
    const SliceImage a = render_slice(ph, planes[4].pose, 0.4, 64, 48, 123);
    const SliceImage b = render_slice(ph, planes[4].pose, 0.4, 64, 48, 123);
    CHECK(a == b);
    CHECK(a == render_slice_serial(ph, planes[4].pose, 0.4, 64, 48, 123));
    CHECK(a.data.size() == 64u * 48u);
    for (float v : a.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  SUBCASE("cardiac phase changes the image") {
    const SliceImage a = render_slice(ph, planes[4].pose, 0.25, 64, 64, 1);
    const SliceImage b = render_slice(ph, planes[4].pose, 0.75, 64, 64, 1);
    double mad = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) mad += std::abs(a.data[i] - b.data[i]);
    CHECK(mad / a.data.size() > 0.0);
  }
  SUBCASE("plane images show structure") {
    const SliceImage a = render_slice(ph, planes[4].pose, 0.0, 64, 64, 1, {120.0, false});
    const auto [lo, hi] = std::minmax_element(a.data.begin(), a.data.end());
    CHECK(*hi - *lo > 0.3f);
  }
  SUBCASE("argument validation") {
    CHECK_THROWS_AS(render_slice(ph, planes[0].pose, 1.0, 32, 32, 0), Error);
    CHECK_THROWS_AS(render_slice(ph, planes[0].pose, -0.1, 32, 32, 0), Error);
    CHECK_THROWS_AS(render_slice(ph, planes[0].pose, 0.5, 4, 32, 0), Error);
  }
}

namespace {

Phantom single_chamber(double amplitude) {
  Phantom ph;
  ph.bounds = {{-100, -100, -100}, {100, 100, 100}};
  Ellipsoid e;
  e.name = "LV";
  e.radii = {20, 15, 25};
  e.intensity = 0.3;
  e.phase_amplitude = amplitude;
  ph.chambers.push_back(e);
  return ph;
}

int chamber_pixels(const Phantom &ph, double phase) {
  int n = 0;
  const Pose probe = Pose::identity();  // plane y = 0 through the chamber centre
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) n += inside_any_chamber(ph, pixel_world_position(probe, r, c, 64, 64, 120.0), phase);
  return n;
}

}  // namespace

TEST_CASE("chamber inflation is monotone in the phase amplitude") {
  int prev = -1;
  for (double amp : {0.0, 0.05, 0.1, 0.2, 0.3}) {
    const int n = chamber_pixels(single_chamber(amp), 0.25);
    CHECK(n >= prev);
    prev = n;
  }
  CHECK(chamber_pixels(single_chamber(0.3), 0.25) > chamber_pixels(single_chamber(0.0), 0.25));
}

TEST_CASE("zero amplitude removes every phase dependence") {
  Phantom ph = make_phantom(8);
  for (auto &e : ph.chambers) e.phase_amplitude = 0.0;
  const Pose probe = standard_planes(ph)[4].pose;
  const SliceImage ref = render_slice(ph, probe, 0.0, 32, 32, 77);
  for (double phase : {0.1, 0.25, 0.5, 0.9}) CHECK(render_slice(ph, probe, phase, 32, 32, 77) == ref);
}

TEST_CASE("phase_at") {
  CHECK(phase_at(0.0, 1.2) == 0.0);
  CHECK(phase_at(1.0, 1.0) == 0.0);
  CHECK(phase_at(0.5, 1.2) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(phase_at(10.3, 1.0) == doctest::Approx(0.3).epsilon(1e-9));
  CHECK_THROWS_AS(phase_at(1.0, 0.0), Error);
  CHECK_THROWS_AS(phase_at(1.0, -2.0), Error);
}
