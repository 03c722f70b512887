// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "oracles.hpp"
#include "vaguide/binary_io.hpp"
#include "vaguide/dataset.hpp"
#include "vaguide/error.hpp"
#include "vaguide/scan.hpp"

using namespace vaguide;
namespace fs = std::filesystem;

namespace {

ScanConfig small_config() {
  ScanConfig cfg;
  cfg.frames_per_leg = 6;
  cfg.pause_frames = 3;
  cfg.image_size = 16;
  return cfg;
}

const Scan &shared_scan() {
  static const Scan scan = generate_scan(make_phantom(3), 99, small_config());
  return scan;
}

fs::path temp_dir(const std::string &name) {
  const fs::path p = fs::temp_directory_path() / ("vaguide_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ErrorCode code_of(auto &&fn) {
  try {
    fn();
  } catch (const Error &e) {
    return e.code();
  }
  FAIL("expected an exception");
  return ErrorCode::invalid_argument;
}

}  // namespace

TEST_CASE("generate_scan frame count") {
  for (auto [legs, pause] : {std::pair{2, 1}, {5, 3}, {8, 4}}) {
    ScanConfig cfg = small_config();
    cfg.frames_per_leg = legs;
    cfg.pause_frames = pause;
    const Scan s = generate_scan(make_phantom(1), 5, cfg);
    CHECK(s.size() == 10 * (legs + pause) - legs);
  }
  ScanConfig bad = small_config();
  bad.frames_per_leg = 1;
  CHECK_THROWS_AS(generate_scan(make_phantom(1), 5, bad), Error);
}

TEST_CASE("scan structure") {
  const Scan &s = shared_scan();
  const auto planes = standard_planes(make_phantom(3));
  for (int i = 0; i < kNumPlanes; ++i) {
    const Frame &marked = s.frames[s.plane_marks[i]];
    CHECK(pose_distance(marked.pose, planes[i].pose).trans_mm < 1e-6);
    CHECK(marked.pose == planes[i].pose);
    // The pause group: identical poses, advancing phase, distinct images.
    for (int j = 1; j < small_config().pause_frames; ++j) {
      const Frame &f = s.frames[s.plane_marks[i] + j];
      CHECK(f.pose == marked.pose);
      CHECK(f.phase != marked.phase);
      CHECK(f.image != marked.image);
    }
  }
  for (int i = 1; i < s.size(); ++i) CHECK(s.frames[i].timestamp_s > s.frames[i - 1].timestamp_s);
  for (const auto &f : s.frames) {
    CHECK(f.phase >= 0.0);
    CHECK(f.phase < 1.0);
  }
  CHECK(generate_scan(make_phantom(3), 99, small_config()) == s);
}

TEST_CASE("compute_labels") {
  const Scan &s = shared_scan();
  const auto at_a4c = compute_labels(s, s.plane_marks[4]);
  for (double v : at_a4c[4].to_array()) CHECK(v == 0.0);

  // Frames sharing a pose share every label, regardless of phase.
  for (int i = 0; i < s.size(); ++i)
    for (int j = i + 1; j < s.size(); ++j)
      if (s.frames[i].pose == s.frames[j].pose) CHECK(compute_labels(s, i) == compute_labels(s, j));

  for (int f : {0, 7, 20, s.size() - 1}) {
    const auto labels = compute_labels(s, f);
    for (int k = 0; k < kNumPlanes; ++k) {
      const auto want = oracle::action_from_matrix(
          oracle::matmul(oracle::inverse(oracle::homogeneous(s.frames[f].pose.to_array())),
                         oracle::homogeneous(s.frames[s.plane_marks[k]].pose.to_array())));
      const auto got = labels[k].to_array();
      for (int c = 0; c < 3; ++c) CHECK(std::abs(got[c] - want[c]) < 1e-9);
      for (int c = 3; c < 6; ++c) CHECK(oracle::angle_diff_deg(got[c], want[c]) < 1e-7);
    }
  }
  CHECK(code_of([&] { compute_labels(s, s.size()); }) == ErrorCode::invalid_argument);
  CHECK(code_of([&] { compute_labels(s, -1); }) == ErrorCode::invalid_argument);
}

TEST_CASE("segmental_sample") {
  const Scan &s = shared_scan();
  SUBCASE("L = 2 gives one history frame and the query") {
    const auto smp = segmental_sample(s, 30, 2, 1);
    CHECK(smp.length() == 2);
    CHECK(smp.frame_indices.back() == 30);
    CHECK(smp.frame_indices[0] < 30);
    CHECK(smp.actions.size() == 1);
  }
  SUBCASE("L = 4 law") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const int q = 3 + static_cast<int>(seed % (s.size() - 3));
      const auto smp = segmental_sample(s, q, 4, seed);
      REQUIRE(smp.frame_indices.size() == 4);
      CHECK(smp.frame_indices.back() == q);
      for (int i = 0; i + 1 < 4; ++i) CHECK(smp.frame_indices[i] < smp.frame_indices[i + 1]);
      for (int i = 0; i < 3; ++i)
        CHECK(smp.actions[i] ==
              relative_action(s.frames[smp.frame_indices[i]].pose, s.frames[smp.frame_indices[i + 1]].pose));
      CHECK(smp.labels == compute_labels(s, q));
      CHECK(smp.images.back() == s.frames[q].image);
    }
  }
  SUBCASE("segment bounds with remainder going to the earliest segments") {
    // 11 history frames over 3 segments -> sizes 4, 4, 3.
    std::set<int> seen[3];
    for (std::uint64_t seed = 0; seed < 2000; ++seed) {
      const auto idx = segmental_indices(11, 4, seed, false);
      for (int k = 0; k < 3; ++k) seen[k].insert(idx[k]);
    }
    CHECK(seen[0] == std::set<int>{0, 1, 2, 3});
    CHECK(seen[1] == std::set<int>{4, 5, 6, 7});
    CHECK(seen[2] == std::set<int>{8, 9, 10});
  }
  SUBCASE("determinism") {
    CHECK(segmental_sample(s, 40, 4, 17).frame_indices == segmental_sample(s, 40, 4, 17).frame_indices);
  }
  SUBCASE("insufficient history") {
    CHECK(code_of([&] { segmental_sample(s, 2, 4, 0); }) == ErrorCode::insufficient_history);
    const auto fb = segmental_sample(s, 2, 4, 0, true);
    CHECK(fb.fallback);
    CHECK(fb.frame_indices == std::vector<int>{0, 0, 1, 2});
    const auto first = segmental_sample(s, 0, 4, 0, true);
    CHECK(first.frame_indices == std::vector<int>{0, 0, 0, 0});
    for (const auto &a : first.actions) CHECK(a == Action6::zero());
    CHECK_FALSE(segmental_sample(s, 3, 4, 0, true).fallback);
  }
}

TEST_CASE("inter-frame motion is nondegenerate and unit balanced") {
  const Scan s = generate_scan(make_phantom(11), 4);
  double mean_abs[6] = {};
  int n = 0;
  for (int q = 3; q < s.size(); q += 2) {
    const auto smp = segmental_sample(s, q, 4, static_cast<std::uint64_t>(q));
    for (const auto &a : smp.actions) {
      for (int c = 0; c < 6; ++c) mean_abs[c] += std::abs(a[c]);
      ++n;
    }
  }
  for (double &m : mean_abs) {
    m /= n;
    CHECK(m > 0.5);
  }
  double label_t = 0, label_r = 0;
  for (int f = 0; f < s.size(); ++f)
    for (const auto &l : compute_labels(s, f)) {
      for (int c = 0; c < 3; ++c) label_t += std::abs(l[c]);
      for (int c = 3; c < 6; ++c) label_r += std::abs(l[c]);
    }
  const double ratio = label_t / label_r;
  CHECK(ratio > 0.1);
  CHECK(ratio < 10.0);
}

TEST_CASE("scan file round trip and corruption") {
  const fs::path dir = temp_dir("scanio");
  const Scan &s = shared_scan();
  const fs::path path = dir / "a.uscn";
  write_scan(s, path);
  CHECK(read_scan(path) == s);

  auto bytes = io::read_file(path);
  SUBCASE("payload byte flip -> checksum") {
    bytes[bytes.size() - 10] ^= std::byte{0x01};
    io::write_file(dir / "b.uscn", bytes);
    CHECK(code_of([&] { read_scan(dir / "b.uscn"); }) == ErrorCode::checksum);
  }
  SUBCASE("wrong magic -> format") {
    bytes[0] = std::byte{'X'};
    io::write_file(dir / "c.uscn", bytes);
    CHECK(code_of([&] { read_scan(dir / "c.uscn"); }) == ErrorCode::format);
  }
  SUBCASE("wrong version -> format") {
    bytes[4] = std::byte{7};
    io::write_file(dir / "d.uscn", bytes);
    CHECK(code_of([&] { read_scan(dir / "d.uscn"); }) == ErrorCode::format);
  }
  SUBCASE("truncated payload") {
    bytes.resize(bytes.size() - 100);
    io::write_file(dir / "e.uscn", bytes);
    CHECK(code_of([&] { read_scan(dir / "e.uscn"); }) == ErrorCode::truncated);
  }
  SUBCASE("missing file -> io") {
    CHECK(code_of([&] { read_scan(dir / "missing.uscn"); }) == ErrorCode::io);
  }
}

TEST_CASE("build_dataset splits by phantom") {
  const fs::path dir = temp_dir("dataset");
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < 10; ++i) seeds.push_back(i);
  ScanConfig cfg = small_config();
  cfg.frames_per_leg = 2;
  cfg.pause_frames = 1;
  cfg.image_size = 8;
  const Manifest m = build_dataset(seeds, 2, dir / "a", 0.8, cfg);
  const auto train = m.split("train"), val = m.split("val");
  CHECK(train.size() == 16);
  CHECK(val.size() == 4);
  std::set<std::uint64_t> tp, vp;
  for (const auto &e : train) tp.insert(e.phantom_seed);
  for (const auto &e : val) vp.insert(e.phantom_seed);
  CHECK(tp.size() == 8);
  CHECK(vp.size() == 2);
  for (auto p : tp) CHECK(vp.count(p) == 0);

  const Manifest again = read_manifest(dir / "a" / "manifest.json");
  CHECK(again.scans.size() == 20);
  CHECK(load_split(again, "val").size() == 4);

  build_dataset(seeds, 2, dir / "b", 0.8, cfg);
  std::ifstream fa(dir / "a" / "manifest.json"), fb(dir / "b" / "manifest.json");
  const std::string ta((std::istreambuf_iterator<char>(fa)), {}), tb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(ta == tb);
  CHECK(io::read_file(dir / "a" / train[3].path) == io::read_file(dir / "b" / train[3].path));

  Manifest leaky = m;
  leaky.scans[0].split = "val";
  CHECK(code_of([&] { validate_manifest(leaky); }) == ErrorCode::data);
  CHECK_THROWS_AS(build_dataset({}, 1, dir / "c"), Error);
}

TEST_CASE("trajectory labels stay clear of the Euler singularity") {
  ScanConfig cfg;
  cfg.image_size = 8;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scan s = generate_scan(make_phantom(seed), seed + 1000, cfg);
    double worst = 0.0;
    for (int f = 0; f < s.size(); ++f)
      for (const auto &l : compute_labels(s, f)) worst = std::max(worst, std::abs(l.rotation_deg[1]));
    CHECK(worst < 85.0);
  }
}
