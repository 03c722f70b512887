// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "vaguide/geometry.hpp"
#include "vaguide/phantom.hpp"

namespace vaguide {

struct Frame {
  double timestamp_s = 0.0;
  Pose pose;
  double phase = 0.0;
  SliceImage image;

  friend bool operator==(const Frame &, const Frame &) = default;
};

struct Scan {
  std::vector<Frame> frames;
  std::array<int, kNumPlanes> plane_marks{};  // plane i (0-based) -> marked frame index
  std::uint64_t phantom_seed = 0;
  int channels = 1;

  int size() const { return static_cast<int>(frames.size()); }
  int width() const { return frames.empty() ? 0 : frames.front().image.width; }
  int height() const { return frames.empty() ? 0 : frames.front().image.height; }
  friend bool operator==(const Scan &, const Scan &) = default;
};

struct ScanConfig {
  int frames_per_leg = 20;
  int pause_frames = 5;
  double frame_rate_hz = 10.0;
  double heart_rate_hz = 1.2;
  double jitter = 1.5;       // per-frame jitter: mm for translation, deg for rotation
  double detour = 12.0;      // smooth per-leg excursion, mm / deg
  int image_size = 64;
  double fov_mm = 120.0;
};

// Visits the ten planes in clinical order, pausing at each one. Total frames:
// 10 * (frames_per_leg + pause_frames) - frames_per_leg.
Scan generate_scan(const Phantom &ph, std::uint64_t seed, const ScanConfig &cfg = {});

using PlaneLabels = std::array<Action6, kNumPlanes>;

PlaneLabels compute_labels(const Scan &scan, int frame_index);

struct SequenceSample {
  std::vector<int> frame_indices;     // L indices, ascending, last = query
  std::vector<SliceImage> images;     // L images
  std::vector<Action6> actions;       // L-1 inter-frame actions
  PlaneLabels labels{};               // query frame -> each standard plane
  int query_index = 0;
  bool fallback = false;              // history was padded by repeating the earliest frame

  int length() const { return static_cast<int>(images.size()); }
};

// Segmental (TSN-style) sampling over the query's past: frames
// [0, query_index) split into L-1 equal segments, earliest segments taking the
// remainder, one uniform draw per segment. Throws insufficient_history when
// query_index < L-1 unless allow_fallback is set.
SequenceSample segmental_sample(const Scan &scan, int query_index, int L, std::uint64_t rng_seed,
                                bool allow_fallback = false);

// Sample index layout only; shared by the sampler and its tests.
std::vector<int> segmental_indices(int query_index, int L, std::uint64_t rng_seed, bool allow_fallback,
                                   bool *fallback_used = nullptr);

// Builds a sample from explicit frame indices (ascending, last = query).
SequenceSample sample_from_indices(const Scan &scan, std::vector<int> indices, bool fallback = false);

void write_scan(const Scan &scan, const std::filesystem::path &path);
Scan read_scan(const std::filesystem::path &path);

}  // namespace vaguide
