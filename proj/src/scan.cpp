// SPDX-License-Identifier: Apache-2.0
#include "vaguide/scan.hpp"

#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "vaguide/binary_io.hpp"
#include "vaguide/crc32c.hpp"
#include "vaguide/error.hpp"
#include "vaguide/rng.hpp"

namespace vaguide {
namespace {

constexpr char kScanMagic[4] = {'U', 'S', 'C', 'N'};
constexpr std::uint16_t kScanVersion = 1;

Action6 random_offset(SplitMix64 &rng, double mm, double deg) {
  Action6 a;
  for (int i = 0; i < 3; ++i) a.translation[i] = mm * rng.normal();
  for (int i = 0; i < 3; ++i) a.rotation_deg[i] = deg * rng.normal();
  return a;
}

Action6 scaled(const Action6 &a, double s) {
  return {s * a.translation, s * a.rotation_deg};
}

Action6 sum(const Action6 &a, const Action6 &b) {
  return {a.translation + b.translation, a.rotation_deg + b.rotation_deg};
}

}  // namespace

Scan generate_scan(const Phantom &ph, std::uint64_t seed, const ScanConfig &cfg) {
  if (cfg.frames_per_leg < 2) fail(ErrorCode::invalid_argument, "frames_per_leg must be >= 2");
  if (cfg.pause_frames < 1) fail(ErrorCode::invalid_argument, "pause_frames must be >= 1");
  if (!(cfg.frame_rate_hz > 0.0)) fail(ErrorCode::invalid_argument, "frame rate must be positive");

  const StandardPlaneSet planes = standard_planes(ph);
  SplitMix64 rng(seed);

  Scan scan;
  scan.phantom_seed = ph.seed;
  std::vector<Pose> poses;
  for (int k = 0; k < kNumPlanes; ++k) {
    if (k > 0) {
      // Smooth excursion away from the straight path, vanishing at both ends,
      // plus independent per-frame hand tremor.
      const Action6 detour = random_offset(rng, cfg.detour, cfg.detour);
      const Pose &from = planes[k - 1].pose;
      const Pose &to = planes[k].pose;
      for (int j = 0; j < cfg.frames_per_leg; ++j) {
        const double s = static_cast<double>(j + 1) / (cfg.frames_per_leg + 1);
        const double bump = std::sin(std::numbers::pi * s);
        const Action6 off = sum(scaled(detour, bump), random_offset(rng, cfg.jitter, cfg.jitter));
        poses.push_back(apply_action(interpolate(from, to, s), off));
      }
    }
    scan.plane_marks[k] = static_cast<int>(poses.size());
    for (int j = 0; j < cfg.pause_frames; ++j) poses.push_back(planes[k].pose);
  }

  const int n = static_cast<int>(poses.size());
  scan.frames.resize(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    Frame &f = scan.frames[i];
    f.timestamp_s = i / cfg.frame_rate_hz;
    f.pose = poses[i];
    f.phase = phase_at(f.timestamp_s, cfg.heart_rate_hz);
    f.image = render_slice_serial(ph, f.pose, f.phase, cfg.image_size, cfg.image_size,
                                  derive_seed(seed, static_cast<std::uint64_t>(i)), {cfg.fov_mm, true});
  }
  return scan;
}

PlaneLabels compute_labels(const Scan &scan, int frame_index) {
  if (frame_index < 0 || frame_index >= scan.size())
    fail(ErrorCode::invalid_argument, "frame index " + std::to_string(frame_index) + " out of range [0, " +
                                          std::to_string(scan.size()) + ")");
  PlaneLabels labels;
  const Pose &p = scan.frames[frame_index].pose;
  for (int i = 0; i < kNumPlanes; ++i) labels[i] = relative_action(p, scan.frames[scan.plane_marks[i]].pose);
  return labels;
}

std::vector<int> segmental_indices(int query_index, int L, std::uint64_t rng_seed, bool allow_fallback,
                                   bool *fallback_used) {
  if (L < 2) fail(ErrorCode::invalid_argument, "sequence length must be >= 2");
  if (query_index < 0) fail(ErrorCode::invalid_argument, "negative query index");
  const int segments = L - 1;
  const int pool = query_index;  // frames strictly before the query
  std::vector<int> idx;
  idx.reserve(L);
  if (fallback_used) *fallback_used = false;
  if (pool < segments) {
    if (!allow_fallback)
      fail(ErrorCode::insufficient_history, "query " + std::to_string(query_index) + " has " + std::to_string(pool) +
                                                " history frames, need " + std::to_string(segments));
    if (fallback_used) *fallback_used = true;
    const int pad = segments - pool;
    for (int i = 0; i < pad; ++i) idx.push_back(pool > 0 ? 0 : query_index);
    for (int i = 0; i < pool; ++i) idx.push_back(i);
    idx.push_back(query_index);
    return idx;
  }
  SplitMix64 rng(rng_seed);
  const int base = pool / segments;
  const int rem = pool % segments;
  int start = 0;
  for (int s = 0; s < segments; ++s) {
    const int len = base + (s < rem ? 1 : 0);
    idx.push_back(start + static_cast<int>(rng.below(static_cast<std::uint64_t>(len))));
    start += len;
  }
  idx.push_back(query_index);
  return idx;
}

SequenceSample sample_from_indices(const Scan &scan, std::vector<int> indices, bool fallback) {
  if (indices.size() < 2) fail(ErrorCode::invalid_argument, "a sequence needs at least two frames");
  SequenceSample s;
  s.query_index = indices.back();
  s.fallback = fallback;
  for (int i : indices) {
    if (i < 0 || i >= scan.size()) fail(ErrorCode::invalid_argument, "sample frame index out of range");
    s.images.push_back(scan.frames[i].image);
  }
  for (std::size_t i = 0; i + 1 < indices.size(); ++i)
    s.actions.push_back(relative_action(scan.frames[indices[i]].pose, scan.frames[indices[i + 1]].pose));
  s.labels = compute_labels(scan, s.query_index);
  s.frame_indices = std::move(indices);
  return s;
}

SequenceSample segmental_sample(const Scan &scan, int query_index, int L, std::uint64_t rng_seed,
                                bool allow_fallback) {
  if (query_index >= scan.size()) fail(ErrorCode::invalid_argument, "query index beyond end of scan");
  if (scan.size() < L) fail(ErrorCode::invalid_argument, "scan shorter than sequence length");
  bool fallback = false;
  auto idx = segmental_indices(query_index, L, rng_seed, allow_fallback, &fallback);
  return sample_from_indices(scan, std::move(idx), fallback);
}

void write_scan(const Scan &scan, const std::filesystem::path &path) {
  using nlohmann::json;
  json header;
  header["width"] = scan.width();
  header["height"] = scan.height();
  header["channels"] = scan.channels;
  header["frame_count"] = scan.size();
  header["phantom_seed"] = scan.phantom_seed;
  json marks = json::object();
  for (int i = 0; i < kNumPlanes; ++i) marks[std::to_string(i + 1)] = scan.plane_marks[i];
  header["plane_marks"] = marks;
  std::vector<double> poses, timestamps, phases;
  for (const auto &f : scan.frames) {
    auto a = f.pose.to_array();
    poses.insert(poses.end(), a.begin(), a.end());
    timestamps.push_back(f.timestamp_s);
    phases.push_back(f.phase);
  }
  header["poses"] = poses;
  header["timestamps"] = timestamps;
  header["phases"] = phases;
  const std::string text = header.dump();

  io::ByteWriter w;
  w.bytes(std::as_bytes(std::span(kScanMagic)));
  w.u16(kScanVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.str(text);
  const std::size_t payload_start = w.size();
  for (const auto &f : scan.frames) {
    if (f.image.width != scan.width() || f.image.height != scan.height())
      fail(ErrorCode::data, "all frames of a scan must share image dimensions");
    w.f32s(f.image.data);
  }
  const std::uint32_t crc = crc32c(w.tail(payload_start));
  w.u32(crc);
  io::write_file(path, w.data());
}

Scan read_scan(const std::filesystem::path &path) {
  using nlohmann::json;
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, path.string());
  if (r.remaining() < 4) fail(ErrorCode::truncated, path.string() + ": truncated before magic");
  if (r.str(4) != std::string_view(kScanMagic, 4)) fail(ErrorCode::format, path.string() + ": not a scan file (bad magic)");
  const std::uint16_t version = r.u16();
  if (version != kScanVersion)
    fail(ErrorCode::format, path.string() + ": unsupported scan version " + std::to_string(version));
  const std::uint32_t header_len = r.u32();
  json header;
  try {
    header = json::parse(r.str(header_len));
  } catch (const json::exception &e) {
    fail(ErrorCode::format, path.string() + ": malformed header: " + e.what());
  }

  Scan scan;
  std::vector<double> poses, timestamps, phases;
  int width = 0, height = 0, count = 0;
  try {
    width = header.at("width").get<int>();
    height = header.at("height").get<int>();
    scan.channels = header.at("channels").get<int>();
    count = header.at("frame_count").get<int>();
    scan.phantom_seed = header.at("phantom_seed").get<std::uint64_t>();
    const auto &marks = header.at("plane_marks");
    for (int i = 0; i < kNumPlanes; ++i) scan.plane_marks[i] = marks.at(std::to_string(i + 1)).get<int>();
    poses = header.at("poses").get<std::vector<double>>();
    timestamps = header.at("timestamps").get<std::vector<double>>();
    phases = header.at("phases").get<std::vector<double>>();
  } catch (const json::exception &e) {
    fail(ErrorCode::format, path.string() + ": bad header field: " + e.what());
  }
  if (width < 0 || height < 0 || count < 0 || scan.channels != 1 || poses.size() != 7U * count ||
      timestamps.size() != static_cast<std::size_t>(count) || phases.size() != static_cast<std::size_t>(count))
    fail(ErrorCode::format, path.string() + ": inconsistent header");
  for (int m : scan.plane_marks)
    if (m < 0 || m >= count) fail(ErrorCode::data, path.string() + ": plane mark out of range");

  const std::size_t payload_start = r.position();
  const std::size_t pixels = static_cast<std::size_t>(width) * height;
  scan.frames.resize(count);
  for (int i = 0; i < count; ++i) {
    Frame &f = scan.frames[i];
    f.timestamp_s = timestamps[i];
    f.phase = phases[i];
    f.pose = Pose::from_array(std::span(poses).subspan(7U * i, 7));
    f.image.width = width;
    f.image.height = height;
    f.image.data.resize(pixels);
    r.f32s(f.image.data);
  }
  const std::uint32_t actual = crc32c(std::span(bytes).subspan(payload_start, r.position() - payload_start));
  const std::uint32_t stored = r.u32();
  if (actual != stored) fail(ErrorCode::checksum, path.string() + ": payload checksum mismatch");
  if (r.remaining() != 0) fail(ErrorCode::format, path.string() + ": trailing bytes after checksum");
  return scan;
}

}  // namespace vaguide
