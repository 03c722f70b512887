// SPDX-License-Identifier: Apache-2.0
#include "vaguide/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vaguide/error.hpp"
#include "vaguide/rng.hpp"

namespace vaguide {
namespace {

using nlohmann::json;

json config_to_json(const ScanConfig &c) {
  return {{"frames_per_leg", c.frames_per_leg}, {"pause_frames", c.pause_frames},
          {"frame_rate_hz", c.frame_rate_hz},   {"heart_rate_hz", c.heart_rate_hz},
          {"jitter", c.jitter},                 {"detour", c.detour},
          {"image_size", c.image_size},         {"fov_mm", c.fov_mm}};
}

ScanConfig config_from_json(const json &j) {
  ScanConfig c;
  c.frames_per_leg = j.value("frames_per_leg", c.frames_per_leg);
  c.pause_frames = j.value("pause_frames", c.pause_frames);
  c.frame_rate_hz = j.value("frame_rate_hz", c.frame_rate_hz);
  c.heart_rate_hz = j.value("heart_rate_hz", c.heart_rate_hz);
  c.jitter = j.value("jitter", c.jitter);
  c.detour = j.value("detour", c.detour);
  c.image_size = j.value("image_size", c.image_size);
  c.fov_mm = j.value("fov_mm", c.fov_mm);
  return c;
}

}  // namespace

std::vector<ManifestEntry> Manifest::split(const std::string &name) const {
  std::vector<ManifestEntry> out;
  std::copy_if(scans.begin(), scans.end(), std::back_inserter(out), [&](const auto &e) { return e.split == name; });
  return out;
}

Manifest build_dataset(const std::vector<std::uint64_t> &phantom_seeds, int scans_per_phantom,
                       const std::filesystem::path &out_dir, double train_fraction, const ScanConfig &cfg) {
  if (phantom_seeds.empty()) fail(ErrorCode::invalid_argument, "dataset needs at least one phantom seed");
  if (scans_per_phantom < 1) fail(ErrorCode::invalid_argument, "scans_per_phantom must be >= 1");
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0))
    fail(ErrorCode::invalid_argument, "train fraction must lie in [0, 1]");
  if (std::set<std::uint64_t>(phantom_seeds.begin(), phantom_seeds.end()).size() != phantom_seeds.size())
    fail(ErrorCode::invalid_argument, "phantom seeds must be distinct");

  const auto n = static_cast<long long>(phantom_seeds.size());
  const long long n_train = std::clamp(std::llround(train_fraction * static_cast<double>(n)), 0LL, n);

  Manifest m;
  m.root = out_dir;
  m.scan_config = cfg;
  for (long long p = 0; p < n; ++p) {
    for (int k = 0; k < scans_per_phantom; ++k) {
      ManifestEntry e;
      e.phantom_seed = phantom_seeds[p];
      e.scan_seed = derive_seed(phantom_seeds[p], static_cast<std::uint64_t>(k));
      e.split = p < n_train ? "train" : "val";
      std::ostringstream dir;
      dir << "phantom_" << phantom_seeds[p] << "_scan_" << k;
      e.path = dir.str() + "/scan.uscn";
      m.scans.push_back(e);
    }
  }

  // Scans are independent: generate in parallel, write afterwards.
  const int count = static_cast<int>(m.scans.size());
  std::vector<Scan> scans(count);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < count; ++i)
    scans[i] = generate_scan(make_phantom(m.scans[i].phantom_seed), m.scans[i].scan_seed, cfg);
  for (int i = 0; i < count; ++i) write_scan(scans[i], m.resolve(m.scans[i]));

  validate_manifest(m);
  write_manifest(m);
  return m;
}

void write_manifest(const Manifest &m) {
  json j;
  j["version"] = 1;
  j["scan_config"] = config_to_json(m.scan_config);
  json arr = json::array();
  for (const auto &e : m.scans)
    arr.push_back({{"path", e.path}, {"split", e.split}, {"phantom_seed", e.phantom_seed}, {"scan_seed", e.scan_seed}});
  j["scans"] = arr;
  std::error_code ec;
  std::filesystem::create_directories(m.root, ec);
  if (ec) fail(ErrorCode::io, "cannot create " + m.root.string() + ": " + ec.message());
  const auto path = m.root / "manifest.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorCode::io, "write error on " + path.string());
}

Manifest read_manifest(const std::filesystem::path &manifest_path) {
  auto path = manifest_path;
  if (std::filesystem::is_directory(path)) path /= "manifest.json";
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  try {
    const json j = json::parse(in);
    m.scan_config = config_from_json(j.value("scan_config", json::object()));
    for (const auto &s : j.at("scans")) {
      ManifestEntry e;
      e.path = s.at("path").get<std::string>();
      e.split = s.at("split").get<std::string>();
      e.phantom_seed = s.value("phantom_seed", std::uint64_t{0});
      e.scan_seed = s.value("scan_seed", std::uint64_t{0});
      if (e.split != "train" && e.split != "val") fail(ErrorCode::format, path.string() + ": unknown split " + e.split);
      m.scans.push_back(e);
    }
  } catch (const json::exception &e) {
    fail(ErrorCode::format, path.string() + ": malformed manifest: " + e.what());
  }
  validate_manifest(m);
  return m;
}

void validate_manifest(const Manifest &m) {
  std::set<std::uint64_t> train, val;
  for (const auto &e : m.scans) (e.split == "train" ? train : val).insert(e.phantom_seed);
  for (auto s : train)
    if (val.count(s)) fail(ErrorCode::data, "phantom " + std::to_string(s) + " appears in both train and val splits");
}

std::vector<Scan> load_split(const Manifest &m, const std::string &split) {
  std::vector<Scan> out;
  for (const auto &e : m.split(split)) {
    try {
      out.push_back(read_scan(m.resolve(e)));
    } catch (const Error &err) {
      throw Error(err.code(), "while loading " + m.resolve(e).string() + ": " + err.what());
    }
  }
  return out;
}

}  // namespace vaguide
