// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vaguide/scan.hpp"

namespace vaguide {

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  std::string split; // "train" | "val"
  std::uint64_t phantom_seed = 0;
  std::uint64_t scan_seed = 0;
};

struct Manifest {
  std::filesystem::path root;  // directory holding manifest.json
  ScanConfig scan_config;
  std::vector<ManifestEntry> scans;

  std::vector<ManifestEntry> split(const std::string &name) const;
  std::filesystem::path resolve(const ManifestEntry &e) const { return root / e.path; }
};

// Phantoms (not scans) are assigned to splits: the first round(train_fraction
// * N) seeds go to train, the rest to val.
Manifest build_dataset(const std::vector<std::uint64_t> &phantom_seeds, int scans_per_phantom,
                       const std::filesystem::path &out_dir, double train_fraction = 0.8,
                       const ScanConfig &cfg = {});

void write_manifest(const Manifest &m);
Manifest read_manifest(const std::filesystem::path &manifest_path);

// Throws ErrorCode::data when a phantom seed appears in both splits.
void validate_manifest(const Manifest &m);

std::vector<Scan> load_split(const Manifest &m, const std::string &split);

}  // namespace vaguide
