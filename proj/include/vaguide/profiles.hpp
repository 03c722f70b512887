// SPDX-License-Identifier: Apache-2.0
#pragma once

// Desk-scale configurations shared by the CLI, the acceptance runner and the
// tests. The library defaults keep the published settings; these profiles
// shrink images, widths and step counts so that a single CPU core can run
// them in minutes.

#include "vaguide/model.hpp"
#include "vaguide/scan.hpp"
#include "vaguide/train.hpp"

namespace vaguide::profiles {

// Two short scans of one phantom, memorised by a small model in 200 steps.
struct Overfit {
  std::uint64_t phantom_seed = 1;
  std::uint64_t scan_seeds[2] = {11, 12};
  ScanConfig scan;
  ModelConfig model;
  TrainConfig train;
};

inline Overfit overfit() {
  Overfit p;
  p.scan.frames_per_leg = 4;
  p.scan.pause_frames = 3;
  p.scan.image_size = 32;

  p.model.backbone.image_size = 32;
  p.model.backbone.dim = 64;
  p.model.backbone.depth = 4;
  p.model.adapter.r = 64;
  p.model.seq_dim = 256;
  p.model.hidden = 256;
  p.model.output_scale = 100.0;

  p.train.batch_size = 8;
  p.train.max_steps = 200;
  p.train.lr_init = 3e-3;
  p.train.lr_final = 3e-6;
  p.train.checkpoint_each_epoch = false;
  return p;
}

// Ten phantoms split 8/2 by phantom, used for the comparisons between model
// variants.
struct Comparison {
  std::uint64_t first_phantom_seed = 100;
  int phantoms = 10;
  int scans_per_phantom = 2;
  double train_fraction = 0.8;
  ScanConfig scan;
  ModelConfig model;
  TrainConfig train;
};

inline Comparison comparison() {
  Comparison p;
  p.scan.frames_per_leg = 6;
  p.scan.pause_frames = 3;
  p.scan.image_size = 32;

  const Overfit o = overfit();
  p.model = o.model;
  p.train = o.train;
  p.train.batch_size = 16;
  p.train.max_steps = 1500;
  return p;
}

}  // namespace vaguide::profiles
