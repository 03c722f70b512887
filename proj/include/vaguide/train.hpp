// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vaguide/model.hpp"
#include "vaguide/scan.hpp"

namespace vaguide {

struct TrainConfig {
  int batch_size = 256;
  double lr_init = 1e-4;
  double lr_final = 1e-6;
  int epochs = 5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  // When positive, training stops after exactly this many optimizer steps
  // (cycling over epochs as needed) and the schedule spans these steps.
  int max_steps = 0;
  // Frames below L-1 lack a full history; they are skipped unless set.
  bool include_short_history = false;
  // Write a checkpoint after every epoch in addition to the final one.
  bool checkpoint_each_epoch = true;

  void validate() const;
};

// Desk profile: the paper's optimizer settings with a batch that fits one
// CPU core.
TrainConfig desk_train_config();

nlohmann::json to_json(const TrainConfig &cfg);
TrainConfig train_config_from_json(const nlohmann::json &j);

// Mean over every element of the elementwise smooth-L1 (unit threshold).
// Throws ErrorCode::numeric on non-finite input.
double smooth_l1_loss(std::span<const double> pred, std::span<const double> target);
// Tape version used during training; the same reduction.
template <class T>
diff::DiffArray<T> smooth_l1_loss(const diff::DiffArray<T> &pred, const diff::DiffArray<T> &target);

// lr_final + 0.5 (lr_init - lr_final)(1 + cos(pi step / total)).
double cosine_lr(long step, long total_steps, double lr_init, double lr_final);

// First and second moments for the trainable parameters only, keyed by name.
template <class T>
struct AdamState {
  long step = 0;
  std::map<std::string, std::vector<T>> m, v;
};

// One bias-corrected Adam update of every trainable parameter from its
// accumulated gradient. Frozen parameters are never read or written.
template <class T>
void adam_step(diff::ParamStore<T> &params, AdamState<T> &state, double lr, double beta1, double beta2, double eps);

struct TrainLogRow {
  long step = 0;
  double lr = 0;
  double loss = 0;
  double mae_trans = 0;
  double mae_rot = 0;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  double wall_seconds = 0;
  long steps = 0;
  std::vector<std::string> optimizer_keys;  // parameters holding Adam moments
};

// Query frames (scan, frame) with their labels, cached frozen prefixes, and
// batch assembly shared by training and evaluation.
class SequenceBatcher {
 public:
  SequenceBatcher(const GuidanceModel<float> &model, const std::vector<const Scan *> &scans);

  struct Item {
    int scan = 0;
    std::vector<int> indices;  // ascending, last = query
  };
  struct Batch {
    diff::Tensor<float> prefix;   // [B * frames, ...]
    diff::Tensor<float> actions;  // [B, L-1, 6]
    diff::Tensor<float> labels;   // [B, 10, 6]
  };

  Batch make(std::span<const Item> items) const;
  const PlaneLabels &labels(int scan, int frame) const { return labels_[scan][frame]; }
  const Scan &scan(int i) const { return *scans_[i]; }
  int scan_count() const { return static_cast<int>(scans_.size()); }

 private:
  const GuidanceModel<float> &model_;
  std::vector<const Scan *> scans_;
  std::vector<diff::Tensor<float>> prefix_;  // per scan: [frames, ...]
  std::vector<std::vector<PlaneLabels>> labels_;
  std::size_t row_size_ = 0;
};

struct TrainOutputs {
  std::filesystem::path dir;  // empty: nothing written
  bool quiet = true;
};

// Full training loop. Writes train_log.csv, train_log.jsonl, and
// checkpoint.vack (plus per-epoch checkpoints) under outputs.dir.
TrainResult train(GuidanceModel<float> &model, const std::vector<const Scan *> &scans, const TrainConfig &cfg,
                  const TrainOutputs &outputs = {});

void write_train_log(const std::vector<TrainLogRow> &log, const std::filesystem::path &csv,
                     const std::filesystem::path &jsonl);

}  // namespace vaguide
