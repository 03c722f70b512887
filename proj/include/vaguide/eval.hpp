// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vaguide/model.hpp"
#include "vaguide/scan.hpp"
#include "vaguide/train.hpp"

namespace vaguide {

struct PlaneMae {
  double trans_mm = 0.0;
  double rot_deg = 0.0;
};

// Mean absolute error of the translation components and, separately, of the
// rotation components.
PlaneMae mae(const Action6 &pred, const Action6 &target);

struct EvalOptions {
  std::uint64_t seed = 1;
  // Query frames are L-1, L-1+stride, ...; stride 1 evaluates every frame
  // that has a full history.
  int stride = 5;
  int batch = 32;
};

struct EvalReport {
  nlohmann::json config;
  std::string fingerprint;  // CRC32C of the config and options, hex
  std::array<PlaneMae, kNumPlanes> planes{};
  double avg_trans_mm = 0.0;
  double avg_rot_deg = 0.0;
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t samples = 0;
  // Runtime is reported on the console only; the report file stays
  // byte-identical across runs with the same seed.
  double wall_seconds = 0.0;
  double ms_per_sample = 0.0;
};

// One evaluation query: the sampled frame indices (last = query).
struct EvalItem {
  int scan = 0;
  std::vector<int> indices;
};

std::vector<EvalItem> eval_items(const std::vector<const Scan *> &scans, int L, const EvalOptions &opt);

// Predictions for a batch of items, one label set per item.
using BatchPredictor = std::function<std::vector<PlaneLabels>(std::span<const EvalItem>)>;

// Metric plumbing shared by every predictor (model, oracle, constant).
EvalReport evaluate_with(const std::vector<const Scan *> &scans, int L, const EvalOptions &opt,
                         const BatchPredictor &predict);

EvalReport evaluate(const GuidanceModel<float> &model, const std::vector<const Scan *> &scans,
                    const EvalOptions &opt = {});

nlohmann::json to_json(const EvalReport &r);
std::string report_csv(const EvalReport &r);
std::string report_table(const EvalReport &r);
void write_report(const EvalReport &r, const std::filesystem::path &json_path);  // CSV beside it

// Frame whose pose minimises trans_mm + w_rot * rot_deg; lowest index wins
// ties. Throws ErrorCode::data on an empty scan.
int nn_retrieve(const Scan &scan, const Pose &pose, double w_rot = 1.0);

// ---- ablation grid ---------------------------------------------------------

enum class AblationVariant { full, vanilla, single_frame };

const char *to_string(AblationVariant v);
AblationVariant ablation_variant_from_string(const std::string &s);

struct AblationGrid {
  std::vector<AblationVariant> variants{AblationVariant::full, AblationVariant::vanilla,
                                        AblationVariant::single_frame};
  std::vector<int> r{8, 16, 32, 64, 128};
  std::vector<std::uint64_t> seeds{1};
};

AblationGrid ablation_grid_from_json(const nlohmann::json &j);

// Model config for one grid cell, derived from a shared base config.
ModelConfig ablation_model_config(const ModelConfig &base, AblationVariant v, int r, std::uint64_t seed);

struct AblationCell {
  AblationVariant variant = AblationVariant::full;
  int r = 0;
  std::uint64_t seed = 0;
  EvalReport report;
};

// Trains and evaluates every (variant, r, seed) cell. Single-frame cells do
// not depend on r and are run once per seed. When out_dir is set, each cell
// is saved as soon as it finishes and cells already on disk are reused.
std::vector<AblationCell> run_ablation(const AblationGrid &grid, const ModelConfig &base_model,
                                       const TrainConfig &train_cfg, const std::vector<const Scan *> &train_scans,
                                       const std::vector<const Scan *> &val_scans, const EvalOptions &eval_opt,
                                       const std::filesystem::path &out_dir = {}, bool quiet = true);

std::string ablation_table(const std::vector<AblationCell> &cells);

}  // namespace vaguide
