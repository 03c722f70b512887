// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vaguide/diff/tape.hpp"
#include "vaguide/geometry.hpp"
#include "vaguide/scan.hpp"

namespace vaguide {

enum class BackboneKind { transformer, conv };

// Frozen image encoder. Images are single-channel, square, and split into
// non-overlapping patches that become the token grid.
struct BackboneConfig {
  BackboneKind kind = BackboneKind::transformer;
  int depth = 6;
  int dim = 128;
  int patch = 8;
  int heads = 4;
  int mlp_ratio = 4;
  int image_size = 64;
  std::uint64_t seed = 1;

  int grid() const { return image_size / patch; }
  int tokens() const { return grid() * grid(); }
  void validate() const;
};

enum class AdapterVariant { full, vanilla };

struct VAAdapterConfig {
  int r = 64;
  int L = 4;
  int heads = 4;
  int mlp_ratio = 2;
  AdapterVariant variant = AdapterVariant::full;
  // Insertion sites; empty selects the default set (see default_sites).
  std::vector<int> sites;
  // One action projection per site acting on raw actions, instead of a
  // single projection whose output is propagated between sites.
  bool action_embed_per_site = false;
  // Independent timestep table per site instead of one shared table.
  bool timestep_per_site = false;
  // Up-projections start at zero so the untrained model reproduces the
  // frozen backbone exactly.
  bool zero_init_up = true;
};

enum class ModelKind { va_adapter, single_frame };

struct ModelConfig {
  ModelKind kind = ModelKind::va_adapter;
  BackboneConfig backbone;
  VAAdapterConfig adapter;
  int seq_dim = 128;     // per-stream projection width feeding the GRU
  int hidden = 128;      // GRU hidden size and head width
  // Head outputs are multiplied by this constant, so unit-scale head
  // weights can express labels that span tens of mm and degrees.
  double output_scale = 1.0;
  // Trains every backbone weight as well (desk-scale comparison only).
  bool finetune_all = false;
  // Single-frame baseline: also train the last backbone block.
  bool train_last_block = false;
  std::uint64_t seed = 7;

  // Number of frames the model consumes per sample.
  int frames() const { return kind == ModelKind::single_frame ? 1 : adapter.L; }
  void validate() const;
};

nlohmann::json to_json(const ModelConfig &cfg);
ModelConfig model_config_from_json(const nlohmann::json &j);

// Site numbering: transformer kind has two sites per block (2b after the
// attention residual, 2b+1 after the MLP residual); conv kind has one site
// after each block (site b).
std::vector<int> default_sites(const BackboneConfig &bb);
int site_block(const BackboneConfig &bb, int site);

// Standard 1-D sin/cos table: row i, column d < r/2 is sin(i * w_d), column
// d >= r/2 is cos(i * w_{d-r/2}), with w_d = 10000^(-2d/r).
diff::Tensor<double> timestep_embedding(int L, int r);

struct ParamCounts {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::map<std::string, std::size_t> by_component;

  std::size_t total() const { return trainable + frozen; }
};

// Final sequence features.
template <class T>
struct Encoded {
  diff::DiffArray<T> vision;  // [B, L, C]
  diff::DiffArray<T> action;  // [B, L-1, r]
};

template <class T>
class GuidanceModel {
 public:
  explicit GuidanceModel(ModelConfig cfg);

  const ModelConfig &config() const { return cfg_; }
  diff::ParamStore<T> &params() { return params_; }
  const diff::ParamStore<T> &params() const { return params_; }
  const std::vector<int> &sites() const { return sites_; }

  // Frozen prefix of the encoder. Its output depends only on the images
  // and frozen weights, so callers may cache it per frame.
  // images: [n, H, W] -> opaque per-image rows [n, ...].
  diff::Tensor<T> prefix(const diff::Tensor<T> &images) const;
  // Shape of one prefix row.
  diff::Shape prefix_row_shape() const;

  // prefix: [B * frames(), ...] in sample order; actions: [B, L-1, 6].
  Encoded<T> encode(diff::Tape<T> &tape, const diff::Tensor<T> &prefix, const diff::Tensor<T> &actions) const;
  // Returns [B, 10, 6].
  diff::DiffArray<T> forward(diff::Tape<T> &tape, const diff::Tensor<T> &prefix, const diff::Tensor<T> &actions) const;

  // Backbone only: final pooled features [n, C] without any adapter.
  diff::Tensor<T> backbone_features(const diff::Tensor<T> &images) const;

  // Single sample convenience: images per frame plus actions.
  std::array<Action6, kNumPlanes> predict(const SequenceSample &sample) const;

  ParamCounts count_params() const;

  void save(const std::filesystem::path &path) const;
  static GuidanceModel load(const std::filesystem::path &path);
  // Loads weights into this model; the stored config must match exactly.
  void load_weights(const std::filesystem::path &path);

 private:
  void build();
  // First backbone block whose output is not part of the cached prefix.
  int first_live_block() const;

  ModelConfig cfg_;
  std::vector<int> sites_;
  mutable diff::ParamStore<T> params_;
};

// Images of a sample stacked as [frames, H, W]; the query image is last.
template <class T>
diff::Tensor<T> stack_images(const std::vector<const SliceImage *> &images);

// Actions of a sample as [1, L-1, 6].
template <class T>
diff::Tensor<T> stack_actions(const std::vector<Action6> &actions);

}  // namespace vaguide
