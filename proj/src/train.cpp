// SPDX-License-Identifier: Apache-2.0
#include "vaguide/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <nlohmann/json.hpp>

#include "vaguide/error.hpp"
#include "vaguide/rng.hpp"

namespace vaguide {

using diff::DiffArray;
using diff::Tape;
using diff::Tensor;

void TrainConfig::validate() const {
  if (batch_size < 1) fail(ErrorCode::invalid_argument, "batch_size must be >= 1");
  if (epochs < 1) fail(ErrorCode::invalid_argument, "epochs must be >= 1");
  if (!(lr_init > 0) || !(lr_final >= 0) || lr_final > lr_init)
    fail(ErrorCode::invalid_argument, "learning rates must satisfy 0 <= lr_final <= lr_init, lr_init > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail(ErrorCode::invalid_argument, "Adam betas must lie in [0, 1)");
  if (!(eps > 0)) fail(ErrorCode::invalid_argument, "Adam eps must be positive");
  if (max_steps < 0) fail(ErrorCode::invalid_argument, "max_steps must be >= 0");
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.batch_size = 32;
  return c;
}

nlohmann::json to_json(const TrainConfig &c) {
  return {{"batch_size", c.batch_size}, {"lr_init", c.lr_init},     {"lr_final", c.lr_final},
          {"epochs", c.epochs},         {"beta1", c.beta1},         {"beta2", c.beta2},
          {"eps", c.eps},               {"seed", c.seed},           {"max_steps", c.max_steps},
          {"include_short_history", c.include_short_history}, {"checkpoint_each_epoch", c.checkpoint_each_epoch}};
}

TrainConfig train_config_from_json(const nlohmann::json &j) {
  TrainConfig c = desk_train_config();
  try {
    auto get = [&](const char *key, auto &dst) {
      if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
    };
    get("batch_size", c.batch_size);
    get("lr_init", c.lr_init);
    get("lr_final", c.lr_final);
    get("epochs", c.epochs);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("eps", c.eps);
    get("seed", c.seed);
    get("max_steps", c.max_steps);
    get("include_short_history", c.include_short_history);
    get("checkpoint_each_epoch", c.checkpoint_each_epoch);
  } catch (const nlohmann::json::exception &e) {
    fail(ErrorCode::invalid_argument, std::string("bad train config: ") + e.what());
  }
  c.validate();
  return c;
}

double smooth_l1_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) fail(ErrorCode::shape, "smooth_l1_loss: length mismatch");
  if (pred.empty()) fail(ErrorCode::invalid_argument, "smooth_l1_loss: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!std::isfinite(pred[i]) || !std::isfinite(target[i])) fail(ErrorCode::numeric, "smooth_l1_loss: non-finite input");
    const double d = pred[i] - target[i];
    const double ad = std::abs(d);
    acc += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
  }
  return acc / static_cast<double>(pred.size());
}

template <class T>
DiffArray<T> smooth_l1_loss(const DiffArray<T> &pred, const DiffArray<T> &target) {
  for (T v : pred.value())
    if (!std::isfinite(static_cast<double>(v))) fail(ErrorCode::numeric, "smooth_l1_loss: non-finite prediction");
  for (T v : target.value())
    if (!std::isfinite(static_cast<double>(v))) fail(ErrorCode::numeric, "smooth_l1_loss: non-finite target");
  return diff::mean_all(diff::smooth_l1(pred, target));
}

double cosine_lr(long step, long total_steps, double lr_init, double lr_final) {
  if (total_steps < 1) fail(ErrorCode::invalid_argument, "cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps)
    fail(ErrorCode::invalid_argument, "cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                          std::to_string(total_steps) + "]");
  const double c = std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps));
  return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + c);
}

template <class T>
void adam_step(diff::ParamStore<T> &params, AdamState<T> &state, double lr, double beta1, double beta2, double eps) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto &p = params[i];
    if (!p.trainable) continue;
    auto &m = state.m[p.name];
    auto &v = state.v[p.name];
    if (m.empty()) {
      m.assign(p.value.size(), T(0));
      v.assign(p.value.size(), T(0));
    }
    if (p.grad.size() != p.value.size()) fail(ErrorCode::shape, "adam_step: missing gradient for " + p.name);
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = static_cast<double>(p.grad.data[j]);
      const double mj = beta1 * static_cast<double>(m[j]) + (1.0 - beta1) * g;
      const double vj = beta2 * static_cast<double>(v[j]) + (1.0 - beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps);
      p.value.data[j] = static_cast<T>(static_cast<double>(p.value.data[j]) - update);
    }
  }
}

// ---- batching -----------------------------------------------------------------

SequenceBatcher::SequenceBatcher(const GuidanceModel<float> &model, const std::vector<const Scan *> &scans)
    : model_(model), scans_(scans) {
  const auto &bb = model.config().backbone;
  const auto row = model.prefix_row_shape();
  row_size_ = diff::numel(row);
  constexpr std::size_t kChunk = 64;
  for (const Scan *s : scans_) {
    if (s->width() != bb.image_size || s->height() != bb.image_size)
      fail(ErrorCode::data, "scan image size " + std::to_string(s->width()) + " does not match model image size " +
                                std::to_string(bb.image_size));
    const std::size_t n = s->frames.size();
    Tensor<float> all({n, row[0], row[1]});
    for (std::size_t start = 0; start < n; start += kChunk) {
      std::vector<const SliceImage *> imgs;
      for (std::size_t i = start; i < std::min(n, start + kChunk); ++i) imgs.push_back(&s->frames[i].image);
      auto part = model.prefix(stack_images<float>(imgs));
      std::copy(part.data.begin(), part.data.end(), all.data.begin() + static_cast<std::ptrdiff_t>(start * row_size_));
    }
    prefix_.push_back(std::move(all));
    std::vector<PlaneLabels> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = compute_labels(*s, static_cast<int>(i));
    labels_.push_back(std::move(labels));
  }
}

SequenceBatcher::Batch SequenceBatcher::make(std::span<const Item> items) const {
  const auto &cfg = model_.config();
  const std::size_t F = static_cast<std::size_t>(cfg.frames());
  const std::size_t A = cfg.kind == ModelKind::va_adapter ? static_cast<std::size_t>(cfg.adapter.L - 1) : 0;
  const auto row = model_.prefix_row_shape();
  const std::size_t B = items.size();
  Batch b{Tensor<float>({B * F, row[0], row[1]}), Tensor<float>({B, A, 6}), Tensor<float>({B, kNumPlanes, 6})};
  for (std::size_t i = 0; i < B; ++i) {
    const Item &it = items[i];
    if (it.indices.size() < F) fail(ErrorCode::shape, "batch item has fewer frames than the model consumes");
    const Scan &s = *scans_[it.scan];
    const std::size_t first = it.indices.size() - F;
    for (std::size_t f = 0; f < F; ++f) {
      const int frame = it.indices[first + f];
      const auto &src = prefix_[it.scan].data;
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(frame * row_size_), row_size_,
                  b.prefix.data.begin() + static_cast<std::ptrdiff_t>((i * F + f) * row_size_));
    }
    if (A > 0) {
      if (it.indices.size() != A + 1) fail(ErrorCode::shape, "batch item length differs from the model's L");
      for (std::size_t k = 0; k < A; ++k) {
        const auto a = relative_action(s.frames[it.indices[k]].pose, s.frames[it.indices[k + 1]].pose).to_array();
        for (int d = 0; d < 6; ++d) b.actions.data[(i * A + k) * 6 + d] = static_cast<float>(a[d]);
      }
    }
    const auto &lab = labels_[it.scan][it.indices.back()];
    for (int p = 0; p < kNumPlanes; ++p) {
      const auto a = lab[p].to_array();
      for (int d = 0; d < 6; ++d) b.labels.data[(i * kNumPlanes + p) * 6 + d] = static_cast<float>(a[d]);
    }
  }
  return b;
}

// ---- training loop -------------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void batch_mae(const std::vector<float> &pred, const std::vector<float> &target, double &trans, double &rot) {
  double t = 0, r = 0;
  const std::size_t rows = pred.size() / 6;
  for (std::size_t i = 0; i < rows; ++i)
    for (int d = 0; d < 6; ++d) {
      const double e = std::abs(static_cast<double>(pred[i * 6 + d]) - static_cast<double>(target[i * 6 + d]));
      (d < 3 ? t : r) += e;
    }
  trans = t / (3.0 * rows);
  rot = r / (3.0 * rows);
}

}  // namespace

void write_train_log(const std::vector<TrainLogRow> &log, const std::filesystem::path &csv,
                     const std::filesystem::path &jsonl) {
  std::string c = "step,lr,loss,mae_trans,mae_rot\n";
  std::string j;
  for (const auto &r : log) {
    c += std::to_string(r.step) + "," + fmt(r.lr) + "," + fmt(r.loss) + "," + fmt(r.mae_trans) + "," + fmt(r.mae_rot) + "\n";
    j += "{\"step\":" + std::to_string(r.step) + ",\"lr\":" + fmt(r.lr) + ",\"loss\":" + fmt(r.loss) +
         ",\"mae_trans\":" + fmt(r.mae_trans) + ",\"mae_rot\":" + fmt(r.mae_rot) + "}\n";
  }
  io::write_file(csv, std::as_bytes(std::span(c.data(), c.size())));
  io::write_file(jsonl, std::as_bytes(std::span(j.data(), j.size())));
}

TrainResult train(GuidanceModel<float> &model, const std::vector<const Scan *> &scans, const TrainConfig &cfg,
                  const TrainOutputs &outputs) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  // Every model kind draws the same history so query sets and sample order
  // match across variants; single-frame models read only the last frame.
  const int history_L = model.config().adapter.L;

  std::vector<std::pair<int, int>> queries;
  for (int s = 0; s < static_cast<int>(scans.size()); ++s)
    for (int q = cfg.include_short_history ? 0 : history_L - 1; q < scans[s]->size(); ++q) queries.emplace_back(s, q);
  if (queries.empty()) fail(ErrorCode::data, "train: no query frames in the training scans");

  SequenceBatcher batcher(model, scans);
  const long per_epoch = static_cast<long>((queries.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = cfg.max_steps > 0 ? cfg.max_steps : per_epoch * cfg.epochs;

  AdamState<float> adam;
  TrainResult result;
  long step = 0;
  for (int epoch = 0; step < total; ++epoch) {
    // Seeded Fisher-Yates shuffle; identical for every run with this seed.
    SplitMix64 rng(derive_seed(cfg.seed, 0x5000 + static_cast<std::uint64_t>(epoch)));
    auto order = queries;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    for (std::size_t start = 0; start < order.size() && step < total; start += cfg.batch_size) {
      std::vector<SequenceBatcher::Item> items;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        const auto [s, q] = order[i];
        const std::uint64_t sample_seed = derive_seed(cfg.seed, (static_cast<std::uint64_t>(epoch) << 40) ^
                                                                    (static_cast<std::uint64_t>(s) << 20) ^
                                                                    static_cast<std::uint64_t>(q));
        items.push_back({s, segmental_indices(q, history_L, sample_seed, true)});
      }
      const auto batch = batcher.make(items);
      const double lr = cosine_lr(step, total, cfg.lr_init, cfg.lr_final);

      model.params().zero_grad();
      Tape<float> tape;
      auto pred = model.forward(tape, batch.prefix, batch.actions);
      DiffArray<float> loss;
      try {
        loss = smooth_l1_loss(pred, tape.constant(batch.labels));
      } catch (const Error &e) {
        fail(ErrorCode::numeric, "non-finite values at step " + std::to_string(step) + ": " + e.what());
      }
      const double loss_value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(loss_value)) fail(ErrorCode::numeric, "non-finite loss at step " + std::to_string(step));
      tape.backward(loss);
      adam_step(model.params(), adam, lr, cfg.beta1, cfg.beta2, cfg.eps);

      TrainLogRow row{step, lr, loss_value, 0, 0};
      batch_mae(pred.value(), batch.labels.data, row.mae_trans, row.mae_rot);
      result.log.push_back(row);
      if (!outputs.quiet && (step % 10 == 0 || step + 1 == total))
        std::cerr << "step " << step << "/" << total << " lr " << fmt(lr) << " loss " << fmt(loss_value) << " mae "
                  << fmt(row.mae_trans) << " mm " << fmt(row.mae_rot) << " deg\n";
      ++step;
    }
    if (!outputs.dir.empty() && cfg.checkpoint_each_epoch)
      model.save(outputs.dir / ("checkpoint_epoch" + std::to_string(epoch + 1) + ".vack"));
  }
  result.steps = step;
  for (const auto &kv : adam.m) result.optimizer_keys.push_back(kv.first);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!outputs.dir.empty()) {
    model.save(outputs.dir / "checkpoint.vack");
    write_train_log(result.log, outputs.dir / "train_log.csv", outputs.dir / "train_log.jsonl");
  }
  return result;
}

template DiffArray<float> smooth_l1_loss(const DiffArray<float> &, const DiffArray<float> &);
template DiffArray<double> smooth_l1_loss(const DiffArray<double> &, const DiffArray<double> &);
template void adam_step(diff::ParamStore<float> &, AdamState<float> &, double, double, double, double);
template void adam_step(diff::ParamStore<double> &, AdamState<double> &, double, double, double, double);

}  // namespace vaguide
