// SPDX-License-Identifier: Apache-2.0
#include "vaguide/eval.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>

#include "vaguide/binary_io.hpp"
#include "vaguide/crc32c.hpp"
#include "vaguide/error.hpp"
#include "vaguide/rng.hpp"

namespace vaguide {

using diff::Tape;

PlaneMae mae(const Action6 &pred, const Action6 &target) {
  PlaneMae m;
  for (std::size_t d = 0; d < 3; ++d) {
    m.trans_mm += std::abs(pred[d] - target[d]);
    m.rot_deg += std::abs(pred[d + 3] - target[d + 3]);
  }
  m.trans_mm /= 3.0;
  m.rot_deg /= 3.0;
  return m;
}

std::vector<EvalItem> eval_items(const std::vector<const Scan *> &scans, int L, const EvalOptions &opt) {
  if (opt.stride < 1) fail(ErrorCode::invalid_argument, "eval stride must be >= 1");
  std::vector<EvalItem> items;
  for (int s = 0; s < static_cast<int>(scans.size()); ++s)
    for (int q = L - 1; q < scans[s]->size(); q += opt.stride) {
      const std::uint64_t seed = derive_seed(opt.seed, (static_cast<std::uint64_t>(s) << 20) ^ static_cast<std::uint64_t>(q));
      items.push_back({s, segmental_indices(q, L, seed, false)});
    }
  return items;
}

namespace {

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

EvalReport evaluate_with(const std::vector<const Scan *> &scans, int L, const EvalOptions &opt,
                         const BatchPredictor &predict) {
  if (opt.batch < 1) fail(ErrorCode::invalid_argument, "eval batch must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const auto items = eval_items(scans, L, opt);
  if (items.empty()) fail(ErrorCode::data, "evaluate: split has no query frames");

  EvalReport rep;
  std::array<double, kNumPlanes> sum_t{}, sum_r{};
  for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(opt.batch)) {
    const std::size_t n = std::min(items.size() - start, static_cast<std::size_t>(opt.batch));
    const std::span<const EvalItem> chunk(items.data() + start, n);
    const auto preds = predict(chunk);
    if (preds.size() != n) fail(ErrorCode::shape, "evaluate: predictor returned the wrong number of samples");
    for (std::size_t i = 0; i < n; ++i) {
      const auto target = compute_labels(*scans[chunk[i].scan], chunk[i].indices.back());
      for (int p = 0; p < kNumPlanes; ++p) {
        const PlaneMae e = mae(preds[i][p], target[p]);
        if (!std::isfinite(e.trans_mm) || !std::isfinite(e.rot_deg))
          fail(ErrorCode::numeric, "evaluate: non-finite prediction");
        sum_t[p] += e.trans_mm;
        sum_r[p] += e.rot_deg;
      }
    }
  }
  rep.samples = items.size();
  for (int p = 0; p < kNumPlanes; ++p) {
    rep.planes[p] = {sum_t[p] / static_cast<double>(items.size()), sum_r[p] / static_cast<double>(items.size())};
    rep.avg_trans_mm += rep.planes[p].trans_mm;
    rep.avg_rot_deg += rep.planes[p].rot_deg;
  }
  rep.avg_trans_mm /= kNumPlanes;
  rep.avg_rot_deg /= kNumPlanes;
  rep.config = {{"L", L}, {"seed", opt.seed}, {"stride", opt.stride}, {"scans", scans.size()}};
  const std::string dump = rep.config.dump();
  rep.fingerprint = hex32(crc32c(std::as_bytes(std::span(dump.data(), dump.size()))));
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rep.ms_per_sample = 1e3 * rep.wall_seconds / static_cast<double>(items.size());
  return rep;
}

EvalReport evaluate(const GuidanceModel<float> &model, const std::vector<const Scan *> &scans, const EvalOptions &opt) {
  if (scans.empty()) fail(ErrorCode::data, "evaluate: empty split");
  const SequenceBatcher batcher(model, scans);
  auto predict = [&](std::span<const EvalItem> chunk) {
    std::vector<SequenceBatcher::Item> items;
    for (const auto &it : chunk) items.push_back({it.scan, it.indices});
    const auto batch = batcher.make(items);
    Tape<float> tape(false);
    const auto out = model.forward(tape, batch.prefix, batch.actions).tensor();
    std::vector<PlaneLabels> res(chunk.size());
    for (std::size_t i = 0; i < chunk.size(); ++i)
      for (int p = 0; p < kNumPlanes; ++p) {
        std::array<double, 6> a{};
        for (int d = 0; d < 6; ++d) a[d] = out.data[(i * kNumPlanes + p) * 6 + d];
        res[i][p] = Action6::from_array(a);
      }
    return res;
  };
  // Every model kind is scored on the same queries and histories.
  EvalReport rep = evaluate_with(scans, model.config().adapter.L, opt, predict);
  const auto counts = model.count_params();
  rep.trainable = counts.trainable;
  rep.frozen = counts.frozen;
  rep.config["model"] = to_json(model.config());
  const std::string dump = rep.config.dump();
  rep.fingerprint = hex32(crc32c(std::as_bytes(std::span(dump.data(), dump.size()))));
  return rep;
}

nlohmann::json to_json(const EvalReport &r) {
  nlohmann::json planes = nlohmann::json::array();
  for (int p = 0; p < kNumPlanes; ++p)
    planes.push_back({{"id", p + 1},
                      {"name", std::string(kPlaneNames[p])},
                      {"mae_trans_mm", r.planes[p].trans_mm},
                      {"mae_rot_deg", r.planes[p].rot_deg}});
  return {{"config", r.config},
          {"fingerprint", r.fingerprint},
          {"samples", r.samples},
          {"planes", planes},
          {"avg_trans_mm", r.avg_trans_mm},
          {"avg_rot_deg", r.avg_rot_deg},
          {"params", {{"trainable", r.trainable}, {"frozen", r.frozen}}}};
}

std::string report_csv(const EvalReport &r) {
  std::string s = "id,name,mae_trans_mm,mae_rot_deg\n";
  for (int p = 0; p < kNumPlanes; ++p)
    s += std::to_string(p + 1) + "," + std::string(kPlaneNames[p]) + "," + fmt(r.planes[p].trans_mm) + "," +
         fmt(r.planes[p].rot_deg) + "\n";
  s += "avg,average," + fmt(r.avg_trans_mm) + "," + fmt(r.avg_rot_deg) + "\n";
  return s;
}

std::string report_table(const EvalReport &r) {
  std::string s;
  char line[128];
  std::snprintf(line, sizeof line, "%-4s %-8s %12s %12s\n", "id", "plane", "trans (mm)", "rot (deg)");
  s += line;
  for (int p = 0; p < kNumPlanes; ++p) {
    std::snprintf(line, sizeof line, "%-4d %-8s %12.3f %12.3f\n", p + 1, std::string(kPlaneNames[p]).c_str(),
                  r.planes[p].trans_mm, r.planes[p].rot_deg);
    s += line;
  }
  std::snprintf(line, sizeof line, "%-4s %-8s %12.3f %12.3f\n", "", "average", r.avg_trans_mm, r.avg_rot_deg);
  s += line;
  std::snprintf(line, sizeof line, "params: %zu trainable / %zu frozen; %zu samples\n", r.trainable, r.frozen,
                r.samples);
  s += line;
  return s;
}

void write_report(const EvalReport &r, const std::filesystem::path &json_path) {
  const std::string j = to_json(r).dump(2) + "\n";
  io::write_file(json_path, std::as_bytes(std::span(j.data(), j.size())));
  auto csv_path = json_path;
  csv_path.replace_extension(".csv");
  const std::string c = report_csv(r);
  io::write_file(csv_path, std::as_bytes(std::span(c.data(), c.size())));
}

int nn_retrieve(const Scan &scan, const Pose &pose, double w_rot) {
  if (scan.frames.empty()) fail(ErrorCode::data, "nn_retrieve: empty scan");
  int best = 0;
  double best_d = 0.0;
  for (int i = 0; i < scan.size(); ++i) {
    const PoseDistance pd = pose_distance(scan.frames[i].pose, pose);
    const double d = pd.trans_mm + w_rot * pd.rot_deg;
    if (i == 0 || d < best_d) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

// ---- ablation ---------------------------------------------------------------

const char *to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::full: return "full";
    case AblationVariant::vanilla: return "vanilla";
    case AblationVariant::single_frame: return "single_frame";
  }
  return "?";
}

AblationVariant ablation_variant_from_string(const std::string &s) {
  if (s == "full") return AblationVariant::full;
  if (s == "vanilla") return AblationVariant::vanilla;
  if (s == "single_frame" || s == "single-frame") return AblationVariant::single_frame;
  fail(ErrorCode::invalid_argument, "unknown ablation variant '" + s + "'");
}

AblationGrid ablation_grid_from_json(const nlohmann::json &j) {
  AblationGrid g;
  try {
    if (j.contains("variants")) {
      g.variants.clear();
      for (const auto &v : j.at("variants")) g.variants.push_back(ablation_variant_from_string(v.get<std::string>()));
    }
    if (j.contains("r")) g.r = j.at("r").get<std::vector<int>>();
    if (j.contains("seeds")) g.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception &e) {
    fail(ErrorCode::invalid_argument, std::string("bad ablation grid: ") + e.what());
  }
  if (g.variants.empty() || g.r.empty() || g.seeds.empty())
    fail(ErrorCode::invalid_argument, "ablation grid needs at least one variant, r and seed");
  return g;
}

ModelConfig ablation_model_config(const ModelConfig &base, AblationVariant v, int r, std::uint64_t seed) {
  ModelConfig c = base;
  c.seed = seed;
  c.adapter.r = r;
  switch (v) {
    case AblationVariant::full:
      c.kind = ModelKind::va_adapter;
      c.adapter.variant = AdapterVariant::full;
      break;
    case AblationVariant::vanilla:
      c.kind = ModelKind::va_adapter;
      c.adapter.variant = AdapterVariant::vanilla;
      break;
    case AblationVariant::single_frame:
      c.kind = ModelKind::single_frame;
      break;
  }
  c.validate();
  return c;
}

namespace {

nlohmann::json cell_json(const AblationCell &c) {
  return {{"variant", to_string(c.variant)}, {"r", c.r}, {"seed", c.seed}, {"report", to_json(c.report)}};
}

EvalReport report_from_json(const nlohmann::json &j) {
  EvalReport r;
  r.config = j.at("config");
  r.fingerprint = j.at("fingerprint").get<std::string>();
  r.samples = j.at("samples").get<std::size_t>();
  for (int p = 0; p < kNumPlanes; ++p) {
    r.planes[p].trans_mm = j.at("planes").at(p).at("mae_trans_mm").get<double>();
    r.planes[p].rot_deg = j.at("planes").at(p).at("mae_rot_deg").get<double>();
  }
  r.avg_trans_mm = j.at("avg_trans_mm").get<double>();
  r.avg_rot_deg = j.at("avg_rot_deg").get<double>();
  r.trainable = j.at("params").at("trainable").get<std::size_t>();
  r.frozen = j.at("params").at("frozen").get<std::size_t>();
  return r;
}

}  // namespace

std::vector<AblationCell> run_ablation(const AblationGrid &grid, const ModelConfig &base_model,
                                       const TrainConfig &train_cfg, const std::vector<const Scan *> &train_scans,
                                       const std::vector<const Scan *> &val_scans, const EvalOptions &eval_opt,
                                       const std::filesystem::path &out_dir, bool quiet) {
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  std::vector<AblationCell> cells;
  for (std::uint64_t seed : grid.seeds) {
    std::set<AblationVariant> single_done;
    for (AblationVariant v : grid.variants)
      for (int r : grid.r) {
        if (v == AblationVariant::single_frame && !single_done.insert(v).second) continue;
        AblationCell cell{v, v == AblationVariant::single_frame ? 0 : r, seed, {}};
        const std::string stem = std::string(to_string(v)) + "_r" + std::to_string(cell.r) + "_s" + std::to_string(seed);
        const auto cell_path = out_dir.empty() ? std::filesystem::path() : out_dir / (stem + ".json");
        if (!cell_path.empty() && std::filesystem::exists(cell_path)) {
          const auto bytes = io::read_file(cell_path);
          try {
            cell.report = report_from_json(
                nlohmann::json::parse(std::string(reinterpret_cast<const char *>(bytes.data()), bytes.size())).at("report"));
            cells.push_back(cell);
            if (!quiet) std::cerr << "ablation: reusing " << cell_path.string() << "\n";
            continue;
          } catch (const nlohmann::json::exception &) {
            // Unreadable partial result: recompute the cell.
          }
        }
        ModelConfig mc = ablation_model_config(base_model, v, r, seed);
        mc.backbone.seed = base_model.backbone.seed;  // one frozen backbone for every cell
        GuidanceModel<float> model(mc);
        TrainConfig tc = train_cfg;
        tc.seed = seed;
        if (!quiet) std::cerr << "ablation: training " << stem << "\n";
        train(model, train_scans, tc);
        cell.report = evaluate(model, val_scans, eval_opt);
        cells.push_back(cell);
        if (!cell_path.empty()) {
          const std::string j = cell_json(cell).dump(2) + "\n";
          io::write_file(cell_path, std::as_bytes(std::span(j.data(), j.size())));
        }
      }
  }
  if (!out_dir.empty()) {
    nlohmann::json all = nlohmann::json::array();
    for (const auto &c : cells) all.push_back(cell_json(c));
    const std::string j = all.dump(2) + "\n";
    io::write_file(out_dir / "ablation.json", std::as_bytes(std::span(j.data(), j.size())));
    const std::string t = ablation_table(cells);
    io::write_file(out_dir / "ablation.txt", std::as_bytes(std::span(t.data(), t.size())));
  }
  return cells;
}

std::string ablation_table(const std::vector<AblationCell> &cells) {
  std::string s;
  char line[160];
  std::snprintf(line, sizeof line, "%-13s %5s %6s %11s %11s %12s %11s\n", "variant", "r", "seed", "trainable",
                "frozen", "trans (mm)", "rot (deg)");
  s += line;
  for (const auto &c : cells) {
    std::snprintf(line, sizeof line, "%-13s %5d %6llu %11zu %11zu %12.3f %11.3f\n", to_string(c.variant), c.r,
                  static_cast<unsigned long long>(c.seed), c.report.trainable, c.report.frozen, c.report.avg_trans_mm,
                  c.report.avg_rot_deg);
    s += line;
  }
  return s;
}

}  // namespace vaguide
