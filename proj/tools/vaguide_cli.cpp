// SPDX-License-Identifier: Apache-2.0
// Command-line front end for every pipeline stage.
//
// Exit codes: 0 ok, 2 usage, 3 data or format, 4 numeric, 5 I/O.

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

#include <nlohmann/json.hpp>

#include "vaguide/binary_io.hpp"
#include "vaguide/dataset.hpp"
#include "vaguide/error.hpp"
#include "vaguide/eval.hpp"
#include "vaguide/profiles.hpp"
#include "vaguide/rng.hpp"
#include "vaguide/service.hpp"

using namespace vaguide;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4, kIo = 5 };

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::numeric: return kNumeric;
    case ErrorCode::io: return kIo;
    default: return kData;
  }
}

json read_json_file(const std::filesystem::path &p) {
  const auto bytes = io::read_file(p);
  try {
    return json::parse(std::string(reinterpret_cast<const char *>(bytes.data()), bytes.size()));
  } catch (const json::exception &e) {
    fail(ErrorCode::format, p.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path &p, const std::string &s) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  io::write_file(p, std::as_bytes(std::span(s.data(), s.size())));
}

json vec_json(const Vec3 &v) { return {v[0], v[1], v[2]}; }
json quat_json(const Quaternion &q) { return {q.w, q.x, q.y, q.z}; }
json pose_json(const Pose &p) { return {{"position", vec_json(p.position())}, {"orientation", quat_json(p.orientation())}}; }

json phantom_json(const Phantom &ph) {
  json chambers = json::array();
  for (const auto &e : ph.chambers)
    chambers.push_back({{"name", e.name},
                        {"kind", e.kind == StructureKind::ventricle ? "ventricle"
                                 : e.kind == StructureKind::atrium  ? "atrium"
                                                                    : "vessel"},
                        {"center", vec_json(e.center)},
                        {"radii", vec_json(e.radii)},
                        {"orientation", quat_json(e.orientation)},
                        {"intensity", e.intensity},
                        {"phase_amplitude", e.phase_amplitude}});
  json planes = json::array();
  const auto sp = standard_planes(ph);
  for (int i = 0; i < kNumPlanes; ++i) planes.push_back({{"id", i + 1}, {"name", sp[i].name}, {"pose", pose_json(sp[i].pose)}});
  return {{"seed", ph.seed},
          {"bounds", {{"lo", vec_json(ph.bounds.lo)}, {"hi", vec_json(ph.bounds.hi)}}},
          {"heart_frame", pose_json(ph.heart_frame)},
          {"chambers", chambers},
          {"standard_planes", planes}};
}

struct Profile {
  ScanConfig scan;
  ModelConfig model;
  TrainConfig train;
};

Profile profile_named(const std::string &name) {
  Profile p;
  if (name == "overfit") {
    const auto o = profiles::overfit();
    p = {o.scan, o.model, o.train};
  } else if (name == "comparison") {
    const auto c = profiles::comparison();
    p = {c.scan, c.model, c.train};
  } else if (name == "desk") {
    p.train = desk_train_config();
  } else if (name != "paper") {
    fail(ErrorCode::invalid_argument, "unknown profile '" + name + "' (overfit, comparison, desk, paper)");
  }
  return p;
}

// A config file holds optional "model" and "train" objects that patch the
// selected profile.
void apply_config(Profile &p, const std::string &path) {
  if (path.empty()) return;
  const json j = read_json_file(path);
  if (j.contains("model")) {
    json m = to_json(p.model);
    m.merge_patch(j.at("model"));
    p.model = model_config_from_json(m);
  }
  if (j.contains("train")) {
    json t = to_json(p.train);
    t.merge_patch(j.at("train"));
    p.train = train_config_from_json(t);
  }
}

std::vector<const Scan *> ptrs(const std::vector<Scan> &v) {
  std::vector<const Scan *> out;
  for (const auto &s : v) out.push_back(&s);
  return out;
}

GuidanceServer *g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"vaguide: sequential probe guidance with vision-action adapters"};
  app.require_subcommand(1);

  // phantom gen
  auto *phantom = app.add_subcommand("phantom", "Phantom utilities");
  phantom->require_subcommand(1);
  auto *pgen = phantom->add_subcommand("gen", "Write a phantom description as JSON");
  std::uint64_t ph_seed = 1;
  std::string ph_out;
  pgen->add_option("--seed", ph_seed, "Phantom seed");
  pgen->add_option("--out", ph_out, "Output JSON path")->required();

  // dataset build
  auto *dataset = app.add_subcommand("dataset", "Dataset utilities");
  dataset->require_subcommand(1);
  auto *dbuild = dataset->add_subcommand("build", "Generate scans and a manifest");
  int ds_phantoms = 10, ds_scans = 2;
  std::uint64_t ds_first = 1;
  double ds_split = 0.8;
  std::string ds_out, ds_profile = "desk";
  int ds_image = 0, ds_fpl = 0, ds_pause = -1;
  dbuild->add_option("--phantoms", ds_phantoms, "Number of phantoms")->check(CLI::PositiveNumber);
  dbuild->add_option("--scans-per", ds_scans, "Scans per phantom")->check(CLI::PositiveNumber);
  dbuild->add_option("--first-seed", ds_first, "Seed of the first phantom; the rest follow consecutively");
  dbuild->add_option("--split", ds_split, "Fraction of phantoms in the train split")->check(CLI::Range(0.0, 1.0));
  dbuild->add_option("--out", ds_out, "Output directory")->required();
  dbuild->add_option("--profile", ds_profile, "Scan settings profile: desk, overfit, comparison, paper");
  dbuild->add_option("--image-size", ds_image, "Override image size");
  dbuild->add_option("--frames-per-leg", ds_fpl, "Override frames per leg");
  dbuild->add_option("--pause-frames", ds_pause, "Override pause frames");

  // train
  auto *trn = app.add_subcommand("train", "Train a model on the train split");
  std::string tr_data, tr_config, tr_out, tr_profile = "desk";
  int tr_steps = -1;
  std::uint64_t tr_seed = 0;
  trn->add_option("--data", tr_data, "Manifest path or dataset directory")->required();
  trn->add_option("--config", tr_config, "JSON with optional 'model' and 'train' overrides");
  trn->add_option("--profile", tr_profile, "Base settings: desk, overfit, comparison, paper");
  trn->add_option("--out", tr_out, "Output directory")->required();
  trn->add_option("--steps", tr_steps, "Override max_steps");
  trn->add_option("--seed", tr_seed, "Override the training seed");
  bool tr_verbose = false;
  trn->add_flag("-v,--verbose", tr_verbose, "Print progress");

  // eval
  auto *ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  std::string ev_ckpt, ev_data, ev_report, ev_split = "val";
  std::uint64_t ev_seed = 1;
  int ev_stride = 5;
  bool ev_all = false;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--data", ev_data, "Manifest path or dataset directory")->required();
  ev->add_option("--report", ev_report, "Report JSON path (CSV written beside it)")->required();
  ev->add_option("--split", ev_split, "train or val")->check(CLI::IsMember({"train", "val"}));
  ev->add_option("--seed", ev_seed, "Sampling seed");
  ev->add_option("--stride", ev_stride, "Evaluate every n-th query frame")->check(CLI::PositiveNumber);
  ev->add_flag("--all", ev_all, "Evaluate every query frame (stride 1)");

  // ablate
  auto *ab = app.add_subcommand("ablate", "Train and evaluate a grid of variants");
  std::string ab_grid, ab_data, ab_out, ab_config, ab_profile = "comparison";
  ab->add_option("--grid", ab_grid, "Grid as a JSON file or inline JSON: {variants, r, seeds}")->required();
  ab->add_option("--data", ab_data, "Manifest path or dataset directory")->required();
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--config", ab_config, "JSON with optional 'model' and 'train' overrides");
  ab->add_option("--profile", ab_profile, "Base settings: desk, overfit, comparison, paper");

  // serve
  auto *sv = app.add_subcommand("serve", "Run the guidance service");
  std::string sv_ckpt, sv_addr = "127.0.0.1";
  std::uint64_t sv_phantom = 1;
  unsigned short sv_port = 8765;
  sv->add_option("--ckpt", sv_ckpt, "Checkpoint")->required();
  sv->add_option("--phantom-seed", sv_phantom, "Phantom for new sessions");
  sv->add_option("--port", sv_port, "TCP port (0 picks a free one)");
  sv->add_option("--address", sv_addr, "Listen address");

  // predict
  auto *pr = app.add_subcommand("predict", "Print the ten predicted actions for one frame");
  std::string pr_ckpt, pr_scan;
  int pr_frame = 0;
  std::uint64_t pr_seed = 1;
  pr->add_option("--ckpt", pr_ckpt, "Checkpoint")->required();
  pr->add_option("--scan", pr_scan, "Scan file")->required();
  pr->add_option("--frame", pr_frame, "Query frame index")->required();
  pr->add_option("--seed", pr_seed, "History sampling seed");
  bool pr_json = false;
  pr->add_flag("--json", pr_json, "Print JSON instead of a table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (pgen->parsed()) {
      write_text(ph_out, phantom_json(make_phantom(ph_seed)).dump(2) + "\n");
      std::cout << "wrote " << ph_out << "\n";
    } else if (dbuild->parsed()) {
      ScanConfig sc = profile_named(ds_profile).scan;
      if (ds_image > 0) sc.image_size = ds_image;
      if (ds_fpl > 0) sc.frames_per_leg = ds_fpl;
      if (ds_pause >= 0) sc.pause_frames = ds_pause;
      std::vector<std::uint64_t> seeds;
      for (int i = 0; i < ds_phantoms; ++i) seeds.push_back(ds_first + static_cast<std::uint64_t>(i));
      const Manifest m = build_dataset(seeds, ds_scans, ds_out, ds_split, sc);
      std::cout << "wrote " << m.scans.size() << " scans (" << m.split("train").size() << " train, "
                << m.split("val").size() << " val) to " << ds_out << "\n";
    } else if (trn->parsed()) {
      Profile p = profile_named(tr_profile);
      apply_config(p, tr_config);
      if (tr_steps >= 0) p.train.max_steps = tr_steps;
      if (tr_seed != 0) p.train.seed = tr_seed;
      const Manifest m = read_manifest(tr_data);
      p.model.backbone.image_size = m.scan_config.image_size;
      p.model.validate();
      const auto scans = load_split(m, "train");
      if (scans.empty()) fail(ErrorCode::data, "train split is empty");
      std::filesystem::create_directories(tr_out);
      GuidanceModel<float> model(p.model);
      const auto counts = model.count_params();
      std::cout << "params: " << counts.trainable << " trainable / " << counts.total() << " total\n";
      const auto r = train(model, ptrs(scans), p.train, {tr_out, !tr_verbose});
      write_text(std::filesystem::path(tr_out) / "config.json",
                 json{{"model", to_json(p.model)}, {"train", to_json(p.train)}}.dump(2) + "\n");
      const auto &last = r.log.back();
      std::printf("trained %ld steps in %.1f s; last loss %.4f, batch mae %.3f mm %.3f deg\n", r.steps, r.wall_seconds,
                  last.loss, last.mae_trans, last.mae_rot);
    } else if (ev->parsed()) {
      const auto model = GuidanceModel<float>::load(ev_ckpt);
      const Manifest m = read_manifest(ev_data);
      const auto scans = load_split(m, ev_split);
      if (scans.empty()) fail(ErrorCode::data, ev_split + " split is empty");
      EvalOptions opt;
      opt.seed = ev_seed;
      opt.stride = ev_all ? 1 : ev_stride;
      const auto rep = evaluate(model, ptrs(scans), opt);
      write_report(rep, ev_report);
      std::cout << report_table(rep);
      std::printf("%.3f s total, %.2f ms per sample\n", rep.wall_seconds, rep.ms_per_sample);
    } else if (ab->parsed()) {
      Profile p = profile_named(ab_profile);
      apply_config(p, ab_config);
      json gj;
      if (std::filesystem::exists(ab_grid)) {
        gj = read_json_file(ab_grid);
      } else {
        try {
          gj = json::parse(ab_grid);
        } catch (const json::exception &e) {
          fail(ErrorCode::invalid_argument, std::string("--grid is neither a file nor JSON: ") + e.what());
        }
      }
      const AblationGrid grid = ablation_grid_from_json(gj);
      const Manifest m = read_manifest(ab_data);
      p.model.backbone.image_size = m.scan_config.image_size;
      const auto tr = load_split(m, "train");
      const auto va = load_split(m, "val");
      if (tr.empty() || va.empty()) fail(ErrorCode::data, "ablation needs non-empty train and val splits");
      const auto cells = run_ablation(grid, p.model, p.train, ptrs(tr), ptrs(va), {}, ab_out, false);
      std::cout << ablation_table(cells);
    } else if (sv->parsed()) {
      if (!std::filesystem::exists(sv_ckpt)) fail(ErrorCode::io, "checkpoint not found: " + sv_ckpt);
      auto model = std::make_shared<const GuidanceModel<float>>(GuidanceModel<float>::load(sv_ckpt));
      SessionConfig sc;
      sc.phantom_seed = sv_phantom;
      sc.image_size = model->config().backbone.image_size;
      GuidanceServer server(model, sc, sv_addr, sv_port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on " << sv_addr << ":" << server.port() << " (GET /planes, GET /health, ws)\n"
                << std::flush;
      server.run();
      g_server = nullptr;
    } else if (pr->parsed()) {
      const auto model = GuidanceModel<float>::load(pr_ckpt);
      const Scan scan = read_scan(pr_scan);
      if (pr_frame < 0 || pr_frame >= scan.size())
        fail(ErrorCode::data, "frame " + std::to_string(pr_frame) + " outside scan of " + std::to_string(scan.size()));
      const auto sample = segmental_sample(scan, pr_frame, model.config().adapter.L, pr_seed, true);
      const auto out = model.predict(sample);
      if (pr_json) {
        json a = json::array();
        for (int i = 0; i < kNumPlanes; ++i) {
          const auto v = out[i].to_array();
          a.push_back({{"id", i + 1}, {"name", std::string(kPlaneNames[i])}, {"action", std::vector<double>(v.begin(), v.end())}});
        }
        std::cout << a.dump(2) << "\n";
      } else {
        std::printf("%-3s %-8s %9s %9s %9s %9s %9s %9s\n", "id", "plane", "tx mm", "ty mm", "tz mm", "rx deg", "ry deg",
                    "rz deg");
        for (int i = 0; i < kNumPlanes; ++i) {
          const auto v = out[i].to_array();
          std::printf("%-3d %-8s %9.3f %9.3f %9.3f %9.3f %9.3f %9.3f\n", i + 1, std::string(kPlaneNames[i]).c_str(),
                      v[0], v[1], v[2], v[3], v[4], v[5]);
        }
      }
    }
  } catch (const Error &e) {
    std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::filesystem::filesystem_error &e) {
    std::cerr << "error (io): " << e.what() << "\n";
    return kIo;
  }
  return kOk;
}
